#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"

#include "ctflab/cli/pipeline.hpp"
#include "ctflab/error.hpp"

namespace {

const std::map<std::string, std::string> kDescriptions{
    {"burnin", "Supervised burn-in of every pair; writes burnin.ckpt"},
    {"train", "CTF training from burnin.ckpt or a checkpoint"},
    {"eval", "Validation AP of every teacher in a checkpoint"},
    {"ablate-window", "Train once per stage length"},
    {"ablate-reset", "Train with the reset and keep ledger policies"},
    {"dpc-consistency", "Compare winner estimators against the hidden-label oracle"},
    {"export-plots", "CSV and SVG plots from metrics.jsonl and eval.jsonl"},
};

}  // namespace

int main(int argc, char** argv) {
  using namespace ctflab::cli;
  CLI::App app{"Collaboration of teachers on a synthetic detection task"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  CommandOptions opts;
  std::string resume, checkpoint;
  std::uint64_t until = 0;

  for (const auto& name : command_names()) {
    auto* sub = app.add_subcommand(name, kDescriptions.at(name));
    sub->add_option("-c,--config", config_path, "Config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", overrides, "Override a key, e.g. --set ctf.beta=1");
    sub->add_option("-o,--output", output_dir, "Output directory (run.output_dir)");
    sub->add_flag("--allow-config-mismatch", opts.allow_config_mismatch,
                  "Load checkpoints written under a different config");
    if (name == "train") {
      sub->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
      sub->add_option("--until", until, "Stop after this iteration");
    }
    if (name == "eval") sub->add_option("--checkpoint", checkpoint, "Checkpoint (default final.ckpt)");
    if (name == "ablate-window") sub->add_option("--windows", opts.windows, "Stage lengths to compare");
  }
  CLI11_PARSE(app, argc, argv);

  try {
    if (!config_path.empty()) opts.config = load_config(config_path);
    apply_overrides(opts.config, overrides);
    apply_environment(opts.config);
    if (!output_dir.empty()) opts.config.run.output_dir = output_dir;
    if (!resume.empty()) opts.resume = resume;
    if (!checkpoint.empty()) opts.checkpoint = checkpoint;
    if (until > 0) opts.until = until;
    opts.log = &std::cout;
    run_command(app.get_subcommands().front()->get_name(), opts);
  } catch (const ctflab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
