#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ctflab/cli/checkpoint.hpp"
#include "ctflab/cli/config.hpp"
#include "ctflab/eval/experiments.hpp"

namespace ctflab::cli {

synth::Dataset make_dataset(const ExperimentConfig& cfg);

// Fresh pairs from the configured seeds, each burned in on the labeled split.
ctf::CtfState burn_in_pairs(const ExperimentConfig& cfg, const synth::Dataset& data);

struct TrainSinks {
  std::ostream* metrics = nullptr;  // one JSON line per iteration and pair
  std::ostream* evals = nullptr;    // one JSON line per evaluation
  // Called after iterations that are multiples of run.checkpoint_interval.
  std::function<void(const ctf::CtfState&)> checkpoint;
  std::optional<std::uint64_t> until;
  bool audit_accumulate = false;
};

struct TrainResult {
  std::vector<ctf::EvalRecord> evals;
  ctf::RunSummary summary;

  // best_map of every evaluation, in order.
  std::vector<double> best_maps() const;
};

TrainResult train_ctf(const ExperimentConfig& cfg, const synth::Dataset& data, ctf::CtfState& state,
                      const TrainSinks& sinks = {});

// Single-pair Mean Teacher with the same iteration budget and evaluation
// interval. Returns the teacher's AP50:95 at each evaluation.
std::vector<double> train_mean_teacher(const ExperimentConfig& cfg, const synth::Dataset& data,
                                       ssod::PairState pair);

// Options shared by the subcommands.
struct CommandOptions {
  ExperimentConfig config;
  std::optional<std::filesystem::path> resume;      // train: continue from this checkpoint
  std::optional<std::filesystem::path> checkpoint;  // eval: checkpoint to evaluate
  std::optional<std::uint64_t> until;               // train: stop after this iteration
  bool allow_config_mismatch = false;
  std::vector<std::size_t> windows{25, 100, 400};   // ablate-window
  std::ostream* log = nullptr;
};

std::vector<std::string> command_names();

// Runs one subcommand; outputs go under config.run.output_dir together with
// manifest_<command>.json. Throws on missing inputs or invalid settings.
void run_command(const std::string& name, const CommandOptions& opts);

}  // namespace ctflab::cli
