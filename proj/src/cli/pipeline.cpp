#include "ctflab/cli/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "json.hpp"

#include "ctflab/error.hpp"
#include "ctflab/eval/export.hpp"

namespace ctflab::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

synth::Dataset make_dataset(const ExperimentConfig& cfg) { return synth::generate_dataset(cfg.dataset); }

ctf::CtfState burn_in_pairs(const ExperimentConfig& cfg, const synth::Dataset& data) {
  auto state = ctf::initial_state(cfg.ctf, cfg.detector);
  for (auto& p : state.pairs) ssod::burn_in(p, data.labeled, cfg.burnin, cfg.detector);
  return state;
}

std::vector<double> TrainResult::best_maps() const {
  std::vector<double> out;
  for (const auto& e : evals) out.push_back(e.best_map);
  return out;
}

TrainResult train_ctf(const ExperimentConfig& cfg, const synth::Dataset& data, ctf::CtfState& state,
                      const TrainSinks& sinks) {
  TrainResult result;
  ctf::RunHooks hooks;
  hooks.threads = cfg.run.threads;
  hooks.eval_interval = cfg.eval.interval;
  hooks.audit_accumulate = sinks.audit_accumulate;
  if (sinks.metrics) hooks.on_record = [&](const ctf::MetricsRecord& r) { *sinks.metrics << ctf::to_json_line(r) << '\n'; };
  hooks.on_eval = [&](const ctf::EvalRecord& e) {
    result.evals.push_back(e);
    if (sinks.evals) *sinks.evals << ctf::to_json_line(e) << '\n';
  };
  if (sinks.checkpoint && cfg.run.checkpoint_interval > 0) {
    hooks.on_iteration = [&](const ctf::CtfState& s) {
      if (s.iteration % cfg.run.checkpoint_interval == 0) {
        if (sinks.metrics) sinks.metrics->flush();
        if (sinks.evals) sinks.evals->flush();
        sinks.checkpoint(s);
      }
    };
  }
  result.summary = ctf::run_ctf(state, cfg.ctf, cfg.detector, data.labeled, data.unlabeled, data.validation,
                                hooks, sinks.until);
  return result;
}

std::vector<double> train_mean_teacher(const ExperimentConfig& cfg, const synth::Dataset& data,
                                       ssod::PairState pair) {
  std::vector<double> maps;
  ssod::run_mean_teacher(pair, data.labeled, data.unlabeled, cfg.ctf.train, cfg.detector, cfg.ctf.max_iter,
                         [&](const ssod::PairState& p, const ssod::StepLosses&) {
                           if (cfg.eval.interval > 0 && p.iteration % cfg.eval.interval == 0)
                             maps.push_back(ctf::validation_map(p.teacher, cfg.detector, data.validation,
                                                                cfg.eval.score_threshold));
                         });
  return maps;
}

std::vector<std::string> command_names() {
  return {"burnin", "train", "eval", "ablate-window", "ablate-reset", "dpc-consistency", "export-plots"};
}

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

class Command {
 public:
  Command(std::string name, const CommandOptions& opts)
      : name_(std::move(name)), opts_(opts), cfg_(opts.config), out_(cfg_.run.output_dir),
        log_(opts.log ? *opts.log : std::cerr), start_(std::chrono::steady_clock::now()) {
    fs::create_directories(out_);
    eval::write_text_file(out_ / "config.txt", to_config_text(cfg_));
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const fs::path& out() const { return out_; }
  std::ostream& log() { return log_; }

  fs::path output(const std::string& file) {
    outputs_.push_back(file);
    return out_ / file;
  }
  void write(const std::string& file, const std::string& text) { eval::write_text_file(output(file), text); }
  void note(const std::string& key, ordered_json value) { extra_[key] = std::move(value); }

  Checkpoint load(const fs::path& path) {
    if (!fs::exists(path)) throw Error("missing input " + path.string());
    LoadOptions lo;
    lo.expected_hash = config_hash(cfg_);
    lo.allow_config_mismatch = opts_.allow_config_mismatch;
    lo.warn = [this](const std::string& m) { log_ << m << '\n'; };
    return load_checkpoint(path, lo);
  }
  Checkpoint load_burnin() {
    const auto p = out_ / "burnin.ckpt";
    if (!fs::exists(p)) throw Error("missing " + p.string() + "; run the burnin command first");
    return load(p);
  }
  void save(const std::string& file, const ctf::CtfState& state) {
    save_checkpoint(output(file), Checkpoint{config_hash(cfg_), cfg_.run.seed, state});
  }

  void finish() {
    ordered_json m;
    m["command"] = name_;
    m["config_hash"] = hex(config_hash(cfg_));
    m["output_dir"] = out_.string();
    m["outputs"] = outputs_;
    for (const auto& [k, v] : extra_.items()) m[k] = v;
    m["elapsed_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    eval::write_text_file(out_ / ("manifest_" + name_ + ".json"), m.dump(2) + "\n");
  }

 private:
  std::string name_;
  const CommandOptions& opts_;
  ExperimentConfig cfg_;
  fs::path out_;
  std::ostream& log_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> outputs_;
  ordered_json extra_ = ordered_json::object();
};

// Keeps the JSON lines whose "iter" is at most `iteration`.
void truncate_log(const fs::path& path, std::uint64_t iteration) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("iter").get<std::uint64_t>() <= iteration) kept += line + "\n";
  }
  in.close();
  eval::write_text_file(path, kept);
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing input " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

ordered_json eval_json(const ExperimentConfig& cfg, const synth::Dataset& data, const ctf::CtfState& state,
                       Command& cmd, const std::string& prefix) {
  std::vector<double> maps;
  const auto best = ctf::best_teacher_for_inference(state.pairs, cfg.detector, data.validation, &maps);
  ordered_json r;
  r["iteration"] = state.iteration;
  r["teacher_map"] = maps;
  r["best_pair"] = best;
  r["best_map"] = maps[best];
  if (state.pairs.size() >= 2) {
    const auto gap = eval::per_image_ap_gap(state.pairs[0].teacher, state.pairs[1].teacher, cfg.detector,
                                            data.validation, cfg.eval.gap_band, cfg.eval.score_threshold);
    r["per_image_gap_fraction"] = gap.fraction_outside_band();
    r["per_image_gap_variance"] = gap.variance();
    r["inter_pair_distance"] = ctf::inter_pair_distance(state.pairs, 0);
    cmd.write(prefix + "_gap.csv", eval::to_csv(gap).str());
    cmd.write(prefix + "_gap.svg", eval::svg_gap_chart(gap));
  }
  return r;
}

void cmd_burnin(Command& c) {
  const auto data = make_dataset(c.cfg());
  c.log() << "burn-in: " << c.cfg().ctf.num_pairs << " pairs, " << c.cfg().burnin.iterations << " iterations\n";
  const auto state = burn_in_pairs(c.cfg(), data);
  c.save("burnin.ckpt", state);
  const auto report = eval_json(c.cfg(), data, state, c, "burnin");
  c.write("burnin_report.json", report.dump(2) + "\n");
  c.log() << "burn-in teacher AP50:95 " << report["teacher_map"].dump() << '\n';
}

void cmd_train(Command& c, const CommandOptions& opts) {
  const auto& cfg = c.cfg();
  const auto data = make_dataset(cfg);
  const fs::path metrics_path = c.output("metrics.jsonl"), evals_path = c.output("eval.jsonl");
  ctf::CtfState state;
  std::ios::openmode mode = std::ios::trunc;
  if (opts.resume) {
    state = c.load(*opts.resume).state;
    truncate_log(metrics_path, state.iteration);
    truncate_log(evals_path, state.iteration);
    mode = std::ios::app;
    c.log() << "resuming after iteration " << state.iteration << '\n';
  } else {
    state = c.load_burnin().state;
  }
  std::ofstream metrics(metrics_path, mode), evals(evals_path, mode);
  if (!metrics || !evals) throw Error("cannot open logs in " + c.out().string());
  TrainSinks sinks;
  sinks.metrics = &metrics;
  sinks.evals = &evals;
  sinks.until = opts.until;
  sinks.checkpoint = [&](const ctf::CtfState& s) { c.save("ckpt_" + std::to_string(s.iteration) + ".ckpt", s); };
  const auto result = train_ctf(cfg, data, state, sinks);
  metrics.close();
  evals.close();
  c.save("ckpt_" + std::to_string(state.iteration) + ".ckpt", state);
  if (state.iteration == cfg.ctf.max_iter) c.save("final.ckpt", state);
  ordered_json decisions = ordered_json::array();
  for (const auto& [t, k] : result.summary.decisions) decisions.push_back({{"iter", t}, {"winner", k}});
  c.note("iteration", state.iteration);
  c.note("decisions", decisions);
  if (!result.evals.empty()) c.note("final_best_map", result.evals.back().best_map);
  c.log() << "trained to iteration " << state.iteration << '\n';
}

void cmd_eval(Command& c, const CommandOptions& opts) {
  const auto data = make_dataset(c.cfg());
  const auto path = opts.checkpoint.value_or(c.out() / "final.ckpt");
  const auto state = c.load(path).state;
  auto report = eval_json(c.cfg(), data, state, c, "eval");
  report["checkpoint"] = path.string();
  c.write("eval_report.json", report.dump(2) + "\n");
  c.log() << "teacher AP50:95 " << report["teacher_map"].dump() << ", best pair " << report["best_pair"] << '\n';
}

struct Variant {
  std::string label;
  ExperimentConfig cfg;
};

void run_variants(Command& c, const std::string& stem, const std::string& column, const std::vector<Variant>& variants) {
  const auto data = make_dataset(c.cfg());
  const auto base = c.load_burnin().state;
  eval::CsvTable table{{column, "final_map", "mean_last_n", "decisions"}, {}};
  ordered_json summary = ordered_json::array();
  for (const auto& v : variants) {
    auto state = base;
    std::ofstream evals(c.output(stem + "_" + v.label + "_eval.jsonl"), std::ios::trunc);
    TrainSinks sinks;
    sinks.evals = &evals;
    const auto r = train_ctf(v.cfg, data, state, sinks);
    const auto maps = r.best_maps();
    const double final_map = maps.empty() ? 0.0 : maps.back();
    const double last = eval::mean_of_last(maps, c.cfg().eval.last_n);
    table.add_row({v.label, eval::csv_number(final_map), eval::csv_number(last),
                   std::to_string(r.summary.decisions.size())});
    summary.push_back({{column, v.label}, {"final_map", final_map}, {"mean_last_n", last}});
    c.log() << column << ' ' << v.label << ": final AP50:95 " << final_map << ", mean of last "
            << c.cfg().eval.last_n << ' ' << last << '\n';
  }
  c.write(stem + ".csv", table.str());
  c.note("runs", summary);
}

void cmd_ablate_window(Command& c, const CommandOptions& opts) {
  std::vector<Variant> vs;
  for (std::size_t s : opts.windows) {
    if (s == 0) throw ConfigError("window lengths must be at least 1");
    Variant v{std::to_string(s), c.cfg()};
    v.cfg.ctf.stage_length = s;
    vs.push_back(v);
  }
  run_variants(c, "ablate_window", "stage_length", vs);
}

void cmd_ablate_reset(Command& c) {
  std::vector<Variant> vs;
  for (auto p : {ctf::ResetPolicy::reset, ctf::ResetPolicy::keep}) {
    Variant v{std::string(ctf::policy_name(p)), c.cfg()};
    v.cfg.ctf.reset_policy = p;
    vs.push_back(v);
  }
  run_variants(c, "ablate_reset", "reset_policy", vs);
}

void cmd_dpc_consistency(Command& c) {
  const auto& cfg = c.cfg();
  const auto data = make_dataset(cfg);
  auto state = c.load_burnin().state;
  const auto r = eval::dpc_consistency_experiment(state, cfg.ctf, cfg.detector, data.labeled, data.unlabeled,
                                                  cfg.consistency.windows, cfg.consistency.window_length,
                                                  cfg.consistency.stability_threshold);
  c.write("consistency.csv", eval::to_csv(r).str());
  c.write("consistency_windows.csv", eval::windows_csv(r).str());
  c.write("consistency.svg", eval::svg_consistency_chart(r));
  for (auto e : {eval::Estimator::stable_sample, eval::Estimator::single_sample, eval::Estimator::accumulative}) {
    c.note(std::string(eval::estimator_name(e)), {{"consistent", r.counts(e).consistent},
                                                  {"inconsistent", r.counts(e).inconsistent}});
    c.log() << eval::estimator_name(e) << ": " << r.counts(e).consistent << " consistent of "
            << r.total_windows() << '\n';
  }
}

void cmd_export_plots(Command& c) {
  std::vector<ctf::MetricsRecord> log;
  for (const auto& line : read_lines(c.out() / "metrics.jsonl")) log.push_back(ctf::parse_metrics_line(line));
  const auto trace = eval::weight_distance_trace(log, c.cfg().ctf.stage_length);
  c.write("weight_distance.csv", eval::to_csv(trace).str());
  c.write("weight_distance.svg", eval::svg_trace_chart(trace));

  std::vector<eval::Series> losses;
  for (const auto& r : log) {
    const auto p = static_cast<std::size_t>(r.pair_id);
    if (losses.size() <= p) losses.resize(p + 1);
    losses[p].name = "L_l pair " + std::to_string(p);
    losses[p].x.push_back(static_cast<double>(r.iter));
    losses[p].y.push_back(r.L_l);
  }
  c.write("losses.svg", eval::svg_line_chart("Labeled loss", "iteration", "L_l", losses));

  const auto eval_path = c.out() / "eval.jsonl";
  if (fs::exists(eval_path)) {
    std::vector<eval::Series> maps;
    eval::CsvTable table{{"iter", "best_pair", "best_map"}, {}};
    for (const auto& line : read_lines(eval_path)) {
      const auto j = nlohmann::json::parse(line);
      const auto tm = j.at("teacher_map").get<std::vector<double>>();
      if (maps.size() < tm.size()) maps.resize(tm.size());
      for (std::size_t i = 0; i < tm.size(); ++i) {
        maps[i].name = "teacher " + std::to_string(i);
        maps[i].x.push_back(j.at("iter").get<double>());
        maps[i].y.push_back(tm[i]);
      }
      table.add_row({std::to_string(j.at("iter").get<std::uint64_t>()),
                     std::to_string(j.at("best_pair").get<std::size_t>()),
                     eval::csv_number(j.at("best_map").get<double>())});
    }
    c.write("eval_map.csv", table.str());
    c.write("eval_map.svg", eval::svg_line_chart("Validation AP50:95", "iteration", "AP50:95", maps));
  }
}

}  // namespace

void run_command(const std::string& name, const CommandOptions& opts) {
  opts.config.validate();
  Command c(name, opts);
  if (name == "burnin") cmd_burnin(c);
  else if (name == "train") cmd_train(c, opts);
  else if (name == "eval") cmd_eval(c, opts);
  else if (name == "ablate-window") cmd_ablate_window(c, opts);
  else if (name == "ablate-reset") cmd_ablate_reset(c);
  else if (name == "dpc-consistency") cmd_dpc_consistency(c);
  else if (name == "export-plots") cmd_export_plots(c);
  else throw Error("unknown command '" + name + "'");
  c.finish();
}

}  // namespace ctflab::cli
