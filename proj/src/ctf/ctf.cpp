#include "ctflab/ctf/ctf.hpp"

#include <algorithm>
#include <exception>
#include <thread>

#include "json.hpp"

#include "ctflab/error.hpp"
#include "ctflab/eval/metrics.hpp"

namespace ctflab::ctf {

using nlohmann::ordered_json;
using numerics::Tape;
using numerics::Var;

std::string_view policy_name(ResetPolicy p) { return p == ResetPolicy::reset ? "reset" : "continue"; }

ResetPolicy parse_policy(std::string_view s) {
  if (s == "reset") return ResetPolicy::reset;
  if (s == "continue") return ResetPolicy::keep;
  throw ConfigError("reset_policy must be reset or continue, got '" + std::string(s) + "'");
}

std::string_view representative_name(Representative r) {
  return r == Representative::teacher ? "teacher" : "student";
}

Representative parse_representative(std::string_view s) {
  if (s == "teacher") return Representative::teacher;
  if (s == "student") return Representative::student;
  throw ConfigError("representative must be teacher or student, got '" + std::string(s) + "'");
}

std::string_view phase_name(Phase p) { return p == Phase::stage1 ? "stage1" : "stage2"; }

void CtfConfig::validate() const {
  if (num_pairs < 2) throw ConfigError("num_pairs must be at least 2");
  if (stage_length < 1) throw ConfigError("stage_length must be at least 1");
  if (max_iter < 1) throw ConfigError("max_iter must be at least 1");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
  if (seeds.size() != num_pairs) {
    throw ConfigError("expected " + std::to_string(num_pairs) + " seeds, got " +
                      std::to_string(seeds.size()));
  }
  train.validate();
}

Phase phase_of(std::uint64_t t, std::size_t stage_length) {
  if (t == 0) throw DomainError("iterations are 1-indexed");
  return ((t - 1) / stage_length) % 2 == 0 ? Phase::stage1 : Phase::stage2;
}

bool is_decision(std::uint64_t t, std::size_t stage_length, std::size_t max_iter) {
  if (phase_of(t, stage_length) != Phase::stage1) return false;
  return t % stage_length == 0 || t == max_iter;
}

std::uint64_t unlabeled_source_iteration(std::uint64_t t, std::size_t stage_length) {
  return phase_of(t, stage_length) == Phase::stage2 ? t - stage_length : t;
}

DpcoLedger::DpcoLedger(std::size_t num_pairs, ResetPolicy policy)
    : totals_(num_pairs, 0.0), policy_(policy) {}

void DpcoLedger::open_window(std::uint64_t start_iteration) {
  open_ = true;
  window_start_ = start_iteration;
}

void DpcoLedger::accumulate(std::size_t pair, double loss) {
  if (!open_) throw Error("accumulate called outside a stage-1 window");
  if (pair >= totals_.size()) throw Error("accumulate: pair index out of range");
  totals_[pair] += loss;
}

double DpcoLedger::accumulate(std::size_t pair, const ParamSet& representative,
                              const DetectorConfig& cfg, std::span<const Sample> batch) {
  if (!open_) throw Error("accumulate called outside a stage-1 window");
  const double loss = det::supervised_loss_value(representative, cfg, batch);
  accumulate(pair, loss);
  return loss;
}

std::size_t DpcoLedger::select_winner() {
  if (totals_.empty()) throw Error("select_winner on an empty ledger");
  std::size_t k = 0;
  for (std::size_t i = 1; i < totals_.size(); ++i)
    if (totals_[i] < totals_[k]) k = i;
  if (policy_ == ResetPolicy::reset) std::fill(totals_.begin(), totals_.end(), 0.0);
  open_ = false;
  return k;
}

Var stage2_student_loss(Tape& tape, const std::map<std::string, Var>& student,
                        const DetectorConfig& cfg, std::span<const Sample> labeled_batch,
                        std::span<const ssod::UnlabeledView> strong, const PseudoLabels& own,
                        const PseudoLabels& winner, double lambda_u, double beta, std::size_t j,
                        std::size_t k) {
  if (j == k) throw Error("stage2_student_loss is for non-winner students only");
  if (winner.source_pair != static_cast<int>(k)) {
    throw Error("guidance pseudo-labels come from pair " + std::to_string(winner.source_pair) +
                ", not the winner " + std::to_string(k));
  }
  const auto terms = ssod::student_losses(tape, student, cfg, labeled_batch, strong, own, &winner);
  return numerics::add(ssod::total_loss(terms.labeled, terms.unlabeled, lambda_u),
                       numerics::scale(*terms.dpc, beta));
}

namespace {

ordered_json optional_number(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace

std::string to_json_line(const MetricsRecord& r) {
  ordered_json j;
  j["iter"] = r.iter;
  j["phase"] = phase_name(r.phase);
  j["pair_id"] = r.pair_id;
  j["L_l"] = r.L_l;
  j["L_u"] = r.L_u;
  j["L_dpc"] = r.L_dpc;
  j["L_acc"] = r.L_acc;
  j["winner_k"] = r.winner_k ? ordered_json(*r.winner_k) : ordered_json(nullptr);
  j["inter_pair_distance"] = optional_number(r.inter_pair_distance);
  j["intra_pair_distance"] = r.intra_pair_distance;
  return j.dump();
}

MetricsRecord parse_metrics_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.iter = j.at("iter").get<std::uint64_t>();
  const auto phase = j.at("phase").get<std::string>();
  if (phase != "stage1" && phase != "stage2") throw Error("unknown phase '" + phase + "'");
  r.phase = phase == "stage1" ? Phase::stage1 : Phase::stage2;
  r.pair_id = j.at("pair_id").get<int>();
  r.L_l = j.at("L_l").get<double>();
  r.L_u = j.at("L_u").get<double>();
  r.L_dpc = j.at("L_dpc").get<double>();
  r.L_acc = j.at("L_acc").get<double>();
  if (!j.at("winner_k").is_null()) r.winner_k = j.at("winner_k").get<std::size_t>();
  if (!j.at("inter_pair_distance").is_null())
    r.inter_pair_distance = j.at("inter_pair_distance").get<double>();
  r.intra_pair_distance = j.at("intra_pair_distance").get<double>();
  return r;
}

std::string to_json_line(const EvalRecord& r) {
  ordered_json j;
  j["iter"] = r.iter;
  j["teacher_map"] = r.teacher_map;
  j["best_pair"] = r.best_pair;
  j["best_map"] = r.best_map;
  return j.dump();
}

CtfState initial_state(const CtfConfig& cfg, const DetectorConfig& dcfg) {
  cfg.validate();
  CtfState s;
  for (std::size_t i = 0; i < cfg.num_pairs; ++i)
    s.pairs.push_back(ssod::make_pair(static_cast<int>(i), cfg.seeds[i], dcfg));
  s.ledger = DpcoLedger(cfg.num_pairs, cfg.reset_policy);
  return s;
}

double validation_map(const ParamSet& params, const DetectorConfig& cfg,
                      std::span<const Sample> validation, double score_threshold) {
  std::vector<det::Detections> dets;
  std::vector<std::vector<synth::Annotation>> gts;
  dets.reserve(validation.size());
  gts.reserve(validation.size());
  for (const auto& s : validation) {
    dets.push_back(det::detect(params, cfg, s.image(), score_threshold));
    gts.push_back(s.annotations(synth::HarnessAccess{}));
  }
  return eval::compute_map(dets, gts, cfg.num_classes).map;
}

std::size_t best_teacher_for_inference(std::span<const PairState> pairs, const DetectorConfig& cfg,
                                       std::span<const Sample> validation,
                                       std::vector<double>* maps) {
  if (pairs.empty()) throw Error("best_teacher_for_inference: no pairs");
  std::vector<double> m;
  for (const auto& p : pairs) m.push_back(validation_map(p.teacher, cfg, validation));
  std::size_t best = 0;
  for (std::size_t i = 1; i < m.size(); ++i)
    if (m[i] > m[best]) best = i;
  if (maps) *maps = std::move(m);
  return best;
}

double inter_pair_distance(std::span<const PairState> pairs, std::size_t i) {
  if (pairs.size() < 2) throw Error("inter_pair_distance needs at least two pairs");
  double total = 0.0;
  for (std::size_t j = 0; j < pairs.size(); ++j)
    if (j != i) total += numerics::l2_param_distance(pairs[i].teacher, pairs[j].teacher);
  return total / static_cast<double>(pairs.size() - 1);
}

double intra_pair_distance(const PairState& pair) {
  return numerics::l2_param_distance(pair.teacher, pair.student);
}

namespace {

template <typename F>
void for_each_pair(std::size_t n, std::size_t threads, F&& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> workers;
  const std::size_t t = std::min(threads, n);
  for (std::size_t w = 0; w < t; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += t) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : workers) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

RunSummary run_ctf(CtfState& state, const CtfConfig& cfg, const DetectorConfig& dcfg,
                   std::span<const Sample> labeled, std::span<const Sample> unlabeled,
                   std::span<const Sample> validation, const RunHooks& hooks,
                   std::optional<std::uint64_t> until) {
  cfg.validate();
  if (state.pairs.size() != cfg.num_pairs) throw Error("state does not match num_pairs");
  const std::uint64_t end = std::min<std::uint64_t>(until.value_or(cfg.max_iter), cfg.max_iter);
  const std::size_t S = cfg.stage_length;
  const std::size_t N = cfg.num_pairs;
  const auto& tc = cfg.train;
  RunSummary summary;

  for (std::uint64_t t = state.iteration + 1; t <= end; ++t) {
    const Phase phase = phase_of(t, S);
    if (phase == Phase::stage1 && !state.ledger.window_open()) state.ledger.open_window(t);
    if (phase == Phase::stage2 && !state.winner) throw Error("stage 2 reached without a winner");

    const auto lb = ssod::labeled_batch(labeled, tc.labeled_batch, tc.master_seed, t, tc.labeled_aug);
    std::vector<Sample> ub;
    for (std::size_t i : ssod::unlabeled_indices(unlabeled.size(), tc.unlabeled_batch, tc.master_seed,
                                                 unlabeled_source_iteration(t, S)))
      ub.push_back(unlabeled[i]);
    const auto weak = ssod::weak_views(ub, tc.master_seed, t, tc.weak_aug);

    std::optional<PseudoLabels> guidance;
    if (phase == Phase::stage2) {
      const std::size_t k = *state.winner;
      guidance = ssod::generate_pseudo_labels(state.pairs[k].teacher, dcfg, weak, tc.pseudo_threshold,
                                              static_cast<int>(k));
    }

    std::vector<ssod::StepLosses> losses(N);
    for_each_pair(N, hooks.threads, [&](std::size_t i) {
      PairState& pair = state.pairs[i];
      const bool guided = phase == Phase::stage2 && i != *state.winner;
      if (guided && (guidance->source_pair != static_cast<int>(*state.winner) ||
                     guidance->source_pair == static_cast<int>(i)))
        throw Error("guidance pseudo-labels with the wrong provenance");
      losses[i] = ssod::train_step(pair, lb, ub, weak, tc, dcfg, guided ? &*guidance : nullptr,
                                   guided ? cfg.beta : 0.0);
    });
    if (phase == Phase::stage2) summary.guided_steps += N - 1;
    if (phase == Phase::stage1) {
      for (std::size_t i = 0; i < N; ++i) {
        const PairState& pair = state.pairs[i];
        const ParamSet& rep = cfg.representative == Representative::teacher ? pair.teacher : pair.student;
        std::optional<ParamSet> before;
        if (hooks.audit_accumulate) before = rep;
        state.ledger.accumulate(i, rep, dcfg, lb);
        ++summary.accumulate_calls;
        if (before && !(*before == rep)) ++summary.accumulate_mismatches;
      }
    }

    if (hooks.on_step) hooks.on_step(StepContext{t, phase, lb, ub, &state});
    std::vector<double> acc = state.ledger.totals();
    std::optional<std::size_t> decided;
    if (is_decision(t, S, cfg.max_iter)) {
      decided = state.ledger.select_winner();
      state.winner = decided;
      summary.decisions.emplace_back(t, *decided);
    }
    state.iteration = t;

    if (hooks.on_record) {
      for (std::size_t i = 0; i < N; ++i) {
        MetricsRecord r;
        r.iter = t;
        r.phase = phase;
        r.pair_id = static_cast<int>(i);
        r.L_l = losses[i].labeled;
        r.L_u = losses[i].unlabeled;
        r.L_dpc = losses[i].dpc;
        r.L_acc = acc[i];
        r.winner_k = phase == Phase::stage2 ? state.winner : decided;
        r.inter_pair_distance = inter_pair_distance(state.pairs, i);
        r.intra_pair_distance = intra_pair_distance(state.pairs[i]);
        hooks.on_record(r);
      }
    }
    if (hooks.eval_interval > 0 && t % hooks.eval_interval == 0 && hooks.on_eval) {
      EvalRecord e;
      e.iter = t;
      e.best_pair = best_teacher_for_inference(state.pairs, dcfg, validation, &e.teacher_map);
      e.best_map = e.teacher_map[e.best_pair];
      hooks.on_eval(e);
    }
    if (hooks.on_iteration) hooks.on_iteration(state);
  }
  return summary;
}

}  // namespace ctflab::ctf
