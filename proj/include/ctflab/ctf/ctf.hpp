#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctflab/ssod/mean_teacher.hpp"

namespace ctflab::ctf {

using det::DetectorConfig;
using numerics::ParamSet;
using ssod::PairState;
using ssod::PseudoLabels;
using synth::Sample;

enum class ResetPolicy { reset, keep };  // "reset" | "continue"
enum class Representative { teacher, student };
enum class Phase { stage1, stage2 };

std::string_view policy_name(ResetPolicy p);
ResetPolicy parse_policy(std::string_view s);
std::string_view representative_name(Representative r);
Representative parse_representative(std::string_view s);
std::string_view phase_name(Phase p);

struct CtfConfig {
  std::size_t num_pairs = 2;
  std::size_t stage_length = 100;
  std::size_t max_iter = 2000;
  double beta = 2.0;
  ResetPolicy reset_policy = ResetPolicy::reset;
  Representative representative = Representative::teacher;
  std::vector<std::uint64_t> seeds{1, 5};
  ssod::TrainConfig train;

  void validate() const;
};

// Phase of 1-indexed iteration t: windows of S alternate stage 1, stage 2.
Phase phase_of(std::uint64_t t, std::size_t stage_length);
// True when a winner is decided at the end of iteration t: the last
// iteration of a stage-1 window, or max_iter inside a stage-1 window.
bool is_decision(std::uint64_t t, std::size_t stage_length, std::size_t max_iter);
// Iteration whose unlabeled batch is fed at t (stage 2 replays t - S).
std::uint64_t unlabeled_source_iteration(std::uint64_t t, std::size_t stage_length);

// Per-pair accumulated labeled loss over the current stage-1 window.
class DpcoLedger {
 public:
  explicit DpcoLedger(std::size_t num_pairs = 0, ResetPolicy policy = ResetPolicy::reset);

  // Stage-1 windows are opened by the orchestrator; accumulating outside one
  // is an error.
  void open_window(std::uint64_t start_iteration);
  bool window_open() const { return open_; }
  std::uint64_t window_start() const { return window_start_; }
  // Window bookkeeping as read back from a checkpoint.
  void restore_window(bool open, std::uint64_t start) {
    open_ = open;
    window_start_ = start;
  }

  void accumulate(std::size_t pair, double loss);
  // Adds the labeled loss of `representative` on `batch`, evaluated without
  // recording gradients, and returns it.
  double accumulate(std::size_t pair, const ParamSet& representative, const DetectorConfig& cfg,
                    std::span<const Sample> batch);

  // argmin of the accumulated losses, ties to the lowest index. Closes the
  // window; under the reset policy all totals return to zero.
  std::size_t select_winner();

  const std::vector<double>& totals() const { return totals_; }
  std::vector<double>& totals() { return totals_; }
  ResetPolicy policy() const { return policy_; }
  std::size_t size() const { return totals_.size(); }

  friend bool operator==(const DpcoLedger&, const DpcoLedger&) = default;

 private:
  std::vector<double> totals_;
  ResetPolicy policy_;
  bool open_ = false;
  std::uint64_t window_start_ = 0;
};

// Stage-2 loss of a non-winner student j:
// L_l + lambda_u * L_u(own) + beta * L_DPC(winner).
numerics::Var stage2_student_loss(numerics::Tape& tape,
                                  const std::map<std::string, numerics::Var>& student,
                                  const DetectorConfig& cfg, std::span<const Sample> labeled_batch,
                                  std::span<const ssod::UnlabeledView> strong,
                                  const PseudoLabels& own, const PseudoLabels& winner,
                                  double lambda_u, double beta, std::size_t j, std::size_t k);

// One line of the metrics log (one per iteration and pair).
struct MetricsRecord {
  std::uint64_t iter = 0;
  Phase phase = Phase::stage1;
  int pair_id = 0;
  double L_l = 0.0;
  double L_u = 0.0;
  double L_dpc = 0.0;
  double L_acc = 0.0;
  std::optional<std::size_t> winner_k;
  std::optional<double> inter_pair_distance;
  double intra_pair_distance = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

std::string to_json_line(const MetricsRecord& r);
MetricsRecord parse_metrics_line(const std::string& line);

struct EvalRecord {
  std::uint64_t iter = 0;
  std::vector<double> teacher_map;  // per pair, AP50:95 on the validation split
  std::size_t best_pair = 0;
  double best_map = 0.0;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

std::string to_json_line(const EvalRecord& r);

// Everything needed to continue a run at iteration + 1.
struct CtfState {
  std::vector<PairState> pairs;
  DpcoLedger ledger;
  std::optional<std::size_t> winner;
  std::uint64_t iteration = 0;

  friend bool operator==(const CtfState&, const CtfState&) = default;
};

// Fresh pairs from the configured seeds (not yet burned in).
CtfState initial_state(const CtfConfig& cfg, const DetectorConfig& dcfg);

// Batches shared by all pairs at one iteration, seen after the pairs have
// stepped and the ledger was updated.
struct StepContext {
  std::uint64_t iteration = 0;
  Phase phase = Phase::stage1;
  std::span<const Sample> labeled_batch;
  std::span<const Sample> unlabeled_batch;
  const CtfState* state = nullptr;
};

struct RunHooks {
  std::function<void(const MetricsRecord&)> on_record;
  std::function<void(const EvalRecord&)> on_eval;
  // Called at the end of every iteration with the full state.
  std::function<void(const CtfState&)> on_iteration;
  // Called before the winner decision of the iteration.
  std::function<void(const StepContext&)> on_step;
  std::size_t eval_interval = 0;  // 0 disables periodic evaluation
  std::size_t threads = 1;        // pairs trained concurrently when > 1
  // Copies the representative parameters around every accumulate call and
  // counts any difference.
  bool audit_accumulate = false;
};

struct RunSummary {
  std::size_t accumulate_calls = 0;
  std::size_t accumulate_mismatches = 0;
  std::size_t guided_steps = 0;  // non-winner student updates that used L_DPC
  std::vector<std::pair<std::uint64_t, std::size_t>> decisions;  // (iteration, winner)
};

// Advances `state` to `until` (at most cfg.max_iter) following the two-stage
// schedule. Pairs must already be burned in. Validation data is only used
// for periodic evaluation.
RunSummary run_ctf(CtfState& state, const CtfConfig& cfg, const DetectorConfig& dcfg,
                   std::span<const Sample> labeled, std::span<const Sample> unlabeled,
                   std::span<const Sample> validation, const RunHooks& hooks,
                   std::optional<std::uint64_t> until = std::nullopt);

// AP50:95 of a detector on a sample set.
double validation_map(const ParamSet& params, const DetectorConfig& cfg,
                      std::span<const Sample> validation, double score_threshold = 0.001);

// Teacher with the highest validation AP50:95 (ties to the lower index).
std::size_t best_teacher_for_inference(std::span<const PairState> pairs, const DetectorConfig& cfg,
                                       std::span<const Sample> validation,
                                       std::vector<double>* maps = nullptr);

// l2 distance between teachers of two pairs / teacher and student of a pair.
double inter_pair_distance(std::span<const PairState> pairs, std::size_t i);
double intra_pair_distance(const PairState& pair);

}  // namespace ctflab::ctf
