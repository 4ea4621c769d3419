#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ctflab/detector/detector.hpp"
#include "ctflab/numerics/params.hpp"
#include "ctflab/synth/augment.hpp"
#include "ctflab/synth/sample.hpp"

namespace ctflab::ssod {

using det::DetectorConfig;
using numerics::OptimConfig;
using numerics::ParamSet;
using synth::Annotation;
using synth::AugmentationSpec;
using synth::Sample;

// Stream identifiers mixed into derive_seed so that every random decision is
// a pure function of (seed, sample or iteration, purpose).
enum Stream : std::uint64_t {
  kShuffleStream = 0x73687566,
  kLabeledAugStream = 0x6c616267,
  kWeakAugStream = 0x7765616b,
  kStrongAugStream = 0x7374726f,
  kBatchStream = 0x62617463,
};

// One teacher-student pair. The student's momentum buffers are the optimizer
// state; the teacher carries none after burn-in.
struct PairState {
  int pair_id = 0;
  std::uint64_t seed = 0;
  ParamSet teacher;
  ParamSet student;
  std::uint64_t iteration = 0;

  friend bool operator==(const PairState&, const PairState&) = default;
};

PairState make_pair(int pair_id, std::uint64_t seed, const DetectorConfig& cfg);

struct BurnInConfig {
  std::size_t iterations = 1000;
  std::size_t batch_size = 4;
  OptimConfig optim;
  AugmentationSpec augmentation = AugmentationSpec::labeled();
  std::uint64_t master_seed = 1;
};

// Trains the teacher on labeled data in an order shuffled by the pair's seed
// (mixed with the master seed; reshuffled every epoch), then copies it into the student. Both end with
// empty momentum buffers.
void burn_in(PairState& pair, std::span<const Sample> labeled, const BurnInConfig& bc,
             const DetectorConfig& cfg);

// W_t <- m * W_t + (1 - m) * W_s.
void ema_update(ParamSet& teacher, const ParamSet& student, double m);
inline void ema_update(PairState& pair, double m) { ema_update(pair.teacher, pair.student, m); }

// Teacher detections kept as training targets. Boxes live in the original
// image frame so they can be mapped into any augmented view.
struct PseudoLabels {
  int source_pair = -1;
  double threshold = 0.0;
  std::vector<det::Detections> per_image;

  std::vector<Annotation> annotations(std::size_t image) const;
  std::size_t total_boxes() const;
};

// An augmented view of an unlabeled image; the hidden ground truth is never
// attached.
struct UnlabeledView {
  numerics::Tensor image;
  synth::GeometricTransform transform;
};

UnlabeledView make_view(const Sample& sample, const AugmentationSpec& spec, std::uint64_t seed);

// Weak views of a batch for iteration `iteration`; shared by every pair.
std::vector<UnlabeledView> weak_views(std::span<const Sample> batch, std::uint64_t master_seed,
                                      std::uint64_t iteration,
                                      const AugmentationSpec& spec = AugmentationSpec::weak());

// Strong views of a batch for one pair at one iteration.
std::vector<UnlabeledView> strong_views(std::span<const Sample> batch, std::uint64_t master_seed,
                                        std::uint64_t pair_seed, std::uint64_t iteration,
                                        const AugmentationSpec& spec = AugmentationSpec::strong());

// Runs the teacher on each weak view, keeps detections scoring at least
// `threshold` and maps their boxes back to the original frame.
PseudoLabels generate_pseudo_labels(const ParamSet& teacher, const DetectorConfig& cfg,
                                    std::span<const UnlabeledView> weak, double threshold,
                                    int source_pair, double nms_iou = 0.5);

// Pseudo-boxes moved into a view's frame (clipped; mostly-outside boxes are
// dropped, as for ground truth).
std::vector<Annotation> map_to_view(const std::vector<Annotation>& original_frame,
                                    const UnlabeledView& view);

// Unlabeled loss: detection loss of the student on the strong views against
// the mapped pseudo-labels, averaged over the batch.
numerics::Var unlabeled_loss(numerics::Tape& tape, const std::map<std::string, numerics::Var>& student,
                             const DetectorConfig& cfg, std::span<const UnlabeledView> strong,
                             const PseudoLabels& pseudo);

// L_l + lambda_u * L_u.
double total_loss(double labeled, double unlabeled, double lambda_u);
numerics::Var total_loss(numerics::Var labeled, numerics::Var unlabeled, double lambda_u);

// Labeled batch for one iteration: indices drawn from the master stream and
// augmented with the labeled pipeline. Identical for every pair.
std::vector<Sample> labeled_batch(std::span<const Sample> labeled, std::size_t batch_size,
                                  std::uint64_t master_seed, std::uint64_t iteration,
                                  const AugmentationSpec& spec = AugmentationSpec::labeled());

// Unlabeled sample indices for one iteration.
std::vector<std::size_t> unlabeled_indices(std::size_t pool, std::size_t batch_size,
                                           std::uint64_t master_seed, std::uint64_t iteration);

// Per-iteration training settings shared by Mean Teacher and CTF.
struct TrainConfig {
  std::size_t labeled_batch = 4;
  std::size_t unlabeled_batch = 4;
  double lambda_u = 2.0;
  double ema = 0.996;
  double pseudo_threshold = 0.7;
  OptimConfig optim;
  std::uint64_t master_seed = 1;
  AugmentationSpec labeled_aug = AugmentationSpec::labeled();
  AugmentationSpec weak_aug = AugmentationSpec::weak();
  AugmentationSpec strong_aug = AugmentationSpec::strong();

  void validate() const;
};

struct StepLosses {
  double labeled = 0.0;
  double unlabeled = 0.0;
  double dpc = 0.0;
};

// Loss terms of one student update. `dpc` is only recorded when guidance
// pseudo-labels are supplied; each strong view is forwarded once and scored
// against both target sets.
struct StudentLossTerms {
  numerics::Var labeled;
  numerics::Var unlabeled;
  std::optional<numerics::Var> dpc;
};

StudentLossTerms student_losses(numerics::Tape& tape, const std::map<std::string, numerics::Var>& student,
                                const DetectorConfig& cfg, std::span<const Sample> labeled_batch,
                                std::span<const UnlabeledView> strong, const PseudoLabels& own,
                                const PseudoLabels* guidance);

// One iteration for a single pair: the pair's teacher labels the weak views,
// the student takes an SGD step on L_l + lambda_u * L_u (+ beta * L_DPC when
// `guidance` is given) over its strong views, then the teacher follows by EMA.
StepLosses train_step(PairState& pair, std::span<const Sample> labeled_batch,
                      std::span<const Sample> unlabeled_batch, std::span<const UnlabeledView> weak,
                      const TrainConfig& mc, const DetectorConfig& cfg,
                      const PseudoLabels* guidance = nullptr, double beta = 0.0);

// Pseudo-labels of a pair's teacher for the weak views.
PseudoLabels teacher_pseudo_labels(const PairState& pair, std::span<const UnlabeledView> weak,
                                   const TrainConfig& mc, const DetectorConfig& cfg);

// Single-pair Mean Teacher training for `iterations` steps, starting at
// pair.iteration + 1. `on_iteration` (if set) runs after each step.
void run_mean_teacher(PairState& pair, std::span<const Sample> labeled,
                      std::span<const Sample> unlabeled, const TrainConfig& mc,
                      const DetectorConfig& cfg, std::size_t iterations,
                      const std::function<void(const PairState&, const StepLosses&)>& on_iteration = {});

}  // namespace ctflab::ssod
