#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctflab/ctf/ctf.hpp"
#include "ctflab/eval/metrics.hpp"

namespace ctflab::eval {

using ctf::CtfConfig;
using ctf::CtfState;
using det::DetectorConfig;
using numerics::ParamSet;
using synth::Sample;

// Per-image AP(A) - AP(B) on the same images.
struct PerImageGap {
  std::vector<double> gaps;
  double map_a = 0.0;
  double map_b = 0.0;
  double band = 0.0;
  std::size_t outside_band = 0;  // images with |gap| > band

  double fraction_outside_band() const;
  double variance() const;
};

PerImageGap per_image_ap_gap(std::span<const Detections> a, std::span<const Detections> b,
                             std::span<const std::vector<Annotation>> ground_truth, int num_classes,
                             double band = 0.0);
PerImageGap per_image_ap_gap(const ParamSet& teacher_a, const ParamSet& teacher_b,
                             const DetectorConfig& cfg, std::span<const Sample> validation,
                             double band = 0.0, double score_threshold = 0.001);

// Distances taken from the metrics log at the selected iterations.
struct WeightDistanceTrace {
  std::vector<std::uint64_t> iterations;
  std::vector<std::vector<double>> inter;  // [pair][point]; empty for a single pair
  std::vector<std::vector<double>> intra;  // [pair][point]
};

// Keeps the records at multiples of `stride` (every record when 0).
WeightDistanceTrace weight_distance_trace(std::span<const ctf::MetricsRecord> log, std::size_t stride = 0);

enum class Estimator { stable_sample, single_sample, accumulative };
std::string_view estimator_name(Estimator e);

// Scores of every pair over one window. Losses are minimised, stability is
// maximised.
struct WindowObservation {
  std::uint64_t end_iteration = 0;
  std::vector<double> accumulative;   // summed labeled losses over the window
  std::vector<double> single_sample;  // labeled loss on the window's last batch
  std::vector<double> stability;      // two-view agreement on the last unlabeled batch
  std::vector<double> oracle;         // summed loss on unlabeled batches with hidden ground truth
};

struct WindowPicks {
  std::uint64_t end_iteration = 0;
  std::size_t stable_sample = 0;
  std::size_t single_sample = 0;
  std::size_t accumulative = 0;
  std::size_t oracle = 0;

  std::size_t pick(Estimator e) const;
};

// argmin / argmax with ties to the lowest index.
WindowPicks pick(const WindowObservation& w);

struct ConsistencyReport {
  struct Counts {
    std::size_t consistent = 0;
    std::size_t inconsistent = 0;
  };
  Counts stable_sample, single_sample, accumulative;
  std::vector<WindowPicks> windows;

  const Counts& counts(Estimator e) const;
  std::size_t total_windows() const { return windows.size(); }
};

ConsistencyReport tally(std::span<const WindowPicks> windows);

// Fraction of matched detections between two views of an image: greedy
// same-class matching at IoU >= 0.5 in the original frame, divided by the
// larger detection count. Two empty views count as 0: a model that detects
// nothing shows no stability.
double view_agreement(const Detections& a, const Detections& b, double iou_threshold = 0.5);

// Mean agreement of a detector over the images of a batch, each seen through
// two weak views drawn with `seed`.
double stability_score(const ParamSet& params, const DetectorConfig& cfg, std::span<const Sample> batch,
                       std::uint64_t seed, double score_threshold);

// Collects one window of per-iteration observations for a set of detectors.
class WindowObserver {
 public:
  WindowObserver(std::size_t num_pairs, const DetectorConfig& cfg, double score_threshold,
                 std::uint64_t seed);

  // Adds the iteration's labeled loss and hidden-ground-truth unlabeled loss
  // of every model.
  void observe(std::span<const ParamSet* const> models, std::span<const Sample> labeled_batch,
               std::span<const Sample> unlabeled_batch);
  // Closes the window using the last observed batches.
  WindowObservation finish(std::span<const ParamSet* const> models, std::uint64_t end_iteration);
  std::size_t observed() const { return count_; }

 private:
  DetectorConfig cfg_;
  double threshold_;
  std::uint64_t seed_;
  std::size_t count_ = 0;
  std::vector<double> acc_, oracle_;
  std::vector<Sample> last_labeled_, last_unlabeled_;
};

// Labeled-form loss of a detector on unlabeled samples scored against their
// hidden ground truth.
double hidden_truth_loss(const ParamSet& params, const DetectorConfig& cfg, std::span<const Sample> unlabeled);

// Continues a CTF run for windows * window_length iterations and judges every
// window with all estimators. The representative of each pair follows
// cfg.representative.
ConsistencyReport dpc_consistency_experiment(CtfState& state, const CtfConfig& cfg, const DetectorConfig& dcfg,
                                             std::span<const Sample> labeled,
                                             std::span<const Sample> unlabeled, std::size_t windows,
                                             std::size_t window_length, double score_threshold = 0.5,
                                             std::vector<WindowObservation>* observations = nullptr);

// Mean of the last `count` values (all of them when fewer).
double mean_of_last(std::span<const double> values, std::size_t count);

}  // namespace ctflab::eval
