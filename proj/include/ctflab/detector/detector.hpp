#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <optional>
#include <span>
#include <vector>

#include "ctflab/numerics/autodiff.hpp"
#include "ctflab/numerics/params.hpp"
#include "ctflab/synth/sample.hpp"

namespace ctflab::det {

using numerics::ParamSet;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;
using synth::Annotation;
using synth::Box;

// Single-stage anchor-free grid detector. A trunk of stride-2 3x3 convs
// reduces the image to a G x G feature map; a 3x3 head predicts, per cell,
// C class logits followed by 4 box deltas (left, top, right, bottom edge
// offsets from the cell centre, in units of the cell size).
struct DetectorConfig {
  std::size_t image_size = 64;
  int num_classes = 3;
  std::vector<std::size_t> channels{8, 16, 32};

  std::size_t stride() const { return std::size_t{1} << channels.size(); }
  std::size_t grid() const { return image_size / stride(); }
  std::size_t outputs_per_cell() const { return static_cast<std::size_t>(num_classes) + 4; }

  void validate() const;
};

// Glorot-uniform weights from `seed`; class-logit biases start at the focal
// prior log(0.01 / 0.99) and box biases at one cell.
ParamSet init_detector(const DetectorConfig& cfg, std::uint64_t seed);

// Raw predictions G x G x (C + 4) for one H x W x 3 image.
Var forward(Tape& tape, const std::map<std::string, Var>& params, const DetectorConfig& cfg,
            const Tensor& image);

// Registers every parameter on the tape.
std::map<std::string, Var> bind(Tape& tape, const ParamSet& params);

// Per-cell targets. cls[cell] is -1 for background.
struct GridTargets {
  std::size_t grid = 0;
  int num_classes = 0;
  std::vector<int> cls;
  std::vector<Box> box;
  std::vector<std::uint8_t> positive;

  std::size_t num_positive() const;
};

// Each box goes to the cell containing its centre. When several boxes share a
// cell the larger area wins, then the lower annotation index.
GridTargets assign_targets(std::span<const Annotation> annotations, const DetectorConfig& cfg);

struct FocalParams {
  std::optional<double> alpha = 0.25;  // nullopt disables alpha weighting
  double gamma = 2.0;
};

// Sigmoid focal loss summed over cells and classes, divided by
// max(1, number of positive cells). Reads the class-logit channels of `raw`.
Var focal_loss(Var raw, const GridTargets& targets, const FocalParams& fp = {});

// Mean GIoU loss over positive cells (0 when there are none). Reads the box
// channels of `raw`.
Var box_regression_loss(Var raw, const GridTargets& targets, const DetectorConfig& cfg);

// focal_loss + box_regression_loss for one image.
Var detection_loss(Var raw, const GridTargets& targets, const DetectorConfig& cfg,
                   const FocalParams& fp = {});

// An image paired with the boxes it is supervised by (ground truth or
// pseudo-labels already mapped into the image's frame).
struct TrainingView {
  const Tensor* image = nullptr;
  std::span<const Annotation> targets;
};

// Mean over views of detection_loss; the per-view normaliser is the batch size.
Var batch_loss(Tape& tape, const std::map<std::string, Var>& params, const DetectorConfig& cfg,
               std::span<const TrainingView> views, const FocalParams& fp = {});

// Labeled loss of a batch of samples. Reading ground truth of an unlabeled
// sample raises FirewallViolation.
Var supervised_loss(Tape& tape, const std::map<std::string, Var>& params,
                    const DetectorConfig& cfg, std::span<const synth::Sample> batch,
                    const FocalParams& fp = {});

// Value of supervised_loss without recording gradients.
double supervised_loss_value(const ParamSet& params, const DetectorConfig& cfg,
                             std::span<const synth::Sample> batch);

inline constexpr double kMinBoxExtent = 1e-3;

// 1 - GIoU for valid boxes; throws DomainError for an invalid target.
double giou_loss_value(const Box& pred, const Box& target);
// Gradient of giou_loss_value with respect to (x1, y1, x2, y2) of pred.
std::array<double, 4> giou_loss_grad(const Box& pred, const Box& target);
// Tape op on a 4-vector (x1, y1, x2, y2).
Var giou_loss(Var pred, const Box& target);

// Box decoded from the four raw deltas of a cell; degenerate boxes are
// widened to kMinBoxExtent around their midpoint.
Box decode_cell_box(const double* deltas, std::size_t gy, std::size_t gx, double cell);

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  std::size_t cell = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};
using Detections = std::vector<Detection>;

// Per cell: score = max class sigmoid. Boxes are clipped to the image, scores
// below `score_threshold` dropped, then greedy per-class NMS by descending
// score (ties: lower cell index first).
Detections decode(const Tensor& raw, const DetectorConfig& cfg, double score_threshold,
                  double nms_iou = 0.5);

// Greedy NMS on an arbitrary candidate list, same ordering rules as decode.
Detections non_max_suppression(Detections candidates, double nms_iou);

// Detections for one image with no gradient recording.
Detections detect(const ParamSet& params, const DetectorConfig& cfg, const Tensor& image,
                  double score_threshold, double nms_iou = 0.5);

}  // namespace ctflab::det
