#pragma once

#include <span>
#include <vector>

#include "ctflab/detector/detector.hpp"
#include "ctflab/synth/sample.hpp"

namespace ctflab::eval {

using det::Detections;
using synth::Annotation;

// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

struct ApReport {
  std::vector<double> thresholds;
  // ap[class][t]; classes without ground truth hold -1 and are excluded from
  // the mean.
  std::vector<std::vector<double>> ap;
  double map = 0.0;   // mean over present classes and thresholds (AP50:95)
  double ap50 = 0.0;  // mean over present classes at IoU 0.5 (when 0.5 is evaluated)

  bool class_present(int c) const { return ap[static_cast<std::size_t>(c)][0] >= 0.0; }
};

// Greedy matching per class and threshold: detections in descending score
// (ties: lower image index, then lower position in the image's list) claim
// the unmatched same-class ground truth with the highest IoU >= threshold.
// The precision/recall curve is integrated with all-points interpolation.
ApReport compute_map(std::span<const Detections> detections,
                     std::span<const std::vector<Annotation>> ground_truth, int num_classes,
                     std::span<const double> thresholds);

inline ApReport compute_map(std::span<const Detections> detections,
                            std::span<const std::vector<Annotation>> ground_truth,
                            int num_classes) {
  const auto t = coco_thresholds();
  return compute_map(detections, ground_truth, num_classes, t);
}

// AP50:95 of one image over the classes present in its ground truth. Images
// without ground truth score 1 when there are no detections and 0 otherwise.
double per_image_ap(const Detections& detections, const std::vector<Annotation>& ground_truth,
                    int num_classes);

}  // namespace ctflab::eval
