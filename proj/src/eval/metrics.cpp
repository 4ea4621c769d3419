#include "ctflab/eval/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "ctflab/error.hpp"

namespace ctflab::eval {

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct Ranked {
  std::size_t image;
  std::size_t index;
  const det::Detection* det;
};

double class_ap(const std::vector<Ranked>& ranked,
                std::span<const std::vector<Annotation>> gt, int cls, std::size_t npos,
                double threshold) {
  std::vector<std::vector<bool>> used(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), false);

  std::vector<double> precision, recall;
  precision.reserve(ranked.size());
  recall.reserve(ranked.size());
  std::size_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    const auto& boxes = gt[r.image];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (boxes[j].class_id != cls || used[r.image][j]) continue;
      const double o = synth::iou(r.det->box, boxes[j].box);
      if (o >= threshold && o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= 0.0) {
      used[r.image][best_j] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
  }
  // Precision envelope from the right, then sum over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace

ApReport compute_map(std::span<const Detections> detections,
                     std::span<const std::vector<Annotation>> ground_truth, int num_classes,
                     std::span<const double> thresholds) {
  if (detections.size() != ground_truth.size()) {
    throw Error("compute_map: detections for " + std::to_string(detections.size()) +
                " images but ground truth for " + std::to_string(ground_truth.size()));
  }
  ApReport report;
  report.thresholds.assign(thresholds.begin(), thresholds.end());
  report.ap.assign(static_cast<std::size_t>(num_classes),
                   std::vector<double>(thresholds.size(), -1.0));
  double total = 0.0, total50 = 0.0;
  std::size_t count = 0, present = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::size_t npos = 0;
    for (const auto& g : ground_truth)
      for (const auto& a : g) npos += a.class_id == c ? 1 : 0;
    if (npos == 0) continue;
    ++present;

    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < detections.size(); ++i)
      for (std::size_t j = 0; j < detections[i].size(); ++j)
        if (detections[i][j].class_id == c) ranked.push_back({i, j, &detections[i][j]});
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (a.det->score != b.det->score) return a.det->score > b.det->score;
      if (a.image != b.image) return a.image < b.image;
      return a.index < b.index;
    });

    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const double ap = class_ap(ranked, ground_truth, c, npos, thresholds[t]);
      report.ap[static_cast<std::size_t>(c)][t] = ap;
      total += ap;
      ++count;
      if (std::abs(thresholds[t] - 0.5) < 1e-12) total50 += ap;
    }
  }
  report.map = count ? total / static_cast<double>(count) : 0.0;
  report.ap50 = present ? total50 / static_cast<double>(present) : 0.0;
  return report;
}

double per_image_ap(const Detections& detections, const std::vector<Annotation>& ground_truth,
                    int num_classes) {
  if (ground_truth.empty()) return detections.empty() ? 1.0 : 0.0;
  const Detections d[1] = {detections};
  const std::vector<Annotation> g[1] = {ground_truth};
  return compute_map(d, g, num_classes).map;
}

}  // namespace ctflab::eval
