#include "ctflab/eval/experiments.hpp"

#include <algorithm>
#include <cmath>

#include "ctflab/error.hpp"
#include "ctflab/random.hpp"
#include "ctflab/ssod/mean_teacher.hpp"

namespace ctflab::eval {

double PerImageGap::fraction_outside_band() const {
  return gaps.empty() ? 0.0 : static_cast<double>(outside_band) / static_cast<double>(gaps.size());
}

double PerImageGap::variance() const {
  if (gaps.empty()) return 0.0;
  double mean = 0.0;
  for (double g : gaps) mean += g;
  mean /= static_cast<double>(gaps.size());
  double v = 0.0;
  for (double g : gaps) v += (g - mean) * (g - mean);
  return v / static_cast<double>(gaps.size());
}

PerImageGap per_image_ap_gap(std::span<const Detections> a, std::span<const Detections> b,
                             std::span<const std::vector<Annotation>> ground_truth, int num_classes,
                             double band) {
  if (a.size() != ground_truth.size() || b.size() != ground_truth.size())
    throw Error("per_image_ap_gap: both detectors must be evaluated on the same images");
  PerImageGap out;
  out.band = band;
  out.map_a = compute_map(a, ground_truth, num_classes).map;
  out.map_b = compute_map(b, ground_truth, num_classes).map;
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    const double g = per_image_ap(a[i], ground_truth[i], num_classes) -
                     per_image_ap(b[i], ground_truth[i], num_classes);
    out.gaps.push_back(g);
    if (std::abs(g) > band) ++out.outside_band;
  }
  return out;
}

PerImageGap per_image_ap_gap(const ParamSet& teacher_a, const ParamSet& teacher_b,
                             const DetectorConfig& cfg, std::span<const Sample> validation, double band,
                             double score_threshold) {
  std::vector<Detections> da, db;
  std::vector<std::vector<Annotation>> gt;
  for (const auto& s : validation) {
    da.push_back(det::detect(teacher_a, cfg, s.image(), score_threshold));
    db.push_back(det::detect(teacher_b, cfg, s.image(), score_threshold));
    gt.push_back(s.annotations(synth::HarnessAccess{}));
  }
  return per_image_ap_gap(da, db, gt, cfg.num_classes, band);
}

WeightDistanceTrace weight_distance_trace(std::span<const ctf::MetricsRecord> log, std::size_t stride) {
  WeightDistanceTrace tr;
  std::size_t pairs = 0;
  for (const auto& r : log) pairs = std::max(pairs, static_cast<std::size_t>(r.pair_id) + 1);
  tr.intra.resize(pairs);
  bool any_inter = false;
  for (const auto& r : log) any_inter = any_inter || r.inter_pair_distance.has_value();
  if (any_inter && pairs > 1) tr.inter.resize(pairs);
  for (const auto& r : log) {
    if (stride > 0 && r.iter % stride != 0) continue;
    if (tr.iterations.empty() || tr.iterations.back() != r.iter) tr.iterations.push_back(r.iter);
    const auto p = static_cast<std::size_t>(r.pair_id);
    tr.intra[p].push_back(r.intra_pair_distance);
    if (!tr.inter.empty()) tr.inter[p].push_back(r.inter_pair_distance.value_or(0.0));
  }
  return tr;
}

std::string_view estimator_name(Estimator e) {
  switch (e) {
    case Estimator::stable_sample: return "stable_sample";
    case Estimator::single_sample: return "single_sample";
    case Estimator::accumulative: return "accumulative";
  }
  return "";
}

std::size_t WindowPicks::pick(Estimator e) const {
  switch (e) {
    case Estimator::stable_sample: return stable_sample;
    case Estimator::single_sample: return single_sample;
    case Estimator::accumulative: return accumulative;
  }
  return oracle;
}

namespace {

std::size_t argmin(const std::vector<double>& v) {
  if (v.empty()) throw Error("no pairs to choose from");
  std::size_t k = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[k]) k = i;
  return k;
}

std::size_t argmax(const std::vector<double>& v) {
  if (v.empty()) throw Error("no pairs to choose from");
  std::size_t k = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[k]) k = i;
  return k;
}

std::vector<Sample> with_hidden_truth(std::span<const Sample> unlabeled) {
  std::vector<Sample> out;
  out.reserve(unlabeled.size());
  for (const auto& s : unlabeled)
    out.emplace_back(s.id(), synth::Role::labeled, s.image(), s.annotations(synth::HarnessAccess{}));
  return out;
}

}  // namespace

WindowPicks pick(const WindowObservation& w) {
  WindowPicks p;
  p.end_iteration = w.end_iteration;
  p.stable_sample = argmax(w.stability);
  p.single_sample = argmin(w.single_sample);
  p.accumulative = argmin(w.accumulative);
  p.oracle = argmin(w.oracle);
  return p;
}

const ConsistencyReport::Counts& ConsistencyReport::counts(Estimator e) const {
  switch (e) {
    case Estimator::stable_sample: return stable_sample;
    case Estimator::single_sample: return single_sample;
    case Estimator::accumulative: return accumulative;
  }
  return accumulative;
}

ConsistencyReport tally(std::span<const WindowPicks> windows) {
  ConsistencyReport r;
  r.windows.assign(windows.begin(), windows.end());
  for (const auto& w : windows) {
    auto count = [&](ConsistencyReport::Counts& c, std::size_t k) {
      (k == w.oracle ? c.consistent : c.inconsistent) += 1;
    };
    count(r.stable_sample, w.stable_sample);
    count(r.single_sample, w.single_sample);
    count(r.accumulative, w.accumulative);
  }
  return r;
}

double view_agreement(const Detections& a, const Detections& b, double iou_threshold) {
  if (a.empty() && b.empty()) return 0.0;
  std::vector<bool> used(b.size(), false);
  std::size_t matched = 0;
  for (const auto& da : a) {
    std::size_t best = b.size();
    double best_iou = iou_threshold;
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (used[j] || b[j].class_id != da.class_id) continue;
      const double v = synth::iou(da.box, b[j].box);
      if (v >= best_iou) {
        best_iou = v;
        best = j;
      }
    }
    if (best < b.size()) {
      used[best] = true;
      ++matched;
    }
  }
  return static_cast<double>(matched) / static_cast<double>(std::max(a.size(), b.size()));
}

double stability_score(const ParamSet& params, const DetectorConfig& cfg, std::span<const Sample> batch,
                       std::uint64_t seed, double score_threshold) {
  if (batch.empty()) return 0.0;
  const auto first = ssod::weak_views(batch, seed, 1);
  const auto second = ssod::weak_views(batch, seed, 2);
  const auto pa = ssod::generate_pseudo_labels(params, cfg, first, score_threshold, -1);
  const auto pb = ssod::generate_pseudo_labels(params, cfg, second, score_threshold, -1);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) total += view_agreement(pa.per_image[i], pb.per_image[i]);
  return total / static_cast<double>(batch.size());
}

double hidden_truth_loss(const ParamSet& params, const DetectorConfig& cfg, std::span<const Sample> unlabeled) {
  return det::supervised_loss_value(params, cfg, with_hidden_truth(unlabeled));
}

WindowObserver::WindowObserver(std::size_t num_pairs, const DetectorConfig& cfg, double score_threshold,
                               std::uint64_t seed)
    : cfg_(cfg), threshold_(score_threshold), seed_(seed), acc_(num_pairs, 0.0), oracle_(num_pairs, 0.0) {}

void WindowObserver::observe(std::span<const ParamSet* const> models, std::span<const Sample> labeled_batch,
                             std::span<const Sample> unlabeled_batch) {
  if (models.size() != acc_.size()) throw Error("WindowObserver: wrong number of models");
  const auto hidden = with_hidden_truth(unlabeled_batch);
  for (std::size_t i = 0; i < models.size(); ++i) {
    acc_[i] += det::supervised_loss_value(*models[i], cfg_, labeled_batch);
    oracle_[i] += det::supervised_loss_value(*models[i], cfg_, hidden);
  }
  last_labeled_.assign(labeled_batch.begin(), labeled_batch.end());
  last_unlabeled_.assign(unlabeled_batch.begin(), unlabeled_batch.end());
  ++count_;
}

WindowObservation WindowObserver::finish(std::span<const ParamSet* const> models, std::uint64_t end_iteration) {
  if (count_ == 0) throw Error("WindowObserver: empty window");
  if (models.size() != acc_.size()) throw Error("WindowObserver: wrong number of models");
  WindowObservation w;
  w.end_iteration = end_iteration;
  w.accumulative = acc_;
  w.oracle = oracle_;
  for (const auto* m : models) {
    w.single_sample.push_back(det::supervised_loss_value(*m, cfg_, last_labeled_));
    w.stability.push_back(
        stability_score(*m, cfg_, last_unlabeled_, derive_seed({seed_, end_iteration}), threshold_));
  }
  std::fill(acc_.begin(), acc_.end(), 0.0);
  std::fill(oracle_.begin(), oracle_.end(), 0.0);
  count_ = 0;
  return w;
}

ConsistencyReport dpc_consistency_experiment(CtfState& state, const CtfConfig& cfg, const DetectorConfig& dcfg,
                                             std::span<const Sample> labeled,
                                             std::span<const Sample> unlabeled, std::size_t windows,
                                             std::size_t window_length, double score_threshold,
                                             std::vector<WindowObservation>* observations) {
  if (window_length == 0) throw ConfigError("window length must be at least 1");
  const std::uint64_t start = state.iteration;
  const std::uint64_t end = start + windows * window_length;
  CtfConfig run_cfg = cfg;
  run_cfg.max_iter = std::max<std::uint64_t>(cfg.max_iter, end);

  WindowObserver observer(cfg.num_pairs, dcfg, score_threshold, cfg.train.master_seed);
  std::vector<WindowPicks> picks;
  auto models = [&](const CtfState& s) {
    std::vector<const ParamSet*> m;
    for (const auto& p : s.pairs)
      m.push_back(cfg.representative == ctf::Representative::teacher ? &p.teacher : &p.student);
    return m;
  };
  ctf::RunHooks hooks;
  hooks.on_step = [&](const ctf::StepContext& c) {
    const auto m = models(*c.state);
    observer.observe(m, c.labeled_batch, c.unlabeled_batch);
    if ((c.iteration - start) % window_length == 0) {
      const auto w = observer.finish(m, c.iteration);
      picks.push_back(pick(w));
      if (observations) observations->push_back(w);
    }
  };
  ctf::run_ctf(state, run_cfg, dcfg, labeled, unlabeled, {}, hooks, end);
  return tally(picks);
}

double mean_of_last(std::span<const double> values, std::size_t count) {
  if (values.empty()) return 0.0;
  const std::size_t n = std::min(count, values.size());
  double s = 0.0;
  for (std::size_t i = values.size() - n; i < values.size(); ++i) s += values[i];
  return s / static_cast<double>(n);
}

}  // namespace ctflab::eval
