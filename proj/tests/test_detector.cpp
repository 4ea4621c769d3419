#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ctflab/detector/detector.hpp"
#include "ctflab/error.hpp"
#include "ctflab/eval/metrics.hpp"
#include "ctflab/random.hpp"
#include "ctflab/synth/dataset.hpp"
#include "support/finite_diff.hpp"
#include "support/oracles.hpp"

using namespace ctflab;
using namespace ctflab::det;
using numerics::Shape;
using synth::Role;
using synth::Sample;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

DetectorConfig tiny_config() {
  DetectorConfig c;
  c.image_size = 16;
  c.num_classes = 2;
  c.channels = {2, 3, 4};
  return c;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Written from the textbook definition, one element at a time.
double focal_reference(const Tensor& raw, const std::vector<int>& cls, int num_classes, double alpha,
                       double gamma) {
  const std::size_t cells = cls.size();
  const std::size_t stride = static_cast<std::size_t>(num_classes) + 4;
  double total = 0.0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < cells; ++i) {
    if (cls[i] >= 0) ++npos;
    for (int c = 0; c < num_classes; ++c) {
      const double p = sigmoid_ref(raw[i * stride + static_cast<std::size_t>(c)]);
      const bool pos = cls[i] == c;
      const double pt = pos ? p : 1.0 - p;
      const double at = pos ? alpha : 1.0 - alpha;
      total += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
  }
  return total / static_cast<double>(std::max<std::size_t>(1, npos));
}

double giou_reference(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  const double enc = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                     (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return 1.0 - (inter / uni - (enc - uni) / enc);
}

Box random_box(Rng& rng, double extent = 64.0) {
  const double x1 = rng.uniform(0, extent - 4), y1 = rng.uniform(0, extent - 4);
  return Box{x1, y1, x1 + rng.uniform(1, extent - x1), y1 + rng.uniform(1, extent - y1)};
}

double raw_sum(const ParamSet& p, const DetectorConfig& cfg, const Tensor& img) {
  Tape tape(false);
  return numerics::sum(forward(tape, bind(tape, p), cfg, img)).value().item();
}

double sup_loss(const ParamSet& p, const DetectorConfig& cfg, std::span<const Sample> batch) {
  return supervised_loss_value(p, cfg, batch);
}

// Raw prediction tensor that decodes exactly to the given annotations.
Tensor perfect_raw(const std::vector<Annotation>& ann, const DetectorConfig& cfg, double logit) {
  const auto t = assign_targets(ann, cfg);
  const std::size_t g = cfg.grid(), stride = cfg.outputs_per_cell();
  const double cell = static_cast<double>(cfg.stride());
  Tensor raw(Shape{g, g, stride});
  for (std::size_t i = 0; i < g * g; ++i) {
    for (int c = 0; c < cfg.num_classes; ++c)
      raw[i * stride + static_cast<std::size_t>(c)] = t.cls[i] == c ? logit : -logit;
    if (!t.positive[i]) continue;
    const double cx = (static_cast<double>(i % g) + 0.5) * cell;
    const double cy = (static_cast<double>(i / g) + 0.5) * cell;
    const Box& b = t.box[i];
    double* d = raw.data() + i * stride + cfg.num_classes;
    d[0] = (cx - b.x1) / cell;
    d[1] = (cy - b.y1) / cell;
    d[2] = (b.x2 - cx) / cell;
    d[3] = (b.y2 - cy) / cell;
  }
  return raw;
}

}  // namespace

TEST(Forward, ZeroNetworkGivesHalfScores) {
  const DetectorConfig cfg;
  ParamSet p = init_detector(cfg, 1);
  for (auto& [name, t] : p.entries()) std::fill(t.values().begin(), t.values().end(), 0.0);
  Tape tape(false);
  const Tensor img(Shape{64, 64, 3}, 0.0);
  const Tensor raw = forward(tape, bind(tape, p), cfg, img).value();
  for (double v : raw.values()) EXPECT_EQ(v, 0.0);
  for (double v : raw.values()) EXPECT_EQ(sigmoid_ref(v), 0.5);
}

TEST(Forward, OutputShapeContract) {
  const DetectorConfig cfg;
  const ParamSet p = init_detector(cfg, 3);
  Rng rng(1);
  Tape tape(false);
  const Tensor raw = forward(tape, bind(tape, p), cfg, random_tensor({64, 64, 3}, rng, 0, 1)).value();
  EXPECT_EQ(raw.shape(), (Shape{8, 8, 7}));
  EXPECT_EQ(cfg.grid(), 8u);
}

TEST(Forward, RejectsWrongImageSize) {
  const DetectorConfig cfg;
  const ParamSet p = init_detector(cfg, 3);
  Tape tape(false);
  EXPECT_THROW(forward(tape, bind(tape, p), cfg, Tensor(Shape{32, 32, 3})), ShapeError);
}

TEST(Forward, ConfigValidation) {
  DetectorConfig c;
  c.image_size = 60;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DetectorConfig{};
  c.num_classes = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Forward, InitialisationIsSeededGlorotUniform) {
  const DetectorConfig cfg;
  const ParamSet a = init_detector(cfg, 1), b = init_detector(cfg, 1), c = init_detector(cfg, 5);
  EXPECT_TRUE(a == b);
  EXPECT_GT(numerics::l2_param_distance(a, c), 0.0);
  const auto& w = a.at("trunk.1.w");
  const double limit = std::sqrt(6.0 / (3 * 3 * 8 + 3 * 3 * 16));
  for (double v : w.values()) EXPECT_LE(std::abs(v), limit);
}

TEST(Forward, SummedOutputGradientMatchesFiniteDifferences) {
  const DetectorConfig cfg = tiny_config();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    ParamSet p = init_detector(cfg, seed);
    for (auto& [name, t] : p.entries())
      for (double& v : t.values()) v += rng.uniform(-0.1, 0.1);
    const Tensor img = random_tensor({16, 16, 3}, rng, 0, 1);
    Tape tape;
    const auto g = tape.backward(numerics::sum(forward(tape, bind(tape, p), cfg, img)));
    const auto r = oracle::check_gradients(p, g, [&](const ParamSet& q) { return raw_sum(q, cfg, img); });
    EXPECT_TRUE(r.ok) << r.worst_entry;
  }
}

TEST(Forward, SupervisedLossGradientMatchesFiniteDifferences) {
  const DetectorConfig cfg = tiny_config();
  Rng rng(12);
  ParamSet p = init_detector(cfg, 4);
  std::vector<Sample> batch;
  for (int i = 0; i < 2; ++i) {
    std::vector<Annotation> ann{{{1.5, 2.0, 9.0, 8.5}, 0}, {{8.0, 9.0, 15.0, 15.5}, 1}};
    batch.emplace_back(i, Role::labeled, random_tensor({16, 16, 3}, rng, 0, 1), ann);
  }
  Tape tape;
  const auto g = tape.backward(supervised_loss(tape, bind(tape, p), cfg, batch));
  const auto r = oracle::check_gradients(p, g, [&](const ParamSet& q) { return sup_loss(q, cfg, batch); });
  EXPECT_TRUE(r.ok) << r.worst_entry;
}

TEST(Targets, SingleBoxAssignedToCentreCell) {
  const DetectorConfig cfg;
  // Centre (28, 20): column 3, row 2.
  const std::vector<Annotation> ann{{{24, 16, 32, 24}, 1}};
  const auto t = assign_targets(ann, cfg);
  EXPECT_EQ(t.num_positive(), 1u);
  const std::size_t idx = 2 * 8 + 3;
  EXPECT_TRUE(t.positive[idx]);
  EXPECT_EQ(t.cls[idx], 1);
  EXPECT_EQ(t.box[idx], ann[0].box);
  for (std::size_t i = 0; i < 64; ++i)
    if (i != idx) EXPECT_EQ(t.cls[i], -1);
}

TEST(Targets, EmptyAnnotationsAreAllBackground) {
  const auto t = assign_targets({}, DetectorConfig{});
  EXPECT_EQ(t.num_positive(), 0u);
  for (int c : t.cls) EXPECT_EQ(c, -1);
}

TEST(Targets, LargerBoxWinsSharedCellInEitherOrder) {
  const DetectorConfig cfg;
  const Annotation small{{18, 18, 22, 22}, 0}, large{{12, 12, 28, 28}, 2};
  const std::vector<Annotation> ab{small, large}, ba{large, small};
  const auto t1 = assign_targets(ab, cfg), t2 = assign_targets(ba, cfg);
  EXPECT_EQ(t1.cls, t2.cls);
  EXPECT_EQ(t1.box, t2.box);
  EXPECT_EQ(t1.cls[2 * 8 + 2], 2);
  EXPECT_EQ(t1.num_positive(), 1u);
}

TEST(Targets, EqualAreaTieKeepsLowerIndex) {
  const DetectorConfig cfg;
  const std::vector<Annotation> ann{{{17, 17, 23, 23}, 0}, {{16, 16, 22, 22}, 1}};
  EXPECT_EQ(assign_targets(ann, cfg).cls[2 * 8 + 2], 0);
}

TEST(Focal, ConfidentCorrectPredictionsApproachZero) {
  const DetectorConfig cfg;
  const std::vector<Annotation> ann{{{24, 16, 32, 24}, 1}};
  const auto t = assign_targets(ann, cfg);
  double prev = 1e9;
  for (double logit : {2.0, 5.0, 10.0, 20.0}) {
    Tape tape(false);
    const double v = focal_loss(tape.constant(perfect_raw(ann, cfg, logit)), t).value().item();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(Focal, ReducesToBinaryCrossEntropy) {
  DetectorConfig cfg;
  cfg.image_size = 8;
  cfg.num_classes = 1;
  cfg.channels = {1, 1, 1};
  ASSERT_EQ(cfg.grid(), 1u);
  const std::vector<Annotation> ann{{{1, 1, 7, 7}, 0}};
  const auto t = assign_targets(ann, cfg);
  Tape tape(false);
  const Var raw = tape.constant(Tensor(Shape{1, 1, 5}, 0.0));
  const double v = focal_loss(raw, t, FocalParams{std::nullopt, 0.0}).value().item();
  EXPECT_NEAR(v, -std::log(0.5), 1e-12);
  EXPECT_NEAR(v, 0.6931, 1e-4);
}

TEST(Focal, MatchesElementwiseReference) {
  const DetectorConfig cfg;
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Annotation> ann;
    const int n = static_cast<int>(rng.below(4));
    for (int i = 0; i < n; ++i) ann.push_back({random_box(rng), static_cast<int>(rng.below(3))});
    const auto t = assign_targets(ann, cfg);
    const Tensor raw = random_tensor({8, 8, 7}, rng, -6, 6);
    Tape tape(false);
    const double v = focal_loss(tape.constant(raw), t).value().item();
    EXPECT_NEAR(v, focal_reference(raw, t.cls, 3, 0.25, 2.0), 1e-10 * std::max(1.0, v));
  }
}

TEST(Focal, DecreasesAsPositiveProbabilityRises) {
  const DetectorConfig cfg;
  Rng rng(2);
  const std::vector<Annotation> ann{{{24, 16, 32, 24}, 1}};
  const auto t = assign_targets(ann, cfg);
  Tensor raw = random_tensor({8, 8, 7}, rng, -3, 3);
  const std::size_t k = (2 * 8 + 3) * 7 + 1;
  double prev = 1e9;
  for (double logit = -8.0; logit <= 8.0; logit += 0.5) {
    raw[k] = logit;
    Tape tape(false);
    const double v = focal_loss(tape.constant(raw), t).value().item();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Focal, AnalyticGradientMatchesFiniteDifferences) {
  const DetectorConfig cfg;
  Rng rng(21);
  const std::vector<Annotation> ann{{{24, 16, 32, 24}, 1}, {{2, 40, 20, 60}, 0}};
  const auto t = assign_targets(ann, cfg);
  ParamSet p;
  p.set("raw", random_tensor({8, 8, 7}, rng, -4, 4));
  Tape tape;
  const Var raw = tape.parameter("raw", p.at("raw"));
  const auto g = tape.backward(focal_loss(raw, t));
  const auto r = oracle::check_gradients(p, g, [&](const ParamSet& q) {
    Tape tp(false);
    return focal_loss(tp.constant(q.at("raw")), t).value().item();
  });
  EXPECT_TRUE(r.ok) << r.worst_entry;
}

TEST(Giou, IdentityIsZero) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const Box b = random_box(rng);
    EXPECT_NEAR(giou_loss_value(b, b), 0.0, 1e-12);
  }
}

TEST(Giou, DisjointUnitBoxes) {
  const Box a{0, 0, 1, 1}, b{1, 1, 2, 2};
  EXPECT_DOUBLE_EQ(giou_reference(a, b), 1.5);
  EXPECT_DOUBLE_EQ(giou_loss_value(a, b), 1.5);
}

TEST(Giou, MatchesReferenceAndStaysInRange) {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    const double v = giou_loss_value(a, b);
    EXPECT_NEAR(v, giou_reference(a, b), 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 2.0);
  }
  // Far-apart boxes approach the upper bound.
  EXPECT_GT(giou_loss_value(Box{0, 0, 1, 1}, Box{1e6, 1e6, 1e6 + 1, 1e6 + 1}), 1.999);
}

TEST(Giou, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Box p = random_box(rng), t = random_box(rng);
    const auto g = giou_loss_grad(p, t);
    const double h = 1e-6;
    for (int k = 0; k < 4; ++k) {
      Box up = p, down = p;
      (&up.x1)[k] += h;
      (&down.x1)[k] -= h;
      const double num = (giou_reference(up, t) - giou_reference(down, t)) / (2 * h);
      EXPECT_NEAR(g[static_cast<std::size_t>(k)], num, 1e-6 + 1e-4 * std::abs(num)) << i << " " << k;
    }
  }
}

TEST(Giou, InvalidTargetIsAnError) {
  EXPECT_THROW(giou_loss_value(Box{0, 0, 1, 1}, Box{2, 2, 1, 3}), DomainError);
}

TEST(Giou, TapeOpDifferentiatesPredictedCoordinates) {
  ParamSet p;
  p.set("b", Tensor(Shape{4}, std::vector<double>{1, 2, 6, 7}));
  const Box target{2, 1, 8, 5};
  Tape tape;
  const auto g = tape.backward(giou_loss(tape.parameter("b", p.at("b")), target));
  const auto r = oracle::check_gradients(p, g, [&](const ParamSet& q) {
    const auto& v = q.at("b");
    return giou_reference(Box{v[0], v[1], v[2], v[3]}, target);
  });
  EXPECT_TRUE(r.ok) << r.worst_entry;
}

TEST(Supervised, PerfectFitLimit) {
  const DetectorConfig cfg;
  const std::vector<Annotation> ann{{{24, 16, 32, 24}, 1}, {{2, 40, 20, 60}, 0}};
  const auto t = assign_targets(ann, cfg);
  Tape tape(false);
  const Var raw = tape.constant(perfect_raw(ann, cfg, 30.0));
  EXPECT_NEAR(box_regression_loss(raw, t, cfg).value().item(), 0.0, 1e-12);
  EXPECT_LT(focal_loss(raw, t).value().item(), 1e-12);
}

TEST(Supervised, DuplicatedSampleEqualsSingle) {
  const DetectorConfig cfg;
  synth::DatasetConfig dc;
  dc.n_labeled = 3;
  dc.n_unlabeled = 1;
  dc.n_validation = 1;
  const auto d = synth::generate_dataset(dc);
  const ParamSet p = init_detector(cfg, 1);
  const std::vector<Sample> one{d.labeled[0]}, two{d.labeled[0], d.labeled[0]};
  EXPECT_NEAR(sup_loss(p, cfg, one), sup_loss(p, cfg, two), 1e-12);
}

TEST(Supervised, EqualsMeanOfPerSampleLosses) {
  const DetectorConfig cfg;
  synth::DatasetConfig dc;
  dc.n_labeled = 5;
  dc.n_unlabeled = 1;
  dc.n_validation = 1;
  const auto d = synth::generate_dataset(dc);
  const ParamSet p = init_detector(cfg, 2);
  double manual = 0.0;
  for (const auto& s : d.labeled) {
    Tape tape(false);
    const Var raw = forward(tape, bind(tape, p), cfg, s.image());
    const auto t = assign_targets(s.annotations(), cfg);
    manual += focal_reference(raw.value(), t.cls, 3, 0.25, 2.0);
    double reg = 0.0;
    for (std::size_t i = 0; i < t.positive.size(); ++i) {
      if (!t.positive[i]) continue;
      const Box pb = decode_cell_box(raw.value().data() + i * 7 + 3, i / 8, i % 8, 8.0);
      reg += giou_reference(pb, t.box[i]);
    }
    manual += reg / static_cast<double>(std::max<std::size_t>(1, t.num_positive()));
  }
  manual /= 5.0;
  EXPECT_NEAR(sup_loss(p, cfg, d.labeled), manual, 1e-10);
}

TEST(Supervised, UnlabeledSampleIsAFirewallViolation) {
  const DetectorConfig cfg;
  synth::AccessGuard::clear();
  const std::vector<Sample> batch{Sample(0, Role::unlabeled, Tensor(Shape{64, 64, 3}, 0.5), {})};
  EXPECT_THROW(sup_loss(init_detector(cfg, 1), cfg, batch), FirewallViolation);
  EXPECT_EQ(synth::AccessGuard::violations(), 1u);
  synth::AccessGuard::clear();
}

TEST(Decode, LargeNegativeLogitsGiveNothing) {
  const DetectorConfig cfg;
  Tensor raw(Shape{8, 8, 7}, 1.0);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t c = 0; c < 3; ++c) raw[i * 7 + c] = -800.0;
  EXPECT_TRUE(decode(raw, cfg, 1e-300).empty());
  EXPECT_TRUE(decode(raw, cfg, 0.001).empty());
}

TEST(Decode, DuplicateBoxKeepsHigherScore) {
  const Box b{10, 10, 30, 30};
  const Detections c{{b, 1, 0.8, 5}, {b, 1, 0.9, 9}};
  const auto kept = non_max_suppression(c, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);
}

TEST(Decode, DifferentClassesAreNotSuppressed) {
  const Box b{10, 10, 30, 30};
  EXPECT_EQ(non_max_suppression({{b, 1, 0.8, 5}, {b, 2, 0.9, 9}}, 0.5).size(), 2u);
}

TEST(Decode, MatchesBruteForceNmsAndIgnoresInputOrder) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    Detections c;
    const std::size_t n = 2 + rng.below(25);
    for (std::size_t i = 0; i < n; ++i) {
      Box b = random_box(rng, 32.0);
      if (i > 0 && rng.bernoulli(0.3)) {
        b = c[rng.below(c.size())].box;
        b.x1 += rng.uniform(-2, 2);
        b.x2 = std::max(b.x1 + 1, b.x2 + rng.uniform(-2, 2));
      }
      const double score = rng.bernoulli(0.2) ? 0.5 : std::round(rng.uniform() * 20) / 20;
      c.push_back({b, static_cast<int>(rng.below(2)), score, i});
    }
    std::vector<std::size_t> got;
    for (const auto& d : non_max_suppression(c, 0.5)) got.push_back(d.cell);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, oracle::brute_force_nms(c, 0.5)) << "trial " << trial;

    Detections shuffled = c;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    EXPECT_EQ(non_max_suppression(shuffled, 0.5), non_max_suppression(c, 0.5));
  }
}

TEST(Decode, RetainedDetectionsRespectThresholdAndNms) {
  const DetectorConfig cfg;
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor raw = random_tensor({8, 8, 7}, rng, -3, 3);
    const auto dets = decode(raw, cfg, 0.3);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      EXPECT_GE(dets[i].score, 0.3);
      EXPECT_GE(dets[i].box.x1, 0.0);
      EXPECT_LE(dets[i].box.x2, 64.0);
      for (std::size_t j = i + 1; j < dets.size(); ++j)
        if (dets[i].class_id == dets[j].class_id) EXPECT_LE(synth::iou(dets[i].box, dets[j].box), 0.5);
    }
  }
}

TEST(Decode, PerfectRawDecodesToGroundTruth) {
  const DetectorConfig cfg;
  const std::vector<Annotation> ann{{{24, 16, 32, 24}, 1}, {{2, 40, 20, 60}, 0}};
  const auto dets = decode(perfect_raw(ann, cfg, 8.0), cfg, 0.5);
  ASSERT_EQ(dets.size(), 2u);
  for (const auto& d : dets) {
    const auto& a = d.class_id == 1 ? ann[0] : ann[1];
    EXPECT_NEAR(synth::iou(d.box, a.box), 1.0, 1e-12);
  }
}

TEST(Decode, DetectIsDeterministic) {
  const DetectorConfig cfg;
  const ParamSet p = init_detector(cfg, 9);
  Rng rng(9);
  const Tensor img = random_tensor({64, 64, 3}, rng, 0, 1);
  EXPECT_EQ(detect(p, cfg, img, 0.001), detect(p, cfg, img, 0.001));
}

TEST(EndToEnd, OverfitsEightSamples) {
  const DetectorConfig cfg;
  synth::DatasetConfig dc;
  dc.n_labeled = 8;
  dc.n_unlabeled = 1;
  dc.n_validation = 1;
  dc.seed = 3;
  const auto d = synth::generate_dataset(dc);
  ParamSet p = init_detector(cfg, 1);
  const numerics::OptimConfig oc{0.02, 0.9, 1e-4};
  std::vector<std::vector<Annotation>> gts;
  for (const auto& s : d.labeled) gts.push_back(s.annotations());
  double ap50 = 0.0;
  for (int it = 1; it <= 2000 && ap50 < 1.0; ++it) {
    Tape tape;
    const auto g = tape.backward(supervised_loss(tape, bind(tape, p), cfg, d.labeled));
    numerics::sgd_step(p, g, oc);
    if (it % 100 == 0) {
      std::vector<Detections> dets;
      for (const auto& s : d.labeled) dets.push_back(detect(p, cfg, s.image(), 0.001));
      ap50 = eval::compute_map(dets, gts, 3).ap50;
    }
  }
  EXPECT_EQ(ap50, 1.0);
}
