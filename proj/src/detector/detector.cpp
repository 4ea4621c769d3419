#include "ctflab/detector/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctflab/error.hpp"
#include "ctflab/random.hpp"

namespace ctflab::det {

using numerics::Shape;

namespace {

constexpr double kPriorProb = 0.01;

std::string layer_name(std::size_t i) { return "trunk." + std::to_string(i); }

// log(sigmoid(x)) and log(1 - sigmoid(x)) without cancellation.
double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double log_one_minus_sigmoid(double x) { return log_sigmoid(-x); }
double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void check_raw(const Tensor& raw, const GridTargets& t) {
  const std::size_t c = static_cast<std::size_t>(t.num_classes) + 4;
  if (raw.rank() != 3 || raw.extent(0) != t.grid || raw.extent(1) != t.grid || raw.extent(2) != c) {
    throw ShapeError("raw predictions " + numerics::shape_string(raw.shape()) +
                     " do not match targets for a " + std::to_string(t.grid) + "x" +
                     std::to_string(t.grid) + " grid with " + std::to_string(t.num_classes) +
                     " classes");
  }
}

}  // namespace

void DetectorConfig::validate() const {
  if (channels.empty()) throw ConfigError("detector.channels must not be empty");
  if (num_classes < 1) throw ConfigError("detector.num_classes must be >= 1");
  if (image_size % stride() != 0 || grid() == 0) {
    throw ConfigError("detector.image_size must be divisible by 2^(number of trunk convs)");
  }
  for (auto c : channels) {
    if (c == 0) throw ConfigError("detector.channels must be positive");
  }
}

ParamSet init_detector(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed({seed, 0x696e6974}));  // "init"
  ParamSet params;
  auto glorot = [&rng](Shape shape) {
    const double fan_in = static_cast<double>(shape[0] * shape[1] * shape[2]);
    const double fan_out = static_cast<double>(shape[0] * shape[1] * shape[3]);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-limit, limit);
    return t;
  };
  std::size_t cin = 3;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    params.set(layer_name(i) + ".w", glorot(Shape{3, 3, cin, cfg.channels[i]}));
    params.set(layer_name(i) + ".b", Tensor(Shape{cfg.channels[i]}, 0.0));
    cin = cfg.channels[i];
  }
  params.set("head.w", glorot(Shape{3, 3, cin, cfg.outputs_per_cell()}));
  Tensor head_b(Shape{cfg.outputs_per_cell()}, 1.0);
  for (int c = 0; c < cfg.num_classes; ++c) {
    head_b[static_cast<std::size_t>(c)] = std::log(kPriorProb / (1.0 - kPriorProb));
  }
  params.set("head.b", std::move(head_b));
  return params;
}

std::map<std::string, Var> bind(Tape& tape, const ParamSet& params) {
  std::map<std::string, Var> bound;
  for (const auto& [name, t] : params.entries()) bound.emplace(name, tape.parameter(name, t));
  return bound;
}

Var forward(Tape& tape, const std::map<std::string, Var>& params, const DetectorConfig& cfg,
            const Tensor& image) {
  if (image.rank() != 3 || image.extent(0) != cfg.image_size || image.extent(1) != cfg.image_size ||
      image.extent(2) != 3) {
    throw ShapeError("detector expects a " + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size) + "x3 image, got " +
                     numerics::shape_string(image.shape()));
  }
  Var x = tape.constant(image);
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string name = layer_name(i);
    x = numerics::relu(
        numerics::add_bias(numerics::conv2d(x, params.at(name + ".w"), 2, 1), params.at(name + ".b")));
  }
  return numerics::add_bias(numerics::conv2d(x, params.at("head.w"), 1, 1), params.at("head.b"));
}

std::size_t GridTargets::num_positive() const {
  return static_cast<std::size_t>(std::count(positive.begin(), positive.end(), 1));
}

GridTargets assign_targets(std::span<const Annotation> annotations, const DetectorConfig& cfg) {
  const std::size_t g = cfg.grid();
  const double cell = static_cast<double>(cfg.stride());
  GridTargets t;
  t.grid = g;
  t.num_classes = cfg.num_classes;
  t.cls.assign(g * g, -1);
  t.box.assign(g * g, Box{});
  t.positive.assign(g * g, 0);
  std::vector<double> owner_area(g * g, -1.0);
  for (const auto& a : annotations) {
    if (a.class_id < 0 || a.class_id >= cfg.num_classes) {
      throw Error("annotation class " + std::to_string(a.class_id) + " out of range");
    }
    const auto gx = static_cast<std::size_t>(
        std::clamp(std::floor(a.box.center_x() / cell), 0.0, static_cast<double>(g - 1)));
    const auto gy = static_cast<std::size_t>(
        std::clamp(std::floor(a.box.center_y() / cell), 0.0, static_cast<double>(g - 1)));
    const std::size_t idx = gy * g + gx;
    // Strictly larger area replaces; equal area keeps the earlier annotation.
    if (a.box.area() > owner_area[idx]) {
      owner_area[idx] = a.box.area();
      t.cls[idx] = a.class_id;
      t.box[idx] = a.box;
      t.positive[idx] = 1;
    }
  }
  return t;
}

Var focal_loss(Var raw, const GridTargets& targets, const FocalParams& fp) {
  const Tensor* r = &raw.value();
  check_raw(*r, targets);
  const std::size_t cells = targets.grid * targets.grid;
  const std::size_t stride = static_cast<std::size_t>(targets.num_classes) + 4;
  const double norm = static_cast<double>(std::max<std::size_t>(1, targets.num_positive()));
  const double gamma = fp.gamma;
  const double alpha = fp.alpha.value_or(0.5);
  const bool weighted = fp.alpha.has_value();

  auto term = [=](double x, bool pos) {
    const double a = weighted ? (pos ? alpha : 1.0 - alpha) : 1.0;
    const double p = sigmoid(x);
    const double pt = pos ? p : 1.0 - p;
    const double log_pt = pos ? log_sigmoid(x) : log_one_minus_sigmoid(x);
    return -a * std::pow(1.0 - pt, gamma) * log_pt;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    for (int c = 0; c < targets.num_classes; ++c) {
      total += term((*r)[i * stride + static_cast<std::size_t>(c)], targets.cls[i] == c);
    }
  }
  return raw.tape()->record(
      Tensor::scalar(total / norm), {raw},
      [r, targets, cells, stride, norm, gamma, alpha, weighted](const Tensor& g,
                                                                 std::span<Tensor* const> pg) {
        const double scale = g[0] / norm;
        for (std::size_t i = 0; i < cells; ++i) {
          for (int c = 0; c < targets.num_classes; ++c) {
            const std::size_t k = i * stride + static_cast<std::size_t>(c);
            const double x = (*r)[k];
            const double p = sigmoid(x);
            double d = 0.0;
            if (targets.cls[i] == c) {
              const double a = weighted ? alpha : 1.0;
              const double q = 1.0 - p;
              d = a * std::pow(q, gamma) * (gamma * p * log_sigmoid(x) - q);
            } else {
              const double a = weighted ? 1.0 - alpha : 1.0;
              d = a * std::pow(p, gamma) * (p - gamma * (1.0 - p) * log_one_minus_sigmoid(x));
            }
            (*pg[0])[k] += scale * d;
          }
        }
      },
      "focal_loss");
}

double giou_loss_value(const Box& pred, const Box& target) {
  if (!target.valid()) throw DomainError("giou_loss: invalid target box");
  if (!pred.valid()) throw DomainError("giou_loss: invalid predicted box");
  const double inter = synth::intersection_area(pred, target);
  const double uni = pred.area() + target.area() - inter;
  const double enc = (std::max(pred.x2, target.x2) - std::min(pred.x1, target.x1)) *
                     (std::max(pred.y2, target.y2) - std::min(pred.y1, target.y1));
  return 2.0 - inter / uni - uni / enc;
}

std::array<double, 4> giou_loss_grad(const Box& p, const Box& t) {
  const double iw = std::min(p.x2, t.x2) - std::max(p.x1, t.x1);
  const double ih = std::min(p.y2, t.y2) - std::max(p.y1, t.y1);
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;
  const double pw = p.width(), ph = p.height();
  const double uni = pw * ph + t.area() - inter;
  const double cw = std::max(p.x2, t.x2) - std::min(p.x1, t.x1);
  const double ch = std::max(p.y2, t.y2) - std::min(p.y1, t.y1);
  const double enc = cw * ch;

  // loss = 2 - I/U - U/C with U = Ap + At - I.
  const double dl_di = -(uni + inter) / (uni * uni) + 1.0 / enc;
  const double dl_dap = inter / (uni * uni) - 1.0 / enc;
  const double dl_dc = uni / (enc * enc);

  std::array<double, 4> di{0.0, 0.0, 0.0, 0.0};
  if (overlap) {
    di[0] = p.x1 > t.x1 ? -ih : 0.0;
    di[2] = p.x2 < t.x2 ? ih : 0.0;
    di[1] = p.y1 > t.y1 ? -iw : 0.0;
    di[3] = p.y2 < t.y2 ? iw : 0.0;
  }
  const std::array<double, 4> dap{-ph, -pw, ph, pw};
  const std::array<double, 4> dc{p.x1 < t.x1 ? -ch : 0.0, p.y1 < t.y1 ? -cw : 0.0,
                                 p.x2 > t.x2 ? ch : 0.0, p.y2 > t.y2 ? cw : 0.0};
  std::array<double, 4> out{};
  for (int k = 0; k < 4; ++k) out[k] = dl_di * di[k] + dl_dap * dap[k] + dl_dc * dc[k];
  return out;
}

Var giou_loss(Var pred, const Box& target) {
  const Tensor* v = &pred.value();
  if (v->size() != 4) throw ShapeError("giou_loss expects a 4-vector box");
  const Box p{(*v)[0], (*v)[1], (*v)[2], (*v)[3]};
  return pred.tape()->record(
      Tensor::scalar(giou_loss_value(p, target)), {pred},
      [p, target](const Tensor& g, std::span<Tensor* const> pg) {
        const auto d = giou_loss_grad(p, target);
        for (std::size_t k = 0; k < 4; ++k) (*pg[0])[k] += g[0] * d[k];
      },
      "giou_loss");
}

namespace {

struct DecodedBox {
  Box box;
  bool clamped_x = false;
  bool clamped_y = false;
};

DecodedBox decode_with_flags(const double* d, std::size_t gy, std::size_t gx, double cell) {
  const double cx = (static_cast<double>(gx) + 0.5) * cell;
  const double cy = (static_cast<double>(gy) + 0.5) * cell;
  DecodedBox out;
  Box& b = out.box;
  b = Box{cx - cell * d[0], cy - cell * d[1], cx + cell * d[2], cy + cell * d[3]};
  if (b.x2 - b.x1 < kMinBoxExtent) {
    const double m = 0.5 * (b.x1 + b.x2);
    b.x1 = m - 0.5 * kMinBoxExtent;
    b.x2 = m + 0.5 * kMinBoxExtent;
    out.clamped_x = true;
  }
  if (b.y2 - b.y1 < kMinBoxExtent) {
    const double m = 0.5 * (b.y1 + b.y2);
    b.y1 = m - 0.5 * kMinBoxExtent;
    b.y2 = m + 0.5 * kMinBoxExtent;
    out.clamped_y = true;
  }
  return out;
}

}  // namespace

Box decode_cell_box(const double* deltas, std::size_t gy, std::size_t gx, double cell) {
  return decode_with_flags(deltas, gy, gx, cell).box;
}

Var box_regression_loss(Var raw, const GridTargets& targets, const DetectorConfig& cfg) {
  const Tensor* r = &raw.value();
  check_raw(*r, targets);
  const std::size_t g = targets.grid;
  const std::size_t stride = static_cast<std::size_t>(targets.num_classes) + 4;
  const std::size_t off = static_cast<std::size_t>(targets.num_classes);
  const double cell = static_cast<double>(cfg.stride());
  const double norm = static_cast<double>(std::max<std::size_t>(1, targets.num_positive()));
  double total = 0.0;
  for (std::size_t i = 0; i < g * g; ++i) {
    if (!targets.positive[i]) continue;
    const Box p = decode_cell_box(r->data() + i * stride + off, i / g, i % g, cell);
    total += giou_loss_value(p, targets.box[i]);
  }
  return raw.tape()->record(
      Tensor::scalar(total / norm), {raw},
      [r, targets, g, stride, off, cell, norm](const Tensor& grad, std::span<Tensor* const> pg) {
        const double scale = grad[0] / norm;
        for (std::size_t i = 0; i < g * g; ++i) {
          if (!targets.positive[i]) continue;
          const std::size_t base = i * stride + off;
          const DecodedBox db = decode_with_flags(r->data() + base, i / g, i % g, cell);
          const auto d = giou_loss_grad(db.box, targets.box[i]);
          double* out = pg[0]->data() + base;
          // x1 = cx - cell*d0, x2 = cx + cell*d2 (and y likewise), or the
          // midpoint form when the extent was clamped.
          if (db.clamped_x) {
            const double s = d[0] + d[2];
            out[0] += scale * s * (-0.5 * cell);
            out[2] += scale * s * (0.5 * cell);
          } else {
            out[0] += scale * d[0] * (-cell);
            out[2] += scale * d[2] * cell;
          }
          if (db.clamped_y) {
            const double s = d[1] + d[3];
            out[1] += scale * s * (-0.5 * cell);
            out[3] += scale * s * (0.5 * cell);
          } else {
            out[1] += scale * d[1] * (-cell);
            out[3] += scale * d[3] * cell;
          }
        }
      },
      "box_regression_loss");
}

Var detection_loss(Var raw, const GridTargets& targets, const DetectorConfig& cfg,
                   const FocalParams& fp) {
  return numerics::add(focal_loss(raw, targets, fp), box_regression_loss(raw, targets, cfg));
}

Var batch_loss(Tape& tape, const std::map<std::string, Var>& params, const DetectorConfig& cfg,
               std::span<const TrainingView> views, const FocalParams& fp) {
  if (views.empty()) throw Error("batch_loss on an empty batch");
  Var total;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const GridTargets targets = assign_targets(views[i].targets, cfg);
    Var raw = forward(tape, params, cfg, *views[i].image);
    Var loss = detection_loss(raw, targets, cfg, fp);
    total = i == 0 ? loss : numerics::add(total, loss);
  }
  return numerics::scale(total, 1.0 / static_cast<double>(views.size()));
}

Var supervised_loss(Tape& tape, const std::map<std::string, Var>& params,
                    const DetectorConfig& cfg, std::span<const synth::Sample> batch,
                    const FocalParams& fp) {
  std::vector<TrainingView> views;
  views.reserve(batch.size());
  for (const auto& s : batch) views.push_back({&s.image(), s.annotations()});
  return batch_loss(tape, params, cfg, views, fp);
}

double supervised_loss_value(const ParamSet& params, const DetectorConfig& cfg,
                             std::span<const synth::Sample> batch) {
  Tape tape(false);
  return supervised_loss(tape, bind(tape, params), cfg, batch).value().item();
}

Detections non_max_suppression(Detections candidates, double nms_iou) {
  std::stable_sort(candidates.begin(), candidates.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cell < b.cell;
  });
  Detections kept;
  for (const auto& c : candidates) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == c.class_id && synth::iou(k.box, c.box) > nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

Detections decode(const Tensor& raw, const DetectorConfig& cfg, double score_threshold,
                  double nms_iou) {
  const std::size_t g = cfg.grid();
  const std::size_t stride = cfg.outputs_per_cell();
  if (raw.rank() != 3 || raw.extent(0) != g || raw.extent(1) != g || raw.extent(2) != stride) {
    throw ShapeError("decode: unexpected prediction shape " + numerics::shape_string(raw.shape()));
  }
  const double cell = static_cast<double>(cfg.stride());
  const double size = static_cast<double>(cfg.image_size);
  Detections candidates;
  for (std::size_t i = 0; i < g * g; ++i) {
    const double* p = raw.data() + i * stride;
    int best = 0;
    for (int c = 1; c < cfg.num_classes; ++c) {
      if (p[c] > p[best]) best = c;
    }
    const double score = sigmoid(p[best]);
    if (score < score_threshold) continue;
    Box b = synth::clip_box(decode_cell_box(p + cfg.num_classes, i / g, i % g, cell), size, size);
    if (!b.valid()) continue;
    candidates.push_back({b, best, score, i});
  }
  return non_max_suppression(std::move(candidates), nms_iou);
}

Detections detect(const ParamSet& params, const DetectorConfig& cfg, const Tensor& image,
                  double score_threshold, double nms_iou) {
  Tape tape(false);
  Var raw = forward(tape, bind(tape, params), cfg, image);
  return decode(raw.value(), cfg, score_threshold, nms_iou);
}

}  // namespace ctflab::det
