#include "ctflab/ssod/mean_teacher.hpp"

#include <algorithm>
#include <numeric>

#include "ctflab/error.hpp"
#include "ctflab/random.hpp"

namespace ctflab::ssod {

using numerics::Tape;
using numerics::Var;

PairState make_pair(int pair_id, std::uint64_t seed, const DetectorConfig& cfg) {
  PairState p;
  p.pair_id = pair_id;
  p.seed = seed;
  p.teacher = det::init_detector(cfg, seed);
  p.student = p.teacher;
  return p;
}

void burn_in(PairState& pair, std::span<const Sample> labeled, const BurnInConfig& bc,
             const DetectorConfig& cfg) {
  bc.optim.validate();
  bc.augmentation.validate();
  if (labeled.empty() && bc.iterations > 0) throw Error("burn_in: no labeled data");
  std::vector<std::size_t> order(labeled.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  for (std::size_t it = 1; it <= bc.iterations; ++it) {
    std::vector<Sample> batch;
    batch.reserve(bc.batch_size);
    while (batch.size() < bc.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed({bc.master_seed, pair.seed, epoch++, kShuffleStream}));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        cursor = 0;
      }
      const Sample& s = labeled[order[cursor++]];
      Rng aug(derive_seed({bc.master_seed, pair.seed, s.id(), it, kLabeledAugStream}));
      batch.push_back(synth::augment(s, bc.augmentation, aug));
    }
    Tape tape;
    const auto g = tape.backward(det::supervised_loss(tape, det::bind(tape, pair.teacher), cfg, batch));
    numerics::sgd_step(pair.teacher, g, bc.optim);
  }
  pair.teacher.clear_momentum();
  pair.student = pair.teacher;
}

void ema_update(ParamSet& teacher, const ParamSet& student, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw DomainError("ema rate must be in [0, 1]");
  if (!teacher.aligned_with(student)) throw ShapeError("ema_update: teacher and student differ");
  for (auto& [name, t] : teacher.entries()) {
    const auto s = student.at(name).values();
    auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m * v[i] + (1.0 - m) * s[i];
  }
}

std::vector<Annotation> PseudoLabels::annotations(std::size_t image) const {
  std::vector<Annotation> out;
  for (const auto& d : per_image.at(image)) out.push_back({d.box, d.class_id});
  return out;
}

std::size_t PseudoLabels::total_boxes() const {
  std::size_t n = 0;
  for (const auto& d : per_image) n += d.size();
  return n;
}

UnlabeledView make_view(const Sample& sample, const AugmentationSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  synth::AugmentedView v = synth::augment_view(sample.image(), {}, spec, rng);
  return UnlabeledView{std::move(v.image), v.transform};
}

std::vector<UnlabeledView> weak_views(std::span<const Sample> batch, std::uint64_t master_seed,
                                      std::uint64_t iteration, const AugmentationSpec& spec) {
  std::vector<UnlabeledView> out;
  out.reserve(batch.size());
  for (const auto& s : batch)
    out.push_back(make_view(s, spec, derive_seed({master_seed, s.id(), iteration, kWeakAugStream})));
  return out;
}

std::vector<UnlabeledView> strong_views(std::span<const Sample> batch, std::uint64_t master_seed,
                                        std::uint64_t pair_seed, std::uint64_t iteration,
                                        const AugmentationSpec& spec) {
  std::vector<UnlabeledView> out;
  out.reserve(batch.size());
  for (const auto& s : batch)
    out.push_back(make_view(s, spec, derive_seed({master_seed, pair_seed, s.id(), iteration, kStrongAugStream})));
  return out;
}

PseudoLabels generate_pseudo_labels(const ParamSet& teacher, const DetectorConfig& cfg,
                                    std::span<const UnlabeledView> weak, double threshold,
                                    int source_pair, double nms_iou) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw DomainError("pseudo-label threshold must be in (0, 1]");
  PseudoLabels pl;
  pl.source_pair = source_pair;
  pl.threshold = threshold;
  const double size = static_cast<double>(cfg.image_size);
  for (const auto& v : weak) {
    det::Detections kept;
    for (auto d : det::detect(teacher, cfg, v.image, threshold, nms_iou)) {
      d.box = synth::clip_box(v.transform.invert(d.box), size, size);
      if (d.box.valid()) kept.push_back(d);
    }
    pl.per_image.push_back(std::move(kept));
  }
  return pl;
}

std::vector<Annotation> map_to_view(const std::vector<Annotation>& original_frame,
                                    const UnlabeledView& view) {
  return view.transform.apply(original_frame);
}

namespace {

void check_views(std::span<const UnlabeledView> strong, const PseudoLabels& pseudo) {
  if (strong.size() != pseudo.per_image.size()) {
    throw Error("pseudo-labels cover " + std::to_string(pseudo.per_image.size()) +
                " images but the batch has " + std::to_string(strong.size()));
  }
}

}  // namespace

Var unlabeled_loss(Tape& tape, const std::map<std::string, Var>& student, const DetectorConfig& cfg,
                   std::span<const UnlabeledView> strong, const PseudoLabels& pseudo) {
  check_views(strong, pseudo);
  std::vector<std::vector<Annotation>> targets;
  for (std::size_t i = 0; i < strong.size(); ++i)
    targets.push_back(map_to_view(pseudo.annotations(i), strong[i]));
  std::vector<det::TrainingView> views;
  for (std::size_t i = 0; i < strong.size(); ++i) views.push_back({&strong[i].image, targets[i]});
  return det::batch_loss(tape, student, cfg, views);
}

void TrainConfig::validate() const {
  optim.validate();
  labeled_aug.validate();
  weak_aug.validate();
  strong_aug.validate();
  if (labeled_batch == 0 || unlabeled_batch == 0) throw ConfigError("batch sizes must be at least 1");
  if (!(lambda_u >= 0.0)) throw ConfigError("lambda_u must be non-negative");
  if (!(ema >= 0.0 && ema <= 1.0)) throw ConfigError("ema rate must be in [0, 1]");
  if (!(pseudo_threshold > 0.0 && pseudo_threshold <= 1.0))
    throw ConfigError("pseudo-label threshold must be in (0, 1]");
}

double total_loss(double labeled, double unlabeled, double lambda_u) {
  return labeled + lambda_u * unlabeled;
}

Var total_loss(Var labeled, Var unlabeled, double lambda_u) {
  return numerics::add(labeled, numerics::scale(unlabeled, lambda_u));
}

namespace {

std::vector<std::size_t> draw_distinct(std::size_t pool, std::size_t count, Rng& rng) {
  if (pool == 0) throw Error("cannot draw a batch from an empty pool");
  std::vector<std::size_t> out;
  while (out.size() < count) {
    const std::size_t i = rng.below(pool);
    if (out.size() < pool && std::find(out.begin(), out.end(), i) != out.end()) continue;
    out.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<Sample> labeled_batch(std::span<const Sample> labeled, std::size_t batch_size,
                                  std::uint64_t master_seed, std::uint64_t iteration,
                                  const AugmentationSpec& spec) {
  Rng pick(derive_seed({master_seed, iteration, kBatchStream, 0}));
  std::vector<Sample> out;
  for (std::size_t i : draw_distinct(labeled.size(), batch_size, pick)) {
    const Sample& s = labeled[i];
    Rng aug(derive_seed({master_seed, s.id(), iteration, kLabeledAugStream}));
    out.push_back(synth::augment(s, spec, aug));
  }
  return out;
}

std::vector<std::size_t> unlabeled_indices(std::size_t pool, std::size_t batch_size,
                                           std::uint64_t master_seed, std::uint64_t iteration) {
  Rng pick(derive_seed({master_seed, iteration, kBatchStream, 1}));
  return draw_distinct(pool, batch_size, pick);
}

StudentLossTerms student_losses(Tape& tape, const std::map<std::string, Var>& student,
                                const DetectorConfig& cfg, std::span<const Sample> labeled_batch,
                                std::span<const UnlabeledView> strong, const PseudoLabels& own,
                                const PseudoLabels* guidance) {
  check_views(strong, own);
  if (guidance) check_views(strong, *guidance);
  StudentLossTerms out;
  out.labeled = det::supervised_loss(tape, student, cfg, labeled_batch);
  const double inv = 1.0 / static_cast<double>(strong.size());
  Var u, d;
  for (std::size_t i = 0; i < strong.size(); ++i) {
    const Var raw = det::forward(tape, student, cfg, strong[i].image);
    const auto own_t = map_to_view(own.annotations(i), strong[i]);
    const Var lu = det::detection_loss(raw, det::assign_targets(own_t, cfg), cfg);
    u = i == 0 ? lu : numerics::add(u, lu);
    if (guidance) {
      const auto win_t = map_to_view(guidance->annotations(i), strong[i]);
      const Var ld = det::detection_loss(raw, det::assign_targets(win_t, cfg), cfg);
      d = i == 0 ? ld : numerics::add(d, ld);
    }
  }
  out.unlabeled = numerics::scale(u, inv);
  if (guidance) out.dpc = numerics::scale(d, inv);
  return out;
}

PseudoLabels teacher_pseudo_labels(const PairState& pair, std::span<const UnlabeledView> weak,
                                   const TrainConfig& mc, const DetectorConfig& cfg) {
  return generate_pseudo_labels(pair.teacher, cfg, weak, mc.pseudo_threshold, pair.pair_id);
}

StepLosses train_step(PairState& pair, std::span<const Sample> labeled_batch,
                      std::span<const Sample> unlabeled_batch, std::span<const UnlabeledView> weak,
                      const TrainConfig& mc, const DetectorConfig& cfg,
                      const PseudoLabels* guidance, double beta) {
  const PseudoLabels own = teacher_pseudo_labels(pair, weak, mc, cfg);
  const auto strong = strong_views(unlabeled_batch, mc.master_seed, pair.seed, pair.iteration + 1, mc.strong_aug);
  Tape tape;
  const auto bound = det::bind(tape, pair.student);
  const StudentLossTerms terms = student_losses(tape, bound, cfg, labeled_batch, strong, own, guidance);
  Var total = total_loss(terms.labeled, terms.unlabeled, mc.lambda_u);
  if (terms.dpc) total = numerics::add(total, numerics::scale(*terms.dpc, beta));
  const auto grads = tape.backward(total);
  numerics::sgd_step(pair.student, grads, mc.optim);
  ema_update(pair, mc.ema);
  ++pair.iteration;
  StepLosses out;
  out.labeled = terms.labeled.value().item();
  out.unlabeled = terms.unlabeled.value().item();
  if (terms.dpc) out.dpc = terms.dpc->value().item();
  return out;
}

void run_mean_teacher(PairState& pair, std::span<const Sample> labeled,
                      std::span<const Sample> unlabeled, const TrainConfig& mc,
                      const DetectorConfig& cfg, std::size_t iterations,
                      const std::function<void(const PairState&, const StepLosses&)>& on_iteration) {
  mc.validate();
  const std::uint64_t end = pair.iteration + iterations;
  while (pair.iteration < end) {
    const std::uint64_t it = pair.iteration + 1;
    const auto lb = labeled_batch(labeled, mc.labeled_batch, mc.master_seed, it, mc.labeled_aug);
    std::vector<Sample> ub;
    for (std::size_t i : unlabeled_indices(unlabeled.size(), mc.unlabeled_batch, mc.master_seed, it))
      ub.push_back(unlabeled[i]);
    const auto weak = weak_views(ub, mc.master_seed, it, mc.weak_aug);
    const StepLosses l = train_step(pair, lb, ub, weak, mc, cfg);
    if (on_iteration) on_iteration(pair, l);
  }
}

}  // namespace ctflab::ssod
