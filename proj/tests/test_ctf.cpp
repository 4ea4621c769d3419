#include <gtest/gtest.h>

#include <algorithm>

#include "ctflab/ctf/ctf.hpp"
#include "ctflab/error.hpp"
#include "ctflab/random.hpp"
#include "ctflab/synth/dataset.hpp"
#include "support/oracles.hpp"

using namespace ctflab;
using namespace ctflab::ctf;
using numerics::Tape;
using synth::HarnessAccess;
using synth::Role;

namespace {

synth::Dataset small_data() {
  synth::DatasetConfig dc;
  dc.n_labeled = 8;
  dc.n_unlabeled = 16;
  dc.n_validation = 6;
  dc.seed = 9;
  return synth::generate_dataset(dc);
}

PseudoLabels labels_from_truth(std::span<const Sample> batch, int source) {
  PseudoLabels pl;
  pl.source_pair = source;
  for (const auto& s : batch) {
    det::Detections d;
    for (const auto& a : s.annotations(HarnessAccess{})) d.push_back({a.box, a.class_id, 1.0, 0});
    pl.per_image.push_back(d);
  }
  return pl;
}

// State after a short burn-in shared by the run tests.
struct Fixture {
  synth::Dataset data = small_data();
  DetectorConfig dcfg;
  CtfConfig cfg;
  CtfState state;

  explicit Fixture(std::size_t S, std::size_t max_iter, std::vector<std::uint64_t> seeds = {1, 5}) {
    cfg.num_pairs = seeds.size();
    cfg.seeds = seeds;
    cfg.stage_length = S;
    cfg.max_iter = max_iter;
    cfg.train.pseudo_threshold = 0.5;
    state = initial_state(cfg, dcfg);
    ssod::BurnInConfig bc;
    bc.iterations = 30;
    for (auto& p : state.pairs) ssod::burn_in(p, data.labeled, bc, dcfg);
  }

  RunSummary run(const RunHooks& hooks = {}, std::optional<std::uint64_t> until = std::nullopt) {
    return run_ctf(state, cfg, dcfg, data.labeled, data.unlabeled, data.validation, hooks, until);
  }
};

}  // namespace

TEST(Ledger, SingleAccumulation) {
  DpcoLedger l(2);
  l.open_window(1);
  l.accumulate(0, 0.8);
  EXPECT_DOUBLE_EQ(l.totals()[0], 0.8);
  EXPECT_DOUBLE_EQ(l.totals()[1], 0.0);
  l.accumulate(1, 0.0);
  EXPECT_DOUBLE_EQ(l.totals()[1], 0.0);
}

TEST(Ledger, TotalIsSumOfRecordedLosses) {
  Rng rng(3);
  DpcoLedger l(3);
  l.open_window(1);
  std::vector<std::vector<double>> recorded(3);
  for (int t = 0; t < 100; ++t) {
    for (std::size_t i = 0; i < 3; ++i) {
      const double v = rng.uniform(0, 3);
      recorded[i].push_back(v);
      l.accumulate(i, v);
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (double v : recorded[i]) sum += v;
    EXPECT_NEAR(l.totals()[i], sum, 1e-12);
  }
}

TEST(Ledger, AccumulateOutsideWindowIsAnError) {
  DpcoLedger l(2);
  EXPECT_THROW(l.accumulate(0, 1.0), Error);
  l.open_window(1);
  l.accumulate(0, 1.0);
  l.select_winner();
  EXPECT_FALSE(l.window_open());
  EXPECT_THROW(l.accumulate(0, 1.0), Error);
  EXPECT_THROW(DpcoLedger().select_winner(), Error);
}

TEST(Ledger, AccumulatedValueIsLabeledLossOfRepresentative) {
  const auto d = small_data();
  const DetectorConfig cfg;
  const auto rep = det::init_detector(cfg, 4);
  const auto copy = rep;
  DpcoLedger l(2);
  l.open_window(1);
  const double v = l.accumulate(1, rep, cfg, d.labeled);
  EXPECT_DOUBLE_EQ(v, det::supervised_loss_value(rep, cfg, d.labeled));
  EXPECT_DOUBLE_EQ(l.totals()[1], v);
  EXPECT_TRUE(rep == copy);
}

TEST(Ledger, WinnerExamples) {
  DpcoLedger l(2);
  l.open_window(1);
  l.totals() = {2.0, 1.5};
  EXPECT_EQ(l.select_winner(), 1u);
  l.open_window(2);
  l.totals() = {1.0, 1.0};
  EXPECT_EQ(l.select_winner(), 0u);
}

TEST(Ledger, WinnerIsBruteForceArgmin) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(5);
    std::vector<double> v(n);
    // Coarse values so ties occur.
    for (double& x : v) x = static_cast<double>(rng.below(6)) * 0.25;
    DpcoLedger l(n);
    l.open_window(1);
    l.totals() = v;
    EXPECT_EQ(l.select_winner(), oracle::brute_force_argmin(v));
  }
}

TEST(Ledger, ResetPolicies) {
  DpcoLedger reset(2, ResetPolicy::reset), keep(2, ResetPolicy::keep);
  for (auto* l : {&reset, &keep}) {
    l->open_window(1);
    l->accumulate(0, 1.0);
    l->accumulate(1, 2.0);
    EXPECT_EQ(l->select_winner(), 0u);
  }
  EXPECT_EQ(reset.totals(), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(keep.totals(), (std::vector<double>{1.0, 2.0}));
  keep.open_window(201);
  keep.accumulate(0, 5.0);
  EXPECT_EQ(keep.select_winner(), 1u);
}

TEST(Policy, NamesRoundTrip) {
  for (auto p : {ResetPolicy::reset, ResetPolicy::keep}) EXPECT_EQ(parse_policy(policy_name(p)), p);
  for (auto r : {Representative::teacher, Representative::student})
    EXPECT_EQ(parse_representative(representative_name(r)), r);
  EXPECT_THROW(parse_policy("sometimes"), ConfigError);
  EXPECT_THROW(parse_representative("both"), ConfigError);
}

TEST(Schedule, FourHundredIterationsOfHundred) {
  std::vector<std::uint64_t> decisions;
  for (std::uint64_t t = 1; t <= 400; ++t) {
    const Phase expect = (t <= 100 || (t > 200 && t <= 300)) ? Phase::stage1 : Phase::stage2;
    EXPECT_EQ(phase_of(t, 100), expect) << t;
    if (is_decision(t, 100, 400)) decisions.push_back(t);
    EXPECT_EQ(unlabeled_source_iteration(t, 100), expect == Phase::stage2 ? t - 100 : t);
  }
  EXPECT_EQ(decisions, (std::vector<std::uint64_t>{100, 300}));
  EXPECT_THROW(phase_of(0, 100), DomainError);
}

TEST(Schedule, TruncatedWindowDecidesAtMaxIter) {
  std::vector<std::uint64_t> decisions;
  for (std::uint64_t t = 1; t <= 250; ++t)
    if (is_decision(t, 100, 250)) decisions.push_back(t);
  EXPECT_EQ(decisions, (std::vector<std::uint64_t>{100, 250}));
  EXPECT_FALSE(is_decision(150, 100, 150));
}

TEST(Config, Validation) {
  CtfConfig c;
  EXPECT_NO_THROW(c.validate());
  c.num_pairs = 1;
  c.seeds = {1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = CtfConfig{};
  c.seeds = {1, 2, 3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = CtfConfig{};
  c.stage_length = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

class Stage2Loss : public ::testing::Test {
 protected:
  synth::Dataset d = small_data();
  DetectorConfig cfg;
  ParamSet student = det::init_detector(cfg, 6);
  std::span<const Sample> lb{d.labeled.data(), 3};
  std::span<const Sample> ub{d.unlabeled.data(), 3};
  std::vector<ssod::UnlabeledView> strong = ssod::strong_views(ub, 1, 5, 4);
  PseudoLabels own = labels_from_truth(ub, 0);
  PseudoLabels win = [&] {
    auto w = labels_from_truth(ub, 1);
    w.per_image[0].clear();
    return w;
  }();

  double value(const PseudoLabels& o, const PseudoLabels& w, double lambda, double beta) {
    Tape tape(false);
    return stage2_student_loss(tape, det::bind(tape, student), cfg, lb, strong, o, w, lambda, beta, 0, 1)
        .value()
        .item();
  }
  double lu(const PseudoLabels& p) {
    Tape tape(false);
    return ssod::unlabeled_loss(tape, det::bind(tape, student), cfg, strong, p).value().item();
  }
};

TEST_F(Stage2Loss, IdenticalGuidanceCollapsesToWeightedUnlabeledLoss) {
  PseudoLabels same = own;
  same.source_pair = 1;
  const double ll = det::supervised_loss_value(student, cfg, lb);
  EXPECT_NEAR(value(own, same, 2.0, 2.0), ll + 4.0 * lu(own), 1e-10);
}

TEST_F(Stage2Loss, ZeroBetaIsMeanTeacherLoss) {
  const double ll = det::supervised_loss_value(student, cfg, lb);
  EXPECT_NEAR(value(own, win, 2.0, 0.0), ssod::total_loss(ll, lu(own), 2.0), 1e-10);
}

TEST_F(Stage2Loss, DecomposesIntoThreeTerms) {
  const double ll = det::supervised_loss_value(student, cfg, lb);
  EXPECT_NEAR(value(own, win, 2.0, 2.0), ll + 2.0 * lu(own) + 2.0 * lu(win), 1e-10);
  EXPECT_NEAR(value(own, win, 0.5, 3.0), ll + 0.5 * lu(own) + 3.0 * lu(win), 1e-10);
}

TEST_F(Stage2Loss, RejectsWinnerAndForeignGuidance) {
  Tape tape(false);
  const auto b = det::bind(tape, student);
  EXPECT_THROW(stage2_student_loss(tape, b, cfg, lb, strong, own, win, 2, 2, 1, 1), Error);
  EXPECT_THROW(stage2_student_loss(tape, b, cfg, lb, strong, own, win, 2, 2, 1, 0), Error);
}

TEST(Metrics, JsonRoundTrip) {
  MetricsRecord r;
  r.iter = 100;
  r.phase = Phase::stage2;
  r.pair_id = 1;
  r.L_l = 0.25;
  r.L_u = 1.5;
  r.L_dpc = 0.75;
  r.L_acc = 12.0;
  r.winner_k = 0;
  r.inter_pair_distance = 3.25;
  r.intra_pair_distance = 0.125;
  const auto line = to_json_line(r);
  EXPECT_EQ(line.rfind("{\"iter\":100,\"phase\":\"stage2\",\"pair_id\":1,", 0), 0u) << line;
  EXPECT_EQ(parse_metrics_line(line), r);
  r.winner_k.reset();
  EXPECT_EQ(parse_metrics_line(to_json_line(r)), r);
  EXPECT_THROW(parse_metrics_line("{\"iter\":1}"), std::exception);
}

TEST(Run, ScheduleLedgerAndRecords) {
  Fixture f(5, 23);
  std::vector<MetricsRecord> recs;
  RunHooks hooks;
  hooks.on_record = [&](const MetricsRecord& r) { recs.push_back(r); };
  hooks.audit_accumulate = true;
  const auto sum = f.run(hooks);
  EXPECT_EQ(f.state.iteration, 23u);
  ASSERT_EQ(recs.size(), 46u);
  // Stage-1 iterations: 1-5, 11-15, 21-23.
  EXPECT_EQ(sum.accumulate_calls, 2u * 13u);
  EXPECT_EQ(sum.accumulate_mismatches, 0u);
  EXPECT_EQ(sum.guided_steps, 10u);
  ASSERT_EQ(sum.decisions.size(), 3u);
  EXPECT_EQ(sum.decisions[0].first, 5u);
  EXPECT_EQ(sum.decisions[1].first, 15u);
  EXPECT_EQ(sum.decisions[2].first, 23u);

  std::vector<double> acc(2, 0.0);
  for (std::size_t n = 0; n < recs.size(); ++n) {
    const auto& r = recs[n];
    EXPECT_EQ(r.iter, n / 2 + 1);
    EXPECT_EQ(r.pair_id, static_cast<int>(n % 2));
    EXPECT_EQ(r.phase, phase_of(r.iter, 5));
    ASSERT_TRUE(r.inter_pair_distance.has_value());
    EXPECT_GT(*r.inter_pair_distance, 0.0);
    if (r.phase == Phase::stage1) {
      EXPECT_EQ(r.L_dpc, 0.0);
      EXPECT_EQ(r.winner_k.has_value(), is_decision(r.iter, 5, 23));
    } else {
      ASSERT_TRUE(r.winner_k.has_value());
      const auto& decided = *std::find_if(sum.decisions.rbegin(), sum.decisions.rend(),
                                          [&](const auto& d) { return d.first < r.iter; });
      EXPECT_EQ(*r.winner_k, decided.second);
      EXPECT_EQ(r.L_dpc > 0.0, static_cast<std::size_t>(r.pair_id) != decided.second);
      EXPECT_EQ(r.L_acc, 0.0);
    }
  }
  // Ledger totals recorded at a decision are the window sums of the teacher
  // losses on the shared labeled batches.
  for (const auto& [t, k] : sum.decisions) {
    std::vector<double> at(2);
    for (const auto& r : recs)
      if (r.iter == t) at[static_cast<std::size_t>(r.pair_id)] = r.L_acc;
    EXPECT_EQ(k, oracle::brute_force_argmin(at));
  }
  EXPECT_EQ(synth::AccessGuard::violations(), 0u);
}

TEST(Run, IdenticalSeedsNeverDisplaceFirstPair) {
  Fixture f(5, 30, {7, 7});
  f.cfg.beta = 0.0;
  const auto sum = f.run();
  ASSERT_FALSE(sum.decisions.empty());
  for (const auto& d : sum.decisions) EXPECT_EQ(d.second, 0u);
  EXPECT_TRUE(f.state.pairs[0].teacher == f.state.pairs[1].teacher);
}

TEST(Run, ReplayIsBitIdentical) {
  Fixture a(25, 200), b(25, 200);
  std::vector<std::string> la, lb;
  RunHooks ha, hb;
  ha.on_record = [&](const MetricsRecord& r) { la.push_back(to_json_line(r)); };
  hb.on_record = [&](const MetricsRecord& r) { lb.push_back(to_json_line(r)); };
  hb.threads = 2;
  const auto sa = a.run(ha), sb = b.run(hb);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(sa.decisions, sb.decisions);
  EXPECT_TRUE(a.state == b.state);
}

TEST(Run, SplitRunEqualsSingleRun) {
  Fixture a(4, 18), b(4, 18);
  a.run();
  b.run({}, 6);
  EXPECT_EQ(b.state.iteration, 6u);
  b.run({}, 11);
  b.run();
  EXPECT_TRUE(a.state == b.state);
}

TEST(Run, PeriodicEvaluation) {
  Fixture f(5, 10);
  std::vector<EvalRecord> evals;
  RunHooks hooks;
  hooks.eval_interval = 4;
  hooks.on_eval = [&](const EvalRecord& e) { evals.push_back(e); };
  f.run(hooks);
  ASSERT_EQ(evals.size(), 2u);
  EXPECT_EQ(evals[0].iter, 4u);
  EXPECT_EQ(evals[1].iter, 8u);
  for (const auto& e : evals) {
    ASSERT_EQ(e.teacher_map.size(), 2u);
    EXPECT_EQ(e.best_map, *std::max_element(e.teacher_map.begin(), e.teacher_map.end()));
  }
  const auto line = to_json_line(evals[0]);
  EXPECT_EQ(line.rfind("{\"iter\":4,\"teacher_map\":[", 0), 0u);
}

TEST(BestTeacher, SingletonAndBruteForce) {
  const auto d = small_data();
  const DetectorConfig cfg;
  std::vector<PairState> pairs;
  ssod::BurnInConfig bc;
  for (std::size_t i = 0; i < 4; ++i) {
    pairs.push_back(ssod::make_pair(static_cast<int>(i), 10 + i, cfg));
    bc.iterations = 10 * i;
    ssod::burn_in(pairs.back(), d.labeled, bc, cfg);
  }
  EXPECT_EQ(best_teacher_for_inference(std::span(pairs.data(), 1), cfg, d.validation), 0u);
  std::vector<double> maps;
  const auto best = best_teacher_for_inference(pairs, cfg, d.validation, &maps);
  ASSERT_EQ(maps.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(maps[i], validation_map(pairs[i].teacher, cfg, d.validation));
  EXPECT_EQ(best, static_cast<std::size_t>(std::max_element(maps.begin(), maps.end()) - maps.begin()));
  EXPECT_THROW(best_teacher_for_inference({}, cfg, d.validation), Error);
}

TEST(Distances, InterAndIntraPair) {
  const DetectorConfig cfg;
  std::vector<PairState> pairs{ssod::make_pair(0, 1, cfg), ssod::make_pair(1, 5, cfg),
                               ssod::make_pair(2, 1, cfg)};
  const double d01 = numerics::l2_param_distance(pairs[0].teacher, pairs[1].teacher);
  EXPECT_GT(d01, 0.0);
  EXPECT_NEAR(inter_pair_distance(pairs, 0), d01 / 2.0, 1e-12);
  EXPECT_NEAR(inter_pair_distance(pairs, 1), d01, 1e-12);
  EXPECT_EQ(intra_pair_distance(pairs[0]), 0.0);
}
