#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "oracle/oracle.hpp"
#include "pcd/distill.hpp"
#include "support/gradcheck.hpp"

using namespace pcd;
using pcd::testing::uniform_values;

namespace {

LogitBatch make_batch(std::size_t rows, std::size_t cols, std::vector<double> t,
                      std::vector<double> s, std::vector<std::size_t> labels,
                      bool student_grad = false) {
  return {Tensor::from({rows, cols}, std::move(t)),
          Tensor::from({rows, cols}, std::move(s), student_grad), std::move(labels)};
}

LogitBatch random_batch(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                        bool student_grad = false) {
  std::vector<std::size_t> labels(rows);
  for (auto& l : labels) l = rng() % cols;
  return make_batch(rows, cols, uniform_values(rng, rows * cols), uniform_values(rng, rows * cols),
                    labels, student_grad);
}

oracle::Matrix to_matrix(const Tensor& t) {
  oracle::Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

oracle::OracleConfig to_oracle(const PcdConfig& c) {
  return {c.tau, c.alpha, c.stages, c.use_ldr, c.use_f2cl, c.use_c2fl, c.use_wdm};
}

std::vector<std::size_t> to_vec(std::span<const std::size_t> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(RankLogitDifference, HandExample) {
  auto batch = make_batch(1, 3, {3, 1, 2}, {1, 1, 1.5}, {0});
  EXPECT_EQ(to_vec(rank_logit_difference(batch).row(0)), (std::vector<std::size_t>{0, 2, 1}));
}

TEST(RankLogitDifference, AllTiesKeepNaturalOrder) {
  auto batch = make_batch(2, 5, {1, 2, 3, 4, 5, 0, 0, 0, 0, 0}, {1, 2, 3, 4, 5, 0, 0, 0, 0, 0},
                          {0, 1});
  const auto ranks = rank_logit_difference(batch);
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_EQ(to_vec(ranks.row(b)), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  }
}

TEST(RankLogitDifference, MatchesBruteForceResort) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    auto batch = random_batch(rng, 4, 10);
    const auto ranks = rank_logit_difference(batch);
    const auto t = to_matrix(batch.teacher);
    const auto s = to_matrix(batch.student);
    for (std::size_t b = 0; b < 4; ++b) {
      auto row = to_vec(ranks.row(b));
      EXPECT_EQ(row, oracle::rank_row(t[b], s[b]));
      auto sorted = row;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(sorted[c], c);
      for (std::size_t k = 0; k + 1 < 10; ++k) {
        EXPECT_GE(std::fabs(t[b][row[k]] - s[b][row[k]]),
                  std::fabs(t[b][row[k + 1]] - s[b][row[k + 1]]));
      }
    }
  }
}

TEST(StageGroupSizes, FineToCoarseTwelveClasses) {
  EXPECT_EQ(stage_group_sizes(12, 3, Direction::fine_to_coarse),
            (std::vector<std::size_t>{4, 6, 12}));
}

TEST(StageGroupSizes, CoarseToFineTwelveClasses) {
  EXPECT_EQ(stage_group_sizes(12, 3, Direction::coarse_to_fine),
            (std::vector<std::size_t>{12, 6, 4}));
}

TEST(StageGroupSizes, NonDivisibleUsesCeiling) {
  EXPECT_EQ(stage_group_sizes(10, 3, Direction::fine_to_coarse),
            (std::vector<std::size_t>{4, 5, 10}));
  EXPECT_EQ(stage_group_sizes(10, 3, Direction::coarse_to_fine),
            (std::vector<std::size_t>{10, 5, 4}));
}

TEST(StageGroupSizes, RejectsTooManyStages) {
  EXPECT_THROW(stage_group_sizes(4, 5, Direction::fine_to_coarse), ParameterError);
  EXPECT_THROW(stage_group_sizes(4, 0, Direction::coarse_to_fine), ParameterError);
  try {
    stage_group_sizes(4, 5, Direction::fine_to_coarse);
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("S <= C"), std::string::npos);
  }
}

TEST(BuildSchedule, IdentityRankingSixClasses) {
  const auto sched =
      build_schedule(RankSequence::natural(1, 6), 6, 3, Direction::fine_to_coarse);
  ASSERT_EQ(sched.stages().size(), 3u);
  using V = std::vector<std::size_t>;
  EXPECT_EQ(sched.stages()[0].group_count, 3u);
  EXPECT_EQ(to_vec(sched.group(0, 0, 0)), (V{0, 1}));
  EXPECT_EQ(to_vec(sched.group(0, 0, 1)), (V{2, 3}));
  EXPECT_EQ(to_vec(sched.group(0, 0, 2)), (V{4, 5}));
  EXPECT_EQ(sched.stages()[1].group_count, 2u);
  EXPECT_EQ(to_vec(sched.group(1, 0, 0)), (V{0, 1, 2}));
  EXPECT_EQ(to_vec(sched.group(1, 0, 1)), (V{3, 4, 5}));
  EXPECT_EQ(sched.stages()[2].group_count, 1u);
  EXPECT_EQ(to_vec(sched.group(2, 0, 0)), (V{0, 1, 2, 3, 4, 5}));
}

TEST(BuildSchedule, TenClassesFirstStageChunks) {
  std::mt19937_64 rng(1);
  auto batch = random_batch(rng, 3, 10);
  const auto sched =
      build_schedule(rank_logit_difference(batch), 10, 3, Direction::fine_to_coarse);
  const auto& plan = sched.stages()[0];
  EXPECT_EQ(plan.group_size, 4u);
  ASSERT_EQ(plan.group_count, 3u);
  for (std::size_t b = 0; b < 3; ++b) {
    EXPECT_EQ(sched.group(0, b, 0).size(), 4u);
    EXPECT_EQ(sched.group(0, b, 1).size(), 4u);
    EXPECT_EQ(sched.group(0, b, 2).size(), 2u);
  }
}

TEST(BuildSchedule, FirstGroupHoldsMostDivergentClasses) {
  auto batch = make_batch(1, 4, {0, 0, 0, 0}, {0.1, 3.0, -2.0, 0.5}, {0});
  const auto sched = build_schedule(rank_logit_difference(batch), 4, 2, Direction::fine_to_coarse);
  EXPECT_EQ(to_vec(sched.group(0, 0, 0)), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(to_vec(sched.group(0, 0, 1)), (std::vector<std::size_t>{3, 0}));
}

TEST(BuildSchedule, WithoutRankingGroupsAreContiguousBlocks) {
  const auto sched = build_schedule(RankSequence::natural(2, 7), 7, 3, Direction::coarse_to_fine);
  for (std::size_t i = 0; i < sched.stages().size(); ++i) {
    for (std::size_t b = 0; b < 2; ++b) {
      std::size_t expected = 0;
      for (std::size_t j = 0; j < sched.stages()[i].group_count; ++j) {
        for (std::size_t c : sched.group(i, b, j)) EXPECT_EQ(c, expected++);
      }
      EXPECT_EQ(expected, 7u);
    }
  }
}

TEST(BuildSchedule, GroupsPartitionClasses) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t classes = 2 + rng() % 15;
    const std::size_t stages = 1 + rng() % classes;
    const auto dir = rng() % 2 ? Direction::fine_to_coarse : Direction::coarse_to_fine;
    auto batch = random_batch(rng, 2, classes);
    const auto sched = build_schedule(rank_logit_difference(batch), classes, stages, dir);
    for (std::size_t i = 0; i < stages; ++i) {
      for (std::size_t b = 0; b < 2; ++b) {
        std::set<std::size_t> seen;
        std::size_t total = 0;
        for (std::size_t j = 0; j < sched.stages()[i].group_count; ++j) {
          const auto g = sched.group(i, b, j);
          EXPECT_FALSE(g.empty());
          total += g.size();
          seen.insert(g.begin(), g.end());
        }
        EXPECT_EQ(total, classes);
        EXPECT_EQ(seen.size(), classes);
      }
    }
  }
}

TEST(GroupWeight, IdenticalIsZero) {
  auto p = Tensor::from({1, 3}, {0.2, 0.3, 0.5});
  EXPECT_NEAR(group_weight(p, p).item(), 0.0, 1e-15);
}

TEST(GroupWeight, OrthogonalIsOne) {
  EXPECT_EQ(group_weight(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 1})).item(), 1.0);
}

TEST(GroupWeight, HalfAgainstOneHot) {
  const double lambda =
      group_weight(Tensor::from({1, 2}, {0.5, 0.5}), Tensor::from({1, 2}, {1, 0})).item();
  const double oracle = 1.0 - 0.5 / (std::sqrt(0.5) * 1.0);
  EXPECT_NEAR(lambda, oracle, 1e-15);
  EXPECT_NEAR(lambda, 0.2929, 1e-4);
}

TEST(GroupWeight, DisabledIsConstantOne) {
  auto w = group_weight(Tensor::from({2, 2}, {0.5, 0.5, 0.1, 0.9}),
                        Tensor::from({2, 2}, {1, 0, 0.9, 0.1}, true), false);
  EXPECT_EQ(w.at(0), 1.0);
  EXPECT_EQ(w.at(1), 1.0);
  EXPECT_FALSE(w.requires_grad());
}

TEST(GroupWeight, DifferentiableOnStudentSide) {
  std::mt19937_64 rng(8);
  Mask all = Mask::full(2, 5);
  const auto pv = uniform_values(rng, 10);
  auto p = masked_softmax_temp(Tensor::from({2, 5}, pv), all, 2.0);
  const auto zv = uniform_values(rng, 10);
  EXPECT_LT(pcd::testing::max_grad_error(
                {2, 5}, zv,
                [&](const Tensor& z) {
                  return sum(group_weight(p, masked_softmax_temp(z, all, 2.0)));
                }),
            1e-4);
}

TEST(GroupLoss, IdenticalDistributionsGiveZero) {
  Mask all = Mask::full(1, 4);
  auto z = Tensor::from({1, 4}, {0.3, -1, 2, 0.7});
  LogitBatch batch{z, z, {0}};
  auto g = group_distributions(batch, all, 3.0);
  EXPECT_EQ(group_loss(g, group_weight(g.teacher_prob, g.student_prob), 3.0).item(), 0.0);
}

TEST(GroupLoss, UnitWeightAtUnitTemperatureIsPlainKl) {
  auto batch = make_batch(1, 2, {1, 0}, {0, 0}, {0});
  auto g = group_distributions(batch, Mask::full(1, 2), 1.0);
  const double kl = group_loss(g, group_weight(g.teacher_prob, g.student_prob, false), 1.0).item();
  const double p0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(kl, p0 * std::log(p0 / 0.5) + (1 - p0) * std::log((1 - p0) / 0.5), 1e-15);
}

TEST(GroupLoss, RandomGroupMatchesScalarOracle) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    auto batch = random_batch(rng, 1, 7);
    std::vector<std::size_t> group{1, 4, 5};
    Mask mask(1, 7);
    for (std::size_t c : group) mask.set(0, c);
    auto g = group_distributions(batch, mask, 2.0);
    const double engine = group_loss(g, group_weight(g.teacher_prob, g.student_prob), 2.0).item();

    const auto t = to_matrix(batch.teacher)[0];
    const auto s = to_matrix(batch.student)[0];
    const auto p = oracle::group_softmax(t, group, 2.0);
    const auto q = oracle::group_softmax(s, group, 2.0);
    double kl = 0, pq = 0, pp = 0, qq = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      kl += p[k] * std::log(p[k] / q[k]);
      pq += p[k] * q[k];
      pp += p[k] * p[k];
      qq += q[k] * q[k];
    }
    const double lambda = 1 - pq / std::sqrt(pp * qq);
    EXPECT_NEAR(engine, lambda * kl * 4.0, 1e-9);
  }
}

TEST(VanillaKd, IdenticalLogitsHaveZeroKlTerm) {
  std::mt19937_64 rng(4);
  const auto z = uniform_values(rng, 12);
  auto batch = make_batch(3, 4, z, z, {0, 1, 2});
  EXPECT_EQ(vanilla_kd_loss(batch, 4.0, 0.0, 1.0).item(), 0.0);
}

TEST(VanillaKd, TwoClassExample) {
  auto batch = make_batch(1, 2, {1, 0}, {0, 0}, {0});
  const double v = vanilla_kd_loss(batch, 1.0, 0.0, 1.0).item();
  EXPECT_NEAR(v, 0.1109, 1e-3);
  EXPECT_NEAR(v, oracle::vanilla_kl_term({{1, 0}}, {{0, 0}}, 1.0), 1e-15);
}

TEST(VanillaKd, TemperatureScalingMatchesOracle) {
  std::mt19937_64 rng(12);
  for (double tau : {1.0, 2.0, 4.0, 8.0}) {
    auto batch = random_batch(rng, 3, 6);
    const double engine = vanilla_kd_loss(batch, tau, 0.0, 1.0).item();
    EXPECT_NEAR(engine,
                oracle::vanilla_kl_term(to_matrix(batch.teacher), to_matrix(batch.student), tau),
                1e-9);
  }
}

TEST(VanillaKd, CompositeWithCrossEntropy) {
  std::mt19937_64 rng(13);
  auto batch = random_batch(rng, 4, 5);
  const double engine = vanilla_kd_loss(batch, 3.0, 0.7, 0.4).item();
  const auto t = to_matrix(batch.teacher), s = to_matrix(batch.student);
  EXPECT_NEAR(engine,
              0.7 * oracle::cross_entropy(s, batch.labels) + 0.4 * oracle::vanilla_kl_term(t, s, 3.0),
              1e-12);
}

TEST(VanillaKd, LabelOutOfRange) {
  auto batch = make_batch(1, 2, {1, 0}, {0, 0}, {2});
  EXPECT_THROW(vanilla_kd_loss(batch, 1.0, 1.0, 1.0), DataError);
}

TEST(DirectionLoss, IdenticalLogitsGiveZero) {
  std::mt19937_64 rng(5);
  const auto z = uniform_values(rng, 16);
  auto batch = make_batch(2, 8, z, z, {0, 1});
  PcdConfig cfg;
  for (auto dir : {Direction::fine_to_coarse, Direction::coarse_to_fine}) {
    const auto sched = build_schedule(rank_logit_difference(batch), 8, 3, dir);
    EXPECT_EQ(direction_loss(batch, sched, cfg).item(), 0.0);
  }
}

TEST(DirectionLoss, SingleStageWithoutWeightingIsVanillaKl) {
  std::mt19937_64 rng(6);
  PcdConfig cfg;
  cfg.stages = 1;
  cfg.use_wdm = false;
  for (int trial = 0; trial < 20; ++trial) {
    auto batch = random_batch(rng, 1 + trial % 4, 2 + trial % 9);
    const std::size_t classes = batch.num_classes();
    for (auto dir : {Direction::fine_to_coarse, Direction::coarse_to_fine}) {
      const auto sched = build_schedule(rank_logit_difference(batch), classes, 1, dir);
      EXPECT_NEAR(direction_loss(batch, sched, cfg).item(),
                  vanilla_kd_loss(batch, cfg.tau, 0.0, 1.0).item(), 1e-12);
    }
  }
}

TEST(DirectionLoss, MatchesOracleOnSixClasses) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    auto batch = random_batch(rng, 2, 6);
    PcdConfig cfg;
    cfg.use_c2fl = false;
    const auto sched =
        build_schedule(rank_logit_difference(batch), 6, 3, Direction::fine_to_coarse);
    const auto ref = oracle::oracle_pcd_loss(to_matrix(batch.teacher), to_matrix(batch.student),
                                             batch.labels, to_oracle(cfg));
    EXPECT_NEAR(direction_loss(batch, sched, cfg).item(), ref.f2cl, 1e-9);
  }
}

TEST(DirectionLoss, TraceRecordsEveryGroup) {
  std::mt19937_64 rng(3);
  auto batch = random_batch(rng, 3, 10);
  PcdConfig cfg;
  std::vector<GroupTrace> trace;
  const auto sched = build_schedule(rank_logit_difference(batch), 10, 3, Direction::fine_to_coarse);
  const double total = direction_loss(batch, sched, cfg, &trace).item();
  ASSERT_EQ(trace.size(), 3u + 2u + 1u);
  double acc = 0.0;
  for (const auto& g : trace) {
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_GE(g.lambda[b], -1e-15);
      EXPECT_LE(g.lambda[b], 1.0 + 1e-15);
      EXPECT_GE(g.loss[b], -1e-15);
      acc += g.loss[b];
    }
  }
  EXPECT_NEAR(total, acc / 3.0, 1e-12);
}

TEST(PcdLoss, ZeroAlphaIsCrossEntropy) {
  std::mt19937_64 rng(21);
  auto batch = random_batch(rng, 4, 8);
  PcdConfig cfg;
  cfg.alpha = 0.0;
  EXPECT_EQ(pcd_loss(batch, cfg).item(), cross_entropy(batch.student, batch.labels).item());
}

TEST(PcdLoss, IdenticalLogitsLeaveCrossEntropyOnly) {
  std::mt19937_64 rng(22);
  const auto z = uniform_values(rng, 24);
  auto batch = make_batch(3, 8, z, z, {1, 2, 3});
  PcdConfig cfg;
  std::vector<GroupTrace> trace;
  const auto terms = pcd_loss_terms(batch, cfg, &trace);
  EXPECT_EQ(terms.f2cl.item(), 0.0);
  EXPECT_EQ(terms.c2fl.item(), 0.0);
  EXPECT_EQ(terms.total.item(), terms.ce.item());
  for (const auto& g : trace) {
    for (double l : g.lambda) EXPECT_NEAR(l, 0.0, 1e-12);
  }
}

TEST(PcdLoss, MatchesCompositeOracle) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    auto batch = random_batch(rng, 1 + trial % 4, 3 + trial % 8);
    PcdConfig cfg;
    cfg.stages = 1 + trial % 3;
    cfg.alpha = 0.5 + trial % 3;
    cfg.tau = 1.0 + trial % 5;
    const auto ref = oracle::oracle_pcd_loss(to_matrix(batch.teacher), to_matrix(batch.student),
                                             batch.labels, to_oracle(cfg));
    EXPECT_NEAR(pcd_loss(batch, cfg).item(), ref.value, 1e-9);
  }
}

TEST(PcdLoss, NeedsADirection) {
  std::mt19937_64 rng(24);
  auto batch = random_batch(rng, 2, 4);
  PcdConfig cfg;
  cfg.use_f2cl = cfg.use_c2fl = false;
  EXPECT_THROW(pcd_loss(batch, cfg), ConfigError);
  EXPECT_THROW(cfg.validate(4), ConfigError);
}

TEST(PcdLoss, TeacherReceivesNoGradient) {
  std::mt19937_64 rng(25);
  auto batch = random_batch(rng, 2, 6, true);
  batch.teacher = Tensor::from({2, 6}, uniform_values(rng, 12), true);
  pcd_loss(batch, PcdConfig{}).backward();
  EXPECT_FALSE(batch.teacher.has_grad());
  for (double g : batch.student.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(PcdLoss, StudentGradientMatchesOracleDifferences) {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 5; ++trial) {
    auto batch = random_batch(rng, 2, 6, true);
    PcdConfig cfg;
    pcd_loss(batch, cfg).backward();
    const auto ref = oracle::oracle_pcd_loss(to_matrix(batch.teacher), to_matrix(batch.student),
                                             batch.labels, to_oracle(cfg), true);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t c = 0; c < 6; ++c) {
        EXPECT_LT(pcd::testing::rel_err(batch.student.grad()[b * 6 + c], (*ref.grad_student)[b][c]),
                  1e-4);
      }
    }
  }
}

TEST(PcdLoss, PermutationEquivariance) {
  std::mt19937_64 rng(27);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t rows = 3, cols = 7;
    auto batch = random_batch(rng, rows, cols);
    std::vector<std::size_t> perm(cols);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> t(rows * cols), s(rows * cols);
    std::vector<std::size_t> labels(rows);
    for (std::size_t b = 0; b < rows; ++b) {
      for (std::size_t c = 0; c < cols; ++c) {
        t[b * cols + perm[c]] = batch.teacher.at(b, c);
        s[b * cols + perm[c]] = batch.student.at(b, c);
      }
      labels[b] = perm[batch.labels[b]];
    }
    auto permuted = make_batch(rows, cols, t, s, labels);
    PcdConfig cfg;
    EXPECT_NEAR(pcd_loss(batch, cfg).item(), pcd_loss(permuted, cfg).item(), 1e-10);
  }
}

TEST(Objective, DispatchesOnMethod) {
  std::mt19937_64 rng(28);
  auto batch = random_batch(rng, 3, 5);
  PcdConfig cfg;
  cfg.method = Method::ce;
  EXPECT_EQ(objective(batch, cfg).item(), cross_entropy(batch.student, batch.labels).item());
  cfg.method = Method::kd;
  EXPECT_EQ(objective(batch, cfg).item(),
            vanilla_kd_loss(batch, cfg.tau, cfg.kd_alpha_ce, cfg.kd_beta).item());
  cfg.method = Method::pcd;
  EXPECT_EQ(objective(batch, cfg).item(), pcd_loss(batch, cfg).item());
}

TEST(LogitBatch, Validation) {
  EXPECT_THROW(make_batch(1, 1, {0}, {0}, {0}).validate(), DimensionError);
  LogitBatch mismatched{Tensor::zeros({2, 3}), Tensor::zeros({3, 2}), {0, 0}};
  EXPECT_THROW(mismatched.validate(), DimensionError);
  EXPECT_THROW(make_batch(1, 2, {0, 0}, {0, 0}, {0, 1}).validate(), DimensionError);
}

// With every stage summed each step, the two directions visit the same
// multiset of group sizes (ceil(C/k) for k = 1..S), only in reverse order.
TEST(PcdLoss, DirectionsCoincideWhenStagesAreSummed) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t classes = 2 + rng() % 15;
    const std::size_t stages = 1 + rng() % std::min<std::size_t>(5, classes);
    auto batch = random_batch(rng, 3, classes);
    PcdConfig cfg;
    cfg.stages = stages;
    cfg.use_ldr = trial % 2 == 0;
    const auto terms = pcd_loss_terms(batch, cfg);
    EXPECT_NEAR(terms.f2cl.item(), terms.c2fl.item(), 1e-12);
    auto f = stage_group_sizes(classes, stages, Direction::fine_to_coarse);
    auto c = stage_group_sizes(classes, stages, Direction::coarse_to_fine);
    std::reverse(c.begin(), c.end());
    EXPECT_EQ(f, c);
  }
}
