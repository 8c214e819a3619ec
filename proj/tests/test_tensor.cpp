#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "pcd/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace pcd;
using pcd::testing::max_grad_error;
using pcd::testing::uniform_values;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Affine, IdentityWeights) {
  auto x = Tensor::from({1, 2}, {1, 2});
  auto w = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2}, {0, 0});
  EXPECT_EQ(values(affine(x, w, b)), (std::vector<double>{1, 2}));
}

TEST(Affine, HandArithmetic) {
  auto out = affine(Tensor::from({1, 2}, {1, 1}), Tensor::from({2, 1}, {2, 3}),
                    Tensor::from({1}, {1}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out.item(), 6.0);
}

TEST(Affine, MatchesTripleLoop) {
  std::mt19937_64 rng(7);
  const auto xv = uniform_values(rng, 12);
  const auto wv = uniform_values(rng, 8);
  const auto bv = uniform_values(rng, 2);
  auto out = affine(Tensor::from({3, 4}, xv), Tensor::from({4, 2}, wv), Tensor::from({2}, bv));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      double acc = bv[k];
      for (std::size_t d = 0; d < 4; ++d) acc += xv[i * 4 + d] * wv[d * 2 + k];
      EXPECT_NEAR(out.at(i, k), acc, 1e-12);
    }
  }
}

TEST(Affine, ShapeMismatchNamesBothShapes) {
  try {
    affine(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}), Tensor::zeros({2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
}

TEST(Affine, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto xv = uniform_values(rng, 6);
  const auto wv = uniform_values(rng, 12);
  const auto bv = uniform_values(rng, 4);
  auto w = Tensor::from({3, 4}, wv);
  auto b = Tensor::from({4}, bv);
  EXPECT_LT(max_grad_error({2, 3}, xv,
                           [&](const Tensor& x) { return sum(mul(affine(x, w, b), affine(x, w, b))); }),
            1e-6);
  auto x = Tensor::from({2, 3}, xv);
  EXPECT_LT(max_grad_error({3, 4}, wv,
                           [&](const Tensor& wl) { return sum(relu(affine(x, wl, b))); }),
            1e-6);
  EXPECT_LT(max_grad_error({4}, bv,
                           [&](const Tensor& bl) {
                             auto y = affine(x, w, bl);
                             return sum(mul(y, y));
                           }),
            1e-6);
}

TEST(Relu, Values) {
  EXPECT_EQ(values(relu(Tensor::from({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
}

TEST(Relu, AllNegativeGivesZeroOutputAndGradient) {
  auto x = Tensor::from({4}, {-1, -2, -0.5, -3}, true);
  auto y = relu(x);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  sum(y).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Relu, SubgradientAtZeroIsZero) {
  auto x = Tensor::from({1}, {0.0}, true);
  sum(relu(x)).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Relu, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto xv = uniform_values(rng, 10);
  EXPECT_LT(max_grad_error({10}, xv,
                           [](const Tensor& x) {
                             auto r = relu(x);
                             return sum(mul(r, r));
                           }),
            1e-6);
}

TEST(MaskedSoftmax, SymmetricSubset) {
  Mask mask(1, 4);
  mask.set(0, 0);
  mask.set(0, 1);
  auto y = masked_softmax_temp(Tensor::from({1, 4}, {1, 1, 1, 1}), mask, 1.0);
  EXPECT_EQ(values(y), (std::vector<double>{0.5, 0.5, 0.0, 0.0}));
}

TEST(MaskedSoftmax, HighTemperatureApproachesUniform) {
  auto y = masked_softmax_temp(Tensor::from({1, 2}, {2, 0}), Mask::full(1, 2), 1e6);
  EXPECT_NEAR(y.at(0), 0.5, 1e-6);
  EXPECT_NEAR(y.at(1), 0.5, 1e-6);
}

TEST(MaskedSoftmax, TwoClassValue) {
  auto y = masked_softmax_temp(Tensor::from({1, 2}, {1, 0}), Mask::full(1, 2), 1.0);
  const double oracle = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(y.at(0), oracle, 1e-15);
  EXPECT_NEAR(y.at(0), 0.7311, 1e-4);
  EXPECT_NEAR(y.at(1), 0.2689, 1e-4);
}

TEST(MaskedSoftmax, RowsSumToOneAndMaskedOutIsExactlyZero) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + trial % 4, cols = 2 + trial % 9;
    Mask mask(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      mask.set(r, rng() % cols);
      for (std::size_t c = 0; c < cols; ++c) {
        if (coin(rng)) mask.set(r, c);
      }
    }
    const double tau = 0.25 + 0.5 * (trial % 8);
    auto y = masked_softmax_temp(Tensor::from({rows, cols}, uniform_values(rng, rows * cols)),
                                 mask, tau);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        if (mask(r, c)) {
          total += y.at(r, c);
        } else {
          EXPECT_EQ(y.at(r, c), 0.0);
        }
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(MaskedSoftmax, ExtremeLogitsStayFinite) {
  auto y = masked_softmax_temp(Tensor::from({1, 3}, {1000, -1000, 999}), Mask::full(1, 3), 0.1);
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  auto l = masked_log_softmax_temp(Tensor::from({1, 3}, {1000, -1000, 999}), Mask::full(1, 3), 0.1);
  for (double v : l.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(MaskedSoftmax, Errors) {
  auto z = Tensor::from({2, 2}, {1, 2, 3, 4});
  Mask partial(2, 2);
  partial.set(0, 0);
  EXPECT_THROW(masked_softmax_temp(z, partial, 1.0), DegenerateGroupError);
  EXPECT_THROW(masked_softmax_temp(z, Mask::full(2, 2), 0.0), ParameterError);
  EXPECT_THROW(masked_softmax_temp(z, Mask::full(2, 2), -1.0), ParameterError);
  EXPECT_THROW(masked_softmax_temp(z, Mask::full(2, 3), 1.0), DimensionError);
}

TEST(MaskedSoftmax, GradientOnlyThroughMaskedIn) {
  Mask mask(2, 4);
  mask.set(0, 1);
  mask.set(0, 3);
  mask.set(1, 0);
  mask.set(1, 1);
  mask.set(1, 2);
  std::mt19937_64 rng(9);
  const auto zv = uniform_values(rng, 8);
  const auto wv = uniform_values(rng, 8);
  auto weights = Tensor::from({2, 4}, wv);
  auto build = [&](const Tensor& z) { return sum(mul(masked_softmax_temp(z, mask, 0.7), weights)); };
  EXPECT_LT(max_grad_error({2, 4}, zv, build), 1e-4);
  auto z = Tensor::from({2, 4}, zv, true);
  build(z).backward();
  EXPECT_EQ(z.grad()[0], 0.0);
  EXPECT_EQ(z.grad()[2], 0.0);
  EXPECT_EQ(z.grad()[7], 0.0);
}

TEST(MaskedLogSoftmax, MatchesLogOfSoftmaxAndGradient) {
  Mask mask(1, 5);
  mask.set(0, 0);
  mask.set(0, 2);
  mask.set(0, 4);
  std::mt19937_64 rng(13);
  const auto zv = uniform_values(rng, 5);
  auto z = Tensor::from({1, 5}, zv);
  auto p = masked_softmax_temp(z, mask, 2.0);
  auto l = masked_log_softmax_temp(z, mask, 2.0);
  for (std::size_t c = 0; c < 5; ++c) {
    if (mask(0, c)) {
      EXPECT_NEAR(l.at(c), std::log(p.at(c)), 1e-14);
    } else {
      EXPECT_EQ(l.at(c), 0.0);
    }
  }
  auto weights = Tensor::from({1, 5}, uniform_values(rng, 5));
  EXPECT_LT(max_grad_error({1, 5}, zv,
                           [&](const Tensor& zl) {
                             return sum(mul(masked_log_softmax_temp(zl, mask, 2.0), weights));
                           }),
            1e-6);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesX) {
  auto x = Tensor::from({4}, {0.5, -1.5, 2.0, 3.25}, true);
  scale(sum(mul(x, x)), 0.5).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], x.data()[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  EXPECT_THROW(relu(x).backward(), ContractError);
}

TEST(Backward, AccumulatesUntilZeroed) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto loss = sum(x);
  loss.backward();
  loss.backward();
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  loss.backward();
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  auto x = Tensor::from({1}, {3.0}, true);
  auto y = mul(x, x);
  add(y, y).backward();  // d(2x^2)/dx = 4x
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(ComputeGraph, TopologicalOrderVisitsEachNodeOnce) {
  auto x = Tensor::from({2, 2}, {1, -2, 3, 0.5}, true);
  auto w = Tensor::from({2, 2}, {0.1, 0.2, 0.3, 0.4}, true);
  auto b = Tensor::from({2}, {0, 1});
  auto h = relu(affine(x, w, b));
  auto loss = sum(add(h, mul(h, h)));
  ComputeGraph graph(loss);
  EXPECT_EQ(graph.position(loss), static_cast<std::ptrdiff_t>(graph.size()) - 1);
  EXPECT_EQ(graph.position(b), -1);  // constants are not part of the graph
  std::set<const detail::Node*> seen;
  for (detail::Node* n : graph.nodes()) {
    EXPECT_TRUE(seen.insert(n).second);
    for (const auto& in : n->inputs) {
      if (in->requires_grad) {
        EXPECT_TRUE(seen.count(in.get())) << n->op;
      }
    }
  }
  EXPECT_EQ(graph.size(), 7u);  // x, w, affine, relu, mul, add, sum
}

TEST(Backward, RandomCompositesMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t rows = 1 + trial % 3, cols = 2 + trial % 5;
    const auto zv = uniform_values(rng, rows * cols);
    // Moderate weights keep the softmaxes out of saturation, where gradients
    // fall below the finite-difference noise floor.
    const auto wv = uniform_values(rng, cols * cols, -0.5, 0.5);
    auto w = Tensor::from({cols, cols}, wv);
    auto b = Tensor::from({cols}, uniform_values(rng, cols));
    Mask mask(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (c == r % cols || rng() % 2) mask.set(r, c);
      }
    }
    auto build = [&](const Tensor& z) {
      auto h = affine(z, w, b);
      auto p = masked_softmax_temp(h, mask, 1.5);
      auto lp = masked_log_softmax_temp(relu(h), mask, 0.8);
      auto cos = div(row_dot(p, p), add_scalar(sqrt(row_dot(lp, lp)), 1.0));
      return add(mean(cos), scale(sum(sub(p, lp)), 0.3));
    };
    EXPECT_LT(max_grad_error({rows, cols}, zv, build), 1e-4) << "trial " << trial;
  }
}

TEST(Tensor, ForwardIsDeterministic) {
  std::mt19937_64 rng(1);
  const auto zv = uniform_values(rng, 40);
  auto run = [&] {
    auto z = Tensor::from({4, 10}, zv);
    return values(masked_log_softmax_temp(z, Mask::full(4, 10), 0.3));
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, ShapeValidation) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::from({0, 2}, {}), DimensionError);
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  EXPECT_THROW(Tensor::zeros({2}).item(), ContractError);
}
