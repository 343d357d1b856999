#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "est/errors.hpp"
#include "est/gradcheck.hpp"
#include "est/ops.hpp"
#include "test_util.hpp"

namespace est {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

TEST(Matmul, Examples) {
  Tensor b = Tensor::matrix(2, 2, {3, 4, 5, 6});
  EXPECT_EQ(ops::matmul(Tensor::matrix(2, 2, {1, 0, 0, 1}), b).to_vector(), b.to_vector());
  EXPECT_DOUBLE_EQ(ops::matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4})).item(), 11.0);
  for (double v : ops::matmul(Tensor::zeros({2, 2}), b).to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, AgreesWithTripleLoop) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor a = random_tensor(rng, {5, 5}, false, -2, 2);
    Tensor b = random_tensor(rng, {5, 5}, false, -2, 2);
    auto oracle = testing::naive_matmul(testing::to_matrix(a), testing::to_matrix(b));
    EXPECT_LE(max_abs_diff(testing::to_matrix(ops::matmul(a, b)), oracle), 1e-12);
  }
}

TEST(Softmax, Examples) {
  EXPECT_DOUBLE_EQ(ops::softmax(Tensor::matrix(1, 1, {4.2}), 1).item(), 1.0);
  for (double v : ops::softmax(Tensor::matrix(1, 3, {0, 0, 0}), 1).to_vector()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const auto p = ops::softmax(Tensor::matrix(1, 3, {1, 2, 3}), 1).to_vector();
  const auto oracle = testing::naive_softmax({1, 2, 3});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], oracle[i], 1e-15);
  EXPECT_NEAR(p[0], 0.09003, 5e-6);
  EXPECT_NEAR(p[1], 0.24473, 5e-6);
  EXPECT_NEAR(p[2], 0.66524, 5e-6);
}

TEST(Softmax, AxisZeroNormalizesColumns) {
  Rng rng(5);
  Tensor x = random_tensor(rng, {4, 3}, false, -5, 5);
  Tensor s = ops::softmax(x, 0);
  for (std::size_t c = 0; c < 3; ++c) {
    double total = 0;
    for (std::size_t r = 0; r < 4; ++r) total += s.at(r, c);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, StableForLargeLogits) {
  const auto p = ops::softmax(Tensor::matrix(1, 2, {1000.0, 1000.0}), 1).to_vector();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, NanInputThrows) {
  EXPECT_THROW(ops::softmax(Tensor::matrix(1, 2, {1.0, std::nan("")}), 1), NumericError);
}

TEST(Softmax, BadAxisThrows) { EXPECT_THROW(ops::softmax(Tensor::zeros({2, 2}), 2), DimensionError); }

TEST(Softmax, SlicesSumToOne) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.uniform_index(4), cols = 1 + rng.uniform_index(8);
    Tensor s = ops::softmax(random_tensor(rng, {rows, cols}, false, -30, 30), 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < cols; ++c) total += s.at(r, c);
      ASSERT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Attention, SingleKeyCopiesValue) {
  Rng rng(2);
  Tensor q = random_tensor(rng, {3, 4}), k = random_tensor(rng, {1, 4}), v = random_tensor(rng, {1, 4});
  auto out = ops::scaled_dot_attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(out.output.at(i, c), v.at(0, c));
}

TEST(Attention, IdenticalKeysAverageValues) {
  Rng rng(3);
  Tensor q = random_tensor(rng, {2, 3});
  Tensor k = Tensor::matrix(3, 3, {1, 2, 3, 1, 2, 3, 1, 2, 3});
  Tensor v = random_tensor(rng, {3, 3});
  auto out = ops::scaled_dot_attention(q, k, v);
  for (std::size_t c = 0; c < 3; ++c) {
    const double mean = (v.at(0, c) + v.at(1, c) + v.at(2, c)) / 3.0;
    EXPECT_NEAR(out.output.at(0, c), mean, 1e-15);
    EXPECT_NEAR(out.output.at(1, c), mean, 1e-15);
  }
}

TEST(Attention, IdentityInputs) {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto out = ops::scaled_dot_attention(eye, eye, eye);
  const auto w = testing::naive_softmax({1.0 / std::sqrt(2.0), 0.0});
  EXPECT_NEAR(out.weights.at(0, 0), w[0], 1e-15);
  EXPECT_NEAR(out.weights.at(0, 1), w[1], 1e-15);
  EXPECT_NEAR(out.output.at(0, 0), 0.66976, 5e-6);
  EXPECT_NEAR(out.output.at(0, 1), 0.33024, 5e-6);
}

TEST(Attention, WidthMismatchThrows) {
  EXPECT_THROW(ops::scaled_dot_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 4})),
               DimensionError);
  EXPECT_THROW(ops::scaled_dot_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), Tensor::zeros({3, 3})),
               DimensionError);
}

TEST(Attention, MatchesOracleAndStaysInsideValueHull) {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t a = 1 + rng.uniform_index(4), b = 1 + rng.uniform_index(5), d = 1 + rng.uniform_index(6);
    Tensor q = random_tensor(rng, {a, d}, false, -3, 3);
    Tensor k = random_tensor(rng, {b, d}, false, -3, 3);
    Tensor v = random_tensor(rng, {b, d}, false, -3, 3);
    auto out = ops::scaled_dot_attention(q, k, v);
    auto oracle = testing::naive_attention(testing::to_matrix(q), testing::to_matrix(k), testing::to_matrix(v));
    ASSERT_LE(max_abs_diff(testing::to_matrix(out.output), oracle), 1e-9);
    for (std::size_t c = 0; c < d; ++c) {
      double lo = v.at(0, c), hi = v.at(0, c);
      for (std::size_t j = 1; j < b; ++j) lo = std::min(lo, v.at(j, c)), hi = std::max(hi, v.at(j, c));
      for (std::size_t i = 0; i < a; ++i) {
        ASSERT_GE(out.output.at(i, c), lo - 1e-9);
        ASSERT_LE(out.output.at(i, c), hi + 1e-9);
      }
    }
  }
}

TEST(Linear, Examples) {
  Rng rng(8);
  Tensor x = random_tensor(rng, {3, 2});
  EXPECT_EQ(ops::linear(x, Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::zeros({2})).to_vector(), x.to_vector());
  Tensor y = ops::linear(Tensor::matrix(1, 2, {1, 1}), Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::vector({0, 1}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{4, 7}));
  Tensor z = ops::linear(Tensor::zeros({3, 2}), random_tensor(rng, {2, 2}), Tensor::vector({0.5, -1.5}));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(z.at(r, 0), 0.5);
    EXPECT_EQ(z.at(r, 1), -1.5);
  }
  EXPECT_THROW(ops::linear(Tensor::zeros({1, 3}), Tensor::zeros({2, 2}), Tensor::zeros({2})), DimensionError);
  EXPECT_THROW(ops::linear(Tensor::zeros({1, 2}), Tensor::zeros({2, 2}), Tensor::zeros({3})), DimensionError);
}

TEST(LayerNorm, Examples) {
  Tensor ones = Tensor::vector({1, 1}), zeros = Tensor::vector({0, 0});
  for (double v : ops::layer_norm(Tensor::matrix(1, 2, {5, 5}), ones, zeros).to_vector()) EXPECT_EQ(v, 0.0);
  auto y = ops::layer_norm(Tensor::matrix(1, 2, {1, 3}), ones, zeros, 1e-12).to_vector();
  EXPECT_NEAR(y[0], -1.0, 1e-11);
  EXPECT_NEAR(y[1], 1.0, 1e-11);
  Tensor beta = Tensor::vector({0.25, -2});
  auto z = ops::layer_norm(Tensor::matrix(2, 2, {1, 9, -4, 3}), zeros, beta);
  EXPECT_EQ(z.to_vector(), (std::vector<double>{0.25, -2, 0.25, -2}));
  EXPECT_THROW(ops::layer_norm(Tensor::zeros({1, 2}), ones, zeros, 0.0), ValidationError);
}

TEST(LayerNorm, MatchesOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.uniform_index(3), d = 2 + rng.uniform_index(6);
    Tensor x = random_tensor(rng, {rows, d}, false, -4, 4);
    Tensor g = random_tensor(rng, {d}), b = random_tensor(rng, {d});
    Tensor y = ops::layer_norm(x, g, b);
    for (std::size_t r = 0; r < rows; ++r) {
      long double mean = 0, var = 0;
      for (std::size_t c = 0; c < d; ++c) mean += x.at(r, c);
      mean /= d;
      for (std::size_t c = 0; c < d; ++c) var += (x.at(r, c) - mean) * (x.at(r, c) - mean);
      var /= d;
      for (std::size_t c = 0; c < d; ++c) {
        const double expect =
            static_cast<double>((x.at(r, c) - mean) / std::sqrt(var + ops::kLayerNormEps)) * g.at(c) + b.at(c);
        ASSERT_NEAR(y.at(r, c), expect, 1e-12);
      }
    }
  }
}

TEST(Cosine, Examples) {
  Tensor v = Tensor::vector({0.3, -2.0, 5.0});
  EXPECT_NEAR(ops::cosine_similarity(v, v).item(), 1.0, 1e-15);
  EXPECT_EQ(ops::cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item(), 0.0);
  EXPECT_NEAR(ops::cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({1, 1})).item(), 0.70711, 5e-6);
  EXPECT_EQ(ops::cosine_similarity(Tensor::zeros({3}), v).item(), 0.0);
  EXPECT_THROW(ops::cosine_similarity(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST(Cosine, BoundedScaleInvariantAndMatchesOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.uniform_index(8);
    auto u = testing::random_values(rng, d, -3, 3), w = testing::random_values(rng, d, -3, 3);
    long double dot = 0, nu = 0, nw = 0;
    for (std::size_t i = 0; i < d; ++i) dot += u[i] * w[i], nu += u[i] * u[i], nw += w[i] * w[i];
    const double oracle = static_cast<double>(dot / (std::sqrt(nu) * std::sqrt(nw)));
    const double c = ops::cosine_similarity(Tensor::vector(u), Tensor::vector(w)).item();
    ASSERT_NEAR(c, oracle, 1e-12);
    ASSERT_GE(c, -1.0);
    ASSERT_LE(c, 1.0);
    const double s = rng.uniform(0.01, 100.0);
    auto us = u;
    for (auto& x : us) x *= s;
    ASSERT_NEAR(ops::cosine_similarity(Tensor::vector(us), Tensor::vector(w)).item(), c, 1e-9);
  }
}

TEST(Bce, Examples) {
  EXPECT_EQ(ops::bce_sum_loss(Tensor::vector({0, 1, 0}), ops::one_hot(1, 3)).item(), 0.0);
  for (std::size_t classes : {6u, 7u, 10u}) {
    const double p = 1.0 / classes;
    const double oracle = -(std::log(p) + (classes - 1) * std::log(1 - p));
    Tensor pred = Tensor::full({classes}, p);
    EXPECT_NEAR(ops::bce_sum_loss(pred, ops::one_hot(0, classes)).item(), oracle, 1e-12) << classes;
  }
  EXPECT_NEAR(ops::bce_sum_loss(Tensor::full({6}, 1.0 / 6), ops::one_hot(2, 6)).item(), 2.70337, 5e-6);
  EXPECT_THROW(ops::bce_sum_loss(Tensor::full({3}, 0.3), std::vector<double>{1, 1, 0}), ValidationError);
  EXPECT_THROW(ops::bce_sum_loss(Tensor::full({3}, 0.3), std::vector<double>{0.5, 0.5, 0}), ValidationError);
  EXPECT_THROW(ops::bce_sum_loss(Tensor::full({3}, 0.3), ops::one_hot(0, 4)), DimensionError);
}

TEST(Bce, NonnegativeAndZeroOnlyAtTarget) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 2 + rng.uniform_index(8);
    Tensor pred = ops::softmax(random_tensor(rng, {1, c}, false, -6, 6), 1);
    const std::size_t label = rng.uniform_index(c);
    const auto target = ops::one_hot(label, c);
    long double oracle = 0;
    for (std::size_t i = 0; i < c; ++i) {
      const long double q = std::clamp(pred.at(0, i), ops::kBceClampEps, 1.0);
      const long double r = std::clamp(1.0 - pred.at(0, i), ops::kBceClampEps, 1.0);
      oracle -= target[i] * std::log(q) + (1 - target[i]) * std::log(r);
    }
    const double loss = ops::bce_sum_loss(ops::reshape(pred, {c}), target).item();
    ASSERT_NEAR(loss, static_cast<double>(oracle), 1e-12);
    ASSERT_GT(loss, 0.0);
  }
}

TEST(Bce, ClampKeepsSaturatedPredictionsFinite) {
  const double loss = ops::bce_sum_loss(Tensor::vector({1, 0}), ops::one_hot(1, 2)).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, -2 * std::log(ops::kBceClampEps), 1e-9);
}

TEST(Aggregation, ColumnMaxAndRowCosine) {
  Tensor x = Tensor::matrix(2, 2, {1, 0, 0, 1});
  EXPECT_EQ(ops::column_max(x).to_vector(), (std::vector<double>{1, 1}));
  auto alpha = ops::row_cosine(x, Tensor::vector({1, 1})).to_vector();
  EXPECT_NEAR(alpha[0], 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(alpha[1], 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(alpha[0], 0.70711, 5e-6);
}

TEST(GuardedDivide, KeepsSignOfTinyDenominator) {
  auto pos = ops::guarded_divide(Tensor::vector({1}), Tensor::scalar(1e-20)).item();
  auto neg = ops::guarded_divide(Tensor::vector({1}), Tensor::scalar(-1e-20)).item();
  EXPECT_DOUBLE_EQ(pos, 1e8);
  EXPECT_DOUBLE_EQ(neg, -1e8);
}

TEST(Conv, MatchesDirectLoop) {
  Rng rng(13);
  Tensor x = random_tensor(rng, {2, 2, 5, 4});
  Tensor w = random_tensor(rng, {3, 2, 3, 3});
  Tensor b = random_tensor(rng, {3});
  Tensor y = ops::conv2d(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 5, 4}));
  auto X = [&](std::size_t n, std::size_t c, long h, long ww) -> double {
    if (h < 0 || ww < 0 || h >= 5 || ww >= 4) return 0.0;
    return x.data()[((n * 2 + c) * 5 + h) * 4 + ww];
  };
  double worst = 0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (long h = 0; h < 5; ++h)
        for (long ww = 0; ww < 4; ++ww) {
          double s = b.at(o);
          for (std::size_t c = 0; c < 2; ++c)
            for (long i = 0; i < 3; ++i)
              for (long j = 0; j < 3; ++j) s += w.data()[((o * 2 + c) * 3 + i) * 3 + j] * X(n, c, h + i - 1, ww + j - 1);
          worst = std::max(worst, std::fabs(s - y.data()[((n * 3 + o) * 5 + h) * 4 + ww]));
        }
  EXPECT_LE(worst, 1e-12);
}

TEST(Pool, AveragesBlocks) {
  Tensor x({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_EQ(ops::avg_pool2d(x, 2).to_vector(), (std::vector<double>{3.5, 5.5}));
  EXPECT_THROW(ops::avg_pool2d(Tensor::zeros({1, 1, 3, 4}), 2), DimensionError);
}

// Every primitive's backward against central differences, one leaf at a time.
class PrimitiveGradient : public ::testing::Test {
 protected:
  void check(const std::function<Tensor()>& f, std::initializer_list<Tensor> leaves) {
    std::vector<Tensor> v(leaves);
    const GradCheckReport r = gradcheck(f, v, 1e-5, 1e-6);
    EXPECT_TRUE(r.pass) << "worst " << r.worst_parameter << " at " << r.max_relative_error;
    EXPECT_GT(r.elements_checked, 0u);
  }
  Rng rng{21};
  Tensor leaf(Shape s, double lo = -1, double hi = 1) { return random_tensor(rng, std::move(s), true, lo, hi); }
  // Random projection so every output element influences the scalar loss.
  Tensor probe(const Tensor& y) {
    if (!mix_.defined() || mix_.shape() != y.shape()) mix_ = random_tensor(rng, y.shape(), false);
    return ops::sum(ops::mul(y, mix_));
  }
  Tensor mix_;
};

TEST_F(PrimitiveGradient, Matmul) {
  Tensor a = leaf({3, 4}), b = leaf({4, 2});
  check([&] { return probe(ops::matmul(a, b)); }, {a, b});
}

TEST_F(PrimitiveGradient, Elementwise) {
  Tensor a = leaf({2, 3}), b = leaf({2, 3}), bias = leaf({3});
  check([&] { return probe(ops::add(a, b)); }, {a, b});
  check([&] { return probe(ops::sub(a, b)); }, {a, b});
  check([&] { return probe(ops::mul(a, b)); }, {a, b});
  check([&] { return probe(ops::scale(a, -1.7)); }, {a});
  check([&] { return probe(ops::add_scalar(a, 0.3)); }, {a});
  check([&] { return probe(ops::add_row_bias(a, bias)); }, {a, bias});
  check([&] { return probe(ops::transpose(a)); }, {a});
  check([&] { return probe(ops::reshape(a, {3, 2})); }, {a});
}

TEST_F(PrimitiveGradient, Relu) {
  // Keep values away from the kink.
  Tensor a({2, 3}, {-0.8, 0.5, 0.9, -0.3, 0.2, -0.6}, true);
  check([&] { return probe(ops::relu(a)); }, {a});
}

TEST_F(PrimitiveGradient, SliceAndConcat) {
  Tensor a = leaf({4, 3}), b = leaf({2, 3}), c = leaf({4, 2});
  check([&] { return probe(ops::slice_rows(a, 1, 2)); }, {a});
  check([&] { return probe(ops::slice_cols(a, 1, 2)); }, {a});
  check(
      [&] {
        std::vector<Tensor> parts{a, b};
        return probe(ops::concat_rows(parts));
      },
      {a, b});
  check(
      [&] {
        std::vector<Tensor> parts{a, c};
        return probe(ops::concat_cols(parts));
      },
      {a, c});
}

TEST_F(PrimitiveGradient, SoftmaxBothAxes) {
  Tensor a = leaf({3, 4}, -2, 2);
  check([&] { return probe(ops::softmax(a, 1)); }, {a});
  check([&] { return probe(ops::softmax(a, 0)); }, {a});
}

TEST_F(PrimitiveGradient, LinearAndLayerNorm) {
  Tensor x = leaf({3, 4}), w = leaf({4, 2}), b = leaf({2}), g = leaf({4}), beta = leaf({4});
  check([&] { return probe(ops::linear(x, w, b)); }, {x, w, b});
  check([&] { return probe(ops::layer_norm(x, g, beta)); }, {x, g, beta});
}

TEST_F(PrimitiveGradient, CosineFamily) {
  Tensor u = leaf({5}), v = leaf({5}), rows = leaf({3, 5});
  check([&] { return ops::cosine_similarity(u, v); }, {u, v});
  check([&] { return probe(ops::row_cosine(rows, v)); }, {rows, v});
  check([&] { return probe(ops::guarded_divide(rows, ops::sum(u))); }, {rows, u});
}

TEST_F(PrimitiveGradient, ColumnMax) {
  // Distinct entries so the argmax is stable under the probe step.
  Tensor x({3, 2}, {0.1, 0.9, 0.7, -0.4, -0.2, 0.3}, true);
  check([&] { return probe(ops::column_max(x)); }, {x});
}

TEST_F(PrimitiveGradient, ConvAndPool) {
  Tensor x = leaf({1, 2, 4, 4}), w = leaf({2, 2, 3, 3}), b = leaf({2});
  check([&] { return probe(ops::conv2d(x, w, b)); }, {x, w, b});
  check([&] { return probe(ops::avg_pool2d(x, 2)); }, {x});
}

TEST_F(PrimitiveGradient, AttentionAndBce) {
  Tensor q = leaf({2, 3}), k = leaf({4, 3}), v = leaf({4, 3});
  check([&] { return probe(ops::scaled_dot_attention(q, k, v).output); }, {q, k, v});
  Tensor logits = leaf({1, 5}, -2, 2);
  const auto target = ops::one_hot(3, 5);
  check([&] { return ops::bce_sum_loss(ops::reshape(ops::softmax(logits, 1), {5}), target); }, {logits});
}

}  // namespace
}  // namespace est
