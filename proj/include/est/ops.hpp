#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "est/tensor.hpp"

// Differentiable primitives. All inputs are validated and shape problems are
// reported as DimensionError naming the offending shapes.
namespace est::ops {

inline constexpr double kCosineEps = 1e-8;
inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kBceClampEps = 1e-7;

// [m x k] * [k x p] -> [m x p]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// x[m x n] + b[n] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// Numerically stable softmax along `axis`. Throws NumericError on NaN input.
Tensor softmax(const Tensor& x, std::size_t axis);

// x[. x d_in] W[d_in x d_out] + b[d_out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Per-row normalization followed by gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);

// u.v / (max(|u|, eps) * max(|v|, eps)) as a scalar tensor.
Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps = kCosineEps);
// Cosine of every row of x[J x d] against g[d]; result has shape [J].
Tensor row_cosine(const Tensor& x, const Tensor& g, double eps = kCosineEps);

// Coordinate-wise max over the rows of x[J x d]; result has shape [d].
Tensor column_max(const Tensor& x);

// x / s for a scalar tensor s. |s| below eps is replaced by eps carrying the
// sign of s.
Tensor guarded_divide(const Tensor& x, const Tensor& s, double eps = kCosineEps);

// NCHW convolution, stride 1, zero "same" padding, odd square kernel.
// weight [C_out x C_in x k x k], bias [C_out].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Non-overlapping k x k average pooling over NCHW input.
Tensor avg_pool2d(const Tensor& x, std::size_t k);

// -sum_c [y_c log p_c + (1 - y_c) log(1 - p_c)] with every log argument
// clamped to [clamp_eps, 1]. target must be one-hot.
Tensor bce_sum_loss(const Tensor& pred, std::span<const double> target, double clamp_eps = kBceClampEps);

std::vector<double> one_hot(std::size_t index, std::size_t classes);

struct Attention {
  Tensor output;   // [a x d]
  Tensor weights;  // [a x b], rows sum to one
};

// softmax(Q K^T / sqrt(d)) V
Attention scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace est::ops
