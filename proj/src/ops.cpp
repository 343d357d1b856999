#include "est/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "est/errors.hpp"

namespace est::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

// C[m x p] (+)= A[m x k] B[k x p]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      if (av == 0.0) continue;
      const double* brow = b + t * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += G[m x p] B[k x p]^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * p;
    for (std::size_t t = 0; t < k; ++t) {
      const double* brow = b + t * p;
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
      c[i * k + t] += acc;
    }
  }
}

// C[k x p] += A[m x k]^T G[m x p]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * p;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      if (av == 0.0) continue;
      double* crow = c + t * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<double> out(m * p, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, p);
  MacCounter::add(static_cast<std::uint64_t>(m) * k * p);
  return Tensor::from_op({m, p}, std::move(out), "matmul", {a, b},
                         [m, k, p](const detail::Node& self, std::span<const double> g, auto pg) {
                           const double* av = self.parents[0]->data.data();
                           const double* bv = self.parents[1]->data.data();
                           if (!pg[0].empty()) gemm_nt(g.data(), bv, pg[0].data(), m, k, p);
                           if (!pg[1].empty()) gemm_tn(av, g.data(), pg[1].data(), m, k, p);
                         });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto in = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return Tensor::from_op({n, m}, std::move(out), "transpose", {a},
                         [m, n](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) pg[0][i * n + j] += g[j * m + i];
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor::from_op(a.shape(), std::move(out), "add", {a, b},
                         [](const detail::Node&, std::span<const double> g, auto pg) {
                           for (auto& dst : pg) {
                             if (dst.empty()) continue;
                             for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                           }
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor::from_op(a.shape(), std::move(out), "sub", {a, b},
                         [](const detail::Node&, std::span<const double> g, auto pg) {
                           if (!pg[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                           if (!pg[1].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) pg[1][i] -= g[i];
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::from_op(a.shape(), std::move(out), "mul", {a, b},
                         [](const detail::Node& self, std::span<const double> g, auto pg) {
                           const auto& x = self.parents[0]->data;
                           const auto& y = self.parents[1]->data;
                           if (!pg[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * y[i];
                           if (!pg[1].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) pg[1][i] += g[i] * x[i];
                         });
}

Tensor scale(const Tensor& a, double factor) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return Tensor::from_op(a.shape(), std::move(out), "scale", {a},
                         [factor](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * factor;
                         });
}

Tensor add_scalar(const Tensor& a, double value) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + value;
  return Tensor::from_op(a.shape(), std::move(out), "add_scalar", {a},
                         [](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                         });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n || bias.rank() > 2 || (bias.rank() == 2 && bias.dim(0) != 1)) {
    throw DimensionError("add_row_bias: bias " + to_string(bias.shape()) + " does not match rows of " +
                         to_string(x.shape()));
  }
  auto xv = x.data();
  auto bv = bias.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  return Tensor::from_op(x.shape(), std::move(out), "add_row_bias", {x, bias},
                         [m, n](const detail::Node&, std::span<const double> g, auto pg) {
                           if (!pg[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                           if (!pg[1].empty())
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) pg[1][j] += g[i * n + j];
                         });
}

Tensor relu(const Tensor& x) {
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), "relu", {x},
                         [](const detail::Node& self, std::span<const double> g, auto pg) {
                           const auto& in = self.parents[0]->data;
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (in[i] > 0.0) pg[0][i] += g[i];
                         });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::from_op({}, {total}, "sum", {x}, [](const detail::Node&, std::span<const double> g, auto pg) {
    for (auto& v : pg[0]) v += g[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return Tensor::from_op(std::move(shape), x.to_vector(), "reshape", {x},
                         [](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                         });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  const std::size_t cols = x.dim(1);
  if (begin + count > x.dim(0) || count == 0) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + to_string(x.shape()));
  }
  auto xv = x.data();
  std::vector<double> out(xv.begin() + begin * cols, xv.begin() + (begin + count) * cols);
  return Tensor::from_op({count, cols}, std::move(out), "slice_rows", {x},
                         [begin, cols](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t i = 0; i < g.size(); ++i) pg[0][begin * cols + i] += g[i];
                         });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin + count > cols || count == 0) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + to_string(x.shape()));
  }
  auto xv = x.data();
  std::vector<double> out(rows * count);
  for (std::size_t i = 0; i < rows; ++i)
    std::copy_n(xv.begin() + i * cols + begin, count, out.begin() + i * count);
  return Tensor::from_op({rows, count}, std::move(out), "slice_cols", {x},
                         [rows, cols, begin, count](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t i = 0; i < rows; ++i)
                             for (std::size_t j = 0; j < count; ++j) pg[0][i * cols + begin + j] += g[i * count + j];
                         });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) {
      throw DimensionError("concat_rows: width mismatch " + to_string(parts[0].shape()) + " vs " +
                           to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor::from_op({rows, cols}, std::move(out), "concat_rows", {parts.begin(), parts.end()},
                         [offsets](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t k = 0; k < pg.size(); ++k) {
                             if (pg[k].empty()) continue;
                             for (std::size_t i = 0; i < pg[k].size(); ++i) pg[k][i] += g[offsets[k] + i];
                           }
                         });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) {
      throw DimensionError("concat_cols: row mismatch " + to_string(parts[0].shape()) + " vs " +
                           to_string(p.shape()));
    }
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(pv.begin() + i * widths[k], widths[k], out.begin() + i * cols + offset);
    offset += widths[k];
  }
  return Tensor::from_op({rows, cols}, std::move(out), "concat_cols", {parts.begin(), parts.end()},
                         [rows, cols, widths](const detail::Node&, std::span<const double> g, auto pg) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < pg.size(); ++k) {
                             if (!pg[k].empty()) {
                               for (std::size_t i = 0; i < rows; ++i)
                                 for (std::size_t j = 0; j < widths[k]; ++j)
                                   pg[k][i * widths[k] + j] += g[i * cols + off + j];
                             }
                             off += widths[k];
                           }
                         });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);

  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) {
        const double v = xv[base + i * inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN in input");
        mx = std::max(mx, v);
      }
      double total = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
    }
  }
  return Tensor::from_op(x.shape(), std::move(out), "softmax", {x},
                         [outer, inner, len](const detail::Node& self, std::span<const double> g, auto pg) {
                           const auto& y = self.data;
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * len * inner + in;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
                               for (std::size_t i = 0; i < len; ++i) {
                                 const std::size_t at = base + i * inner;
                                 pg[0][at] += y[at] * (g[at] - dot);
                               }
                             }
                           }
                         });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0) || bias.numel() != weight.dim(1)) {
    throw DimensionError("linear: incompatible shapes x" + to_string(x.shape()) + " W" + to_string(weight.shape()) +
                         " b" + to_string(bias.shape()));
  }
  return add_row_bias(matmul(x, weight), bias);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  if (!(eps > 0.0)) throw ValidationError("layer_norm: eps must be positive");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma" + to_string(gamma.shape()) + "/beta" + to_string(beta.shape()) +
                         " do not match width of " + to_string(x.shape()));
  }
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> out(rows * d);
  std::vector<double> xhat(rows * d);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mean) * inv_std[r];
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const detail::Node& self,
                                                                      std::span<const double> g, auto pg) {
        const auto& gam = self.parents[1]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (!pg[1].empty())
            for (std::size_t j = 0; j < d; ++j) pg[1][j] += gr[j] * xh[j];
          if (!pg[2].empty())
            for (std::size_t j = 0; j < d; ++j) pg[2][j] += gr[j];
          if (pg[0].empty()) continue;
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = gr[j] * gam[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
          }
          const double nd = static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = gr[j] * gam[j];
            pg[0][r * d + j] += inv_std[r] / nd * (nd * dxh - sum_dxh - xh[j] * sum_dxh_xh);
          }
        }
      });
}

Tensor row_cosine(const Tensor& x, const Tensor& g, double eps) {
  require_rank(x, 2, "row_cosine");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (g.numel() != d) {
    throw DimensionError("row_cosine: reference " + to_string(g.shape()) + " does not match width of " +
                         to_string(x.shape()));
  }
  auto xv = x.data();
  auto gv = g.data();
  double gnorm = 0.0;
  for (double v : gv) gnorm += v * v;
  gnorm = std::sqrt(gnorm);
  const double gden = std::max(gnorm, eps);

  std::vector<double> out(rows), dots(rows), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, nn = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += xv[r * d + j] * gv[j];
      nn += xv[r * d + j] * xv[r * d + j];
    }
    dots[r] = dot;
    norms[r] = std::sqrt(nn);
    // Rounding can push the ratio a few ulps past +-1.
    out[r] = std::clamp(dot / (std::max(norms[r], eps) * gden), -1.0, 1.0);
  }
  return Tensor::from_op(
      {rows}, std::move(out), "row_cosine", {x, g},
      [rows, d, eps, gnorm, gden, dots = std::move(dots), norms = std::move(norms)](
          const detail::Node& self, std::span<const double> grad, auto pg) {
        const auto& xs = self.parents[0]->data;
        const auto& gs = self.parents[1]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const double go = grad[r];
          if (go == 0.0) continue;
          const double xden = std::max(norms[r], eps);
          const double c = dots[r] / (xden * gden);
          // d|u|/du = u/|u| only where the norm is not clamped.
          const bool x_active = norms[r] > eps;
          const bool g_active = gnorm > eps;
          for (std::size_t j = 0; j < d; ++j) {
            const double xj = xs[r * d + j];
            const double gj = gs[j];
            if (!pg[0].empty()) {
              double dx = gj / (xden * gden);
              if (x_active) dx -= c * xj / (norms[r] * norms[r]);
              pg[0][r * d + j] += go * dx;
            }
            if (!pg[1].empty()) {
              double dg = xj / (xden * gden);
              if (g_active) dg -= c * gj / (gnorm * gnorm);
              pg[1][j] += go * dg;
            }
          }
        }
      });
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps) {
  if (u.numel() == 0 || u.numel() != v.numel()) {
    throw DimensionError("cosine_similarity: shapes " + to_string(u.shape()) + " and " + to_string(v.shape()));
  }
  return reshape(row_cosine(reshape(u, {1, u.numel()}), v, eps), {});
}

Tensor column_max(const Tensor& x) {
  require_rank(x, 2, "column_max");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  auto xv = x.data();
  std::vector<double> out(d);
  std::vector<std::size_t> argmax(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    out[j] = xv[j];
    for (std::size_t r = 1; r < rows; ++r) {
      if (xv[r * d + j] > out[j]) {
        out[j] = xv[r * d + j];
        argmax[j] = r;
      }
    }
  }
  return Tensor::from_op({d}, std::move(out), "column_max", {x},
                         [d, argmax = std::move(argmax)](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t j = 0; j < d; ++j) pg[0][argmax[j] * d + j] += g[j];
                         });
}

Tensor guarded_divide(const Tensor& x, const Tensor& s, double eps) {
  if (s.numel() != 1) throw DimensionError("guarded_divide: divisor must be scalar, got " + to_string(s.shape()));
  const double raw = s.item();
  const bool active = std::abs(raw) >= eps;
  const double den = active ? raw : std::copysign(eps, raw);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / den;
  return Tensor::from_op(x.shape(), std::move(out), "guarded_divide", {x, s},
                         [den, active](const detail::Node& self, std::span<const double> g, auto pg) {
                           const auto& xs = self.parents[0]->data;
                           if (!pg[0].empty())
                             for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] / den;
                           if (!pg[1].empty() && active) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xs[i];
                             pg[1][0] -= acc / (den * den);
                           }
                         });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) ||
      weight.dim(2) % 2 == 0 || bias.numel() != weight.dim(0)) {
    throw DimensionError("conv2d: incompatible shapes x" + to_string(x.shape()) + " W" + to_string(weight.shape()) +
                         " b" + to_string(bias.shape()));
  }
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  const long pad = static_cast<long>(k / 2);
  const long hh = static_cast<long>(h), ww = static_cast<long>(w);

  auto xv = x.data();
  auto wv = weight.data();
  auto bv = bias.data();
  std::vector<double> out(n * cout * h * w);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* plane = out.data() + (b * cout + co) * h * w;
      std::fill_n(plane, h * w, bv[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = xv.data() + (b * cin + ci) * h * w;
        for (long ky = 0; ky < static_cast<long>(k); ++ky) {
          for (long kx = 0; kx < static_cast<long>(k); ++kx) {
            const double wt = wv[((co * cin + ci) * k + ky) * k + kx];
            const long dy = ky - pad, dx = kx - pad;
            const long y0 = std::max(0L, -dy), y1 = std::min(hh, hh - dy);
            const long x0 = std::max(0L, -dx), x1 = std::min(ww, ww - dx);
            for (long y = y0; y < y1; ++y) {
              double* orow = plane + y * ww;
              const double* irow = src + (y + dy) * ww + dx;
              for (long xx = x0; xx < x1; ++xx) orow[xx] += wt * irow[xx];
            }
          }
        }
      }
    }
  }
  MacCounter::add(static_cast<std::uint64_t>(n) * cout * h * w * cin * k * k);
  return Tensor::from_op(
      {n, cout, h, w}, std::move(out), "conv2d", {x, weight, bias},
      [n, cin, cout, k, pad, hh, ww](const detail::Node& self, std::span<const double> g, auto pg) {
        const auto& xs = self.parents[0]->data;
        const auto& ws = self.parents[1]->data;
        const std::size_t plane_size = static_cast<std::size_t>(hh * ww);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t co = 0; co < cout; ++co) {
            const double* gplane = g.data() + (b * cout + co) * plane_size;
            if (!pg[2].empty()) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane_size; ++i) acc += gplane[i];
              pg[2][co] += acc;
            }
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const std::size_t in_off = (b * cin + ci) * plane_size;
              for (long ky = 0; ky < static_cast<long>(k); ++ky) {
                for (long kx = 0; kx < static_cast<long>(k); ++kx) {
                  const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
                  const long dy = ky - pad, dx = kx - pad;
                  const long y0 = std::max(0L, -dy), y1 = std::min(hh, hh - dy);
                  const long x0 = std::max(0L, -dx), x1 = std::min(ww, ww - dx);
                  double wacc = 0.0;
                  const double wt = ws[widx];
                  for (long y = y0; y < y1; ++y) {
                    const double* grow = gplane + y * ww;
                    const long src_row = (y + dy) * ww + dx;
                    if (!pg[1].empty()) {
                      const double* irow = xs.data() + in_off + src_row;
                      for (long xx = x0; xx < x1; ++xx) wacc += grow[xx] * irow[xx];
                    }
                    if (!pg[0].empty()) {
                      double* drow = pg[0].data() + in_off + src_row;
                      for (long xx = x0; xx < x1; ++xx) drow[xx] += wt * grow[xx];
                    }
                  }
                  if (!pg[1].empty()) pg[1][widx] += wacc;
                }
              }
            }
          }
        }
      });
}

Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  if (x.rank() != 4 || k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
    throw DimensionError("avg_pool2d: window " + std::to_string(k) + " does not tile " + to_string(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  auto xv = x.data();
  std::vector<double> out(planes * oh * ow, 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(p * oh + y / k) * ow + xx / k] += xv[(p * h + y) * w + xx] * inv;
  return Tensor::from_op({x.dim(0), x.dim(1), oh, ow}, std::move(out), "avg_pool2d", {x},
                         [planes, h, w, k, oh, ow, inv](const detail::Node&, std::span<const double> g, auto pg) {
                           for (std::size_t p = 0; p < planes; ++p)
                             for (std::size_t y = 0; y < h; ++y)
                               for (std::size_t xx = 0; xx < w; ++xx)
                                 pg[0][(p * h + y) * w + xx] += g[(p * oh + y / k) * ow + xx / k] * inv;
                         });
}

std::vector<double> one_hot(std::size_t index, std::size_t classes) {
  if (index >= classes) {
    throw ValidationError("label " + std::to_string(index) + " out of range for " + std::to_string(classes) +
                          " classes");
  }
  std::vector<double> v(classes, 0.0);
  v[index] = 1.0;
  return v;
}

Tensor bce_sum_loss(const Tensor& pred, std::span<const double> target, double clamp_eps) {
  if (pred.numel() != target.size()) {
    throw DimensionError("bce_sum_loss: prediction " + to_string(pred.shape()) + " vs target length " +
                         std::to_string(target.size()));
  }
  std::size_t ones = 0;
  for (double t : target) {
    if (t == 1.0) {
      ++ones;
    } else if (t != 0.0) {
      throw ValidationError("bce_sum_loss: target is not one-hot");
    }
  }
  if (ones != 1) throw ValidationError("bce_sum_loss: target is not one-hot");

  auto pv = pred.data();
  std::vector<double> y(target.begin(), target.end());
  double loss = 0.0;
  for (std::size_t c = 0; c < pv.size(); ++c) {
    const double pos = std::clamp(pv[c], clamp_eps, 1.0);
    const double neg = std::clamp(1.0 - pv[c], clamp_eps, 1.0);
    loss -= y[c] * std::log(pos) + (1.0 - y[c]) * std::log(neg);
  }
  return Tensor::from_op({}, {loss}, "bce_sum_loss", {pred},
                         [y = std::move(y), clamp_eps](const detail::Node& self, std::span<const double> g, auto pg) {
                           const auto& p = self.parents[0]->data;
                           for (std::size_t c = 0; c < p.size(); ++c) {
                             double d = 0.0;
                             if (y[c] != 0.0 && p[c] > clamp_eps && p[c] < 1.0) d -= y[c] / p[c];
                             const double q = 1.0 - p[c];
                             if (y[c] != 1.0 && q > clamp_eps && q < 1.0) d += (1.0 - y[c]) / q;
                             pg[0][c] += g[0] * d;
                           }
                         });
}

Attention scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(1) != v.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw DimensionError("attention: incompatible shapes Q" + to_string(q.shape()) + " K" + to_string(k.shape()) +
                         " V" + to_string(v.shape()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  Tensor weights = softmax(scores, 1);
  return {matmul(weights, v), weights};
}

}  // namespace est::ops
