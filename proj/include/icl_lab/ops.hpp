#pragma once

// Differentiable tensor operations. Each op computes its forward result
// eagerly and, when an input requires a gradient, registers a closure that
// accumulates into the inputs' gradients during the reverse sweep.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>

#include "icl_lab/tensor.hpp"

namespace icl {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (+)= op(A) * op(B), all row-major. A is m x k after op, B is k x n.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  using Map = Eigen::Map<const RowMatrix<T>>;
  const auto rm = static_cast<Eigen::Index>(m);
  const auto rk = static_cast<Eigen::Index>(k);
  const auto rn = static_cast<Eigen::Index>(n);
  Eigen::Map<RowMatrix<T>> out(c, rm, rn);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      out.noalias() += lhs * rhs;
    else
      out.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b)
    run(Map(a, rm, rk), Map(b, rk, rn));
  else if (!trans_a && trans_b)
    run(Map(a, rm, rk), Map(b, rn, rk).transpose());
  else if (trans_a && !trans_b)
    run(Map(a, rk, rm).transpose(), Map(b, rk, rn));
  else
    run(Map(a, rk, rm).transpose(), Map(b, rn, rk).transpose());
}

inline bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

inline std::string pair_shapes(const Shape& a, const Shape& b) {
  return to_string(a) + " and " + to_string(b);
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;)
    strides[i - 1] = strides[i] * shape[i];
  return strides;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// a: [..., k] (rank >= 2) times b: [k, n], or batched a: [B, m, k] times
// b: [B, k, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || (b.rank() != 2 && b.rank() != 3))
    throw DimensionError("matmul needs matrices, got " +
                         detail::pair_shapes(a.shape(), b.shape()));
  if (b.rank() == 3) {
    if (a.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
      throw DimensionError("batched matmul shape mismatch: " +
                           detail::pair_shapes(a.shape(), b.shape()));
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2),
                      n = b.dim(2);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i)
      detail::gemm(a.data().data() + i * m * k, false,
                   b.data().data() + i * k * n, false, out.data() + i * m * n,
                   m, k, n, false);
    return Tensor<T>::make_result(
        {batch, m, n}, std::move(out), {a, b},
        [batch, m, k, n](detail::Node<T>& self) {
          auto& pa = *self.parents[0];
          auto& pb = *self.parents[1];
          for (std::size_t i = 0; i < batch; ++i) {
            const T* g = self.grad.data() + i * m * n;
            if (pa.requires_grad)
              detail::gemm(g, false, pb.data.data() + i * k * n, true,
                           pa.grad.data() + i * m * k, m, n, k, true);
            if (pb.requires_grad)
              detail::gemm(pa.data.data() + i * m * k, true, g, false,
                           pb.grad.data() + i * k * n, k, m, n, true);
          }
        });
  }
  const std::size_t k = a.shape().back();
  if (k != b.dim(0))
    throw DimensionError("matmul inner dimensions differ: " +
                         detail::pair_shapes(a.shape(), b.shape()));
  const std::size_t n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(m * n);
  detail::gemm(a.data().data(), false, b.data().data(), false, out.data(), m,
               k, n, false);
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {a, b},
      [m, k, n](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad)
          detail::gemm(self.grad.data(), false, pb.data.data(), true,
                       pa.grad.data(), m, n, k, true);
        if (pb.requires_grad)
          detail::gemm(pa.data.data(), true, self.grad.data(), false,
                       pb.grad.data(), k, m, n, true);
      });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The second operand may be a trailing-suffix
// broadcast of the first (bias vectors, positional tables, loss weights).

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape()))
    throw DimensionError("add cannot broadcast " +
                         detail::pair_shapes(a.shape(), b.shape()));
  const std::size_t period = b.size();
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t o = 0; o < out.size(); o += period)
    for (std::size_t j = 0; j < period; ++j) out[o + j] += bd[j];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [period](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad)
          for (std::size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i];
        if (pb.requires_grad)
          for (std::size_t o = 0; o < g.size(); o += period)
            for (std::size_t j = 0; j < period; ++j) pb.grad[j] += g[o + j];
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape()))
    throw DimensionError("sub cannot broadcast " +
                         detail::pair_shapes(a.shape(), b.shape()));
  const std::size_t period = b.size();
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t o = 0; o < out.size(); o += period)
    for (std::size_t j = 0; j < period; ++j) out[o + j] -= bd[j];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [period](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad)
          for (std::size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i];
        if (pb.requires_grad)
          for (std::size_t o = 0; o < g.size(); o += period)
            for (std::size_t j = 0; j < period; ++j) pb.grad[j] -= g[o + j];
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape()))
    throw DimensionError("mul cannot broadcast " +
                         detail::pair_shapes(a.shape(), b.shape()));
  const std::size_t period = b.size();
  std::vector<T> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t o = 0; o < out.size(); o += period)
    for (std::size_t j = 0; j < period; ++j) out[o + j] = ad[o + j] * bd[j];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [period](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad)
          for (std::size_t o = 0; o < g.size(); o += period)
            for (std::size_t j = 0; j < period; ++j) pa.grad[o + j] += g[o + j] * pb.data[j];
        if (pb.requires_grad)
          for (std::size_t o = 0; o < g.size(); o += period)
            for (std::size_t j = 0; j < period; ++j) pb.grad[j] += g[o + j] * pa.data[o + j];
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a}, [factor](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += self.grad[i] * factor;
      });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * ad[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += T(2) * pa.data[i] * self.grad[i];
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (const T v : a.data()) total += v;
  return Tensor<T>::make_result({1}, {total}, {a}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    const T g = self.grad[0];
    for (auto& v : pa.grad) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Averages out one axis: [.., L, ..] -> [.., ..].
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank())
    throw DimensionError("mean_axis axis " + std::to_string(axis) +
                         " out of range for " + to_string(a.shape()));
  const auto& shape = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out_shape.push_back(shape[i]);
  std::vector<T> out(outer * inner, T(0));
  const auto ad = a.data();
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += ad[(o * len + l) * inner + i];
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] *= inv;
  }
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {a},
      [outer, len, inner, inv](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i)
              pa.grad[(o * len + l) * inner + i] += self.grad[o * inner + i] * inv;
      });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

namespace detail {
// When set, relu folds the sign pattern of its input into this hash. The
// gradient checker uses it to spot finite-difference stencils that straddle
// a kink, where the central difference is not a derivative estimate.
inline thread_local std::uint64_t* kink_signature = nullptr;
}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > T(0) ? ad[i] : T(0);
  if (auto* sig = detail::kink_signature) {
    for (std::size_t i = 0; i < out.size(); ++i)
      *sig = (*sig ^ static_cast<std::uint64_t>(ad[i] > T(0))) * 0x100000001b3ull;
  }
  return Tensor<T>::make_result(a.shape(), std::move(out), {a},
                                [](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    if (pa.data[i] > T(0)) pa.grad[i] += self.grad[i];
                                });
}

// tanh approximation used by GPT-2.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto len = static_cast<Eigen::Index>(a.size());
  std::vector<T> out(a.size());
  auto th_cache = std::make_shared<std::vector<T>>(a.size());
  Eigen::Map<const Array> x(a.data().data(), len);
  Eigen::Map<Array> th(th_cache->data(), len);
  // Eigen's packet tanh keeps this vectorized for float.
  th = (c * (x + k * x.cube())).tanh();
  Eigen::Map<Array>(out.data(), len) = T(0.5) * x * (T(1) + th);
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a}, [th_cache](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        const auto& tanh_u = *th_cache;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T x = pa.data[i];
          const T th = tanh_u[i];
          const T du = c * (T(1) + T(3) * k * x * x);
          const T d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
          pa.grad[i] += self.grad[i] * d;
        }
      });
}

// Allowed (query, key) pairs for attention. `batch` is 1 for a mask shared
// across the whole batch.
struct AttentionMask {
  std::size_t batch = 1;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  bool allowed(std::size_t b, std::size_t r, std::size_t c) const {
    return allow[(b * rows + r) * cols + c] != 0;
  }

  static AttentionMask causal(std::size_t length) {
    AttentionMask m{1, length, length,
                    std::vector<std::uint8_t>(length * length, 0)};
    for (std::size_t r = 0; r < length; ++r)
      for (std::size_t c = 0; c <= r; ++c) m.allow[r * length + c] = 1;
    return m;
  }

  // Causal mask with keys at or beyond valid_len[b] hidden for row b.
  static AttentionMask causal_padded(std::size_t length,
                                     const std::vector<std::size_t>& valid_len) {
    AttentionMask m{valid_len.size(), length, length,
                    std::vector<std::uint8_t>(valid_len.size() * length * length, 0)};
    for (std::size_t b = 0; b < valid_len.size(); ++b)
      for (std::size_t r = 0; r < length; ++r)
        for (std::size_t c = 0; c <= r && c < valid_len[b]; ++c)
          m.allow[(b * length + r) * length + c] = 1;
    return m;
  }
};

// Softmax over the last axis. With a mask, x is [L.., rows, cols] and mask
// entries that are 0 get probability exactly 0; rows with nothing allowed
// come out all zero.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, const AttentionMask* mask = nullptr) {
  if (x.rank() < 1) throw DimensionError("softmax needs rank >= 1");
  const std::size_t cols = x.shape().back();
  const std::size_t n_rows = x.size() / cols;
  std::size_t rows_per_mat = n_rows, mats_per_batch = 1;
  if (mask) {
    if (x.rank() < 2 || x.shape()[x.rank() - 2] != mask->rows ||
        cols != mask->cols)
      throw DimensionError("attention mask [" + std::to_string(mask->rows) +
                           "x" + std::to_string(mask->cols) +
                           "] does not fit scores " + to_string(x.shape()));
    rows_per_mat = mask->rows;
    const std::size_t mats = n_rows / rows_per_mat;
    if (mats % mask->batch != 0)
      throw DimensionError("attention mask batch does not divide scores");
    mats_per_batch = mats / mask->batch;
  }
  std::vector<T> out(x.size(), T(0));
  const auto xd = x.data();
  for (std::size_t row = 0; row < n_rows; ++row) {
    const T* in = xd.data() + row * cols;
    T* y = out.data() + row * cols;
    auto ok = [&](std::size_t c) {
      if (!mask) return true;
      const std::size_t mat = row / rows_per_mat;
      return mask->allowed(mat / mats_per_batch, row % rows_per_mat, c);
    };
    T hi = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (ok(c)) hi = std::max(hi, in[c]);
    if (hi == -std::numeric_limits<T>::infinity()) continue;
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (ok(c)) {
        y[c] = std::exp(in[c] - hi);
        total += y[c];
      }
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x}, [cols](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        // Recompute from the stored output: gx = y * (g - <g, y>).
        const auto& y = self.data;
        const std::size_t rows = y.size() / cols;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * cols;
          const T* gr = self.grad.data() + r * cols;
          T dot = 0;
          for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
          for (std::size_t c = 0; c < cols; ++c)
            px.grad[r * cols + c] += yr[c] * (gr[c] - dot);
        }
      });
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// per-feature gain and bias.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain,
                    const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::size_t cols = x.shape().back();
  if (gain.size() != cols || bias.size() != cols)
    throw DimensionError("layernorm affine parameters do not match " +
                         to_string(x.shape()));
  const std::size_t rows = x.size() / cols;
  std::vector<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (in[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * gd[c] + bd[c];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, cols, xhat, inv_std](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& g = self.grad;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* h = xhat->data() + r * cols;
          const T* gr = g.data() + r * cols;
          if (pg.requires_grad)
            for (std::size_t c = 0; c < cols; ++c) pg.grad[c] += gr[c] * h[c];
          if (pb.requires_grad)
            for (std::size_t c = 0; c < cols; ++c) pb.grad[c] += gr[c];
          if (px.requires_grad) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = gr[c] * pg.data[c];
              mean_dh += dh;
              mean_dh_h += dh * h[c];
            }
            mean_dh /= static_cast<T>(cols);
            mean_dh_h /= static_cast<T>(cols);
            const T is = (*inv_std)[r];
            for (std::size_t c = 0; c < cols; ++c) {
              const T dh = gr[c] * pg.data[c];
              px.grad[r * cols + c] += is * (dh - mean_dh - h[c] * mean_dh_h);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("cannot reshape " + to_string(a.shape()) + " to " +
                         to_string(shape));
  return Tensor<T>::make_result(
      std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), {a},
      [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa.grad[i] += self.grad[i];
      });
}

// out.shape[i] = a.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const auto& in_shape = a.shape();
  if (perm.size() != in_shape.size())
    throw DimensionError("permutation rank differs from " + to_string(in_shape));
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape.at(perm[i]);
  // Trailing axes left in place form contiguous runs that are copied whole.
  std::size_t fixed = 0;
  while (fixed < perm.size() && perm[perm.size() - 1 - fixed] == perm.size() - 1 - fixed) ++fixed;
  std::size_t run = 1;
  for (std::size_t i = perm.size() - fixed; i < perm.size(); ++i) run *= in_shape[i];
  const std::size_t outer_rank = perm.size() - fixed;
  const auto in_strides = detail::strides_of(in_shape);
  // Source offset of each run, walked in destination order.
  auto gather = std::make_shared<std::vector<std::size_t>>(a.size() / run);
  std::vector<std::size_t> idx(outer_rank, 0);
  for (std::size_t flat = 0; flat < gather->size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < outer_rank; ++i) src += idx[i] * in_strides[perm[i]];
    (*gather)[flat] = src;
    for (std::size_t i = outer_rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(a.size());
  const auto ad = a.data();
  for (std::size_t g = 0; g < gather->size(); ++g)
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((*gather)[g]), run, out.begin() + static_cast<std::ptrdiff_t>(g * run));
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {a},
                                [gather, run](detail::Node<T>& self) {
                                  auto& pa = *self.parents[0];
                                  for (std::size_t g = 0; g < gather->size(); ++g) {
                                    T* dst = pa.grad.data() + (*gather)[g];
                                    const T* src = self.grad.data() + g * run;
                                    for (std::size_t j = 0; j < run; ++j) dst[j] += src[j];
                                  }
                                });
}

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

// Takes `count` indices start, start+step, ... along one axis.
template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start,
                 std::size_t count, std::size_t step = 1) {
  if (axis >= a.rank() || count == 0 || step == 0 ||
      start + (count - 1) * step >= a.dim(axis))
    throw DimensionError("narrow out of range on " + to_string(a.shape()));
  const auto& shape = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Shape out_shape = shape;
  out_shape[axis] = count;
  std::vector<T> out(outer * count * inner);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < count; ++j)
      std::copy_n(ad.data() + (o * len + start + j * step) * inner, inner,
                  out.data() + (o * count + j) * inner);
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {a},
      [=](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < count; ++j)
            for (std::size_t i = 0; i < inner; ++i)
              pa.grad[(o * len + start + j * step) * inner + i] +=
                  self.grad[(o * count + j) * inner + i];
      });
}

// [B, n, D] x [B, n, D] -> [B, 2n, D] as a0, b0, a1, b1, ...
template <typename T>
Tensor<T> interleave(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || a.rank() != 3)
    throw DimensionError("interleave needs equal [B, n, D] shapes, got " +
                         detail::pair_shapes(a.shape(), b.shape()));
  const std::size_t batch = a.dim(0), n = a.dim(1), d = a.dim(2);
  std::vector<T> out(2 * a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < batch * n; ++i) {
    std::copy_n(ad.data() + i * d, d, out.data() + (2 * i) * d);
    std::copy_n(bd.data() + i * d, d, out.data() + (2 * i + 1) * d);
  }
  return Tensor<T>::make_result(
      {batch, 2 * n, d}, std::move(out), {a, b},
      [batch, n, d](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < batch * n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            if (pa.requires_grad) pa.grad[i * d + j] += self.grad[(2 * i) * d + j];
            if (pb.requires_grad) pb.grad[i * d + j] += self.grad[(2 * i + 1) * d + j];
          }
      });
}

// ---------------------------------------------------------------------------
// Convolution

// Cross-correlation (no kernel flip). x is [C, H, W] or [N, C, H, W];
// kernel is [C', C, kh, kw]; bias, when defined, is [C'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ContractError("conv2d stride must be positive");
  if ((x.rank() != 3 && x.rank() != 4) || kernel.rank() != 4)
    throw DimensionError("conv2d expects [N,C,H,W] input and [C',C,kh,kw] "
                         "kernel, got " +
                         detail::pair_shapes(x.shape(), kernel.shape()));
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0);
  const std::size_t h = x.dim(batched ? 2 : 1);
  const std::size_t w = x.dim(batched ? 3 : 2);
  const std::size_t co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c)
    throw DimensionError("conv2d channel mismatch: " +
                         detail::pair_shapes(x.shape(), kernel.shape()));
  if (h + 2 * padding < kh || w + 2 * padding < kw)
    throw DimensionError("conv2d kernel larger than padded input: " +
                         detail::pair_shapes(x.shape(), kernel.shape()));
  if (bias.defined() && bias.size() != co)
    throw DimensionError("conv2d bias does not match output channels");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t patch = c * kh * kw;
  const std::size_t rows = n * ho * wo;

  // im2col: one row of `patch` taps per output position, zero for padding.
  // The tap -> pixel map is the same for every image, so it is built once;
  // kPad marks taps that fall in the padding.
  constexpr std::size_t kPad = static_cast<std::size_t>(-1);
  const std::size_t taps = ho * wo * patch, image = c * h * w;
  auto tap_pixel = std::make_shared<std::vector<std::size_t>>(taps, kPad);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < kh; ++i) {
          const auto y = static_cast<std::ptrdiff_t>(oy * stride + i) -
                         static_cast<std::ptrdiff_t>(padding);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * stride + j) -
                            static_cast<std::ptrdiff_t>(padding);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
            (*tap_pixel)[(oy * wo + ox) * patch + (ch * kh + i) * kw + j] =
                (ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(xx);
          }
        }
  auto cols = std::make_shared<std::vector<T>>(rows * patch);
  {
    const T* xd = x.data().data();
    T* cd = cols->data();
    const std::size_t* tp = tap_pixel->data();
    for (std::size_t b = 0; b < n; ++b, xd += image, cd += taps)
      for (std::size_t t = 0; t < taps; ++t) cd[t] = tp[t] == kPad ? T(0) : xd[tp[t]];
  }

  std::vector<T> out_rows(rows * co);
  detail::gemm(cols->data(), false, kernel.data().data(), true, out_rows.data(),
               rows, patch, co, false);
  std::vector<T> out(rows * co);
  const bool has_bias = bias.defined();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < co; ++k)
      for (std::size_t p = 0; p < ho * wo; ++p)
        out[(b * co + k) * ho * wo + p] =
            out_rows[(b * ho * wo + p) * co + k] + (has_bias ? bias.data()[k] : T(0));

  Shape out_shape = batched ? Shape{n, co, ho, wo} : Shape{co, ho, wo};
  std::vector<Tensor<T>> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), std::move(inputs),
      [=](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        const std::size_t spatial = ho * wo;
        std::vector<T> g_rows(rows * co);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t k = 0; k < co; ++k)
            for (std::size_t p = 0; p < spatial; ++p)
              g_rows[(b * spatial + p) * co + k] = self.grad[(b * co + k) * spatial + p];
        if (pk.requires_grad)
          detail::gemm(g_rows.data(), true, cols->data(), false, pk.grad.data(),
                       co, rows, patch, true);
        if (has_bias && self.parents[2]->requires_grad) {
          auto& pb = *self.parents[2];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < co; ++k) pb.grad[k] += g_rows[r * co + k];
        }
        if (px.requires_grad) {
          std::vector<T> g_cols(rows * patch);
          detail::gemm(g_rows.data(), false, pk.data.data(), false, g_cols.data(),
                       rows, co, patch, false);
          T* gx = px.grad.data();
          const T* gc = g_cols.data();
          const std::size_t* tp = tap_pixel->data();
          for (std::size_t b = 0; b < n; ++b, gx += image, gc += taps)
            for (std::size_t t = 0; t < taps; ++t)
              if (tp[t] != kPad) gx[tp[t]] += gc[t];
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding) {
  return conv2d(x, kernel, Tensor<T>{}, stride, padding);
}

}  // namespace icl
