#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "radformer/tape.hpp"
#include "radformer/tensor.hpp"

// Differentiable primitives. All reductions run in fixed row-major order so a
// given binary produces bitwise-identical results run to run.

namespace radformer {

namespace detail {

template <typename T>
inline void ensure_grad_buf(const std::shared_ptr<typename Tensor<T>::Impl>& p) {
  if (p->grad.size() != p->values.size()) p->grad.assign(p->values.size(), T(0));
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_binary(a, b, out, [ai, bi, oi] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      detail::ensure_grad_buf<T>(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    }
    if (bi->requires_grad) {
      detail::ensure_grad_buf<T>(bi);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_binary(a, b, out, [ai, bi, oi] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      detail::ensure_grad_buf<T>(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    }
    if (bi->requires_grad) {
      detail::ensure_grad_buf<T>(bi);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_binary(a, b, out, [ai, bi, oi] {
    if (oi->grad.empty()) return;
    if (ai->requires_grad) {
      detail::ensure_grad_buf<T>(ai);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * bi->values[i];
    }
    if (bi->requires_grad) {
      detail::ensure_grad_buf<T>(bi);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i] * ai->values[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * c;
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, c] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * c;
  });
  return out;
}

// x[..., d] + v[d], broadcast over leading dims (bias add).
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() < 1 || v.rank() != 1 || x.shape().back() != v.dim(0)) {
    throw std::invalid_argument("add_rowvec: incompatible shapes " + shape_str(x.shape()) +
                                " vs " + shape_str(v.shape()));
  }
  const std::size_t d = v.dim(0);
  const std::size_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + v[j];
  auto xi = x.impl(), vi = v.impl(), oi = out.impl();
  detail::record_binary(x, v, out, [xi, vi, oi, rows, d] {
    if (oi->grad.empty()) return;
    if (xi->requires_grad) {
      detail::ensure_grad_buf<T>(xi);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    }
    if (vi->requires_grad) {
      detail::ensure_grad_buf<T>(vi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) vi->grad[j] += oi->grad[r * d + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      if (xi->values[i] > T(0)) xi->grad[i] += oi->grad[i];
  });
  return out;
}

// a[m,k] * b[k,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  const T* A = a.values().data();
  const T* B = b.values().data();
  T* O = out.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B + p * n;
      T* orow = O + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_binary(a, b, out, [ai, bi, oi, m, k, n] {
    if (oi->grad.empty()) return;
    const T* G = oi->grad.data();
    if (ai->requires_grad) {
      detail::ensure_grad_buf<T>(ai);
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          const T* grow = G + i * n;
          const T* brow = bi->values.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ai->grad[i * k + p] += acc;
        }
    }
    if (bi->requires_grad) {
      detail::ensure_grad_buf<T>(bi);
      // dB = A^T * G
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t i = 0; i < m; ++i) {
          const T av = ai->values[i * k + p];
          const T* grow = G + i * n;
          T* brow = bi->grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
    }
  });
  return out;
}

// a[m,k] * b[n,k]^T -> [m,n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      out[i * n + j] = acc;
    }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_binary(a, b, out, [ai, bi, oi, m, k, n] {
    if (oi->grad.empty()) return;
    const T* G = oi->grad.data();
    if (ai->requires_grad) {
      detail::ensure_grad_buf<T>(ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = G[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ai->grad[i * k + p] += g * bi->values[j * k + p];
        }
    }
    if (bi->requires_grad) {
      detail::ensure_grad_buf<T>(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = G[i * n + j];
          for (std::size_t p = 0; p < k; ++p) bi->grad[j * k + p] += g * ai->values[i * k + p];
        }
    }
  });
  return out;
}

// Softmax over the trailing axis, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax: rank-0 input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * d;
    T* o = out.values().data() + r * d;
    T mx = in[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= sum;
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, rows, d] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = oi->values.data() + r * d;
      const T* gy = oi->grad.data() + r * d;
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
      T* gx = xi->grad.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
  return out;
}

// Per trailing-axis slice: (x - mean)/sqrt(var + eps) * gamma + beta,
// biased variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw std::invalid_argument("layer_norm: gamma/beta must be [d], d=" + std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(rows), mean(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(d);
    const T istd = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = istd;
    T* o = out.values().data() + r * d;
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mu) * istd * gamma[j] + beta[j];
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
  detail::record_nary<T>({x, gamma, beta}, out, [xi, gi, bi, oi, rows, d, mean, inv_std] {
    if (oi->grad.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xi->values.data() + r * d;
      const T* gy = oi->grad.data() + r * d;
      const T mu = mean[r], istd = inv_std[r];
      if (gi->requires_grad) {
        detail::ensure_grad_buf<T>(gi);
        for (std::size_t j = 0; j < d; ++j) gi->grad[j] += gy[j] * (in[j] - mu) * istd;
      }
      if (bi->requires_grad) {
        detail::ensure_grad_buf<T>(bi);
        for (std::size_t j = 0; j < d; ++j) bi->grad[j] += gy[j];
      }
      if (xi->requires_grad) {
        detail::ensure_grad_buf<T>(xi);
        // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        T m1 = T(0), m2 = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const T xhat = (in[j] - mu) * istd;
          const T dxhat = gy[j] * gi->values[j];
          m1 += dxhat;
          m2 += dxhat * xhat;
        }
        m1 /= T(d);
        m2 /= T(d);
        T* gx = xi->grad.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
          const T xhat = (in[j] - mu) * istd;
          const T dxhat = gy[j] * gi->values[j];
          gx[j] += istd * (dxhat - m1 - xhat * m2);
        }
      }
    }
  });
  return out;
}

// Spatial mean per channel: [N,C,H,W] -> [N,C] or [C,H,W] -> [C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw std::invalid_argument("global_avg_pool: expected [C,H,W] or [N,C,H,W], got " +
                                shape_str(x.shape()));
  }
  const bool batched = x.rank() == 4;
  const std::size_t n = batched ? x.dim(0) : 1;
  const std::size_t c = batched ? x.dim(1) : x.dim(0);
  const std::size_t h = batched ? x.dim(2) : x.dim(1);
  const std::size_t w = batched ? x.dim(3) : x.dim(2);
  if (h == 0 || w == 0) throw std::invalid_argument("global_avg_pool: empty spatial extent");
  const std::size_t hw = h * w;
  Tensor<T> out = batched ? Tensor<T>::zeros({n, c}) : Tensor<T>::zeros({c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* p = x.values().data() + i * hw;
    T acc = T(0);
    for (std::size_t s = 0; s < hw; ++s) acc += p[s];
    out[i] = acc / T(hw);
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, n, c, hw] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t i = 0; i < n * c; ++i) {
      const T g = oi->grad[i] / T(hw);
      T* p = xi->grad.data() + i * hw;
      for (std::size_t s = 0; s < hw; ++s) p[s] += g;
    }
  });
  return out;
}

namespace detail {
template <typename T>
inline T logsumexp_row(const T* z, std::size_t c) {
  T mx = z[0];
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
  T s = T(0);
  for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
  return mx + std::log(s);
}
}  // namespace detail

// Mean categorical cross-entropy over the batch: -log softmax(z)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw std::invalid_argument("cross_entropy: logits " + shape_str(logits.shape()) +
                                " do not match " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(targets[i]) +
                                  " out of range [0," + std::to_string(c) + ")");
    }
  }
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.values().data() + i * c;
    loss += detail::logsumexp_row(z, c) - z[targets[i]];
  }
  loss /= T(n);
  Tensor<T> out = Tensor<T>::scalar(loss);
  auto zi = logits.impl(), oi = out.impl();
  detail::record_unary(logits, out, [zi, oi, n, c, targets] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(zi);
    const T g = oi->grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* z = zi->values.data() + i * c;
      T mx = z[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
      T s = T(0);
      for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
      T* gz = zi->grad.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) {
        T p = std::exp(z[j] - mx) / s;
        gz[j] += g * (p - (static_cast<std::size_t>(targets[i]) == j ? T(1) : T(0)));
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int target) {
  if (logits.rank() != 1) {
    throw std::invalid_argument("cross_entropy: expected rank-1 logits, got " +
                                shape_str(logits.shape()));
  }
  Tensor<T> l2 = reshape(logits, {1, logits.dim(0)});
  return cross_entropy(l2, std::vector<int>{target});
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[0];
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                                " changes element count");
  }
  Tensor<T> out = Tensor<T>::from_values(shape, x.values());
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
  });
  return out;
}

// Scalar pick of one element (flat index).
template <typename T>
Tensor<T> take(const Tensor<T>& x, std::size_t index) {
  if (index >= x.size()) throw std::invalid_argument("take: index out of range");
  Tensor<T> out = Tensor<T>::scalar(x[index]);
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, index] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    xi->grad[index] += oi->grad[0];
  });
  return out;
}

// [N,1,H,W] -> [N,c,H,W] by copying the single channel; gradients sum back
// over the copies.
template <typename T>
Tensor<T> replicate_channels(const Tensor<T>& x, std::size_t c) {
  if (x.rank() != 4 || x.dim(1) != 1) {
    throw std::invalid_argument("replicate_channels: expected [N,1,H,W], got " +
                                shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, c, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < c; ++k)
      std::copy(x.values().begin() + n * HW, x.values().begin() + (n + 1) * HW,
                out.values().begin() + (n * c + k) * HW);
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, N, c, HW] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t s = 0; s < HW; ++s)
          xi->grad[n * HW + s] += oi->grad[(n * c + k) * HW + s];
  });
  return out;
}

// k vectors of length d -> [k,d].
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
  const std::size_t d = rows[0].size();
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.size() != d)
      throw std::invalid_argument("stack_rows: rows must share shape [d]");
  }
  Tensor<T> out = Tensor<T>::zeros({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].values().begin(), rows[i].values().end(), out.values().begin() + i * d);
  std::vector<std::shared_ptr<typename Tensor<T>::Impl>> impls;
  for (const auto& r : rows) impls.push_back(r.impl());
  auto oi = out.impl();
  detail::record_nary<T>(rows, out, [impls, oi, d] {
    if (oi->grad.empty()) return;
    for (std::size_t i = 0; i < impls.size(); ++i) {
      if (!impls[i]->requires_grad) continue;
      detail::ensure_grad_buf<T>(impls[i]);
      for (std::size_t j = 0; j < d; ++j) impls[i]->grad[j] += oi->grad[i * d + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> row(const Tensor<T>& x, std::size_t i) {
  if (x.rank() != 2 || i >= x.dim(0)) throw std::invalid_argument("row: bad index");
  const std::size_t d = x.dim(1);
  std::vector<T> v(x.values().begin() + i * d, x.values().begin() + (i + 1) * d);
  Tensor<T> out = Tensor<T>::from_values({d}, std::move(v));
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, i, d] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t j = 0; j < d; ++j) xi->grad[i * d + j] += oi->grad[j];
  });
  return out;
}

// Columns [c0, c1) of a [n,d] matrix.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  if (x.rank() != 2 || c0 >= c1 || c1 > x.dim(1)) {
    throw std::invalid_argument("slice_cols: bad range on " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), w = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * d + c0 + j];
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, n, d, w, c0] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) xi->grad[i * d + c0 + j] += oi->grad[i * w + j];
  });
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const std::size_t n = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != n)
      throw std::invalid_argument("concat_cols: row count mismatch");
    total += p.dim(1);
  }
  Tensor<T> out = Tensor<T>::zeros({n, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p[i * w + j];
    off += w;
  }
  std::vector<std::shared_ptr<typename Tensor<T>::Impl>> impls;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    widths.push_back(p.dim(1));
  }
  auto oi = out.impl();
  detail::record_nary<T>(parts, out, [impls, widths, oi, n, total] {
    if (oi->grad.empty()) return;
    std::size_t off = 0;
    for (std::size_t k = 0; k < impls.size(); ++k) {
      const std::size_t w = widths[k];
      if (impls[k]->requires_grad) {
        detail::ensure_grad_buf<T>(impls[k]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < w; ++j)
            impls[k]->grad[i * w + j] += oi->grad[i * total + off + j];
      }
      off += w;
    }
  });
  return out;
}

}  // namespace radformer
