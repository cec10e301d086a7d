#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "radformer/ops.hpp"

namespace radformer {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

// Direct 2-D convolution, NCHW input, KCkk weights, optional bias [K].
// The kernel is weight-stationary with contiguous output-row inner loops;
// padding is handled by clamping the output range per kernel tap so the
// hot loop is branch free.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw std::invalid_argument("conv2d: expected input [N,C,H,W] and weight [K,C,kh,kw], got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                " vs weight " + shape_str(w.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = conv_out_extent(H, KH, stride, pad);
  const std::size_t OW = conv_out_extent(W, KW, stride, pad);
  if (OH == 0 || OW == 0) {
    throw std::invalid_argument("conv2d: zero-size spatial output for input " +
                                shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{K}) {
    throw std::invalid_argument("conv2d: bias must be [K]");
  }

  Tensor<T> out = Tensor<T>::zeros({N, K, OH, OW});
  const T* X = x.values().data();
  const T* Wv = w.values().data();
  T* O = out.values().data();

  // Valid output range for kernel tap (i,j): oh*stride + i - pad in [0, H).
  auto tap_range = [stride, pad](std::size_t tap, std::size_t in_extent, std::size_t out_extent,
                                 std::size_t& lo, std::size_t& hi) {
    // smallest o with o*stride + tap >= pad
    lo = tap >= pad ? 0 : (pad - tap + stride - 1) / stride;
    // largest o with o*stride + tap - pad < in_extent
    const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(in_extent + pad) - 1 -
                               static_cast<std::ptrdiff_t>(tap);
    hi = top < 0 ? 0 : std::min<std::size_t>(out_extent, static_cast<std::size_t>(top) / stride + 1);
    if (lo > hi) lo = hi;
  };

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      T* oplane = O + (n * K + k) * OH * OW;
      if (has_bias) {
        const T b = bias[k];
        for (std::size_t s = 0; s < OH * OW; ++s) oplane[s] = b;
      }
      for (std::size_t c = 0; c < C; ++c) {
        const T* xplane = X + (n * C + c) * H * W;
        for (std::size_t i = 0; i < KH; ++i) {
          std::size_t oh_lo, oh_hi;
          tap_range(i, H, OH, oh_lo, oh_hi);
          for (std::size_t j = 0; j < KW; ++j) {
            const T wv = Wv[((k * C + c) * KH + i) * KW + j];
            if (wv == T(0)) continue;
            std::size_t ow_lo, ow_hi;
            tap_range(j, W, OW, ow_lo, ow_hi);
            if (stride == 1) {
              for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                const T* __restrict__ xrow = xplane + (oh + i - pad) * W;
                T* __restrict__ orow = oplane + oh * OW;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                  orow[ow] += wv * xrow[ow + j - pad];
              }
            } else {
              for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                const T* __restrict__ xrow = xplane + (oh * stride + i - pad) * W;
                T* __restrict__ orow = oplane + oh * OW;
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                  orow[ow] += wv * xrow[ow * stride + j - pad];
                }
              }
            }
          }
        }
      }
    }
  }

  auto xi = x.impl(), wi = w.impl(), oi = out.impl();
  auto bi = has_bias ? bias.impl() : nullptr;
  std::vector<Tensor<T>> ins = has_bias ? std::vector<Tensor<T>>{x, w, bias}
                                        : std::vector<Tensor<T>>{x, w};
  detail::record_nary<T>(ins, out, [xi, wi, bi, oi, N, C, H, W, K, KH, KW, OH, OW, stride, pad,
                                    tap_range] {
    if (oi->grad.empty()) return;
    const T* G = oi->grad.data();
    if (bi && bi->requires_grad) {
      detail::ensure_grad_buf<T>(bi);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) {
          const T* gplane = G + (n * K + k) * OH * OW;
          T acc = T(0);
          for (std::size_t s = 0; s < OH * OW; ++s) acc += gplane[s];
          bi->grad[k] += acc;
        }
    }
    const bool need_x = xi->requires_grad;
    const bool need_w = wi->requires_grad;
    if (!need_x && !need_w) return;
    if (need_x) detail::ensure_grad_buf<T>(xi);
    if (need_w) detail::ensure_grad_buf<T>(wi);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        const T* gplane = G + (n * K + k) * OH * OW;
        for (std::size_t c = 0; c < C; ++c) {
          const T* xplane = xi->values.data() + (n * C + c) * H * W;
          T* gxplane = need_x ? xi->grad.data() + (n * C + c) * H * W : nullptr;
          for (std::size_t i = 0; i < KH; ++i) {
            std::size_t oh_lo, oh_hi;
            tap_range(i, H, OH, oh_lo, oh_hi);
            for (std::size_t j = 0; j < KW; ++j) {
              std::size_t ow_lo, ow_hi;
              tap_range(j, W, OW, ow_lo, ow_hi);
              const std::size_t widx = ((k * C + c) * KH + i) * KW + j;
              const T wv = wi->values[widx];
              T wacc = T(0);
              if (stride == 1 && need_x && need_w) {
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::size_t ih = oh + i - pad;
                  const T* __restrict__ grow = gplane + oh * OW;
                  const T* xrow = xplane + ih * W;
                  T* gxrow = gxplane + ih * W;
                  for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                    const T g = grow[ow];
                    wacc += g * xrow[ow + j - pad];
                    gxrow[ow + j - pad] += g * wv;
                  }
                }
              } else if (stride == 1 && need_w) {
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const T* __restrict__ grow = gplane + oh * OW;
                  const T* __restrict__ xrow = xplane + (oh + i - pad) * W;
                  for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                    wacc += grow[ow] * xrow[ow + j - pad];
                }
              } else if (stride == 1 && need_x) {
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const T* __restrict__ grow = gplane + oh * OW;
                  T* __restrict__ gxrow = gxplane + (oh + i - pad) * W;
                  for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                    gxrow[ow + j - pad] += grow[ow] * wv;
                }
              } else {
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::size_t ih = oh * stride + i - pad;
                  const T* __restrict__ grow = gplane + oh * OW;
                  const T* xrow = xplane + ih * W;
                  T* gxrow = need_x ? gxplane + ih * W : nullptr;
                  for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                    const T g = grow[ow];
                    const std::size_t iw = ow * stride + j - pad;
                    if (need_w) wacc += g * xrow[iw];
                    if (need_x) gxrow[iw] += g * wv;
                  }
                }
              }
              if (need_w) wi->grad[widx] += wacc;
            }
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  return conv2d(x, w, Tensor<T>{}, stride, pad);
}

// Max pooling, NCHW. Ties route the gradient to the first maximum in scan
// order, which keeps backward deterministic.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool2d: expected [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = conv_out_extent(H, k, stride, pad);
  const std::size_t OW = conv_out_extent(W, k, stride, pad);
  if (OH == 0 || OW == 0) throw std::invalid_argument("max_pool2d: zero-size output");
  Tensor<T> out = Tensor<T>::zeros({N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::size_t>>(N * C * OH * OW);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* xplane = x.values().data() + nc * H * W;
    T* oplane = out.values().data() + nc * OH * OW;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            const T v = xplane[ih * W + iw];
            if (!found || v > best) {
              best = v;
              best_idx = static_cast<std::size_t>(ih * W + iw);
              found = true;
            }
          }
        }
        oplane[oh * OW + ow] = best;
        (*argmax)[nc * OH * OW + oh * OW + ow] = best_idx;
      }
    }
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, argmax, N, C, H, W, OH, OW] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
      T* gx = xi->grad.data() + nc * H * W;
      const T* go = oi->grad.data() + nc * OH * OW;
      const std::size_t* am = argmax->data() + nc * OH * OW;
      for (std::size_t s = 0; s < OH * OW; ++s) gx[am[s]] += go[s];
    }
  });
  return out;
}

// Top-left spatial crop to [N,C,h,w]; used to align residual shortcuts when
// unpadded convolutions shrink the main path.
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::size_t h, std::size_t w) {
  if (x.rank() != 4 || h > x.dim(2) || w > x.dim(3)) {
    throw std::invalid_argument("crop2d: cannot crop " + shape_str(x.shape()) + " to " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (h == H && w == W) return x;
  Tensor<T> out = Tensor<T>::zeros({N, C, h, w});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[(nc * h + i) * w + j] = x[(nc * H + i) * W + j];
  auto xi = x.impl(), oi = out.impl();
  detail::record_unary(x, out, [xi, oi, N, C, H, W, h, w] {
    if (oi->grad.empty()) return;
    detail::ensure_grad_buf<T>(xi);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          xi->grad[(nc * H + i) * W + j] += oi->grad[(nc * h + i) * w + j];
  });
  return out;
}

// Batch normalization over N,H,W per channel. Training mode normalizes with
// biased batch statistics and folds them into the running estimates
// (momentum-weighted); eval mode normalizes with the running estimates only.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) throw std::invalid_argument("batch_norm2d: expected [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || running_mean.size() != C ||
      running_var.size() != C) {
    throw std::invalid_argument("batch_norm2d: parameter length must equal channel count " +
                                std::to_string(C));
  }
  const std::size_t HW = H * W;
  const std::size_t M = N * HW;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      T acc = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.values().data() + (n * C + c) * HW;
        for (std::size_t s = 0; s < HW; ++s) acc += p[s];
      }
      mu = acc / T(M);
      T vacc = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.values().data() + (n * C + c) * HW;
        for (std::size_t s = 0; s < HW; ++s) vacc += (p[s] - mu) * (p[s] - mu);
      }
      var = vacc / T(M);
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    mean[c] = mu;
    inv_std[c] = T(1) / std::sqrt(var + eps);
    const T g = gamma[c], b = beta[c], istd = inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.values().data() + (n * C + c) * HW;
      T* o = out.values().data() + (n * C + c) * HW;
      for (std::size_t s = 0; s < HW; ++s) o[s] = (p[s] - mu) * istd * g + b;
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
  detail::record_nary<T>({x, gamma, beta}, out,
                         [xi, gi, bi, oi, N, C, HW, M, mean, inv_std, training] {
    if (oi->grad.empty()) return;
    for (std::size_t c = 0; c < C; ++c) {
      const T mu = mean[c], istd = inv_std[c], g = gi->values[c];
      T sum_gy = T(0), sum_gy_xhat = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* gy = oi->grad.data() + (n * C + c) * HW;
        const T* xv = xi->values.data() + (n * C + c) * HW;
        for (std::size_t s = 0; s < HW; ++s) {
          sum_gy += gy[s];
          sum_gy_xhat += gy[s] * (xv[s] - mu) * istd;
        }
      }
      if (gi->requires_grad) {
        detail::ensure_grad_buf<T>(gi);
        gi->grad[c] += sum_gy_xhat;
      }
      if (bi->requires_grad) {
        detail::ensure_grad_buf<T>(bi);
        bi->grad[c] += sum_gy;
      }
      if (xi->requires_grad) {
        detail::ensure_grad_buf<T>(xi);
        if (training) {
          // dx = g*istd*(dy - mean(dy) - xhat*mean(dy*xhat)) over the batch
          const T m1 = sum_gy / T(M);
          const T m2 = sum_gy_xhat / T(M);
          for (std::size_t n = 0; n < N; ++n) {
            const T* gy = oi->grad.data() + (n * C + c) * HW;
            const T* xv = xi->values.data() + (n * C + c) * HW;
            T* gx = xi->grad.data() + (n * C + c) * HW;
            for (std::size_t s = 0; s < HW; ++s) {
              const T xhat = (xv[s] - mu) * istd;
              gx[s] += g * istd * (gy[s] - m1 - xhat * m2);
            }
          }
        } else {
          const T scale = g * istd;
          for (std::size_t n = 0; n < N; ++n) {
            const T* gy = oi->grad.data() + (n * C + c) * HW;
            T* gx = xi->grad.data() + (n * C + c) * HW;
            for (std::size_t s = 0; s < HW; ++s) gx[s] += scale * gy[s];
          }
        }
      }
    }
  });
  return out;
}

}  // namespace radformer
