#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "radformer/image.hpp"
#include "radformer/tensor.hpp"

// Region-of-interest pipeline: per-channel normalization, channel-summed
// activation heatmap, binarization (otsu / fixed / hysteresis / naive),
// tight-box extraction with feature-to-pixel mapping, and box quality
// metrics. Everything here is a pure function over plain buffers; nothing
// touches the autodiff tape.

namespace radformer::roi {

struct HeatMap {
  std::size_t h = 0, w = 0;
  std::vector<double> values;  // nonnegative, h*w, row-major
  std::size_t source_stride = 1;

  double at(std::size_t r, std::size_t c) const { return values[r * w + c]; }
};

struct BinaryMask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> cells;  // 0/1
  double threshold_used = 0.0;

  bool any() const {
    for (auto c : cells)
      if (c) return true;
    return false;
  }
};

struct BoundingBox {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  bool valid(int image_w, int image_h) const {
    return 0 <= x_min && x_min <= x_max && x_max < image_w && 0 <= y_min && y_min <= y_max &&
           y_max < image_h;
  }
  long long area() const {
    return static_cast<long long>(x_max - x_min + 1) * static_cast<long long>(y_max - y_min + 1);
  }
  bool operator==(const BoundingBox&) const = default;
};

struct BinarizationStrategy {
  enum class Kind { otsu, fixed, hysteresis, naive };
  Kind kind = Kind::otsu;
  double fixed_tau = 120;  // 0..255 quantized scale
  double high = 120, low = 50;

  static BinarizationStrategy otsu() { return {Kind::otsu, 0, 0, 0}; }
  static BinarizationStrategy fixed(double tau) { return {Kind::fixed, tau, 0, 0}; }
  static BinarizationStrategy hysteresis(double high, double low) {
    if (high <= low) {
      throw std::invalid_argument("hysteresis: high threshold must exceed low threshold");
    }
    return {Kind::hysteresis, 0, high, low};
  }
  static BinarizationStrategy naive() { return {Kind::naive, 0, 0, 0}; }

  // "otsu" | "fixed:<t>" | "hysteresis:<hi>:<lo>" | "naive"
  static BinarizationStrategy parse(const std::string& s) {
    if (s == "otsu") return otsu();
    if (s == "naive") return naive();
    if (s.rfind("fixed:", 0) == 0) return fixed(std::stod(s.substr(6)));
    if (s.rfind("hysteresis:", 0) == 0) {
      const auto rest = s.substr(11);
      const auto colon = rest.find(':');
      if (colon == std::string::npos) {
        throw std::invalid_argument("hysteresis strategy needs high:low thresholds");
      }
      return hysteresis(std::stod(rest.substr(0, colon)), std::stod(rest.substr(colon + 1)));
    }
    throw std::invalid_argument("unknown binarization strategy: " + s);
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::otsu: return "otsu";
      case Kind::fixed: return "fixed:" + std::to_string(fixed_tau);
      case Kind::hysteresis:
        return "hysteresis:" + std::to_string(high) + ":" + std::to_string(low);
      case Kind::naive: return "naive";
    }
    return "?";
  }
};

// Per-channel min-max scaling of a [C,H,W] volume to [0,1]. A constant
// channel maps to zeros rather than dividing by zero.
template <typename T>
Tensor<T> normalize_activations(const Tensor<T>& volume) {
  if (volume.rank() != 3) {
    throw std::invalid_argument("normalize_activations: expected [C,H,W], got " +
                                shape_str(volume.shape()));
  }
  const std::size_t C = volume.dim(0), HW = volume.dim(1) * volume.dim(2);
  Tensor<T> out = Tensor<T>::zeros(volume.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = volume.values().data() + c * HW;
    T lo = p[0], hi = p[0];
    for (std::size_t i = 1; i < HW; ++i) {
      lo = std::min(lo, p[i]);
      hi = std::max(hi, p[i]);
    }
    T* o = out.values().data() + c * HW;
    if (hi > lo) {
      for (std::size_t i = 0; i < HW; ++i) o[i] = (p[i] - lo) / (hi - lo);
    }
  }
  return out;
}

// Channel-wise sum of the normalized volume.
template <typename T>
HeatMap compute_heatmap(const Tensor<T>& normalized, std::size_t source_stride) {
  if (normalized.rank() != 3) {
    throw std::invalid_argument("compute_heatmap: expected [C,H,W]");
  }
  const std::size_t C = normalized.dim(0), H = normalized.dim(1), W = normalized.dim(2);
  HeatMap hm;
  hm.h = H;
  hm.w = W;
  hm.source_stride = source_stride;
  hm.values.assign(H * W, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = normalized.values().data() + c * H * W;
    for (std::size_t s = 0; s < H * W; ++s) hm.values[s] += static_cast<double>(p[s]);
  }
  return hm;
}

// Index of the 256-bin quantization over [0, max]; max lands in the top bin.
inline int heat_bin(double v, double max_value) {
  if (max_value <= 0.0) return 0;
  const int b = static_cast<int>(std::floor(v * 256.0 / max_value));
  return std::clamp(b, 0, 255);
}

namespace detail {
// Between-class variance from integer class moments; both the production
// search and the test oracles must funnel through the same expression so the
// argmax comparison is exact.
inline double between_class_variance(long long w0, long long s0, long long w1, long long s1) {
  if (w0 == 0 || w1 == 0) return 0.0;
  const double diff = static_cast<double>(s0) * static_cast<double>(w1) -
                      static_cast<double>(s1) * static_cast<double>(w0);
  return diff * diff / (static_cast<double>(w0) * static_cast<double>(w1));
}
}  // namespace detail

// Threshold maximizing between-class variance over the 256-bin histogram;
// ties break toward the smallest threshold. Returned on the heatmap value
// scale. A constant heatmap returns that constant so the >= mask downstream
// is all ones.
inline double otsu_threshold(const HeatMap& hm) {
  if (hm.values.empty()) throw std::invalid_argument("otsu_threshold: empty heatmap");
  double max_v = hm.values[0], min_v = hm.values[0];
  for (double v : hm.values) {
    max_v = std::max(max_v, v);
    min_v = std::min(min_v, v);
  }
  if (max_v == min_v) return max_v;

  long long hist[256] = {0};
  for (double v : hm.values) ++hist[heat_bin(v, max_v)];

  long long total_w = 0, total_s = 0;
  for (int b = 0; b < 256; ++b) {
    total_w += hist[b];
    total_s += hist[b] * static_cast<long long>(b);
  }
  int best_t = 0;
  double best_var = -1.0;
  long long w0 = 0, s0 = 0;
  for (int t = 0; t < 256; ++t) {
    w0 += hist[t];
    s0 += hist[t] * static_cast<long long>(t);
    const double var = detail::between_class_variance(w0, s0, total_w - w0, total_s - s0);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  return (best_t + 1) * max_v / 256.0;
}

namespace detail {
inline BinaryMask threshold_mask_bins(const HeatMap& hm, double tau_bins, double max_v) {
  BinaryMask m;
  m.h = hm.h;
  m.w = hm.w;
  m.threshold_used = tau_bins;
  m.cells.assign(hm.values.size(), 0);
  for (std::size_t i = 0; i < hm.values.size(); ++i) {
    m.cells[i] = heat_bin(hm.values[i], max_v) >= tau_bins ? 1 : 0;
  }
  return m;
}
}  // namespace detail

// Binarize the heatmap. Fixed and hysteresis thresholds are expressed on the
// 0-255 quantized scale; otsu compares raw values against its own threshold;
// naive returns an all-ones mask. Hysteresis grows 4-connected regions from
// high-threshold seeds through low-threshold cells.
inline BinaryMask binarize(const HeatMap& hm, const BinarizationStrategy& strategy) {
  if (hm.values.empty()) throw std::invalid_argument("binarize: empty heatmap");
  double max_v = 0.0;
  for (double v : hm.values) max_v = std::max(max_v, v);

  using Kind = BinarizationStrategy::Kind;
  switch (strategy.kind) {
    case Kind::naive: {
      BinaryMask m;
      m.h = hm.h;
      m.w = hm.w;
      m.threshold_used = 0.0;
      m.cells.assign(hm.values.size(), 1);
      return m;
    }
    case Kind::fixed:
      return detail::threshold_mask_bins(hm, strategy.fixed_tau, max_v);
    case Kind::otsu: {
      const double tau = otsu_threshold(hm);
      BinaryMask m;
      m.h = hm.h;
      m.w = hm.w;
      m.threshold_used = tau;
      m.cells.assign(hm.values.size(), 0);
      for (std::size_t i = 0; i < hm.values.size(); ++i) m.cells[i] = hm.values[i] >= tau ? 1 : 0;
      return m;
    }
    case Kind::hysteresis: {
      if (strategy.high <= strategy.low) {
        throw std::invalid_argument("binarize: hysteresis requires high > low");
      }
      const std::size_t H = hm.h, W = hm.w;
      std::vector<std::uint8_t> pass_low(H * W, 0);
      BinaryMask m;
      m.h = H;
      m.w = W;
      m.threshold_used = strategy.high;
      m.cells.assign(H * W, 0);
      std::deque<std::size_t> frontier;
      for (std::size_t i = 0; i < H * W; ++i) {
        const int b = heat_bin(hm.values[i], max_v);
        pass_low[i] = b >= strategy.low ? 1 : 0;
        if (b >= strategy.high) {
          m.cells[i] = 1;
          frontier.push_back(i);
        }
      }
      while (!frontier.empty()) {
        const std::size_t i = frontier.front();
        frontier.pop_front();
        const std::size_t r = i / W, c = i % W;
        const std::size_t nbr[4][2] = {{r > 0 ? r - 1 : r, c},
                                       {r + 1 < H ? r + 1 : r, c},
                                       {r, c > 0 ? c - 1 : c},
                                       {r, c + 1 < W ? c + 1 : c}};
      for (const auto& n : nbr) {
          const std::size_t j = n[0] * W + n[1];
          if (j == i) continue;
          if (pass_low[j] && !m.cells[j]) {
            m.cells[j] = 1;
            frontier.push_back(j);
          }
        }
      }
      return m;
    }
  }
  throw std::logic_error("binarize: unreachable");
}

// Tight box over the nonzero cells, mapped to pixel coordinates: each feature
// cell (r, c) covers pixels [c*stride, (c+1)*stride - 1] x [r*stride,
// (r+1)*stride - 1], clamped to image bounds. An empty mask falls back to the
// whole image so the local branch always has input.
inline BoundingBox extract_bbox(const BinaryMask& mask, std::size_t image_w, std::size_t image_h,
                                std::size_t stride) {
  const BoundingBox whole{0, 0, static_cast<int>(image_w) - 1, static_cast<int>(image_h) - 1};
  std::size_t r0 = mask.h, r1 = 0, c0 = mask.w, c1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < mask.h; ++r) {
    for (std::size_t c = 0; c < mask.w; ++c) {
      if (!mask.cells[r * mask.w + c]) continue;
      any = true;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  }
  if (!any) return whole;
  BoundingBox box;
  box.x_min = static_cast<int>(c0 * stride);
  box.y_min = static_cast<int>(r0 * stride);
  box.x_max = static_cast<int>((c1 + 1) * stride) - 1;
  box.y_max = static_cast<int>((r1 + 1) * stride) - 1;
  box.x_min = std::clamp(box.x_min, 0, static_cast<int>(image_w) - 1);
  box.x_max = std::clamp(box.x_max, 0, static_cast<int>(image_w) - 1);
  box.y_min = std::clamp(box.y_min, 0, static_cast<int>(image_h) - 1);
  box.y_max = std::clamp(box.y_max, 0, static_cast<int>(image_h) - 1);
  return box;
}

// Pixel-exact sub-image of a [C,H,W] tensor.
template <typename T>
Tensor<T> crop_roi(const Tensor<T>& image, const BoundingBox& box) {
  if (image.rank() != 3) throw std::invalid_argument("crop_roi: expected [C,H,W]");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (!box.valid(static_cast<int>(W), static_cast<int>(H))) {
    throw std::invalid_argument("crop_roi: box out of image bounds");
  }
  const std::size_t bw = static_cast<std::size_t>(box.x_max - box.x_min + 1);
  const std::size_t bh = static_cast<std::size_t>(box.y_max - box.y_min + 1);
  Tensor<T> out = Tensor<T>::zeros({C, bh, bw});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < bh; ++y)
      for (std::size_t x = 0; x < bw; ++x)
        out[(c * bh + y) * bw + x] =
            image[(c * H + (box.y_min + y)) * W + (box.x_min + x)];
  return out;
}

inline ImageU8 crop_roi(const ImageU8& image, const BoundingBox& box) {
  if (!box.valid(static_cast<int>(image.width), static_cast<int>(image.height))) {
    throw std::invalid_argument("crop_roi: box out of image bounds");
  }
  const std::size_t bw = static_cast<std::size_t>(box.x_max - box.x_min + 1);
  const std::size_t bh = static_cast<std::size_t>(box.y_max - box.y_min + 1);
  ImageU8 out = ImageU8::blank(bw, bh);
  for (std::size_t y = 0; y < bh; ++y)
    for (std::size_t x = 0; x < bw; ++x)
      out.pixels[y * bw + x] = image.at(box.x_min + x, box.y_min + y);
  return out;
}

struct RoiMetrics {
  double iou = 0.0;
  double intersection_fraction = 0.0;
  double area_fraction = 0.0;
};

inline RoiMetrics roi_metrics(const BoundingBox& pred, const BoundingBox& annotated,
                              std::size_t image_w, std::size_t image_h) {
  const long long ix0 = std::max(pred.x_min, annotated.x_min);
  const long long iy0 = std::max(pred.y_min, annotated.y_min);
  const long long ix1 = std::min(pred.x_max, annotated.x_max);
  const long long iy1 = std::min(pred.y_max, annotated.y_max);
  const long long inter =
      (ix1 >= ix0 && iy1 >= iy0) ? (ix1 - ix0 + 1) * (iy1 - iy0 + 1) : 0;
  const long long uni = pred.area() + annotated.area() - inter;
  RoiMetrics m;
  m.iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
  m.intersection_fraction = static_cast<double>(inter) / static_cast<double>(annotated.area());
  m.area_fraction = static_cast<double>(pred.area()) /
                    (static_cast<double>(image_w) * static_cast<double>(image_h));
  return m;
}

inline ImageU8 heatmap_to_image(const HeatMap& hm) {
  return plane_to_image(hm.values.data(), hm.w, hm.h);
}

inline ImageU8 mask_to_image(const BinaryMask& m) {
  ImageU8 img = ImageU8::blank(m.w, m.h);
  for (std::size_t i = 0; i < m.cells.size(); ++i) img.pixels[i] = m.cells[i] ? 255 : 0;
  return img;
}

inline void write_heatmap_csv(const std::string& path, const HeatMap& hm) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  for (std::size_t r = 0; r < hm.h; ++r) {
    for (std::size_t c = 0; c < hm.w; ++c) f << (c ? "," : "") << hm.at(r, c);
    f << "\n";
  }
}

inline nlohmann::ordered_json box_to_json(const BoundingBox& b) {
  return nlohmann::ordered_json{
      {"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}};
}

inline BoundingBox box_from_json(const nlohmann::json& j) {
  return BoundingBox{j.at("x_min").get<int>(), j.at("y_min").get<int>(), j.at("x_max").get<int>(),
                     j.at("y_max").get<int>()};
}

}  // namespace radformer::roi
