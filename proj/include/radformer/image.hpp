#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "radformer/tensor.hpp"

namespace radformer {

// 8-bit grayscale raster, row-major.
struct ImageU8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }

  static ImageU8 blank(std::size_t w, std::size_t h, std::uint8_t fill = 0) {
    return ImageU8{w, h, std::vector<std::uint8_t>(w * h, fill)};
  }
};

inline void write_pgm(const std::string& path, const ImageU8& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
}

namespace detail {
inline int pgm_next_int(std::istream& in) {
  // skips whitespace and '#' comment lines
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v;
  if (!(in >> v)) throw std::runtime_error("pgm: malformed header");
  return v;
}
}  // namespace detail

inline ImageU8 read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P2") {
    throw std::runtime_error("read_pgm: " + path + " is not a PGM file");
  }
  const int w = detail::pgm_next_int(f);
  const int h = detail::pgm_next_int(f);
  const int maxval = detail::pgm_next_int(f);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error("read_pgm: unsupported header in " + path);
  }
  ImageU8 img = ImageU8::blank(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
  if (magic == "P5") {
    f.get();  // single whitespace after maxval
    f.read(reinterpret_cast<char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
      throw std::runtime_error("read_pgm: truncated data in " + path);
    }
  } else {
    for (auto& p : img.pixels) {
      int v;
      if (!(f >> v)) throw std::runtime_error("read_pgm: truncated data in " + path);
      p = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
    }
  }
  return img;
}

// Bilinear resampling with half-pixel centers.
template <typename T>
std::vector<T> resize_bilinear_plane(const T* src, std::size_t sw, std::size_t sh,
                                     std::size_t dw, std::size_t dh) {
  std::vector<T> out(dw * dh);
  const double sx = static_cast<double>(sw) / static_cast<double>(dw);
  const double sy = static_cast<double>(sh) / static_cast<double>(dh);
  for (std::size_t y = 0; y < dh; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::max(0.0, std::min(fy, static_cast<double>(sh - 1)));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dw; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::max(0.0, std::min(fx, static_cast<double>(sw - 1)));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - static_cast<double>(x0);
      const double v = (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                       wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
      out[y * dw + x] = static_cast<T>(v);
    }
  }
  return out;
}

inline ImageU8 resize_bilinear(const ImageU8& img, std::size_t dw, std::size_t dh) {
  std::vector<double> src(img.pixels.begin(), img.pixels.end());
  auto plane = resize_bilinear_plane(src.data(), img.width, img.height, dw, dh);
  ImageU8 out = ImageU8::blank(dw, dh);
  for (std::size_t i = 0; i < plane.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(plane[i]), 0L, 255L));
  }
  return out;
}

// [C,H,W] float resize (non-differentiable; resampled data re-enters the
// graph as a fresh leaf).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t dw, std::size_t dh) {
  if (x.rank() != 3) throw std::invalid_argument("resize_bilinear: expected [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> out = Tensor<T>::zeros({C, dh, dw});
  for (std::size_t c = 0; c < C; ++c) {
    auto plane = resize_bilinear_plane(x.values().data() + c * H * W, W, H, dw, dh);
    std::copy(plane.begin(), plane.end(), out.values().begin() + c * dh * dw);
  }
  return out;
}

// Image as a [1,H,W] tensor scaled to [0,1].
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  std::vector<T> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.pixels[i]) / T(255);
  return Tensor<T>::from_values({1, img.height, img.width}, std::move(v));
}

// Min-max scaled graymap of an arbitrary plane; used for heatmap and
// per-channel activation exports.
template <typename T>
ImageU8 plane_to_image(const T* data, std::size_t w, std::size_t h) {
  T lo = data[0], hi = data[0];
  for (std::size_t i = 1; i < w * h; ++i) {
    lo = std::min(lo, data[i]);
    hi = std::max(hi, data[i]);
  }
  ImageU8 img = ImageU8::blank(w, h);
  const double range = static_cast<double>(hi - lo);
  for (std::size_t i = 0; i < w * h; ++i) {
    const double v = range > 0 ? (static_cast<double>(data[i] - lo) / range) : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

}  // namespace radformer
