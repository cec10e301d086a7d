#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "radformer/image.hpp"
#include "radformer/rng.hpp"
#include "radformer/roi.hpp"

namespace radformer::data {

inline constexpr int kNumClasses = 3;
inline const std::vector<std::string> kClassNames = {"normal", "benign", "malignant"};

// The 7-entry radiology feature vocabulary. Ids 0-3 accompany malignancy,
// ids 4-6 accompany benign pathology.
inline const std::vector<std::string> kDefaultVocabulary = {
    "loss-of-interface", "vascular-invasion",  "biliary-invasion", "extramural-mass",
    "intramural-cyst",   "intramural-foci",    "mural-stratification"};

inline const std::vector<int> kMalignantLexicons = {0, 1, 2, 3};
inline const std::vector<int> kBenignLexicons = {4, 5, 6};

struct Sample {
  std::string path;
  std::string patient_id;
  int label = 0;  // 0 normal, 1 benign, 2 malignant
  std::optional<roi::BoundingBox> roi_box;
  std::optional<std::vector<int>> lexicons;  // ids into the vocabulary
};

struct Manifest {
  std::vector<Sample> samples;
  std::vector<std::string> vocabulary;
};

namespace detail {
inline void fail_record(std::size_t index, const std::string& why) {
  throw std::runtime_error("manifest: record " + std::to_string(index) + ": " + why);
}
}  // namespace detail

inline Manifest manifest_from_json(const nlohmann::json& j, const std::string& base_dir,
                                   bool check_files) {
  Manifest m;
  if (j.contains("vocabulary")) {
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  } else {
    m.vocabulary = kDefaultVocabulary;
  }
  std::size_t idx = 0;
  for (const auto& rec : j.at("samples")) {
    Sample s;
    if (!rec.contains("path") || !rec.contains("patient_id") || !rec.contains("label")) {
      detail::fail_record(idx, "missing path, patient_id, or label");
    }
    s.path = rec.at("path").get<std::string>();
    if (!s.path.empty() && s.path[0] != '/' && !base_dir.empty()) {
      s.path = base_dir + "/" + s.path;
    }
    s.patient_id = rec.at("patient_id").get<std::string>();
    if (s.patient_id.empty()) detail::fail_record(idx, "empty patient_id");
    s.label = rec.at("label").get<int>();
    if (s.label < 0 || s.label >= kNumClasses) {
      detail::fail_record(idx, "label " + std::to_string(s.label) + " out of range");
    }
    if (rec.contains("roi")) {
      const auto& r = rec.at("roi");
      if (!r.is_array() || r.size() != 4) detail::fail_record(idx, "roi must be [x_min,y_min,x_max,y_max]");
      roi::BoundingBox b{r[0].get<int>(), r[1].get<int>(), r[2].get<int>(), r[3].get<int>()};
      if (b.x_min < 0 || b.y_min < 0) detail::fail_record(idx, "roi has negative x_min or y_min");
      if (b.x_max < b.x_min) detail::fail_record(idx, "roi has x_max < x_min");
      if (b.y_max < b.y_min) detail::fail_record(idx, "roi has y_max < y_min");
      s.roi_box = b;
    }
    if (rec.contains("lexicons")) {
      auto lex = rec.at("lexicons").get<std::vector<int>>();
      for (int l : lex) {
        if (l < 0 || static_cast<std::size_t>(l) >= m.vocabulary.size()) {
          detail::fail_record(idx, "lexicon id " + std::to_string(l) + " outside vocabulary");
        }
      }
      std::sort(lex.begin(), lex.end());
      lex.erase(std::unique(lex.begin(), lex.end()), lex.end());
      s.lexicons = std::move(lex);
    }
    if (check_files && !std::filesystem::exists(s.path)) {
      detail::fail_record(idx, "image file does not exist: " + s.path);
    }
    m.samples.push_back(std::move(s));
    ++idx;
  }
  return m;
}

inline Manifest load_manifest(const std::string& path, bool check_files = true) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("manifest: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: malformed JSON in " + path + ": " + e.what());
  }
  const auto base = std::filesystem::path(path).parent_path().string();
  return manifest_from_json(j, base, check_files);
}

inline nlohmann::ordered_json manifest_to_json(const Manifest& m, const std::string& strip_prefix = "") {
  nlohmann::ordered_json j;
  j["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : m.samples) {
    nlohmann::ordered_json rec;
    std::string path = s.path;
    if (!strip_prefix.empty() && path.rfind(strip_prefix, 0) == 0) {
      path = path.substr(strip_prefix.size());
      while (!path.empty() && path[0] == '/') path = path.substr(1);
    }
    rec["path"] = path;
    rec["patient_id"] = s.patient_id;
    rec["label"] = s.label;
    if (s.roi_box) {
      rec["roi"] = {s.roi_box->x_min, s.roi_box->y_min, s.roi_box->x_max, s.roi_box->y_max};
    }
    if (s.lexicons) rec["lexicons"] = *s.lexicons;
    j["samples"].push_back(std::move(rec));
  }
  j["vocabulary"] = m.vocabulary;
  return j;
}

inline void save_manifest(const std::string& path, const Manifest& m,
                          const std::string& strip_prefix = "") {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("manifest: cannot open " + path + " for writing");
  f << manifest_to_json(m, strip_prefix).dump(2) << "\n";
}

struct AugmentConfig {
  std::size_t resize_short = 256;
  std::size_t crop = 224;
  double mean = 0.5;
  double stddev = 0.25;
};

// Deterministic resize / center-crop / standardize pipeline producing a
// [1,crop,crop] tensor. train_mode is part of the interface; the pipeline is
// identical in both modes since none of the steps are stochastic.
template <typename T>
Tensor<T> augment(const ImageU8& img, bool train_mode, const AugmentConfig& cfg = {}) {
  (void)train_mode;
  if (img.width == 0 || img.height == 0) throw std::invalid_argument("augment: empty image");
  const double scale =
      static_cast<double>(cfg.resize_short) / static_cast<double>(std::min(img.width, img.height));
  const std::size_t rw = std::max<std::size_t>(
      cfg.resize_short, static_cast<std::size_t>(std::lround(img.width * scale)));
  const std::size_t rh = std::max<std::size_t>(
      cfg.resize_short, static_cast<std::size_t>(std::lround(img.height * scale)));
  ImageU8 resized = (rw == img.width && rh == img.height) ? img : resize_bilinear(img, rw, rh);
  if (rw < cfg.crop || rh < cfg.crop) {
    throw std::invalid_argument("augment: resized image smaller than crop window");
  }
  const std::size_t x0 = (rw - cfg.crop) / 2;
  const std::size_t y0 = (rh - cfg.crop) / 2;
  std::vector<T> out(cfg.crop * cfg.crop);
  for (std::size_t y = 0; y < cfg.crop; ++y)
    for (std::size_t x = 0; x < cfg.crop; ++x) {
      const double v = resized.at(x0 + x, y0 + y) / 255.0;
      out[y * cfg.crop + x] = static_cast<T>((v - cfg.mean) / cfg.stddev);
    }
  return Tensor<T>::from_values({1, cfg.crop, cfg.crop}, std::move(out));
}

// Maps an annotation box through the same resize / center-crop transform.
inline roi::BoundingBox augment_box(const roi::BoundingBox& box, std::size_t img_w,
                                    std::size_t img_h, const AugmentConfig& cfg = {}) {
  const double scale =
      static_cast<double>(cfg.resize_short) / static_cast<double>(std::min(img_w, img_h));
  const std::size_t rw =
      std::max<std::size_t>(cfg.resize_short, static_cast<std::size_t>(std::lround(img_w * scale)));
  const std::size_t rh =
      std::max<std::size_t>(cfg.resize_short, static_cast<std::size_t>(std::lround(img_h * scale)));
  const long long x0 = static_cast<long long>((rw - cfg.crop) / 2);
  const long long y0 = static_cast<long long>((rh - cfg.crop) / 2);
  const long long hi = static_cast<long long>(cfg.crop) - 1;
  roi::BoundingBox out;
  out.x_min = static_cast<int>(std::clamp(std::llround(box.x_min * scale) - x0, 0LL, hi));
  out.x_max = static_cast<int>(std::clamp(std::llround(box.x_max * scale) - x0, 0LL, hi));
  out.y_min = static_cast<int>(std::clamp(std::llround(box.y_min * scale) - y0, 0LL, hi));
  out.y_max = static_cast<int>(std::clamp(std::llround(box.y_max * scale) - y0, 0LL, hi));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic glyph corpus.
//
// Each lexicon is a distinct 15x15 binary glyph; a class decides which glyph
// family an image carries (normal: none). Glyphs cluster inside a bright
// organ disk on a speckle background, and the annotated ROI is the tight box
// around the disk and everything stamped into it. The generator is fully
// seeded, so identical seeds give a byte-identical corpus.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kGlyphSize = 15;  // base pattern grid; stamps are scaled up

// Procedural binary stamp for lexicon `id` (0-6). The seven patterns were
// chosen to keep the worst pairwise matched-filter cross-correlation under
// 0.3 of the self response, so channel-level detectors stay separable.
inline std::vector<std::uint8_t> glyph_pattern(int id) {
  const std::size_t G = kGlyphSize;
  std::vector<std::uint8_t> g(G * G, 0);
  auto set = [&](std::size_t x, std::size_t y) { g[y * G + x] = 1; };
  for (std::size_t y = 0; y < G; ++y) {
    for (std::size_t x = 0; x < G; ++x) {
      const long long dx = static_cast<long long>(x), dy = static_cast<long long>(y);
      const long long c = static_cast<long long>(G / 2);
      switch (id) {
        case 0:  // diagonal stripes, period 4
          if (((dx + dy) / 2) % 2 == 0) set(x, y);
          break;
        case 1:  // anti-diagonal stripes, period 4 (offset keeps phase)
          if (((dx - dy + 32) / 2) % 2 == 0) set(x, y);
          break;
        case 2:  // concentric square rings
          if (std::max(std::abs(dx - c), std::abs(dy - c)) % 2 == 0) set(x, y);
          break;
        case 3:  // hollow diamond
          if (std::abs(dx - c) + std::abs(dy - c) == c) set(x, y);
          break;
        case 4:  // horizontal stripes, period 4
          if (y % 4 < 2) set(x, y);
          break;
        case 5:  // vertical stripes, period 4
          if (x % 4 < 2) set(x, y);
          break;
        case 6:  // checkerboard of 3x3 cells
          if (((x / 3) + (y / 3)) % 2 == 0) set(x, y);
          break;
        default:
          throw std::invalid_argument("glyph_pattern: id out of range");
      }
    }
  }
  return g;
}

// Nearest-neighbor upscale of a base pattern; coarse stamps survive the
// downscaling into small model inputs.
inline std::vector<std::uint8_t> glyph_stamp(int id, std::size_t scale) {
  const auto base = glyph_pattern(id);
  const std::size_t G = kGlyphSize * scale;
  std::vector<std::uint8_t> out(G * G);
  for (std::size_t y = 0; y < G; ++y)
    for (std::size_t x = 0; x < G; ++x)
      out[y * G + x] = base[(y / scale) * kGlyphSize + (x / scale)];
  return out;
}

struct SynthConfig {
  std::size_t image_size = 256;
  std::size_t images_per_patient = 5;
  std::uint8_t background_speckle = 28;  // max speckle amplitude
  std::uint8_t organ_intensity = 104;
  std::uint8_t glyph_intensity = 235;
  std::size_t stamps_per_lexicon = 1;
  std::size_t glyph_scale = 3;

  std::size_t stamp_size() const { return kGlyphSize * glyph_scale; }
};

struct SynthResult {
  Manifest manifest;
  std::string directory;
};

// Writes PGM images plus manifest.json under out_dir and returns the
// manifest (paths absolute).
inline SynthResult synth_generate(std::uint64_t seed, std::size_t n_patients,
                                  const std::string& out_dir, const SynthConfig& cfg = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Rng rng(seed);
  Manifest manifest;
  manifest.vocabulary = kDefaultVocabulary;

  const std::size_t S = cfg.image_size;
  for (std::size_t p = 0; p < n_patients; ++p) {
    const int cls = static_cast<int>(p % 3);  // balanced classes across patients
    const std::string patient = "synth-" + std::to_string(p);
    for (std::size_t k = 0; k < cfg.images_per_patient; ++k) {
      ImageU8 img = ImageU8::blank(S, S);
      for (auto& px : img.pixels) {
        px = static_cast<std::uint8_t>(rng.index(cfg.background_speckle + 1));
      }

      // Organ disk placed away from borders, large enough to host the stamps.
      const std::size_t margin = S / 3;
      const std::size_t cx = margin + rng.index(S - 2 * margin);
      const std::size_t cy = margin + rng.index(S - 2 * margin);
      const std::size_t radius = S / 5 + rng.index(S / 16);
      long long bx0 = static_cast<long long>(cx) - static_cast<long long>(radius);
      long long bx1 = static_cast<long long>(cx) + static_cast<long long>(radius);
      long long by0 = static_cast<long long>(cy) - static_cast<long long>(radius);
      long long by1 = static_cast<long long>(cy) + static_cast<long long>(radius);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const long long dx = static_cast<long long>(x) - static_cast<long long>(cx);
          const long long dy = static_cast<long long>(y) - static_cast<long long>(cy);
          if (dx * dx + dy * dy <= static_cast<long long>(radius * radius)) {
            img.at(x, y) = static_cast<std::uint8_t>(
                cfg.organ_intensity + static_cast<int>(rng.index(17)) - 8);
          }
        }

      std::vector<int> lexicons;
      if (cls != 0) {
        const auto& family = cls == 2 ? kMalignantLexicons : kBenignLexicons;
        const std::size_t count = 1 + rng.index(2);  // 1 or 2 lexicons per image
        std::vector<int> pool = family;
        rng.shuffle(pool);
        lexicons.assign(pool.begin(), pool.begin() + std::min(count, pool.size()));
        std::sort(lexicons.begin(), lexicons.end());

        const std::size_t stamp_sz = cfg.stamp_size();
        const std::size_t total_slots = lexicons.size() * cfg.stamps_per_lexicon;
        const double base_angle = rng.uniform(0.0, 6.283185307179586);
        std::size_t slot = 0;
        for (int lex : lexicons) {
          const auto pattern = glyph_stamp(lex, cfg.glyph_scale);
          for (std::size_t stamp = 0; stamp < cfg.stamps_per_lexicon; ++stamp, ++slot) {
            // one angular slot per stamp keeps the large stamps from painting
            // over each other while still spreading them across the disk
            const double ang =
                base_angle + 6.283185307179586 * static_cast<double>(slot) /
                                 static_cast<double>(total_slots);
            const double rad = total_slots == 1
                                   ? rng.uniform(0.0, 0.35) * static_cast<double>(radius)
                                   : rng.uniform(0.40, 0.52) * static_cast<double>(radius);
            const long long gx = static_cast<long long>(cx) +
                                 static_cast<long long>(std::lround(std::cos(ang) * rad)) -
                                 static_cast<long long>(stamp_sz) / 2;
            const long long gy = static_cast<long long>(cy) +
                                 static_cast<long long>(std::lround(std::sin(ang) * rad)) -
                                 static_cast<long long>(stamp_sz) / 2;
            for (std::size_t yy = 0; yy < stamp_sz; ++yy)
              for (std::size_t xx = 0; xx < stamp_sz; ++xx) {
                if (!pattern[yy * stamp_sz + xx]) continue;
                const long long px = gx + static_cast<long long>(xx);
                const long long py = gy + static_cast<long long>(yy);
                if (px < 0 || py < 0 || px >= static_cast<long long>(S) ||
                    py >= static_cast<long long>(S))
                  continue;
                img.at(static_cast<std::size_t>(px), static_cast<std::size_t>(py)) =
                    cfg.glyph_intensity;
                bx0 = std::min(bx0, px);
                bx1 = std::max(bx1, px);
                by0 = std::min(by0, py);
                by1 = std::max(by1, py);
              }
          }
        }
      }

      roi::BoundingBox box;
      box.x_min = static_cast<int>(std::clamp(bx0, 0LL, static_cast<long long>(S) - 1));
      box.x_max = static_cast<int>(std::clamp(bx1, 0LL, static_cast<long long>(S) - 1));
      box.y_min = static_cast<int>(std::clamp(by0, 0LL, static_cast<long long>(S) - 1));
      box.y_max = static_cast<int>(std::clamp(by1, 0LL, static_cast<long long>(S) - 1));

      const std::string filename =
          patient + "-img" + std::to_string(k) + "-c" + std::to_string(cls) + ".pgm";
      const std::string full = out_dir + "/" + filename;
      write_pgm(full, img);

      Sample s;
      s.path = full;
      s.patient_id = patient;
      s.label = cls;
      s.roi_box = box;
      s.lexicons = lexicons;  // empty list for normal images
      manifest.samples.push_back(std::move(s));
    }
  }
  save_manifest(out_dir + "/manifest.json", manifest, out_dir);
  return {std::move(manifest), out_dir};
}

}  // namespace radformer::data
