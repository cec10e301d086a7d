#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "radformer/nn.hpp"

// Checkpoint archive: 8-byte magic, little-endian u64 index length, a JSON
// index of (name, dtype, shape, byte offset), then the concatenated raw
// little-endian values. Import matches entries by name and shape.

namespace radformer {

inline constexpr char kCheckpointMagic[8] = {'R', 'A', 'D', 'F', 'C', 'K', 'P', '1'};

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<StateEntry<T>>& entries,
                     const nlohmann::ordered_json& meta = nlohmann::ordered_json::object()) {
  nlohmann::ordered_json entry_list = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    nlohmann::ordered_json rec;
    rec["name"] = e.name;
    rec["dtype"] = dtype_name<T>();
    rec["shape"] = e.shape;
    rec["offset"] = offset;
    entry_list.push_back(rec);
    offset += e.values->size() * sizeof(T);
  }
  nlohmann::ordered_json index;
  index["meta"] = meta;
  index["entries"] = std::move(entry_list);
  const std::string index_str = index.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 8);
  const std::uint64_t len = index_str.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  f.write(lenbuf, 8);
  f.write(index_str.data(), static_cast<std::streamsize>(index_str.size()));
  for (const auto& e : entries) {
    f.write(reinterpret_cast<const char*>(e.values->data()),
            static_cast<std::streamsize>(e.values->size() * sizeof(T)));
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct CheckpointRecord {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<double> values;  // widened for inspection regardless of stored dtype
};

inline std::vector<CheckpointRecord> read_checkpoint(const std::string& path,
                                                     nlohmann::json* meta_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error("read_checkpoint: " + path + " is not a checkpoint archive");
  }
  char lenbuf[8];
  f.read(lenbuf, 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  std::string index_str(len, '\0');
  f.read(index_str.data(), static_cast<std::streamsize>(len));
  nlohmann::json index = nlohmann::json::parse(index_str);
  if (meta_out) *meta_out = index.value("meta", nlohmann::json::object());

  const std::streampos payload_start = f.tellg();
  std::vector<CheckpointRecord> out;
  for (const auto& rec : index.at("entries")) {
    CheckpointRecord r;
    r.name = rec.at("name").get<std::string>();
    r.dtype = rec.at("dtype").get<std::string>();
    r.shape = rec.at("shape").get<Shape>();
    const std::uint64_t offset = rec.at("offset").get<std::uint64_t>();
    const std::size_t count = numel(r.shape);
    const std::size_t width = r.dtype == "f64" ? 8 : 4;
    if (r.dtype != "f32" && r.dtype != "f64") {
      throw std::runtime_error("read_checkpoint: unknown dtype " + r.dtype);
    }
    f.seekg(payload_start + static_cast<std::streamoff>(offset));
    std::vector<char> raw(count * width);
    f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size())) {
      throw std::runtime_error("read_checkpoint: truncated entry " + r.name);
    }
    r.values.resize(count);
    if (r.dtype == "f32") {
      for (std::size_t i = 0; i < count; ++i) {
        float v;
        std::memcpy(&v, raw.data() + i * 4, 4);
        r.values[i] = v;
      }
    } else {
      for (std::size_t i = 0; i < count; ++i) {
        std::memcpy(&r.values[i], raw.data() + i * 8, 8);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Loads matching (name, shape) entries into the model state; returns how many
// entries matched. Shape conflicts on a matching name are errors.
template <typename T>
std::size_t load_checkpoint(const std::string& path, std::vector<StateEntry<T>>& model_state) {
  auto records = read_checkpoint(path);
  std::size_t matched = 0;
  for (auto& entry : model_state) {
    for (const auto& rec : records) {
      if (rec.name != entry.name) continue;
      if (rec.shape != entry.shape) {
        throw std::runtime_error("load_checkpoint: shape mismatch for " + entry.name + ": model " +
                                 shape_str(entry.shape) + " vs file " + shape_str(rec.shape));
      }
      entry.values->assign(rec.values.begin(), rec.values.end());
      ++matched;
      break;
    }
  }
  return matched;
}

}  // namespace radformer
