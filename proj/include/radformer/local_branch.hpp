#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "radformer/nn.hpp"

namespace radformer {

// One entry per convolution in forward order; receptive-field and output
// extent arithmetic walk this table. All local-branch convolutions are
// unpadded, which is what pins the receptive-field bound exactly.
struct SpatialOp {
  std::size_t kernel = 1;
  std::size_t stride = 1;
};

struct LocalStageSpec {
  std::size_t blocks = 0;
  std::size_t planes = 0;
  std::size_t stride = 1;  // applied by the first block's mid convolution
};

struct LocalPreset {
  std::string name;
  std::size_t stem_channels = 64;
  std::vector<LocalStageSpec> stages;
  std::size_t expansion = 4;
  std::size_t default_input = 224;

  std::size_t feature_channels() const { return stages.back().planes * expansion; }

  // Spatial convolution chain: 1x1 stem, 3x3 stem, then per stage one 3x3
  // (first block, carrying the stage stride) and 1x1s everywhere else.
  std::vector<SpatialOp> spatial_ops() const {
    std::vector<SpatialOp> ops;
    ops.push_back({1, 1});
    ops.push_back({3, 1});
    for (const auto& st : stages) {
      for (std::size_t b = 0; b < st.blocks; ++b) {
        const bool first = b == 0;
        ops.push_back({first ? std::size_t{3} : std::size_t{1}, first ? st.stride : 1});
        ops.push_back({1, 1});
        ops.push_back({1, 1});
      }
    }
    return ops;
  }

  std::size_t receptive_field() const {
    std::size_t rf = 1, jump = 1;
    for (const auto& op : spatial_ops()) {
      rf += (op.kernel - 1) * jump;
      jump *= op.stride;
    }
    return rf;
  }

  std::size_t total_jump() const {
    std::size_t j = 1;
    for (const auto& op : spatial_ops()) j *= op.stride;
    return j;
  }

  std::size_t feature_extent(std::size_t input) const {
    std::size_t e = input;
    for (const auto& op : spatial_ops()) {
      if (e < op.kernel) throw std::invalid_argument("local preset: input too small");
      e = (e - op.kernel) / op.stride + 1;
    }
    return e;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["stem_channels"] = stem_channels;
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& st : stages) {
      j["stages"].push_back({{"blocks", st.blocks}, {"planes", st.planes}, {"stride", st.stride}});
    }
    j["expansion"] = expansion;
    j["feature_channels"] = feature_channels();
    j["receptive_field"] = receptive_field();
    j["default_input"] = default_input;
    j["spatial_ops"] = nlohmann::ordered_json::array();
    for (const auto& op : spatial_ops()) {
      j["spatial_ops"].push_back({{"kernel", op.kernel}, {"stride", op.stride}, {"pad", 0}});
    }
    return j;
  }

  static LocalPreset get(const std::string& name) {
    LocalPreset p;
    p.name = name;
    if (name == "paper-33") {
      p.stem_channels = 64;
      p.stages = {{3, 64, 2}, {4, 128, 2}, {6, 256, 2}, {3, 512, 1}};
      p.expansion = 4;
    } else if (name == "toy") {
      p.stem_channels = 16;
      p.stages = {{2, 16, 2}, {2, 32, 2}};
      p.expansion = 2;
      p.default_input = 64;
    } else {
      throw std::invalid_argument("unknown local preset: " + name);
    }
    return p;
  }
};

struct LocalBackboneConfig {
  std::string preset = "toy";
  std::size_t input_size = 224;
  std::size_t num_classes = 3;
};

// Inclusive pixel window [x_min,x_max] x [y_min,y_max] feeding one feature
// site.
struct PixelWindow {
  int x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  std::size_t width() const { return static_cast<std::size_t>(x_max - x_min + 1); }
  std::size_t height() const { return static_cast<std::size_t>(y_max - y_min + 1); }
};

namespace detail {

// Bag-of-features residual block: unpadded mid convolution (3x3 in the first
// block of a stage, 1x1 otherwise) followed by two 1x1 convolutions, each
// conv+bn+relu. The shortcut is a 1x1 projection when shape changes and is
// cropped top-left to match the unpadded main path.
template <typename T>
struct BofBlock {
  Conv2dLayer<T> conv_mid, conv_a, conv_b;
  BatchNorm2d<T> bn_mid, bn_a, bn_b;
  bool projected = false;
  Conv2dLayer<T> sc_conv;
  BatchNorm2d<T> sc_bn;

  BofBlock() = default;
  BofBlock(const std::string& name, std::size_t in_ch, std::size_t planes, std::size_t out_ch,
           std::size_t mid_kernel, std::size_t stride, Rng& rng) {
    conv_mid = Conv2dLayer<T>(name + ".conv1", in_ch, planes, mid_kernel, stride, 0, rng);
    bn_mid = BatchNorm2d<T>(name + ".bn1", planes);
    conv_a = Conv2dLayer<T>(name + ".conv2", planes, planes, 1, 1, 0, rng);
    bn_a = BatchNorm2d<T>(name + ".bn2", planes);
    conv_b = Conv2dLayer<T>(name + ".conv3", planes, out_ch, 1, 1, 0, rng);
    bn_b = BatchNorm2d<T>(name + ".bn3", out_ch);
    projected = stride != 1 || in_ch != out_ch || mid_kernel != 1;
    if (projected) {
      sc_conv = Conv2dLayer<T>(name + ".shortcut.conv", in_ch, out_ch, 1, stride, 0, rng);
      sc_bn = BatchNorm2d<T>(name + ".shortcut.bn", out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) {
    auto y = relu(bn_mid.forward(conv_mid.forward(x)));
    y = relu(bn_a.forward(conv_a.forward(y)));
    y = relu(bn_b.forward(conv_b.forward(y)));
    Tensor<T> sc = projected ? sc_bn.forward(sc_conv.forward(x)) : x;
    sc = crop2d(sc, y.dim(2), y.dim(3));
    return relu(add(y, sc));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    conv_mid.collect(out);
    bn_mid.collect(out);
    conv_a.collect(out);
    bn_a.collect(out);
    conv_b.collect(out);
    bn_b.collect(out);
    if (projected) {
      sc_conv.collect(out);
      sc_bn.collect(out);
    }
  }
  void state(std::vector<StateEntry<T>>& out) {
    conv_mid.state(out);
    bn_mid.state(out);
    conv_a.state(out);
    bn_a.state(out);
    conv_b.state(out);
    bn_b.state(out);
    if (projected) {
      sc_conv.state(out);
      sc_bn.state(out);
    }
  }
  void set_training(bool t) {
    bn_mid.training = t;
    bn_a.training = t;
    bn_b.training = t;
    if (projected) sc_bn.training = t;
  }
};

}  // namespace detail

// Bag-of-features backbone: every channel of the output volume is one visual
// word whose receptive field is capped by the unpadded convolution chain
// (33x33 pixels for the paper preset).
template <typename T>
class LocalBranch {
 public:
  struct Output {
    Tensor<T> features;  // [N, d, h', w']
    Tensor<T> pooled;    // [N, d]
    Tensor<T> logits;    // [N, num_classes]
  };

  LocalBranch() = default;

  LocalBranch(const LocalBackboneConfig& cfg, std::uint64_t seed,
              const std::string& name_prefix = "local")
      : cfg_(cfg), preset_(LocalPreset::get(cfg.preset)) {
    Rng rng(seed);
    const std::string p = name_prefix + ".";
    stem_conv1_ = Conv2dLayer<T>(p + "stem.conv1", 3, preset_.stem_channels, 1, 1, 0, rng);
    stem_bn1_ = BatchNorm2d<T>(p + "stem.bn1", preset_.stem_channels);
    stem_conv2_ =
        Conv2dLayer<T>(p + "stem.conv2", preset_.stem_channels, preset_.stem_channels, 3, 1, 0, rng);
    stem_bn2_ = BatchNorm2d<T>(p + "stem.bn2", preset_.stem_channels);
    std::size_t in_ch = preset_.stem_channels;
    for (std::size_t s = 0; s < preset_.stages.size(); ++s) {
      const auto& st = preset_.stages[s];
      const std::size_t out_ch = st.planes * preset_.expansion;
      for (std::size_t b = 0; b < st.blocks; ++b) {
        const std::string bname = p + "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        const bool first = b == 0;
        blocks_.emplace_back(bname, in_ch, st.planes, out_ch, first ? 3 : 1,
                             first ? st.stride : 1, rng);
        in_ch = out_ch;
      }
    }
    head_ = Linear<T>(p + "fc", preset_.feature_channels(), cfg.num_classes, rng);
  }

  Output forward(const Tensor<T>& patches) {
    Tensor<T> x = prepare_input(patches);
    x = relu(stem_bn1_.forward(stem_conv1_.forward(x)));
    x = relu(stem_bn2_.forward(stem_conv2_.forward(x)));
    for (auto& b : blocks_) x = b.forward(x);
    Output out;
    out.features = x;
    out.pooled = global_avg_pool(x);
    out.logits = head_.forward(out.pooled);
    return out;
  }

  // Exact input window that can influence the feature site (row, col),
  // computed by composing the kernel/stride chain backwards and clamping to
  // the image bounds.
  PixelWindow receptive_field_probe(std::size_t row, std::size_t col) const {
    const std::size_t extent = preset_.feature_extent(cfg_.input_size);
    if (row >= extent || col >= extent) {
      throw std::invalid_argument("receptive_field_probe: site (" + std::to_string(row) + "," +
                                  std::to_string(col) + ") outside " + std::to_string(extent) +
                                  "x" + std::to_string(extent) + " feature grid");
    }
    long long lo_r = static_cast<long long>(row), hi_r = static_cast<long long>(row);
    long long lo_c = static_cast<long long>(col), hi_c = static_cast<long long>(col);
    const auto ops = preset_.spatial_ops();
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
      lo_r = lo_r * static_cast<long long>(it->stride);
      hi_r = hi_r * static_cast<long long>(it->stride) + static_cast<long long>(it->kernel) - 1;
      lo_c = lo_c * static_cast<long long>(it->stride);
      hi_c = hi_c * static_cast<long long>(it->stride) + static_cast<long long>(it->kernel) - 1;
    }
    const long long max_i = static_cast<long long>(cfg_.input_size) - 1;
    PixelWindow w;
    w.y_min = static_cast<int>(std::clamp(lo_r, 0LL, max_i));
    w.y_max = static_cast<int>(std::clamp(hi_r, 0LL, max_i));
    w.x_min = static_cast<int>(std::clamp(lo_c, 0LL, max_i));
    w.x_max = static_cast<int>(std::clamp(hi_c, 0LL, max_i));
    return w;
  }

  void set_training(bool t) {
    stem_bn1_.training = t;
    stem_bn2_.training = t;
    for (auto& b : blocks_) b.set_training(t);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    stem_conv1_.collect(out);
    stem_bn1_.collect(out);
    stem_conv2_.collect(out);
    stem_bn2_.collect(out);
    for (auto& b : blocks_) b.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<StateEntry<T>> state() {
    std::vector<StateEntry<T>> out;
    stem_conv1_.state(out);
    stem_bn1_.state(out);
    stem_conv2_.state(out);
    stem_bn2_.state(out);
    for (auto& b : blocks_) b.state(out);
    head_.state(out);
    return out;
  }

  const LocalPreset& preset() const { return preset_; }
  const LocalBackboneConfig& config() const { return cfg_; }
  std::size_t feature_channels() const { return preset_.feature_channels(); }

 private:
  Tensor<T> prepare_input(const Tensor<T>& patches) const {
    Tensor<T> x = patches;
    if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.rank() != 4 || (x.dim(1) != 1 && x.dim(1) != 3)) {
      throw std::invalid_argument("local branch: expected [N,1|3,S,S] input");
    }
    if (x.dim(2) != cfg_.input_size || x.dim(3) != cfg_.input_size) {
      throw std::invalid_argument("local branch: input is " + std::to_string(x.dim(2)) + "x" +
                                  std::to_string(x.dim(3)) + " but the configured size is " +
                                  std::to_string(cfg_.input_size));
    }
    if (x.dim(1) == 1) x = replicate_channels(x, 3);
    return x;
  }

  LocalBackboneConfig cfg_;
  LocalPreset preset_;
  Conv2dLayer<T> stem_conv1_, stem_conv2_;
  BatchNorm2d<T> stem_bn1_, stem_bn2_;
  std::vector<detail::BofBlock<T>> blocks_;
  Linear<T> head_;
};

}  // namespace radformer
