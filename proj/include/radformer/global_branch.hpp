#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "radformer/nn.hpp"

namespace radformer {

struct StageSpec {
  std::size_t blocks = 0;
  std::size_t planes = 0;
  std::size_t stride = 1;
};

// Declarative layout of a residual backbone; the same table drives model
// construction, the shape arithmetic used by tests, and the published JSON
// preset docs.
struct GlobalPreset {
  std::string name;
  bool bottleneck = true;  // false: two 3x3 convs per block
  std::size_t stem_channels = 64;
  std::size_t stem_kernel = 7, stem_stride = 2, stem_pad = 3;
  bool stem_pool = true;  // 3x3 stride-2 max pool after the stem
  std::vector<StageSpec> stages;
  std::size_t default_input = 224;

  std::size_t expansion() const { return bottleneck ? 4 : 1; }
  std::size_t feature_channels() const { return stages.back().planes * expansion(); }

  std::size_t total_stride() const {
    std::size_t s = stem_stride * (stem_pool ? 2 : 1);
    for (const auto& st : stages) s *= st.stride;
    return s;
  }

  std::size_t residual_block_count() const {
    std::size_t n = 0;
    for (const auto& st : stages) n += st.blocks;
    return n;
  }

  // Spatial extent of the feature volume for a given input size, by walking
  // the declared layer list.
  std::size_t feature_extent(std::size_t input) const {
    std::size_t e = conv_out_extent(input, stem_kernel, stem_stride, stem_pad);
    if (stem_pool) e = conv_out_extent(e, 3, 2, 1);
    for (const auto& st : stages) e = conv_out_extent(e, 3, st.stride, 1);
    return e;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["block"] = bottleneck ? "bottleneck" : "basic";
    j["stem"] = {{"channels", stem_channels},
                 {"kernel", stem_kernel},
                 {"stride", stem_stride},
                 {"pad", stem_pad},
                 {"max_pool", stem_pool}};
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& st : stages) {
      j["stages"].push_back({{"blocks", st.blocks}, {"planes", st.planes}, {"stride", st.stride}});
    }
    j["feature_channels"] = feature_channels();
    j["total_stride"] = total_stride();
    j["default_input"] = default_input;
    return j;
  }

  static GlobalPreset get(const std::string& name) {
    GlobalPreset p;
    p.name = name;
    if (name == "paper-50") {
      p.bottleneck = true;
      p.stages = {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}, {3, 512, 2}};
    } else if (name == "paper-34") {
      p.bottleneck = false;
      p.stages = {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}, {3, 512, 2}};
    } else if (name == "paper-18") {
      p.bottleneck = false;
      p.stages = {{2, 64, 1}, {2, 128, 2}, {2, 256, 2}, {2, 512, 2}};
    } else if (name == "toy") {
      p.bottleneck = false;
      p.stem_channels = 16;
      p.stem_kernel = 3;
      p.stem_stride = 2;
      p.stem_pad = 1;
      p.stem_pool = false;
      p.stages = {{2, 32, 2}, {2, 64, 2}};
    } else {
      throw std::invalid_argument("unknown global preset: " + name);
    }
    return p;
  }
};

struct GlobalBackboneConfig {
  std::string preset = "toy";
  std::size_t input_size = 224;
  std::size_t num_classes = 3;
};

namespace detail {

// Padded residual block of two 3x3 convolutions.
template <typename T>
struct BasicBlock {
  Conv2dLayer<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  bool projected = false;
  Conv2dLayer<T> sc_conv;
  BatchNorm2d<T> sc_bn;

  BasicBlock() = default;
  BasicBlock(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t stride,
             Rng& rng) {
    conv1 = Conv2dLayer<T>(name + ".conv1", in_ch, out_ch, 3, stride, 1, rng);
    bn1 = BatchNorm2d<T>(name + ".bn1", out_ch);
    conv2 = Conv2dLayer<T>(name + ".conv2", out_ch, out_ch, 3, 1, 1, rng);
    bn2 = BatchNorm2d<T>(name + ".bn2", out_ch);
    projected = stride != 1 || in_ch != out_ch;
    if (projected) {
      sc_conv = Conv2dLayer<T>(name + ".shortcut.conv", in_ch, out_ch, 1, stride, 0, rng);
      sc_bn = BatchNorm2d<T>(name + ".shortcut.bn", out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) {
    auto y = relu(bn1.forward(conv1.forward(x)));
    y = bn2.forward(conv2.forward(y));
    auto sc = projected ? sc_bn.forward(sc_conv.forward(x)) : x;
    return relu(add(y, sc));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    conv1.collect(out);
    bn1.collect(out);
    conv2.collect(out);
    bn2.collect(out);
    if (projected) {
      sc_conv.collect(out);
      sc_bn.collect(out);
    }
  }
  void state(std::vector<StateEntry<T>>& out) {
    conv1.state(out);
    bn1.state(out);
    conv2.state(out);
    bn2.state(out);
    if (projected) {
      sc_conv.state(out);
      sc_bn.state(out);
    }
  }
  void set_training(bool t) {
    bn1.training = t;
    bn2.training = t;
    if (projected) sc_bn.training = t;
  }
};

// 1x1 reduce, padded 3x3, 1x1 expand (x4).
template <typename T>
struct BottleneckBlock {
  Conv2dLayer<T> conv1, conv2, conv3;
  BatchNorm2d<T> bn1, bn2, bn3;
  bool projected = false;
  Conv2dLayer<T> sc_conv;
  BatchNorm2d<T> sc_bn;

  BottleneckBlock() = default;
  BottleneckBlock(const std::string& name, std::size_t in_ch, std::size_t planes,
                  std::size_t stride, Rng& rng) {
    const std::size_t out_ch = planes * 4;
    conv1 = Conv2dLayer<T>(name + ".conv1", in_ch, planes, 1, 1, 0, rng);
    bn1 = BatchNorm2d<T>(name + ".bn1", planes);
    conv2 = Conv2dLayer<T>(name + ".conv2", planes, planes, 3, stride, 1, rng);
    bn2 = BatchNorm2d<T>(name + ".bn2", planes);
    conv3 = Conv2dLayer<T>(name + ".conv3", planes, out_ch, 1, 1, 0, rng);
    bn3 = BatchNorm2d<T>(name + ".bn3", out_ch);
    projected = stride != 1 || in_ch != out_ch;
    if (projected) {
      sc_conv = Conv2dLayer<T>(name + ".shortcut.conv", in_ch, out_ch, 1, stride, 0, rng);
      sc_bn = BatchNorm2d<T>(name + ".shortcut.bn", out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) {
    auto y = relu(bn1.forward(conv1.forward(x)));
    y = relu(bn2.forward(conv2.forward(y)));
    y = bn3.forward(conv3.forward(y));
    auto sc = projected ? sc_bn.forward(sc_conv.forward(x)) : x;
    return relu(add(y, sc));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    conv1.collect(out);
    bn1.collect(out);
    conv2.collect(out);
    bn2.collect(out);
    conv3.collect(out);
    bn3.collect(out);
    if (projected) {
      sc_conv.collect(out);
      sc_bn.collect(out);
    }
  }
  void state(std::vector<StateEntry<T>>& out) {
    conv1.state(out);
    bn1.state(out);
    conv2.state(out);
    bn2.state(out);
    conv3.state(out);
    bn3.state(out);
    if (projected) {
      sc_conv.state(out);
      sc_bn.state(out);
    }
  }
  void set_training(bool t) {
    bn1.training = t;
    bn2.training = t;
    bn3.training = t;
    if (projected) sc_bn.training = t;
  }
};

}  // namespace detail

// Residual convolutional backbone plus a linear classification head over the
// pooled features. Grayscale inputs are replicated to 3 channels at entry.
template <typename T>
class GlobalBranch {
 public:
  struct Output {
    Tensor<T> features;  // [N, d, h, w]
    Tensor<T> pooled;    // [N, d]
    Tensor<T> logits;    // [N, num_classes]
  };

  GlobalBranch() = default;

  GlobalBranch(const GlobalBackboneConfig& cfg, std::uint64_t seed,
               const std::string& name_prefix = "global")
      : cfg_(cfg), preset_(GlobalPreset::get(cfg.preset)) {
    if (cfg.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    Rng rng(seed);
    const std::string p = name_prefix + ".";
    stem_conv_ = Conv2dLayer<T>(p + "stem.conv", 3, preset_.stem_channels, preset_.stem_kernel,
                                preset_.stem_stride, preset_.stem_pad, rng);
    stem_bn_ = BatchNorm2d<T>(p + "stem.bn", preset_.stem_channels);
    std::size_t in_ch = preset_.stem_channels;
    for (std::size_t s = 0; s < preset_.stages.size(); ++s) {
      const auto& st = preset_.stages[s];
      for (std::size_t b = 0; b < st.blocks; ++b) {
        const std::string bname =
            p + "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        const std::size_t stride = b == 0 ? st.stride : 1;
        if (preset_.bottleneck) {
          bottlenecks_.emplace_back(bname, in_ch, st.planes, stride, rng);
          in_ch = st.planes * 4;
        } else {
          basics_.emplace_back(bname, in_ch, st.planes, stride, rng);
          in_ch = st.planes;
        }
      }
    }
    head_ = Linear<T>(p + "fc", preset_.feature_channels(), cfg.num_classes, rng);
  }

  Output forward(const Tensor<T>& images) {
    Tensor<T> x = prepare_input(images);
    x = relu(stem_bn_.forward(stem_conv_.forward(x)));
    if (preset_.stem_pool) x = max_pool2d(x, 3, 2, 1);
    if (preset_.bottleneck) {
      for (auto& b : bottlenecks_) x = b.forward(x);
    } else {
      for (auto& b : basics_) x = b.forward(x);
    }
    Output out;
    out.features = x;
    out.pooled = global_avg_pool(x);
    out.logits = head_.forward(out.pooled);
    return out;
  }

  void set_training(bool t) {
    stem_bn_.training = t;
    for (auto& b : basics_) b.set_training(t);
    for (auto& b : bottlenecks_) b.set_training(t);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    stem_conv_.collect(out);
    stem_bn_.collect(out);
    for (auto& b : basics_) b.collect(out);
    for (auto& b : bottlenecks_) b.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<StateEntry<T>> state() {
    std::vector<StateEntry<T>> out;
    stem_conv_.state(out);
    stem_bn_.state(out);
    for (auto& b : basics_) b.state(out);
    for (auto& b : bottlenecks_) b.state(out);
    head_.state(out);
    return out;
  }

  const GlobalPreset& preset() const { return preset_; }
  const GlobalBackboneConfig& config() const { return cfg_; }
  std::size_t total_stride() const { return preset_.total_stride(); }
  std::size_t feature_channels() const { return preset_.feature_channels(); }

 private:
  Tensor<T> prepare_input(const Tensor<T>& images) const {
    Tensor<T> x = images;
    if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.rank() != 4 || (x.dim(1) != 1 && x.dim(1) != 3)) {
      throw std::invalid_argument("global branch: expected [N,1|3,S,S] input, got " +
                                  shape_str(images.shape()));
    }
    if (x.dim(2) != cfg_.input_size || x.dim(3) != cfg_.input_size) {
      throw std::invalid_argument("global branch: input is " + std::to_string(x.dim(2)) + "x" +
                                  std::to_string(x.dim(3)) + " but the configured size is " +
                                  std::to_string(cfg_.input_size) +
                                  " (the caller is responsible for resizing)");
    }
    if (x.dim(1) == 1) x = replicate_channels(x, 3);
    return x;
  }

  GlobalBackboneConfig cfg_;
  GlobalPreset preset_;
  Conv2dLayer<T> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  std::vector<detail::BasicBlock<T>> basics_;
  std::vector<detail::BottleneckBlock<T>> bottlenecks_;
  Linear<T> head_;
};

}  // namespace radformer
