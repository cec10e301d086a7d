#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "radformer/checkpoint.hpp"
#include "radformer/fusion.hpp"
#include "radformer/global_branch.hpp"
#include "radformer/image.hpp"
#include "radformer/local_branch.hpp"
#include "radformer/roi.hpp"

namespace radformer {

// Full pipeline: global backbone -> activation-heatmap ROI -> cropped patch
// -> bag-of-features backbone -> transformer fusion of the two pooled tokens.
// The ROI step is a data path: box coordinates carry no gradient and the
// local patch re-enters the graph as a leaf, so gradients reach the global
// branch through its own head and through the global token only.
template <typename T>
class RadFormer {
 public:
  struct Config {
    GlobalBackboneConfig global;
    LocalBackboneConfig local;
    FusionConfig fusion;
    roi::BinarizationStrategy binarize = roi::BinarizationStrategy::otsu();
    std::uint64_t seed = 0;

    // Presets wired together at a given input size; fusion dim follows the
    // branch channel count.
    static Config make(const std::string& global_preset, const std::string& local_preset,
                       std::size_t input_size, std::uint64_t seed) {
      Config c;
      c.global.preset = global_preset;
      c.global.input_size = input_size;
      c.local.preset = local_preset;
      c.local.input_size = input_size;
      c.fusion.model_dim = GlobalPreset::get(global_preset).feature_channels();
      if (c.fusion.model_dim % c.fusion.heads != 0) c.fusion.heads = 4;
      c.seed = seed;
      return c;
    }
  };

  struct SampleTrace {
    roi::BoundingBox box;
    roi::HeatMap heatmap;
    Tensor<T> gap_global;          // [d] graph handle
    Tensor<T> gap_local;           // [d] graph handle
    Tensor<T> fused_logits;        // [num_classes] graph handle
    std::vector<AttentionRecord> attention;
  };

  struct ForwardResult {
    Tensor<T> global_features;  // [N,d,h,w]
    Tensor<T> global_logits;    // [N,classes]
    Tensor<T> patches;          // [N,C,Sl,Sl] leaf
    Tensor<T> local_features;   // [N,d,h',w']
    Tensor<T> local_logits;
    Tensor<T> fused_logits;     // [N,classes]
    std::vector<SampleTrace> samples;
  };

  struct ForwardOptions {
    bool run_local = true;
    bool run_fusion = true;
    bool global_no_grad = false;
    bool local_no_grad = false;
    bool keep_heatmaps = false;
  };

  RadFormer() = default;

  explicit RadFormer(const Config& cfg)
      : cfg_(cfg),
        global_(cfg.global, Rng(cfg.seed).fork(1)),
        local_(cfg.local, Rng(cfg.seed).fork(2)),
        fusion_(cfg.fusion, Rng(cfg.seed).fork(3)) {
    if (global_.feature_channels() != cfg.fusion.model_dim ||
        local_.feature_channels() != cfg.fusion.model_dim) {
      throw std::invalid_argument(
          "radformer: fusion dim " + std::to_string(cfg.fusion.model_dim) +
          " must match branch channels (global " + std::to_string(global_.feature_channels()) +
          ", local " + std::to_string(local_.feature_channels()) + ")");
    }
  }

  ForwardResult forward(const Tensor<T>& images, const ForwardOptions& opts = {}) {
    Tensor<T> x = images;
    if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.rank() != 4) throw std::invalid_argument("radformer: expected [N,C,S,S] input");
    const std::size_t N = x.dim(0);

    ForwardResult res;
    if (opts.global_no_grad) {
      typename Tape<T>::NoGrad ng;
      auto g = global_.forward(x);
      res.global_features = g.features;
      res.global_logits = g.logits;
    } else {
      auto g = global_.forward(x);
      res.global_features = g.features;
      res.global_logits = g.logits;
    }
    res.samples.resize(N);
    if (!opts.run_local) return res;

    // ROI discovery and cropping run outside the graph.
    const std::size_t Sl = cfg_.local.input_size;
    const std::size_t C = x.dim(1);
    res.patches = Tensor<T>::zeros({N, C, Sl, Sl});
    for (std::size_t n = 0; n < N; ++n) {
      auto volume = sample_volume(res.global_features, n);
      auto normalized = roi::normalize_activations(volume);
      auto heat = roi::compute_heatmap(normalized, global_.total_stride());
      auto mask = roi::binarize(heat, cfg_.binarize);
      auto box = roi::extract_bbox(mask, x.dim(3), x.dim(2), global_.total_stride());
      res.samples[n].box = box;
      if (opts.keep_heatmaps) res.samples[n].heatmap = heat;
      auto patch = roi::crop_roi(sample_image(x, n), box);
      auto resized = resize_bilinear(patch, Sl, Sl);
      std::copy(resized.values().begin(), resized.values().end(),
                res.patches.values().begin() + n * C * Sl * Sl);
    }

    if (opts.local_no_grad) {
      typename Tape<T>::NoGrad ng;
      auto l = local_.forward(res.patches);
      res.local_features = l.features;
      res.local_logits = l.logits;
    } else {
      auto l = local_.forward(res.patches);
      res.local_features = l.features;
      res.local_logits = l.logits;
    }
    if (!opts.run_fusion) return res;

    auto gap_g = global_avg_pool(res.global_features);  // [N,d]
    auto gap_l = global_avg_pool(res.local_features);
    std::vector<Tensor<T>> logit_rows;
    for (std::size_t n = 0; n < N; ++n) {
      auto tg = row(gap_g, n);
      auto tl = row(gap_l, n);
      auto fused = fusion_.forward(stack_rows<T>({tg, tl}));
      res.samples[n].gap_global = tg;
      res.samples[n].gap_local = tl;
      res.samples[n].fused_logits = fused.logits;
      res.samples[n].attention = std::move(fused.attention);
      logit_rows.push_back(fused.logits);
    }
    res.fused_logits = stack_rows<T>(logit_rows);
    return res;
  }

  void set_training(bool global_mode, bool local_mode) {
    global_.set_training(global_mode);
    local_.set_training(local_mode);
  }
  void set_eval() { set_training(false, false); }

  void set_binarization(const roi::BinarizationStrategy& s) { cfg_.binarize = s; }
  const roi::BinarizationStrategy& binarization() const { return cfg_.binarize; }

  GlobalBranch<T>& global() { return global_; }
  LocalBranch<T>& local() { return local_; }
  FusionTransformer<T>& fusion() { return fusion_; }
  const Config& config() const { return cfg_; }

  std::vector<Parameter<T>*> parameters() {
    auto out = global_.parameters();
    for (auto* p : local_.parameters()) out.push_back(p);
    for (auto* p : fusion_.parameters()) out.push_back(p);
    return out;
  }

  std::vector<StateEntry<T>> state() {
    auto out = global_.state();
    for (auto& e : local_.state()) out.push_back(e);
    for (auto& e : fusion_.state()) out.push_back(e);
    return out;
  }

  const std::set<std::string>& stages_done() const { return stages_done_; }
  void mark_stage_done(const std::string& stage) { stages_done_.insert(stage); }

  void save(const std::string& path) {
    nlohmann::ordered_json meta;
    meta["stages_done"] = std::vector<std::string>(stages_done_.begin(), stages_done_.end());
    meta["global_preset"] = cfg_.global.preset;
    meta["local_preset"] = cfg_.local.preset;
    meta["input_size"] = cfg_.global.input_size;
    auto entries = state();
    save_checkpoint(path, entries, meta);
  }

  // Loads weights (strictly: every model entry must be present) and restores
  // the stage progress recorded in the checkpoint.
  void load(const std::string& path) {
    nlohmann::json meta;
    auto records = read_checkpoint(path, &meta);
    auto entries = state();
    for (auto& entry : entries) {
      bool found = false;
      for (const auto& rec : records) {
        if (rec.name != entry.name) continue;
        if (rec.shape != entry.shape) {
          throw std::runtime_error("load: shape mismatch for " + entry.name);
        }
        entry.values->assign(rec.values.begin(), rec.values.end());
        found = true;
        break;
      }
      if (!found) throw std::runtime_error("load: checkpoint is missing entry " + entry.name);
    }
    stages_done_.clear();
    if (meta.contains("stages_done")) {
      for (const auto& s : meta["stages_done"]) stages_done_.insert(s.get<std::string>());
    }
  }

  // Plain [d,h,w] value copy of one sample of a [N,d,h,w] batch (no graph).
  static Tensor<T> sample_volume(const Tensor<T>& batch, std::size_t n) {
    const std::size_t d = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<T> v(batch.values().begin() + n * d * h * w,
                     batch.values().begin() + (n + 1) * d * h * w);
    return Tensor<T>::from_values({d, h, w}, std::move(v));
  }

 private:
  static Tensor<T> sample_image(const Tensor<T>& batch, std::size_t n) {
    const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<T> v(batch.values().begin() + n * c * h * w,
                     batch.values().begin() + (n + 1) * c * h * w);
    return Tensor<T>::from_values({c, h, w}, std::move(v));
  }

  Config cfg_;
  GlobalBranch<T> global_;
  LocalBranch<T> local_;
  FusionTransformer<T> fusion_;
  std::set<std::string> stages_done_;
};

}  // namespace radformer
