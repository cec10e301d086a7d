#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "radformer/nn.hpp"

namespace radformer {

// Attention-based fusion of the two pooled branch tokens. No positional
// encoding and no class token: the sequence is always [global, local].
struct FusionConfig {
  std::size_t depth = 4;
  std::size_t heads = 16;
  std::size_t model_dim = 2048;          // must match both branch channel counts
  std::size_t mlp_hidden = 0;            // 0 selects 4 * model_dim
  bool output_projection = true;         // learned projection after head concat
  std::size_t num_classes = 3;

  std::size_t head_dim() const { return model_dim / heads; }
  std::size_t hidden() const { return mlp_hidden ? mlp_hidden : 4 * model_dim; }

  void validate() const {
    if (depth < 1) throw std::invalid_argument("fusion: depth must be >= 1");
    if (heads < 1 || model_dim % heads != 0) {
      throw std::invalid_argument("fusion: model_dim " + std::to_string(model_dim) +
                                  " is not divisible by " + std::to_string(heads) + " heads");
    }
  }
};

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  double scores[4] = {0, 0, 0, 0};  // row-major 2x2, rows sum to 1
};

// psi(X) = softmax(Q K^T / sqrt(dh)) V with Q = X Wq^T etc.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
                         const Tensor<T>& wv, Tensor<T>* scores_out = nullptr) {
  if (x.rank() != 2) throw std::invalid_argument("self_attention: expected [n,dh] input");
  const std::size_t dh = x.dim(1);
  auto q = matmul_nt(x, wq);
  auto k = matmul_nt(x, wk);
  auto v = matmul_nt(x, wv);
  auto scores = softmax(scale(matmul_nt(q, k), T(1) / static_cast<T>(std::sqrt(double(dh)))));
  if (scores_out) *scores_out = scores;
  return matmul(scores, v);
}

// Feature-axis split into one slice per head, per-head self-attention,
// concatenation, and an optional learned output projection. Weight vectors
// hold one [dh,dh] matrix per head.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const std::vector<Tensor<T>>& wq,
                               const std::vector<Tensor<T>>& wk, const std::vector<Tensor<T>>& wv,
                               const Tensor<T>& output_projection = Tensor<T>{},
                               std::vector<Tensor<T>>* head_scores = nullptr) {
  if (x.rank() != 2 || wq.empty() || wq.size() != wk.size() || wq.size() != wv.size()) {
    throw std::invalid_argument("multi_head_attention: need one weight triplet per head");
  }
  const std::size_t heads = wq.size();
  if (x.dim(1) % heads != 0) {
    throw std::invalid_argument("multi_head_attention: feature dim " + std::to_string(x.dim(1)) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = x.dim(1) / heads;
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto slice = slice_cols(x, h * dh, (h + 1) * dh);
    Tensor<T> scores;
    outs.push_back(self_attention(slice, wq[h], wk[h], wv[h], &scores));
    if (head_scores) head_scores->push_back(scores);
  }
  auto cat = heads == 1 ? outs[0] : concat_cols(outs);
  return output_projection.defined() ? matmul_nt(cat, output_projection) : cat;
}

namespace detail {

template <typename T>
struct FusionLayer {
  std::vector<Parameter<T>> wq, wk, wv;  // one [dh,dh] triplet per head
  Parameter<T> wo;                       // [d,d] output projection (optional)
  Linear<T> mlp1, mlp2;
  LayerNormLayer<T> ln1, ln2;
  bool use_wo = true;

  FusionLayer() = default;
  FusionLayer(const std::string& name, const FusionConfig& cfg, Rng& rng) : use_wo(cfg.output_projection) {
    const std::size_t dh = cfg.head_dim();
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string hn = name + ".head" + std::to_string(h);
      Parameter<T> q, k, v;
      q.name = hn + ".wq";
      q.tensor = Tensor<T>::leaf({dh, dh}, he_normal<T>(rng, dh * dh, dh), true);
      k.name = hn + ".wk";
      k.tensor = Tensor<T>::leaf({dh, dh}, he_normal<T>(rng, dh * dh, dh), true);
      v.name = hn + ".wv";
      v.tensor = Tensor<T>::leaf({dh, dh}, he_normal<T>(rng, dh * dh, dh), true);
      wq.push_back(std::move(q));
      wk.push_back(std::move(k));
      wv.push_back(std::move(v));
    }
    if (use_wo) {
      wo.name = name + ".wo";
      wo.tensor = Tensor<T>::leaf({cfg.model_dim, cfg.model_dim},
                                  he_normal<T>(rng, cfg.model_dim * cfg.model_dim, cfg.model_dim),
                                  true);
    }
    mlp1 = Linear<T>(name + ".mlp.fc1", cfg.model_dim, cfg.hidden(), rng);
    mlp2 = Linear<T>(name + ".mlp.fc2", cfg.hidden(), cfg.model_dim, rng);
    ln1 = LayerNormLayer<T>(name + ".ln1", cfg.model_dim);
    ln2 = LayerNormLayer<T>(name + ".ln2", cfg.model_dim);
  }

  Tensor<T> forward(const Tensor<T>& x, std::vector<Tensor<T>>* head_scores) {
    std::vector<Tensor<T>> q, k, v;
    for (auto& p : wq) q.push_back(p.tensor);
    for (auto& p : wk) k.push_back(p.tensor);
    for (auto& p : wv) v.push_back(p.tensor);
    auto mha = multi_head_attention(x, q, k, v, use_wo ? wo.tensor : Tensor<T>{}, head_scores);
    auto attended = ln1.forward(add(mha, x));
    auto expanded = mlp2.forward(relu(mlp1.forward(attended)));
    return ln2.forward(add(expanded, attended));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    for (auto& p : wq) out.push_back(&p);
    for (auto& p : wk) out.push_back(&p);
    for (auto& p : wv) out.push_back(&p);
    if (use_wo) out.push_back(&wo);
    mlp1.collect(out);
    mlp2.collect(out);
    ln1.collect(out);
    ln2.collect(out);
  }
  void state(std::vector<StateEntry<T>>& out) {
    for (auto& p : wq) out.push_back({p.name, p.tensor.shape(), &p.tensor.values()});
    for (auto& p : wk) out.push_back({p.name, p.tensor.shape(), &p.tensor.values()});
    for (auto& p : wv) out.push_back({p.name, p.tensor.shape(), &p.tensor.values()});
    if (use_wo) out.push_back({wo.name, wo.tensor.shape(), &wo.tensor.values()});
    mlp1.state(out);
    mlp2.state(out);
    ln1.state(out);
    ln2.state(out);
  }
};

}  // namespace detail

// Stack of pre-softmax-free transformer layers over the 2-token sequence,
// with a linear head on the concatenated final tokens.
template <typename T>
class FusionTransformer {
 public:
  struct Output {
    Tensor<T> tokens;  // [2, d] final sequence
    Tensor<T> logits;  // [num_classes]
    std::vector<AttentionRecord> attention;
  };

  FusionTransformer() = default;

  FusionTransformer(const FusionConfig& cfg, std::uint64_t seed,
                    const std::string& name_prefix = "fusion")
      : cfg_(cfg), prefix_(name_prefix) {
    cfg.validate();
    Rng rng(seed);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      layers_.emplace_back(name_prefix + ".layer" + std::to_string(l), cfg, rng);
    }
    head_ = Linear<T>(name_prefix + ".fc", 2 * cfg.model_dim, cfg.num_classes, rng);
  }

  // tokens[0] = GAP(global features), tokens[1] = GAP(local features).
  static Tensor<T> pool_and_concat(const Tensor<T>& global_volume, const Tensor<T>& local_volume) {
    if (global_volume.dim(0) != local_volume.dim(0)) {
      throw std::invalid_argument(
          "pool_and_concat: channel mismatch, global " + shape_str(global_volume.shape()) +
          " vs local " + shape_str(local_volume.shape()));
    }
    auto g = global_avg_pool(global_volume);
    auto l = global_avg_pool(local_volume);
    return stack_rows<T>({g, l});
  }

  Output forward(const Tensor<T>& sequence) {
    if (sequence.rank() != 2 || sequence.dim(0) != 2 || sequence.dim(1) != cfg_.model_dim) {
      throw std::invalid_argument("fusion: expected [2," + std::to_string(cfg_.model_dim) +
                                  "] sequence, got " + shape_str(sequence.shape()));
    }
    Output out;
    Tensor<T> x = sequence;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      std::vector<Tensor<T>> head_scores;
      x = layers_[l].forward(x, &head_scores);
      for (std::size_t h = 0; h < head_scores.size(); ++h) {
        AttentionRecord rec;
        rec.layer = l;
        rec.head = h;
        for (int i = 0; i < 4; ++i) rec.scores[i] = static_cast<double>(head_scores[h][i]);
        out.attention.push_back(rec);
      }
    }
    out.tokens = x;
    out.logits = head_.forward(reshape(x, {1, 2 * cfg_.model_dim}));
    out.logits = reshape(out.logits, {cfg_.num_classes});
    return out;
  }

  // Token sequence after the transformer stack, without the head; used by the
  // permutation-equivariance checks.
  Tensor<T> transform_only(const Tensor<T>& sequence) {
    Tensor<T> x = sequence;
    for (auto& layer : layers_) x = layer.forward(x, nullptr);
    return x;
  }

  void reinitialize(std::uint64_t seed) { *this = FusionTransformer(cfg_, seed, prefix_); }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_) l.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<StateEntry<T>> state() {
    std::vector<StateEntry<T>> out;
    for (auto& l : layers_) l.state(out);
    head_.state(out);
    return out;
  }

  const FusionConfig& config() const { return cfg_; }

 private:
  FusionConfig cfg_;
  std::string prefix_ = "fusion";
  std::vector<detail::FusionLayer<T>> layers_;
  Linear<T> head_;
};

// CSV export of per-layer, per-head 2x2 attention scores.
inline void write_attention_csv(const std::string& path,
                                const std::vector<AttentionRecord>& records) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "layer,head,global_to_global,global_to_local,local_to_global,local_to_local\n";
  for (const auto& r : records) {
    f << r.layer << "," << r.head << "," << r.scores[0] << "," << r.scores[1] << ","
      << r.scores[2] << "," << r.scores[3] << "\n";
  }
}

}  // namespace radformer
