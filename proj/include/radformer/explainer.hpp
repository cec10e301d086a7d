#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "radformer/model.hpp"

// Lexicon explanation machinery: per-image channel gradient weights, the
// top-feature rule, the lexicon <-> neural-feature mapping built from label
// sets via set differences, inference-time explanations, and the
// feature-frequency report.

namespace radformer::explain {

using FeatureWeights = std::vector<double>;
using LabelSet = std::set<int>;
using FeatureSet = std::set<int>;

inline constexpr std::size_t kMaxVocabulary = 16;  // the set-difference pass is exponential in k

struct GradientOptions {
  bool use_local_head = false;        // differentiate the local head instead of the fusion head
  bool grad_times_activation = false; // weight by pooled activation as well
};

// W_k = d(predicted-class logit) / d(GAP(local features)_k) for one image.
// The model runs in eval mode; prediction comes from the fusion head (or the
// local head under the flag).
template <typename T>
FeatureWeights feature_gradient_weights(RadFormer<T>& model, const Tensor<T>& image,
                                        const GradientOptions& opts = {}) {
  model.set_eval();
  Tape<T> tape;
  auto scope = tape.activate();
  auto fwd = model.forward(image);
  const auto& trace = fwd.samples.at(0);

  Tensor<T> logits_row =
      opts.use_local_head ? row(fwd.local_logits, 0) : trace.fused_logits;
  std::size_t predicted = 0;
  for (std::size_t c = 1; c < logits_row.size(); ++c) {
    if (logits_row[c] > logits_row[predicted]) predicted = c;
  }
  tape.backward(take(logits_row, predicted));

  const auto& gap = trace.gap_local;
  FeatureWeights w(gap.size(), 0.0);
  if (gap.impl()->grad.size() == gap.size()) {
    for (std::size_t k = 0; k < gap.size(); ++k) {
      w[k] = static_cast<double>(gap.impl()->grad[k]);
      if (opts.grad_times_activation) w[k] *= static_cast<double>(gap[k]);
    }
  }
  return w;
}

// The argmax feature id (smallest index on ties) plus every id whose weight
// is epsilon-close to the maximum.
inline FeatureSet find_top_feature_ids(const FeatureWeights& w, double epsilon) {
  if (w.empty()) throw std::invalid_argument("find_top_feature_ids: empty weights");
  if (epsilon < 0) throw std::invalid_argument("find_top_feature_ids: epsilon must be >= 0");
  std::size_t best = 0;
  for (std::size_t j = 1; j < w.size(); ++j)
    if (w[j] > w[best]) best = j;
  FeatureSet t{static_cast<int>(best)};
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (std::abs(w[best] - w[j]) <= epsilon) t.insert(static_cast<int>(j));
  }
  return t;
}

// Epsilon as a fraction of the top weight's magnitude (the configurable
// default policy).
inline double epsilon_from_fraction(const FeatureWeights& w, double fraction) {
  double top = 0.0;
  for (double v : w) top = std::max(top, v);
  return fraction * std::abs(top);
}

struct LexiconMap {
  std::map<int, FeatureSet> by_lexicon;  // lexicon id -> feature ids
  std::map<int, int> by_feature;         // feature id -> lexicon id
  std::vector<int> unresolved;           // lexicons no single set difference could isolate
  std::vector<std::string> vocabulary;

  bool consistent() const {
    for (const auto& [lex, feats] : by_lexicon) {
      for (int f : feats) {
        auto it = by_feature.find(f);
        if (it == by_feature.end() || it->second != lex) return false;
      }
    }
    return true;
  }
};

namespace detail {
// Label sets ordered by size first, then lexicographically; this is the
// canonical iteration order for the set-difference pass.
struct LabelSetLess {
  bool operator()(const LabelSet& a, const LabelSet& b) const {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
  }
};
}  // namespace detail

using AccumulatedSets = std::map<LabelSet, FeatureSet, detail::LabelSetLess>;

// Core of the mapping algorithm, operating on already-extracted top-feature
// sets. Lexicons that appear alone map directly; the rest are isolated by a
// single pass of pairwise label-set differences (R[x\y] = S[x]\S[y] whenever
// x\y is one still-unresolved lexicon). Anything left is reported in
// `unresolved` rather than dropped.
inline LexiconMap build_lexicon_map_from_tops(
    const std::vector<std::pair<LabelSet, FeatureSet>>& per_image,
    const std::vector<std::string>& vocabulary) {
  if (vocabulary.size() > kMaxVocabulary) {
    throw std::invalid_argument("build_lexicon_map: vocabulary larger than " +
                                std::to_string(kMaxVocabulary));
  }
  AccumulatedSets s;
  std::set<int> distinct;
  for (const auto& [labels, tops] : per_image) {
    if (labels.empty()) continue;  // normal images carry no lexicons
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= vocabulary.size()) {
        throw std::invalid_argument("build_lexicon_map: lexicon id " + std::to_string(l) +
                                    " outside vocabulary");
      }
    }
    s[labels].insert(tops.begin(), tops.end());
    distinct.insert(labels.begin(), labels.end());
  }

  LexiconMap out;
  out.vocabulary = vocabulary;
  std::set<int> pending;  // lexicons that never appear alone
  for (int l : distinct) {
    auto it = s.find(LabelSet{l});
    if (it != s.end()) {
      out.by_lexicon[l] = it->second;
    } else {
      pending.insert(l);
    }
  }

  for (const auto& [x, sx] : s) {
    for (const auto& [y, sy] : s) {
      if (pending.empty()) break;
      LabelSet diff;
      std::set_difference(x.begin(), x.end(), y.begin(), y.end(),
                          std::inserter(diff, diff.begin()));
      if (diff.size() != 1) continue;
      const int lex = *diff.begin();
      if (!pending.count(lex)) continue;
      FeatureSet feats;
      std::set_difference(sx.begin(), sx.end(), sy.begin(), sy.end(),
                          std::inserter(feats, feats.begin()));
      out.by_lexicon[lex] = feats;
      pending.erase(lex);
    }
  }

  for (const auto& [lex, feats] : out.by_lexicon) {
    for (int f : feats) out.by_feature[f] = lex;
  }
  out.unresolved.assign(pending.begin(), pending.end());
  return out;
}

// Full operation over a labeled dataset: extract gradient weights per image
// through `weights_for`, apply the top-feature rule, then run the mapping.
// Images with empty label sets are skipped.
template <typename T, typename WeightSource>
LexiconMap build_lexicon_map_with(WeightSource&& weights_for,
                                  const std::vector<std::pair<Tensor<T>, LabelSet>>& dataset,
                                  double epsilon_fraction,
                                  const std::vector<std::string>& vocabulary) {
  std::vector<std::pair<LabelSet, FeatureSet>> per_image;
  for (const auto& [image, labels] : dataset) {
    if (labels.empty()) continue;
    FeatureWeights w = weights_for(image);
    per_image.push_back(
        {labels, find_top_feature_ids(w, epsilon_from_fraction(w, epsilon_fraction))});
  }
  return build_lexicon_map_from_tops(per_image, vocabulary);
}

template <typename T>
LexiconMap build_lexicon_map(RadFormer<T>& model,
                             const std::vector<std::pair<Tensor<T>, LabelSet>>& dataset,
                             double epsilon_fraction,
                             const std::vector<std::string>& vocabulary,
                             const GradientOptions& gopts = {}) {
  return build_lexicon_map_with<T>(
      [&](const Tensor<T>& image) { return feature_gradient_weights(model, image, gopts); },
      dataset, epsilon_fraction, vocabulary);
}

inline nlohmann::ordered_json lexicon_map_to_json(const LexiconMap& map) {
  nlohmann::ordered_json j;
  j["vocabulary"] = map.vocabulary;
  nlohmann::ordered_json r = nlohmann::ordered_json::object();
  for (const auto& [lex, feats] : map.by_lexicon) {
    r[map.vocabulary.at(lex)] = std::vector<int>(feats.begin(), feats.end());
  }
  j["lexicon_to_features"] = std::move(r);
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [f, lex] : map.by_feature) {
    m[std::to_string(f)] = map.vocabulary.at(lex);
  }
  j["feature_to_lexicon"] = std::move(m);
  std::vector<std::string> unresolved;
  for (int l : map.unresolved) unresolved.push_back(map.vocabulary.at(l));
  j["unresolved"] = unresolved;
  return j;
}

inline LexiconMap lexicon_map_from_json(const nlohmann::json& j) {
  LexiconMap map;
  map.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  auto lex_id = [&](const std::string& name) {
    for (std::size_t i = 0; i < map.vocabulary.size(); ++i)
      if (map.vocabulary[i] == name) return static_cast<int>(i);
    throw std::runtime_error("lexicon map: unknown lexicon " + name);
  };
  for (const auto& [name, feats] : j.at("lexicon_to_features").items()) {
    map.by_lexicon[lex_id(name)] = FeatureSet(feats.begin(), feats.end());
  }
  for (const auto& [lex, feats] : map.by_lexicon) {
    for (int f : feats) map.by_feature[f] = lex;
  }
  for (const auto& name : j.value("unresolved", std::vector<std::string>{})) {
    map.unresolved.push_back(lex_id(name));
  }
  return map;
}

struct RankedFeature {
  int id = 0;
  double weight = 0.0;
};

struct Explanation {
  int predicted_class = 0;
  roi::BoundingBox box;
  std::vector<RankedFeature> top_features;       // descending weight, 10 entries max
  std::vector<std::string> lexicons;             // matched names, deduplicated
  std::vector<int> unmatched_features;           // top ids absent from the map
  std::vector<std::pair<int, ImageU8>> activation_maps;  // feature id -> channel heatmap
  std::vector<AttentionRecord> attention;        // per layer and head
};

// Top-k ids by weight (descending; ties to the smaller id).
inline std::vector<RankedFeature> rank_features(const FeatureWeights& w, std::size_t k) {
  std::vector<RankedFeature> ranked(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) ranked[i] = {static_cast<int>(i), w[i]};
  std::stable_sort(ranked.begin(), ranked.end(), [](const RankedFeature& a, const RankedFeature& b) {
    return a.weight > b.weight;
  });
  ranked.resize(std::min(k, ranked.size()));
  return ranked;
}

template <typename T>
Explanation explain(RadFormer<T>& model, const Tensor<T>& image, const LexiconMap& map,
                    double epsilon_fraction, const GradientOptions& gopts = {},
                    std::size_t top_k = 10, bool with_activation_maps = true) {
  model.set_eval();
  Explanation out;

  auto w = feature_gradient_weights(model, image, gopts);
  {
    typename Tape<T>::NoGrad ng;
    auto fwd = model.forward(image);
    const auto& trace = fwd.samples.at(0);
    out.box = trace.box;
    out.attention = trace.attention;
    const auto& logits = trace.fused_logits;
    for (std::size_t c = 1; c < logits.size(); ++c)
      if (logits[c] > logits[out.predicted_class]) out.predicted_class = static_cast<int>(c);
    out.top_features = rank_features(w, top_k);

    std::set<std::string> lex_names;
    for (const auto& rf : out.top_features) {
      auto it = map.by_feature.find(rf.id);
      if (it != map.by_feature.end()) {
        lex_names.insert(map.vocabulary.at(it->second));
      } else {
        out.unmatched_features.push_back(rf.id);
      }
    }
    out.lexicons.assign(lex_names.begin(), lex_names.end());

    if (with_activation_maps) {
      const auto& feats = fwd.local_features;  // [1,d,h,w]
      const std::size_t h = feats.dim(2), wd = feats.dim(3);
      for (const auto& rf : out.top_features) {
        const T* plane = feats.values().data() + static_cast<std::size_t>(rf.id) * h * wd;
        out.activation_maps.push_back({rf.id, plane_to_image(plane, wd, h)});
      }
    }
  }
  return out;
}

inline nlohmann::ordered_json explanation_to_json(const Explanation& e) {
  nlohmann::ordered_json j;
  j["predicted_class"] = e.predicted_class;
  j["predicted_class_name"] = data::kClassNames.at(e.predicted_class);
  j["roi"] = roi::box_to_json(e.box);
  j["top_features"] = nlohmann::ordered_json::array();
  for (const auto& rf : e.top_features) {
    j["top_features"].push_back({{"id", rf.id}, {"weight", rf.weight}});
  }
  j["lexicons"] = e.lexicons;
  j["unmatched_features"] = e.unmatched_features;
  return j;
}

// Fraction of explanations whose top-k contains each feature id, sorted
// descending (ties toward the smaller id).
inline std::vector<std::pair<int, double>> feature_frequency(
    const std::vector<Explanation>& explanations) {
  if (explanations.empty()) throw std::invalid_argument("feature_frequency: no explanations");
  std::map<int, std::size_t> counts;
  for (const auto& e : explanations) {
    for (const auto& rf : e.top_features) ++counts[rf.id];
  }
  std::vector<std::pair<int, double>> out;
  for (const auto& [id, n] : counts) {
    out.push_back({id, static_cast<double>(n) / static_cast<double>(explanations.size())});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

inline void write_frequency_csv(const std::string& path,
                                const std::vector<std::pair<int, double>>& freq) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "feature_id,frequency\n";
  for (const auto& [id, v] : freq) f << id << "," << v << "\n";
}

}  // namespace radformer::explain
