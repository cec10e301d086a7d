// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Criteria are property-based with structural anchors; the
// synthetic corpora and seeds are fixed so every run is reproducible.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include "radformer/radformer.hpp"

namespace fs = std::filesystem;
using namespace radformer;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

struct Criterion {
  int id;
  std::string label;
  bool passed = true;
  std::ostringstream detail;
  double seconds = 0;

  void require(bool ok, const std::string& why) {
    if (!ok && passed) {
      passed = false;
      detail << why;
    } else if (!ok) {
      detail << "; " << why;
    }
  }
};

void run_criterion(int id, const std::string& label, double time_limit_s,
                   const std::function<void(Criterion&)>& body) {
  Criterion c{id, label};
  const auto t0 = Clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.require(false, std::string("exception: ") + e.what());
  }
  c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  if (time_limit_s > 0 && c.seconds > time_limit_s) {
    c.require(false, "runtime " + std::to_string(c.seconds) + "s exceeds " +
                         std::to_string(time_limit_s) + "s");
  }
  std::printf("[%s] criterion %2d: %s (%.1fs)%s%s\n", c.passed ? "PASS" : "FAIL", id,
              label.c_str(), c.seconds, c.passed ? "" : " -- ", c.passed ? "" : c.detail.str().c_str());
  std::fflush(stdout);
  if (!c.passed) ++failures;
}

std::string work_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("radformer_acceptance_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

Tensor<double> rand_t(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_values(shape, std::move(v));
}

Tensor<double> rand_nonkink(Rng& rng, const Shape& shape) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    const double m = rng.uniform(0.2, 1.0);
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor<double>::from_values(shape, std::move(v));
}

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

Fn project(std::function<Tensor<double>(const std::vector<Tensor<double>>&)> op, Rng& rng,
           std::size_t out_size) {
  std::vector<double> c(out_size);
  for (auto& x : c) x = rng.uniform(-1.0, 1.0);
  return [op, c](const std::vector<Tensor<double>>& in) {
    auto y = op(in);
    auto proj = Tensor<double>::from_values(y.shape(), std::vector<double>(c.begin(), c.end()));
    return radformer::sum(mul(y, proj));
  };
}

// ---------- criterion 1 ----------

void criterion_gradients(Criterion& c) {
  Rng rng(1001);
  auto check = [&](const std::string& name, const Fn& fn, std::vector<Tensor<double>> inputs) {
    auto res = grad_check(fn, std::move(inputs));
    c.require(res.ok(1e-4), name + ": max rel err " + std::to_string(res.max_rel_err));
  };
  for (int rep = 0; rep < 10; ++rep) {
    check("conv2d/s1",
          project([](const auto& in) { return conv2d(in[0], in[1], 1, 1); }, rng, 2 * 16),
          {rand_t(rng, {1, 2, 4, 4}), rand_t(rng, {2, 2, 3, 3})});
    check("conv2d/s2",
          project([](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); }, rng, 2 * 4),
          {rand_t(rng, {1, 2, 4, 4}), rand_t(rng, {2, 2, 3, 3}), rand_t(rng, {2})});
    check("batchnorm/train", project(
                                 [](const auto& in) {
                                   std::vector<double> rm = {0.0, 0.1};
                                   std::vector<double> rv = {1.0, 0.9};
                                   return batch_norm2d(in[0], in[1], in[2], rm, rv, true);
                                 },
                                 rng, 2 * 2 * 3 * 3),
          {rand_t(rng, {2, 2, 3, 3}), rand_t(rng, {2}, 0.5, 1.5), rand_t(rng, {2})});
    check("batchnorm/eval", project(
                                [](const auto& in) {
                                  std::vector<double> rm = {0.05, -0.1};
                                  std::vector<double> rv = {1.2, 0.8};
                                  return batch_norm2d(in[0], in[1], in[2], rm, rv, false);
                                },
                                rng, 2 * 2 * 3 * 3),
          {rand_t(rng, {2, 2, 3, 3}), rand_t(rng, {2}, 0.5, 1.5), rand_t(rng, {2})});
    check("linear",
          project([](const auto& in) { return add_rowvec(matmul_nt(in[0], in[1]), in[2]); }, rng,
                  2 * 3),
          {rand_t(rng, {2, 4}), rand_t(rng, {3, 4}), rand_t(rng, {3})});
    check("gap", project([](const auto& in) { return global_avg_pool(in[0]); }, rng, 6),
          {rand_t(rng, {2, 3, 2, 2})});
    check("softmax", project([](const auto& in) { return softmax(in[0]); }, rng, 8),
          {rand_t(rng, {2, 4}, -3.0, 3.0)});
    check("layer_norm",
          project([](const auto& in) { return layer_norm(in[0], in[1], in[2]); }, rng, 10),
          {rand_t(rng, {2, 5}), rand_t(rng, {5}, 0.5, 1.5), rand_t(rng, {5})});
    check("relu", project([](const auto& in) { return relu(in[0]); }, rng, 8),
          {rand_nonkink(rng, {2, 4})});
    check("max_pool", project([](const auto& in) { return max_pool2d(in[0], 2, 2, 0); }, rng, 4),
          {rand_nonkink(rng, {1, 1, 4, 4})});
    check("self_attention",
          project(
              [](const auto& in) { return self_attention(in[0], in[1], in[2], in[3]); }, rng,
              2 * 3),
          {rand_t(rng, {2, 3}), rand_t(rng, {3, 3}), rand_t(rng, {3, 3}), rand_t(rng, {3, 3})});
    check("transformer_layer", project(
                                   [](const auto& in) {
                                     const auto& x = in[0];
                                     auto mha = multi_head_attention<double>(
                                         x, {in[1], in[2]}, {in[3], in[4]}, {in[5], in[6]}, in[7]);
                                     auto ln1 = layer_norm(add(mha, x), in[8], in[9]);
                                     auto h = add_rowvec(matmul_nt(ln1, in[10]), in[11]);
                                     auto mlp = add_rowvec(matmul_nt(relu(h), in[12]), in[13]);
                                     return layer_norm(add(mlp, ln1), in[14], in[15]);
                                   },
                                   rng, 2 * 4),
          {rand_t(rng, {2, 4}), rand_t(rng, {2, 2}), rand_t(rng, {2, 2}), rand_t(rng, {2, 2}),
           rand_t(rng, {2, 2}), rand_t(rng, {2, 2}), rand_t(rng, {2, 2}), rand_t(rng, {4, 4}),
           rand_t(rng, {4}, 0.5, 1.5), rand_t(rng, {4}), rand_t(rng, {8, 4}), rand_t(rng, {8}),
           rand_t(rng, {4, 8}), rand_t(rng, {4}), rand_t(rng, {4}, 0.5, 1.5), rand_t(rng, {4})});
    const int target = rep % 3;
    check("cross_entropy",
          [target](const auto& in) { return cross_entropy(in[0], target); },
          {rand_t(rng, {3}, -2.0, 2.0)});
  }
}

// ---------- criterion 2 ----------

void criterion_shapes(Criterion& c) {
  {
    LocalBackboneConfig cfg;
    cfg.preset = "paper-33";
    cfg.input_size = 224;
    LocalBranch<float> branch(cfg, 42);
    branch.set_training(false);
    Tape<float>::NoGrad ng;
    auto out = branch.forward(Tensor<float>::zeros({3, 224, 224}));
    c.require(out.features.shape() == Shape{1, 2048, 24, 24},
              "paper-33 features are " + shape_str(out.features.shape()) +
                  ", expected [1x2048x24x24]");
    auto window = branch.receptive_field_probe(12, 12);
    c.require(window.width() == 33 && window.height() == 33,
              "receptive field probe returned " + std::to_string(window.width()) + "x" +
                  std::to_string(window.height()));
  }
  // toy-preset empirical perturbation oracle: exact zeros outside the window
  {
    LocalBackboneConfig cfg;
    cfg.preset = "toy";
    cfg.input_size = 32;
    LocalBranch<float> branch(cfg, 7);
    branch.set_training(false);
    Rng rng(1002);
    std::vector<float> base(3 * 32 * 32);
    for (auto& x : base) x = float(rng.uniform(-1.0, 1.0));
    Tape<float>::NoGrad ng;
    auto ref = branch.forward(Tensor<float>::from_values({3, 32, 32}, base));
    const std::size_t extent = branch.preset().feature_extent(32);
    const std::size_t r = extent / 2, col = extent / 2;
    auto window = branch.receptive_field_probe(r, col);
    const std::size_t d = branch.feature_channels();
    const std::size_t hw = extent * extent;
    for (int rep = 0; rep < 20; ++rep) {
      int x, y;
      do {
        x = int(rng.index(32));
        y = int(rng.index(32));
      } while (x >= window.x_min && x <= window.x_max && y >= window.y_min && y <= window.y_max);
      auto mutated = base;
      mutated[std::size_t(rep % 3) * 32 * 32 + std::size_t(y) * 32 + std::size_t(x)] += 3.0f;
      auto out = branch.forward(Tensor<float>::from_values({3, 32, 32}, mutated));
      for (std::size_t k = 0; k < d; ++k) {
        const float a = ref.features[k * hw + r * extent + col];
        const float b = out.features[k * hw + r * extent + col];
        if (a != b) {
          c.require(false, "perturbation outside the window leaked into the feature site");
          return;
        }
      }
    }
  }
}

// ---------- criteria 3 and 4 ----------

roi::HeatMap random_heatmap(Rng& rng, std::size_t h, std::size_t w, double max) {
  roi::HeatMap hm;
  hm.h = h;
  hm.w = w;
  hm.values.resize(h * w);
  for (auto& v : hm.values) v = rng.uniform(0.0, max);
  return hm;
}

double otsu_exhaustive(const roi::HeatMap& hm) {
  double max_v = hm.values[0], min_v = hm.values[0];
  for (double v : hm.values) {
    max_v = std::max(max_v, v);
    min_v = std::min(min_v, v);
  }
  if (max_v == min_v) return max_v;
  int best_t = 0;
  double best_var = -1.0;
  for (int t = 0; t < 256; ++t) {
    long long w0 = 0, s0 = 0, w1 = 0, s1 = 0;
    for (double v : hm.values) {
      const int b = roi::heat_bin(v, max_v);
      if (b <= t) {
        ++w0;
        s0 += b;
      } else {
        ++w1;
        s1 += b;
      }
    }
    const double var = roi::detail::between_class_variance(w0, s0, w1, s1);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  return (best_t + 1) * max_v / 256.0;
}

void criterion_otsu(Criterion& c) {
  Rng rng(1003);
  std::size_t mismatches = 0;
  for (int rep = 0; rep < 100; ++rep) {
    auto hm = random_heatmap(rng, 5 + rng.index(8), 5 + rng.index(8), rng.uniform(0.5, 64.0));
    if (roi::otsu_threshold(hm) != otsu_exhaustive(hm)) ++mismatches;
  }
  c.require(mismatches == 0, std::to_string(mismatches) + " mismatches out of 100");
}

void criterion_binarization_lattice(Criterion& c) {
  Rng rng(1004);
  for (int rep = 0; rep < 100; ++rep) {
    auto hm = random_heatmap(rng, 8, 8, 20.0);
    auto hi = roi::binarize(hm, roi::BinarizationStrategy::fixed(120));
    auto hyst = roi::binarize(hm, roi::BinarizationStrategy::hysteresis(120, 50));
    auto lo = roi::binarize(hm, roi::BinarizationStrategy::fixed(50));
    for (std::size_t i = 0; i < hi.cells.size(); ++i) {
      if (hi.cells[i] > hyst.cells[i] || hyst.cells[i] > lo.cells[i]) {
        c.require(false, "lattice violated at rep " + std::to_string(rep));
        return;
      }
    }
    auto mid = roi::binarize(hm, roi::BinarizationStrategy::fixed(85));
    for (std::size_t i = 0; i < hi.cells.size(); ++i) {
      if (hi.cells[i] > mid.cells[i] || mid.cells[i] > lo.cells[i]) {
        c.require(false, "fixed-threshold monotonicity violated");
        return;
      }
    }
  }
  roi::BinaryMask empty;
  empty.h = empty.w = 7;
  empty.cells.assign(49, 0);
  auto box = roi::extract_bbox(empty, 224, 224, 32);
  c.require(box == roi::BoundingBox{0, 0, 223, 223}, "empty-mask fallback is not the whole image");
}

// ---------- criterion 5 ----------

void criterion_lexicon_algebra(Criterion& c) {
  using explain::FeatureSet;
  using explain::LabelSet;
  auto planted = [](const LabelSet& labels) {
    FeatureSet f;
    for (int l : labels) {
      f.insert(10 * l);
      f.insert(10 * l + 1);
    }
    return f;
  };
  // independent exhaustive restatement (same structure as the unit-test
  // oracle, kept separate from the implementation's single pass)
  auto oracle = [](const std::vector<std::pair<LabelSet, FeatureSet>>& per_image) {
    std::map<LabelSet, FeatureSet> s;
    std::set<int> distinct;
    for (const auto& [labels, tops] : per_image) {
      s[labels].insert(tops.begin(), tops.end());
      distinct.insert(labels.begin(), labels.end());
    }
    std::vector<LabelSet> order;
    for (const auto& [k, v] : s) order.push_back(k);
    std::sort(order.begin(), order.end(), [](const LabelSet& a, const LabelSet& b) {
      if (a.size() != b.size()) return a.size() < b.size();
      return a < b;
    });
    std::map<int, FeatureSet> R;
    std::set<int> pending;
    for (int l : distinct) {
      if (s.count({l}))
        R[l] = s[{l}];
      else
        pending.insert(l);
    }
    for (const auto& x : order)
      for (const auto& y : order) {
        std::vector<int> diff;
        for (int e : x)
          if (!y.count(e)) diff.push_back(e);
        if (diff.size() == 1 && pending.count(diff[0])) {
          FeatureSet f;
          for (int v : s[x])
            if (!s[y].count(v)) f.insert(v);
          R[diff[0]] = f;
          pending.erase(diff[0]);
        }
      }
    std::map<int, int> M;
    for (const auto& [lex, feats] : R)
      for (int f : feats) M[f] = lex;
    return std::tuple(R, M, std::vector<int>(pending.begin(), pending.end()));
  };

  std::vector<std::string> vocab;
  for (int i = 0; i < 4; ++i) vocab.push_back("l" + std::to_string(i));
  std::size_t families = 0;
  for (std::size_t k = 1; k <= 4; ++k) {
    std::vector<LabelSet> subsets;
    for (unsigned mask = 1; mask < (1u << k); ++mask) {
      LabelSet s;
      for (std::size_t b = 0; b < k; ++b)
        if (mask & (1u << b)) s.insert(int(b));
      subsets.push_back(s);
    }
    for (std::size_t fam = 1; fam < (1u << subsets.size()); ++fam) {
      std::vector<std::pair<LabelSet, FeatureSet>> per_image;
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        if (fam & (1u << i)) per_image.push_back({subsets[i], planted(subsets[i])});
      }
      auto got = explain::build_lexicon_map_from_tops(
          per_image, std::vector<std::string>(vocab.begin(), vocab.begin() + k));
      auto [R, M, unresolved] = oracle(per_image);
      if (got.by_lexicon != R || got.by_feature != M || got.unresolved != unresolved) {
        c.require(false, "divergence at k=" + std::to_string(k) + " family " +
                             std::to_string(fam));
        return;
      }
      ++families;
    }
  }
  // paper's worked three-lexicon case
  const int A = 0, B = 1, C2 = 2;
  std::vector<std::pair<LabelSet, FeatureSet>> worked = {
      {{A}, {1, 2}}, {{B, C2}, {5, 6, 9}}, {{A, C2}, {1, 2, 9}}};
  auto map = explain::build_lexicon_map_from_tops(worked, {"a", "b", "c"});
  c.require(map.by_lexicon.at(A) == FeatureSet{1, 2} && map.by_lexicon.at(C2) == FeatureSet{9} &&
                map.by_lexicon.at(B) == FeatureSet{5, 6} && map.unresolved.empty(),
            "three-lexicon worked case mismatch");
  c.detail << families << " families checked";
}

// ---------- criterion 6 ----------

// Matched-filter bag-of-features rig: channels 2l and 2l+1 respond to the
// glyph of lexicon l (unit-norm zero-mean template correlation through the
// real conv/relu ops, peak response per channel).
struct RiggedModel {
  Tensor<float> filters;  // [7,1,G,G], one matched filter per lexicon
  std::size_t stamp = 0;

  RiggedModel() {
    data::SynthConfig sc;
    stamp = sc.stamp_size();
    const std::size_t G = stamp;
    std::vector<float> w(7 * G * G, 0.0f);
    for (int lex = 0; lex < 7; ++lex) {
      auto pattern = data::glyph_stamp(lex, sc.glyph_scale);
      double mean = 0;
      for (auto v : pattern) mean += v;
      mean /= double(G * G);
      double norm = 0;
      for (auto v : pattern) norm += (v - mean) * (v - mean);
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < G * G; ++i) {
        w[std::size_t(lex) * G * G + i] = float((pattern[i] - mean) / norm);
      }
    }
    filters = Tensor<float>::from_values({7, 1, G, G}, std::move(w));
  }

  // channels 2l and 2l+1 both carry lexicon l's peak filter response
  explain::FeatureWeights weights_for(const Tensor<float>& image) const {
    Tape<float>::NoGrad ng;
    auto x = reshape(image, {1, 1, image.dim(1), image.dim(2)});
    auto response = relu(conv2d(x, filters, 1, 0));
    auto peak = max_pool2d(response, response.dim(2), 1, 0);
    explain::FeatureWeights w(14);
    for (std::size_t l = 0; l < 7; ++l) {
      w[2 * l] = double(peak[l]);
      w[2 * l + 1] = double(peak[l]);
    }
    return w;
  }
};

void criterion_planted_recovery(Criterion& c) {
  auto dir = work_dir("planted");
  auto synth = data::synth_generate(606, 30, dir);
  RiggedModel rig;

  std::vector<std::pair<Tensor<float>, explain::LabelSet>> dataset;
  for (const auto& s : synth.manifest.samples) {
    if (!s.lexicons || s.lexicons->empty()) continue;
    auto img = read_pgm(s.path);
    std::vector<float> v(img.pixels.begin(), img.pixels.end());
    for (auto& x : v) x /= 255.0f;
    dataset.push_back({Tensor<float>::from_values({1, img.height, img.width}, std::move(v)),
                       explain::LabelSet(s.lexicons->begin(), s.lexicons->end())});
  }
  c.require(dataset.size() > 20, "too few labeled images: " + std::to_string(dataset.size()));

  auto map = explain::build_lexicon_map_with<float>(
      [&](const Tensor<float>& img) { return rig.weights_for(img); }, dataset, 0.5,
      synth.manifest.vocabulary);

  std::set<int> observed;
  for (const auto& [img, labels] : dataset) observed.insert(labels.begin(), labels.end());
  std::size_t tp = 0, fp = 0, fn = 0;
  for (int l : observed) {
    explain::FeatureSet expect{2 * l, 2 * l + 1};
    auto it = map.by_lexicon.find(l);
    const explain::FeatureSet got = it == map.by_lexicon.end() ? explain::FeatureSet{} : it->second;
    for (int f : got) (expect.count(f) ? tp : fp)++;
    for (int f : expect)
      if (!got.count(f)) ++fn;
  }
  c.require(fp == 0 && fn == 0,
            "recovered assignment imperfect: tp=" + std::to_string(tp) + " fp=" +
                std::to_string(fp) + " fn=" + std::to_string(fn));
  c.require(map.unresolved.empty(), "unresolved lexicons remain");
  c.require(map.consistent(), "reverse map inconsistent with forward map");

  // explanation side: looking the top features of a planted image up in the
  // recovered map must name its planted lexicons
  for (std::size_t i = 0; i < std::min<std::size_t>(10, dataset.size()); ++i) {
    const auto& [image, labels] = dataset[i];
    auto w = rig.weights_for(image);
    auto tops = explain::find_top_feature_ids(w, explain::epsilon_from_fraction(w, 0.5));
    std::set<int> named;
    for (int f : tops) {
      auto it = map.by_feature.find(f);
      if (it != map.by_feature.end()) named.insert(it->second);
    }
    if (named != labels) {
      c.require(false, "explanation lookup named the wrong lexicons for image " +
                           std::to_string(i));
      break;
    }
  }
}

// ---------- criterion 7 ----------

void criterion_training_contract(Criterion& c) {
  train::TrainConfig cfg;
  auto lr_matches = [&](std::size_t epoch, double expect) {
    return std::abs(train::lr_at_epoch(epoch, cfg) - expect) <= 1e-12 * expect;
  };
  c.require(lr_matches(0, 0.005), "lr(0) != 0.005");
  c.require(lr_matches(5, 0.005 * 0.8), "lr(5) != 0.004");
  c.require(lr_matches(10, 0.005 * 0.8 * 0.8), "lr(10) != 0.0032");
  double lr59 = 0.005;
  for (int i = 0; i < 11; ++i) lr59 *= 0.8;
  c.require(lr_matches(59, lr59), "lr(59) mismatch");

  auto dir = work_dir("contract");
  auto synth = data::synth_generate(707, 3, dir);
  auto samples = train::load_samples(synth.manifest);
  auto mc = RadFormer<float>::Config::make("toy", "toy", 32, 5);
  train::TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.seed = 5;

  RadFormer<float> model(mc);
  train::stage_train(model, train::Stage::global, samples, tc);
  std::vector<float> global_before;
  for (auto& e : model.state()) {
    if (e.name.rfind("global.", 0) == 0)
      global_before.insert(global_before.end(), e.values->begin(), e.values->end());
  }
  train::stage_train(model, train::Stage::local, samples, tc);
  std::vector<float> global_after;
  for (auto& e : model.state()) {
    if (e.name.rfind("global.", 0) == 0)
      global_after.insert(global_after.end(), e.values->begin(), e.values->end());
  }
  c.require(global_before == global_after,
            "global state changed bitwise during the local stage");

  // identical seeds, identical checkpoints
  auto run = [&](const std::string& out) {
    RadFormer<float> m(mc);
    train::stage_train(m, train::Stage::global, samples, tc);
    train::stage_train(m, train::Stage::local, samples, tc);
    train::stage_train(m, train::Stage::full, samples, tc);
    m.save(out);
  };
  run(dir + "/a.rfckpt");
  run(dir + "/b.rfckpt");
  std::ifstream fa(dir + "/a.rfckpt", std::ios::binary), fb(dir + "/b.rfckpt", std::ios::binary);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  c.require(sa.str() == sb.str() && !sa.str().empty(),
            "identical seeds produced different checkpoints");
}

// ---------- criterion 8 ----------

void criterion_overfit(Criterion& c) {
  auto dir = work_dir("overfit");
  data::SynthConfig sc;
  sc.images_per_patient = 4;
  auto synth = data::synth_generate(808, 8, dir, sc);  // 32 images
  auto samples = train::load_samples(synth.manifest);
  c.require(samples.size() == 32, "corpus is not 32 images");

  RadFormer<float> model(RadFormer<float>::Config::make("toy", "toy", 64, 17));
  train::TrainConfig tc;
  tc.seed = 17;
  tc.batch_size = 8;
  tc.target_train_accuracy = 1.0;
  tc.epochs = 200;

  std::size_t total_epochs = 0;
  auto g = train::stage_train(model, train::Stage::global, samples, tc);
  total_epochs += g.epochs_run;
  auto l = train::stage_train(model, train::Stage::local, samples, tc);
  total_epochs += l.epochs_run;
  auto f = train::stage_train(model, train::Stage::full, samples, tc);
  total_epochs += f.epochs_run;
  c.require(f.reached_target && f.epoch_accuracy.back() == 1.0,
            "full-stage train accuracy " + std::to_string(f.epoch_accuracy.back()) +
                " after " + std::to_string(f.epochs_run) + " epochs");
  c.require(f.epochs_run <= 200, "needed more than 200 epochs");
  c.detail << "stages ran " << g.epochs_run << "/" << l.epochs_run << "/" << f.epochs_run
           << " epochs";
}

// ---------- criterion 9 ----------

void criterion_synthetic_discrimination(Criterion& c) {
  auto dir = work_dir("cv");
  auto synth = data::synth_generate(909, 60, dir);  // 300 images
  c.require(synth.manifest.samples.size() == 300, "corpus is not 300 images");

  auto folds = train::kfold_split(synth.manifest, 3, 909);
  std::vector<double> fold_acc(folds.size());
  std::vector<double> otsu_area(folds.size()), hyst_area(folds.size());
  std::vector<double> otsu_inter(folds.size()), hyst_inter(folds.size());

  auto run_fold = [&](std::size_t fi) {
    const auto& split = folds[fi];
    auto train_samples = train::load_samples(synth.manifest, &split.train_patients);
    auto val_samples = train::load_samples(synth.manifest, &split.val_patients);
    RadFormer<float> model(RadFormer<float>::Config::make("toy", "toy", 64, 909 + fi));
    train::TrainConfig tc;
    tc.seed = 909 + fi;
    tc.batch_size = 16;
    tc.target_train_accuracy = 1.0;
    tc.epochs = 12;
    train::stage_train(model, train::Stage::global, train_samples, tc);
    tc.epochs = 10;
    train::stage_train(model, train::Stage::local, train_samples, tc);
    tc.epochs = 40;
    train::stage_train(model, train::Stage::full, train_samples, tc);

    auto scores = train::predict_scores(model, val_samples);
    std::vector<int> labels;
    for (const auto& s : val_samples) labels.push_back(s.label);
    fold_acc[fi] = train::evaluate(scores, labels).accuracy;

    // ROI quality for otsu vs hysteresis on the validation images
    model.set_eval();
    data::AugmentConfig acfg;
    auto inputs = train::prepare_inputs<float>(val_samples, 64);
    double oa = 0, ha = 0, oi = 0, hi = 0;
    for (std::size_t i = 0; i < val_samples.size(); ++i) {
      const auto& rec = synth.manifest.samples[val_samples[i].manifest_index];
      auto ann224 = data::augment_box(*rec.roi_box, val_samples[i].image.width,
                                      val_samples[i].image.height, acfg);
      roi::BoundingBox ann{int(ann224.x_min * 64 / 224), int(ann224.y_min * 64 / 224),
                           int(ann224.x_max * 64 / 224), int(ann224.y_max * 64 / 224)};
      auto batch = train::make_batch(inputs, {i});
      Tape<float>::NoGrad ng;
      model.set_binarization(roi::BinarizationStrategy::otsu());
      auto fo = model.forward(batch);
      auto mo = roi::roi_metrics(fo.samples[0].box, ann, 64, 64);
      model.set_binarization(roi::BinarizationStrategy::hysteresis(120, 50));
      auto fh = model.forward(batch);
      auto mh = roi::roi_metrics(fh.samples[0].box, ann, 64, 64);
      oa += mo.area_fraction;
      ha += mh.area_fraction;
      oi += mo.intersection_fraction;
      hi += mh.intersection_fraction;
    }
    const double n = double(val_samples.size());
    otsu_area[fi] = oa / n;
    hyst_area[fi] = ha / n;
    otsu_inter[fi] = oi / n;
    hyst_inter[fi] = hi / n;
  };

  std::size_t jobs = 2;
  if (const char* env = std::getenv("RADFORMER_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) jobs = std::size_t(v);
  }
  jobs = std::min(jobs, folds.size());
  if (jobs <= 1) {
    for (std::size_t fi = 0; fi < folds.size(); ++fi) run_fold(fi);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
      pool.emplace_back([&] {
        for (std::size_t fi = next.fetch_add(1); fi < folds.size(); fi = next.fetch_add(1))
          run_fold(fi);
      });
    }
    for (auto& th : pool) th.join();
  }

  double mean_acc = 0, mean_oa = 0, mean_ha = 0, mean_oi = 0, mean_hi = 0;
  for (std::size_t fi = 0; fi < folds.size(); ++fi) {
    mean_acc += fold_acc[fi];
    mean_oa += otsu_area[fi];
    mean_ha += hyst_area[fi];
    mean_oi += otsu_inter[fi];
    mean_hi += hyst_inter[fi];
  }
  const double nf = double(folds.size());
  mean_acc /= nf;
  mean_oa /= nf;
  mean_ha /= nf;
  mean_oi /= nf;
  mean_hi /= nf;

  c.require(mean_acc >= 0.95, "cross-validation accuracy " + std::to_string(mean_acc));
  c.require(mean_oa < mean_ha, "otsu area " + std::to_string(mean_oa) +
                                   " not smaller than hysteresis " + std::to_string(mean_ha));
  c.require(mean_oi >= 0.9, "otsu intersection " + std::to_string(mean_oi));
  c.require(mean_hi >= 0.9, "hysteresis intersection " + std::to_string(mean_hi));
  c.detail << "acc=" << mean_acc << " area otsu/hyst=" << mean_oa << "/" << mean_ha
           << " inter otsu/hyst=" << mean_oi << "/" << mean_hi;
}

// ---------- criterion 10 ----------

double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 2) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 2) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / double(pairs);
}

void criterion_metrics(Criterion& c) {
  {
    std::vector<std::array<double, 3>> scores;
    std::vector<int> labels;
    auto push = [&](int label, int pred, int count) {
      for (int i = 0; i < count; ++i) {
        std::array<double, 3> s{0, 0, 0};
        s[pred] = 1;
        scores.push_back(s);
        labels.push_back(label);
      }
    };
    push(2, 2, 9);
    push(2, 0, 1);
    push(0, 0, 18);
    push(1, 2, 2);
    auto rep = train::evaluate(scores, labels);
    c.require(rep.sensitivity && *rep.sensitivity == 0.9, "sensitivity fixture mismatch");
    c.require(rep.specificity && *rep.specificity == 0.9, "specificity fixture mismatch");
    c.require(rep.accuracy == 27.0 / 30.0, "accuracy fixture mismatch");
  }
  Rng rng(1010);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 6 + rng.index(60);
    std::vector<std::array<double, 3>> scores(n);
    std::vector<int> labels(n);
    std::vector<double> malig(n);
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = int(rng.index(3));
      (labels[i] == 2 ? pos : neg) = true;
      double s2 = rng.uniform();
      if (rng.uniform() < 0.25) s2 = 0.5;
      scores[i] = {rng.uniform(), rng.uniform(), s2};
      malig[i] = s2;
    }
    if (!pos || !neg) continue;
    auto r = train::evaluate(scores, labels);
    if (!r.auc || std::abs(*r.auc - auc_pairwise(malig, labels)) > 1e-9) {
      c.require(false, "AUC diverged from pairwise oracle at rep " + std::to_string(rep));
      return;
    }
  }
  // naive ROI row: whole-image prediction scores intersection 1, area 1
  auto m = roi::roi_metrics({0, 0, 223, 223}, {40, 50, 120, 160}, 224, 224);
  c.require(m.intersection_fraction == 1.0 && m.area_fraction == 1.0,
            "naive ROI row is not 1.000/1.000");
}

// ---------- criterion 11 ----------

void criterion_attention(Criterion& c) {
  FusionConfig cfg;
  cfg.depth = 4;
  cfg.heads = 16;
  cfg.model_dim = 512;
  FusionTransformer<double> fusion(cfg, 1111);
  Rng rng(1011);
  auto seq = rand_t(rng, {2, 512}, -2.0, 2.0);
  auto out = fusion.forward(seq);
  c.require(out.attention.size() == 4 * 16,
            "expected 64 attention records, got " + std::to_string(out.attention.size()));
  for (const auto& rec : out.attention) {
    const double r0 = rec.scores[0] + rec.scores[1];
    const double r1 = rec.scores[2] + rec.scores[3];
    if (std::abs(r0 - 1.0) > 1e-6 || std::abs(r1 - 1.0) > 1e-6) {
      c.require(false, "attention row at layer " + std::to_string(rec.layer) + " head " +
                           std::to_string(rec.head) + " does not sum to 1");
      return;
    }
  }
  // permutation equivariance of the headless transform
  std::vector<double> swapped(seq.values().begin() + 512, seq.values().end());
  swapped.insert(swapped.end(), seq.values().begin(), seq.values().begin() + 512);
  auto y = fusion.transform_only(seq);
  auto ys = fusion.transform_only(Tensor<double>::from_values({2, 512}, swapped));
  for (std::size_t j = 0; j < 512; ++j) {
    if (std::abs(y[j] - ys[512 + j]) > 1e-6 || std::abs(y[512 + j] - ys[j]) > 1e-6) {
      c.require(false, "token permutation equivariance violated at column " + std::to_string(j));
      return;
    }
  }
}

// ---------- criterion 12 (optional) ----------

void criterion_gbcu(Criterion& c) {
  const char* manifest = std::getenv("RADFORMER_GBCU_MANIFEST");
  const char* ckpt = std::getenv("RADFORMER_GBCU_CHECKPOINT");
  if (!manifest || !ckpt) {
    c.detail << "RADFORMER_GBCU_MANIFEST / RADFORMER_GBCU_CHECKPOINT not set";
    return;  // reported as SKIP by the caller
  }
  auto m = data::load_manifest(manifest);
  auto dir = work_dir("gbcu");
  auto folds = train::kfold_split(m, 10, 1);
  RadFormer<float> model(RadFormer<float>::Config::make("paper-50", "paper-33", 224, 1));
  model.load(ckpt);
  std::vector<train::MetricsReport> reports;
  for (const auto& split : folds) {
    auto val = train::load_samples(m, &split.val_patients);
    auto scores = train::predict_scores(model, val);
    std::vector<int> labels;
    for (const auto& s : val) labels.push_back(s.label);
    reports.push_back(train::evaluate(scores, labels));
  }
  train::write_fold_csv(dir + "/folds.csv", reports);
  c.detail << "evaluated 10 folds; CSV at " << dir;
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  run_criterion(1, "gradient fidelity (finite differences, 64-bit)", 120, criterion_gradients);
  run_criterion(2, "architecture shape anchors (24x24x2048, 33x33 field)", 300, criterion_shapes);
  run_criterion(3, "otsu exactness vs exhaustive search", 0, criterion_otsu);
  run_criterion(4, "binarization lattice and fallback", 0, criterion_binarization_lattice);
  run_criterion(5, "lexicon mapping equals set-algebra oracle (k<=4)", 60,
                criterion_lexicon_algebra);
  run_criterion(6, "planted-glyph channel-to-lexicon recovery", 0, criterion_planted_recovery);
  run_criterion(7, "training-protocol contract (freeze, lr, determinism)", 0,
                criterion_training_contract);
  run_criterion(8, "overfit smoke test (32 images, 100% within 200 epochs)", 600,
                criterion_overfit);
  run_criterion(9, "synthetic 3-fold discrimination and ROI ordering", 0,
                criterion_synthetic_discrimination);
  run_criterion(10, "metric correctness (confusion fixtures, AUC oracle)", 0, criterion_metrics);
  run_criterion(11, "attention contracts (row-stochastic, permutation)", 0, criterion_attention);

  const bool gbcu = std::getenv("RADFORMER_GBCU_MANIFEST") && std::getenv("RADFORMER_GBCU_CHECKPOINT");
  if (gbcu) {
    run_criterion(12, "GBCU 10-fold pipeline (optional)", 0, criterion_gbcu);
  } else {
    std::printf("[SKIP] criterion 12: GBCU corpus not supplied (optional)\n");
  }

  if (failures) {
    std::printf("%d criterion(s) FAILED\n", failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
