#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "radformer/data.hpp"
#include "radformer/model.hpp"

namespace radformer::train {

enum class Stage { global, local, full };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::global: return "global";
    case Stage::local: return "local";
    case Stage::full: return "full";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "global") return Stage::global;
  if (s == "local") return Stage::local;
  if (s == "full") return Stage::full;
  throw std::invalid_argument("unknown stage: " + s);
}

struct TrainConfig {
  double lr0 = 0.005;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t batch_size = 16;
  std::size_t epochs = 60;
  double decay_factor = 0.8;
  std::size_t decay_every = 5;
  std::uint64_t seed = 0;
  std::optional<double> target_train_accuracy;  // early stop once reached

  void validate() const {
    if (lr0 <= 0 || batch_size == 0 || decay_every == 0 || decay_factor <= 0) {
      throw std::invalid_argument("train config: all quantities must be positive");
    }
  }
};

// Step decay: lr0 * factor^floor(epoch / every).
inline double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

// Classical momentum SGD with L2 folded into the gradient:
//   v <- momentum * v + (g + wd * p);  p <- p - lr * v
// Frozen parameters are skipped entirely.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Parameter<T>*> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(double lr) {
    for (auto* p : params_) {
      if (p->frozen) continue;
      if (!p->tensor.has_grad()) continue;
      auto& v = velocity_[p->name];
      auto& vals = p->tensor.values();
      const auto& grad = p->tensor.grad();
      if (v.size() != vals.size()) v.assign(vals.size(), T(0));
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const T g = grad[i] + static_cast<T>(weight_decay_) * vals[i];
        v[i] = static_cast<T>(momentum_) * v[i] + g;
        vals[i] -= static_cast<T>(lr) * v[i];
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>*> params_;
  double momentum_, weight_decay_;
  std::map<std::string, std::vector<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
  double accuracy = 0.0;
  std::optional<double> sensitivity;  // malignant vs rest
  std::optional<double> specificity;
  std::optional<double> auc;  // rank statistic over malignant scores
  std::array<std::optional<double>, 3> per_class;
  std::size_t count = 0;
};

// predictions: per-sample class scores (rows sum free); labels in {0,1,2}.
// Sensitivity, specificity, and AUC binarize malignant (class 2) against the
// rest.
inline MetricsReport evaluate(const std::vector<std::array<double, 3>>& predictions,
                              const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw std::invalid_argument("evaluate: predictions and labels must align and be non-empty");
  }
  MetricsReport rep;
  rep.count = labels.size();
  std::array<std::size_t, 3> class_total{0, 0, 0}, class_correct{0, 0, 0};
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0, correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int label = labels[i];
    if (label < 0 || label > 2) throw std::invalid_argument("evaluate: label out of range");
    int pred = 0;
    for (int c = 1; c < 3; ++c)
      if (predictions[i][c] > predictions[i][pred]) pred = c;
    ++class_total[label];
    if (pred == label) {
      ++correct;
      ++class_correct[label];
    }
    const bool actual_pos = label == 2;
    const bool pred_pos = pred == 2;
    if (actual_pos && pred_pos) ++tp;
    if (actual_pos && !pred_pos) ++fn;
    if (!actual_pos && !pred_pos) ++tn;
    if (!actual_pos && pred_pos) ++fp;
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  for (int c = 0; c < 3; ++c) {
    if (class_total[c]) {
      rep.per_class[c] =
          static_cast<double>(class_correct[c]) / static_cast<double>(class_total[c]);
    }
  }
  if (tp + fn > 0) rep.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (tn + fp > 0) rep.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);

  // AUC by midrank statistic; undefined without both classes.
  const std::size_t n_pos = tp + fn, n_neg = tn + fp;
  if (n_pos > 0 && n_neg > 0) {
    std::vector<std::size_t> order(labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return predictions[a][2] < predictions[b][2];
    });
    std::vector<double> rank(labels.size());
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      while (j + 1 < order.size() &&
             predictions[order[j + 1]][2] == predictions[order[i]][2])
        ++j;
      const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
      i = j + 1;
    }
    double pos_rank_sum = 0.0;
    for (std::size_t t = 0; t < labels.size(); ++t)
      if (labels[t] == 2) pos_rank_sum += rank[t];
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    rep.auc = (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
  }
  return rep;
}

struct MeanStd {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - m.mean) * (x - m.mean);
    m.sd = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Patient-disjoint folds
// ---------------------------------------------------------------------------

struct FoldSplit {
  std::size_t fold_index = 0;
  std::set<std::string> train_patients;
  std::set<std::string> val_patients;
};

inline std::vector<FoldSplit> kfold_split(const data::Manifest& manifest, std::size_t k,
                                          std::uint64_t seed) {
  std::set<std::string> unique;
  for (const auto& s : manifest.samples) unique.insert(s.patient_id);
  if (k == 0 || k > unique.size()) {
    throw std::invalid_argument("kfold_split: k=" + std::to_string(k) + " with " +
                                std::to_string(unique.size()) + " patients");
  }
  std::vector<std::string> patients(unique.begin(), unique.end());
  Rng rng(seed);
  rng.shuffle(patients);
  std::vector<FoldSplit> folds(k);
  for (std::size_t i = 0; i < k; ++i) folds[i].fold_index = i;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    folds[i % k].val_patients.insert(patients[i]);
  }
  for (auto& f : folds) {
    for (const auto& p : patients) {
      if (!f.val_patients.count(p)) f.train_patients.insert(p);
    }
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Staged training
// ---------------------------------------------------------------------------

struct TrainSample {
  ImageU8 image;
  int label = 0;
  std::string patient_id;
  std::size_t manifest_index = 0;
};

inline std::vector<TrainSample> load_samples(const data::Manifest& manifest,
                                             const std::set<std::string>* patient_filter = nullptr) {
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    if (patient_filter && !patient_filter->count(s.patient_id)) continue;
    out.push_back({read_pgm(s.path), s.label, s.patient_id, i});
  }
  return out;
}

// Augment once up front; the pipeline is deterministic so per-epoch work is
// just batching.
template <typename T>
std::vector<Tensor<T>> prepare_inputs(const std::vector<TrainSample>& samples,
                                      std::size_t input_size) {
  data::AugmentConfig acfg;
  std::vector<Tensor<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Tensor<T> t = data::augment<T>(s.image, /*train_mode=*/true, acfg);
    if (input_size != acfg.crop) {
      t = resize_bilinear(t, input_size, input_size);
    }
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
Tensor<T> make_batch(const std::vector<Tensor<T>>& inputs, const std::vector<std::size_t>& idx) {
  const std::size_t S = inputs[0].dim(1);
  Tensor<T> batch = Tensor<T>::zeros({idx.size(), 1, S, S});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    std::copy(inputs[idx[b]].values().begin(), inputs[idx[b]].values().end(),
              batch.values().begin() + b * S * S);
  }
  return batch;
}

class JsonlLogger {
 public:
  JsonlLogger() = default;
  explicit JsonlLogger(const std::string& path) : out_(std::make_unique<std::ofstream>(path)) {
    if (!*out_) throw std::runtime_error("cannot open log " + path);
  }
  void write(const nlohmann::ordered_json& j) {
    if (out_) *out_ << j.dump() << "\n";
  }
  void flush() {
    if (out_) out_->flush();
  }

 private:
  std::unique_ptr<std::ofstream> out_;
};

struct StageStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
  std::size_t epochs_run = 0;
  bool reached_target = false;
};

// One stage of the protocol. Enforces stage order, freezes everything but the
// stage's own parameters, re-initializes the fusion stack at the start of the
// full stage, and logs one JSON line per epoch.
template <typename T>
StageStats stage_train(RadFormer<T>& model, Stage stage, const std::vector<TrainSample>& samples,
                       const TrainConfig& cfg, JsonlLogger* log = nullptr) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("stage_train: empty training set");
  if (stage == Stage::local && !model.stages_done().count("global")) {
    throw std::logic_error("stage_train: local stage requires a completed global stage");
  }
  if (stage == Stage::full && !model.stages_done().count("local")) {
    throw std::logic_error("stage_train: full stage requires a completed local stage");
  }

  const std::string trained_prefix = stage == Stage::global  ? "global."
                                     : stage == Stage::local ? "local."
                                                             : "";
  if (stage == Stage::full) {
    model.fusion().reinitialize(Rng(cfg.seed).fork(0x66756c6c));
  }
  auto params = model.parameters();
  for (auto* p : params) {
    p->frozen = !trained_prefix.empty() && p->name.rfind(trained_prefix, 0) != 0;
  }
  switch (stage) {
    case Stage::global: model.set_training(true, false); break;
    case Stage::local: model.set_training(false, true); break;
    case Stage::full: model.set_training(true, true); break;
  }

  typename RadFormer<T>::ForwardOptions opts;
  opts.run_local = stage != Stage::global;
  opts.run_fusion = stage == Stage::full;
  opts.global_no_grad = stage == Stage::local;

  auto inputs = prepare_inputs<T>(samples, model.config().global.input_size);
  std::vector<int> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) labels[i] = samples[i].label;

  SgdOptimizer<T> opt(params, cfg.momentum, cfg.weight_decay);
  Rng master(cfg.seed ^ 0x5247u * (static_cast<std::uint64_t>(stage) + 1));

  StageStats stats;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng epoch_rng(master.fork(epoch));
    epoch_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      std::vector<int> batch_labels;
      for (auto i : idx) batch_labels.push_back(labels[i]);
      auto batch = make_batch(inputs, idx);

      Tape<T> tape;
      auto scope = tape.activate();
      auto fwd = model.forward(batch, opts);
      Tensor<T> loss;
      Tensor<T> stage_logits;
      switch (stage) {
        case Stage::global:
          stage_logits = fwd.global_logits;
          loss = cross_entropy(fwd.global_logits, batch_labels);
          break;
        case Stage::local:
          stage_logits = fwd.local_logits;
          loss = cross_entropy(fwd.local_logits, batch_labels);
          break;
        case Stage::full:
          stage_logits = fwd.fused_logits;
          loss = add(add(cross_entropy(fwd.global_logits, batch_labels),
                         cross_entropy(fwd.local_logits, batch_labels)),
                     cross_entropy(fwd.fused_logits, batch_labels));
          break;
      }
      tape.backward(loss);
      opt.step(lr);
      opt.zero_grad();

      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) {
        int pred = 0;
        for (int c = 1; c < 3; ++c)
          if (stage_logits[b * 3 + c] > stage_logits[b * 3 + pred]) pred = c;
        if (pred == batch_labels[b]) ++correct;
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(samples.size());
    const double acc = static_cast<double>(correct) / static_cast<double>(samples.size());
    stats.epoch_loss.push_back(mean_loss);
    stats.epoch_accuracy.push_back(acc);
    stats.epochs_run = epoch + 1;
    if (log) {
      log->write({{"stage", stage_name(stage)},
                  {"epoch", epoch},
                  {"lr", lr},
                  {"loss", mean_loss},
                  {"train_accuracy", acc}});
    }
    if (cfg.target_train_accuracy && acc >= *cfg.target_train_accuracy) {
      stats.reached_target = true;
      break;
    }
  }
  model.mark_stage_done(stage_name(stage));
  return stats;
}

// Per-class probability scores for a sample set under the current weights.
template <typename T>
std::vector<std::array<double, 3>> predict_scores(RadFormer<T>& model,
                                                  const std::vector<TrainSample>& samples,
                                                  bool use_fused = true) {
  model.set_eval();
  auto inputs = prepare_inputs<T>(samples, model.config().global.input_size);
  std::vector<std::array<double, 3>> out;
  typename RadFormer<T>::ForwardOptions opts;
  opts.run_local = use_fused;
  opts.run_fusion = use_fused;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto batch = make_batch(inputs, {i});
    auto fwd = model.forward(batch, opts);
    const Tensor<T>& logits = use_fused ? fwd.fused_logits : fwd.global_logits;
    auto probs = softmax(logits);
    out.push_back({static_cast<double>(probs[0]), static_cast<double>(probs[1]),
                   static_cast<double>(probs[2])});
  }
  return out;
}

inline std::string format_mean_sd(const MeanStd& m) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f±%.3f", m.mean, m.sd);
  return buf;
}

// Fold-level CSV with one row per fold plus mean and sd rows; the column set
// mirrors the cross-validation tables (accuracy, specificity, sensitivity,
// AUC, per-class accuracy).
inline void write_fold_csv(const std::string& path, const std::vector<MetricsReport>& folds) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "fold,accuracy,specificity,sensitivity,auc,acc_normal,acc_benign,acc_malignant\n";
  auto cell = [](const std::optional<double>& v) {
    return v ? std::to_string(*v) : std::string("");
  };
  std::vector<double> acc, spec, sens, auc;
  std::array<std::vector<double>, 3> pc;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const auto& r = folds[i];
    f << i << "," << r.accuracy << "," << cell(r.specificity) << "," << cell(r.sensitivity) << ","
      << cell(r.auc);
    for (int c = 0; c < 3; ++c) f << "," << cell(r.per_class[c]);
    f << "\n";
    acc.push_back(r.accuracy);
    if (r.specificity) spec.push_back(*r.specificity);
    if (r.sensitivity) sens.push_back(*r.sensitivity);
    if (r.auc) auc.push_back(*r.auc);
    for (int c = 0; c < 3; ++c)
      if (r.per_class[c]) pc[c].push_back(*r.per_class[c]);
  }
  auto emit = [&](const char* row, auto pick) {
    f << row << "," << pick(mean_std(acc)) << "," << pick(mean_std(spec)) << ","
      << pick(mean_std(sens)) << "," << pick(mean_std(auc));
    for (int c = 0; c < 3; ++c) f << "," << pick(mean_std(pc[c]));
    f << "\n";
  };
  emit("mean", [](const MeanStd& m) { return m.mean; });
  emit("sd", [](const MeanStd& m) { return m.sd; });
}

}  // namespace radformer::train
