#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "radformer/radformer.hpp"

using namespace radformer;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("radformer_trainer_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

data::Manifest tiny_corpus(const std::string& tag, std::uint64_t seed, std::size_t patients) {
  return data::synth_generate(seed, patients, temp_dir(tag)).manifest;
}

RadFormer<float>::Config toy_config(std::uint64_t seed) {
  return RadFormer<float>::Config::make("toy", "toy", 64, seed);
}

std::vector<float> snapshot(const std::vector<Parameter<float>*>& params,
                            const std::string& prefix) {
  std::vector<float> out;
  for (auto* p : params) {
    if (p->name.rfind(prefix, 0) == 0) {
      out.insert(out.end(), p->tensor.values().begin(), p->tensor.values().end());
    }
  }
  return out;
}

}  // namespace

TEST(Sgd, VanillaStep) {
  Parameter<float> p;
  p.name = "w";
  p.tensor = Tensor<float>::leaf({1}, {1.0f}, true);
  p.tensor.grad()[0] = 0.1f;
  train::SgdOptimizer<float> opt({&p}, 0.0, 0.0);
  opt.step(0.1);
  EXPECT_FLOAT_EQ(p.tensor[0], 0.99f);
}

TEST(Sgd, FrozenParameterUntouched) {
  Parameter<float> p;
  p.name = "w";
  p.tensor = Tensor<float>::leaf({2}, {1.0f, -2.0f}, true);
  p.tensor.grad()[0] = 5.0f;
  p.tensor.grad()[1] = -5.0f;
  p.frozen = true;
  train::SgdOptimizer<float> opt({&p}, 0.9, 0.1);
  opt.step(0.5);
  EXPECT_FLOAT_EQ(p.tensor[0], 1.0f);
  EXPECT_FLOAT_EQ(p.tensor[1], -2.0f);
}

TEST(Sgd, MomentumRecursionClosedForm) {
  // two steps with constant gradient g: v1 = g, p1 = p0 - lr*g;
  // v2 = mu*g + g, p2 = p1 - lr*(mu+1)*g
  const double g = 0.4, mu = 0.9, lr = 0.1, p0 = 2.0;
  Parameter<double> p;
  p.name = "w";
  p.tensor = Tensor<double>::leaf({1}, {p0}, true);
  train::SgdOptimizer<double> opt({&p}, mu, 0.0);
  p.tensor.grad()[0] = g;
  opt.step(lr);
  EXPECT_NEAR(p.tensor[0], p0 - lr * g, 1e-12);
  p.tensor.zero_grad();
  p.tensor.grad()[0] = g;
  opt.step(lr);
  EXPECT_NEAR(p.tensor[0], p0 - lr * g - lr * (mu * g + g), 1e-12);
}

TEST(Sgd, WeightDecayFoldsIntoGradient) {
  Parameter<double> p;
  p.name = "w";
  p.tensor = Tensor<double>::leaf({1}, {2.0}, true);
  train::SgdOptimizer<double> opt({&p}, 0.0, 0.01);
  p.tensor.ensure_grad();  // zero gradient; only the decay term acts
  opt.step(1.0);
  EXPECT_NEAR(p.tensor[0], 2.0 - 0.01 * 2.0, 1e-12);
}

TEST(LrSchedule, PaperAnchors) {
  train::TrainConfig cfg;
  EXPECT_DOUBLE_EQ(train::lr_at_epoch(0, cfg), 0.005);
  EXPECT_DOUBLE_EQ(train::lr_at_epoch(5, cfg), 0.004);
  EXPECT_DOUBLE_EQ(train::lr_at_epoch(12, cfg), 0.005 * 0.64);
  EXPECT_DOUBLE_EQ(train::lr_at_epoch(59, cfg), 0.005 * std::pow(0.8, 11));
  for (std::size_t e = 1; e < 80; ++e) {
    EXPECT_LE(train::lr_at_epoch(e, cfg), train::lr_at_epoch(e - 1, cfg));
  }
}

TEST(KFold, PartitionProperties) {
  auto manifest = tiny_corpus("kfold", 1, 23);
  auto folds = train::kfold_split(manifest, 5, 7);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::string> all;
  for (const auto& s : manifest.samples) all.insert(s.patient_id);
  std::size_t min_sz = SIZE_MAX, max_sz = 0;
  std::set<std::string> seen;
  for (const auto& f : folds) {
    min_sz = std::min(min_sz, f.val_patients.size());
    max_sz = std::max(max_sz, f.val_patients.size());
    for (const auto& p : f.val_patients) {
      EXPECT_TRUE(all.count(p));
      EXPECT_FALSE(seen.count(p)) << "patient " << p << " appears in two validation folds";
      seen.insert(p);
      EXPECT_FALSE(f.train_patients.count(p)) << "patient in both sides of one fold";
    }
    std::set<std::string> joined = f.train_patients;
    joined.insert(f.val_patients.begin(), f.val_patients.end());
    EXPECT_EQ(joined, all);
  }
  EXPECT_EQ(seen, all);
  EXPECT_LE(max_sz - min_sz, 1u);  // balanced within one patient
}

TEST(KFold, RandomManifestPartitionProperty) {
  Rng rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    data::Manifest m;
    const std::size_t n_pat = 3 + rng.index(40);
    for (std::size_t p = 0; p < n_pat; ++p) {
      const std::size_t imgs = 1 + rng.index(4);
      for (std::size_t i = 0; i < imgs; ++i) {
        data::Sample s;
        s.path = "unused.pgm";
        s.patient_id = "p" + std::to_string(p);
        s.label = int(rng.index(3));
        m.samples.push_back(s);
      }
    }
    const std::size_t k = 2 + rng.index(std::min<std::size_t>(n_pat - 1, 9));
    auto folds = train::kfold_split(m, k, rep);
    std::set<std::string> seen;
    for (const auto& f : folds) {
      for (const auto& p : f.val_patients) {
        EXPECT_FALSE(seen.count(p));
        seen.insert(p);
      }
    }
    EXPECT_EQ(seen.size(), n_pat);
  }
}

TEST(KFold, DeterministicAndBounds) {
  auto manifest = tiny_corpus("kfold_det", 2, 12);
  auto a = train::kfold_split(manifest, 4, 77);
  auto b = train::kfold_split(manifest, 4, 77);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].val_patients, b[i].val_patients);
  }
  EXPECT_THROW(train::kfold_split(manifest, 13, 1), std::invalid_argument);
  EXPECT_THROW(train::kfold_split(manifest, 0, 1), std::invalid_argument);
}

TEST(KFold, PaperScalePatientCounts) {
  // 218 patients, k=10: folds of 21 or 22 patients
  data::Manifest m;
  for (int p = 0; p < 218; ++p) {
    data::Sample s;
    s.path = "x";
    s.patient_id = "pat" + std::to_string(p);
    s.label = p % 3;
    m.samples.push_back(s);
  }
  auto folds = train::kfold_split(m, 10, 5);
  for (const auto& f : folds) {
    EXPECT_GE(f.val_patients.size(), 21u);
    EXPECT_LE(f.val_patients.size(), 22u);
  }
}

TEST(Evaluate, PerfectPredictor) {
  std::vector<std::array<double, 3>> scores = {
      {0.9, 0.05, 0.05}, {0.1, 0.8, 0.1}, {0.0, 0.1, 0.9}};
  std::vector<int> labels = {0, 1, 2};
  auto rep = train::evaluate(scores, labels);
  EXPECT_DOUBLE_EQ(rep.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(*rep.sensitivity, 1.0);
  EXPECT_DOUBLE_EQ(*rep.specificity, 1.0);
  EXPECT_DOUBLE_EQ(*rep.auc, 1.0);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(*rep.per_class[c], 1.0);
}

TEST(Evaluate, HandConfusionFixture) {
  // TP=9, FN=1, TN=18, FP=2 -> sensitivity 0.9, specificity 0.9
  std::vector<std::array<double, 3>> scores;
  std::vector<int> labels;
  auto push = [&](int label, int pred, int count) {
    for (int i = 0; i < count; ++i) {
      std::array<double, 3> s = {0, 0, 0};
      s[pred] = 1.0;
      scores.push_back(s);
      labels.push_back(label);
    }
  };
  push(2, 2, 9);   // TP
  push(2, 0, 1);   // FN
  push(0, 0, 18);  // TN
  push(1, 2, 2);   // FP
  auto rep = train::evaluate(scores, labels);
  EXPECT_DOUBLE_EQ(*rep.sensitivity, 0.9);
  EXPECT_DOUBLE_EQ(*rep.specificity, 0.9);
  EXPECT_DOUBLE_EQ(rep.accuracy, 27.0 / 30.0);
}

TEST(Evaluate, AucMatchesPairwiseOracle) {
  Rng rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 5 + rng.index(40);
    std::vector<std::array<double, 3>> scores;
    std::vector<int> labels;
    std::vector<double> malig;
    std::vector<int> is_pos;
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int label = int(rng.index(3));
      double s2 = rng.uniform();
      if (rng.uniform() < 0.3) s2 = 0.5;  // force ties
      scores.push_back({rng.uniform(), rng.uniform(), s2});
      labels.push_back(label);
      malig.push_back(s2);
      is_pos.push_back(label == 2 ? 1 : 0);
      (label == 2 ? has_pos : has_neg) = true;
    }
    auto report = train::evaluate(scores, labels);
    if (has_pos && has_neg) {
      ASSERT_TRUE(report.auc.has_value());
      EXPECT_NEAR(*report.auc, oracles::auc_pairwise(malig, is_pos), 1e-9);
    } else {
      EXPECT_FALSE(report.auc.has_value());
    }
  }
}

TEST(Evaluate, SingleClassReportsAucAbsent) {
  std::vector<std::array<double, 3>> scores = {{1, 0, 0}, {0.8, 0.1, 0.1}};
  std::vector<int> labels = {0, 0};
  auto rep = train::evaluate(scores, labels);
  EXPECT_FALSE(rep.auc.has_value());
  EXPECT_FALSE(rep.sensitivity.has_value());
  EXPECT_TRUE(rep.specificity.has_value());
  EXPECT_DOUBLE_EQ(rep.accuracy, 1.0);
}

TEST(Evaluate, PerClassConsistentWithOverall) {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 10 + rng.index(50);
    std::vector<std::array<double, 3>> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = int(rng.index(3));
      for (auto& v : scores[i]) v = rng.uniform();
    }
    auto rep_ = train::evaluate(scores, labels);
    double weighted = 0;
    std::array<std::size_t, 3> counts{0, 0, 0};
    for (int l : labels) counts[l]++;
    for (int c = 0; c < 3; ++c) {
      if (counts[c]) weighted += *rep_.per_class[c] * double(counts[c]);
    }
    EXPECT_NEAR(weighted / double(n), rep_.accuracy, 1e-12);
  }
}

TEST(StageTrain, EnforcesStageOrder) {
  auto manifest = tiny_corpus("order", 3, 3);
  auto samples = train::load_samples(manifest);
  RadFormer<float> model(toy_config(1));
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  EXPECT_THROW(train::stage_train(model, train::Stage::local, samples, cfg), std::logic_error);
  EXPECT_THROW(train::stage_train(model, train::Stage::full, samples, cfg), std::logic_error);
}

TEST(StageTrain, LocalStageLeavesGlobalBitwiseUnchanged) {
  auto manifest = tiny_corpus("freeze", 4, 3);
  auto samples = train::load_samples(manifest);
  RadFormer<float> model(toy_config(2));
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 9;
  train::stage_train(model, train::Stage::global, samples, cfg);
  // full state snapshot: parameters plus batch-norm running statistics
  auto state_snapshot = [&](const std::string& prefix) {
    std::vector<float> out;
    for (auto& e : model.state()) {
      if (e.name.rfind(prefix, 0) == 0) out.insert(out.end(), e.values->begin(), e.values->end());
    }
    return out;
  };
  const auto global_before = state_snapshot("global.");
  const auto local_before = state_snapshot("local.");
  train::stage_train(model, train::Stage::local, samples, cfg);
  const auto global_after = state_snapshot("global.");
  ASSERT_EQ(global_before.size(), global_after.size());
  for (std::size_t i = 0; i < global_before.size(); ++i) {
    ASSERT_EQ(global_before[i], global_after[i])
        << "global state entry " << i << " drifted during the local stage";
  }
  EXPECT_NE(state_snapshot("local."), local_before);
}

TEST(StageTrain, FusionUntouchedUntilFullStageThenReinitialized) {
  auto manifest = tiny_corpus("reinit", 5, 3);
  auto samples = train::load_samples(manifest);
  RadFormer<float> model(toy_config(3));
  auto params = model.parameters();
  const auto at_construction = snapshot(params, "fusion.");
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 21;
  train::stage_train(model, train::Stage::global, samples, cfg);
  train::stage_train(model, train::Stage::local, samples, cfg);
  EXPECT_EQ(snapshot(model.parameters(), "fusion."), at_construction)
      << "fusion weights must stay frozen through the branch stages";
  train::stage_train(model, train::Stage::full, samples, cfg);
  EXPECT_NE(snapshot(model.parameters(), "fusion."), at_construction);
}

TEST(StageTrain, GlobalStageFreezesLocalAndFusion) {
  auto manifest = tiny_corpus("freeze_g", 9, 3);
  auto samples = train::load_samples(manifest);
  RadFormer<float> model(toy_config(12));
  auto state_snapshot = [&](const std::string& prefix) {
    std::vector<float> out;
    for (auto& e : model.state()) {
      if (e.name.rfind(prefix, 0) == 0) out.insert(out.end(), e.values->begin(), e.values->end());
    }
    return out;
  };
  const auto local_before = state_snapshot("local.");
  const auto fusion_before = state_snapshot("fusion.");
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 2;
  train::stage_train(model, train::Stage::global, samples, cfg);
  EXPECT_EQ(state_snapshot("local."), local_before);
  EXPECT_EQ(state_snapshot("fusion."), fusion_before);
  EXPECT_NE(state_snapshot("global."), std::vector<float>{});
}

TEST(Checkpoint, PartialImportByNameAndShape) {
  auto dir = temp_dir("partial");
  Rng rng(31);
  Linear<float> a("shared.fc", 4, 3, rng), b("other.fc", 4, 3, rng);
  std::vector<StateEntry<float>> src;
  a.state(src);
  b.state(src);
  save_checkpoint(dir + "/w.rfckpt", src);

  Linear<float> target("shared.fc", 4, 3, rng);  // different init
  Linear<float> missing("absent.fc", 4, 3, rng);
  std::vector<StateEntry<float>> dst;
  target.state(dst);
  missing.state(dst);
  const auto before_missing = missing.weight.tensor.values();
  EXPECT_EQ(load_checkpoint(dir + "/w.rfckpt", dst), 2u);  // shared weight+bias matched
  EXPECT_EQ(target.weight.tensor.values(), a.weight.tensor.values());
  EXPECT_EQ(missing.weight.tensor.values(), before_missing);

  // shape conflict on a matching name is an error
  Linear<float> wrong("shared.fc", 5, 3, rng);
  std::vector<StateEntry<float>> bad;
  wrong.state(bad);
  EXPECT_THROW(load_checkpoint(dir + "/w.rfckpt", bad), std::runtime_error);
}

TEST(StageTrain, FusionReinitializeIsSeedDeterministic) {
  RadFormer<float> a(toy_config(3)), b(toy_config(4));  // different init seeds
  a.fusion().reinitialize(77);
  b.fusion().reinitialize(77);
  auto fa = snapshot(a.parameters(), "fusion.");
  auto fb = snapshot(b.parameters(), "fusion.");
  EXPECT_EQ(fa, fb);
  b.fusion().reinitialize(78);
  EXPECT_NE(snapshot(b.parameters(), "fusion."), fa);
}

TEST(StageTrain, DeterministicGivenSeed) {
  auto manifest = tiny_corpus("det", 6, 3);
  auto samples = train::load_samples(manifest);
  auto run = [&](std::uint64_t seed) {
    RadFormer<float> model(toy_config(seed));
    train::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = seed;
    train::stage_train(model, train::Stage::global, samples, cfg);
    std::vector<float> all;
    for (auto& e : model.state()) all.insert(all.end(), e.values->begin(), e.values->end());
    return all;
  };
  auto a = run(42), b = run(42), c = run(43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(StageTrain, GlobalLossNonIncreasingOverSmoothingWindow) {
  auto manifest = tiny_corpus("loss", 7, 6);
  auto samples = train::load_samples(manifest);
  RadFormer<float> model(toy_config(8));
  train::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 8;
  cfg.seed = 3;
  auto stats = train::stage_train(model, train::Stage::global, samples, cfg);
  ASSERT_EQ(stats.epoch_loss.size(), 20u);
  auto window_mean = [&](std::size_t start) {
    double acc = 0;
    for (std::size_t i = start; i < start + 10; ++i) acc += stats.epoch_loss[i];
    return acc / 10.0;
  };
  EXPECT_LE(window_mean(10), window_mean(0));
}

TEST(Checkpoint, SaveLoadRestoresStateAndStages) {
  auto dir = temp_dir("ckpt");
  auto manifest = tiny_corpus("ckpt_data", 8, 3);
  auto samples = train::load_samples(manifest);
  RadFormer<float> model(toy_config(6));
  train::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  train::stage_train(model, train::Stage::global, samples, cfg);
  model.save(dir + "/m.rfckpt");

  RadFormer<float> restored(toy_config(999));
  restored.load(dir + "/m.rfckpt");
  EXPECT_TRUE(restored.stages_done().count("global"));
  auto sa = model.state();
  auto sb = restored.state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(*sa[i].values, *sb[i].values) << sa[i].name;
  }
  // identical eval outputs after restore
  auto inputs = train::prepare_inputs<float>({samples[0]}, 64);
  model.set_eval();
  restored.set_eval();
  Tape<float>::NoGrad ng;
  auto ya = model.forward(train::make_batch(inputs, {0}));
  auto yb = restored.forward(train::make_batch(inputs, {0}));
  for (std::size_t i = 0; i < ya.global_logits.size(); ++i) {
    EXPECT_EQ(ya.global_logits[i], yb.global_logits[i]);
  }
}

TEST(Checkpoint, RawFormatIsReadable) {
  auto dir = temp_dir("ckpt_raw");
  RadFormer<float> model(toy_config(7));
  model.save(dir + "/m.rfckpt");
  auto records = read_checkpoint(dir + "/m.rfckpt");
  ASSERT_FALSE(records.empty());
  bool found_stem = false;
  for (const auto& r : records) {
    EXPECT_EQ(r.dtype, "f32");
    EXPECT_EQ(r.values.size(), numel(r.shape));
    if (r.name == "global.stem.conv.weight") {
      found_stem = true;
      EXPECT_EQ(r.shape, (Shape{16, 3, 3, 3}));
    }
  }
  EXPECT_TRUE(found_stem);
}

TEST(FoldCsv, WritesHeaderAndSummaryRows) {
  auto dir = temp_dir("csv");
  std::vector<train::MetricsReport> reports(2);
  reports[0].accuracy = 0.9;
  reports[0].sensitivity = 0.8;
  reports[0].specificity = 0.95;
  reports[0].auc = 0.97;
  reports[1].accuracy = 1.0;
  reports[1].sensitivity = 1.0;
  reports[1].specificity = 1.0;
  reports[1].auc = 1.0;
  train::write_fold_csv(dir + "/folds.csv", reports);
  std::ifstream f(dir + "/folds.csv");
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "fold,accuracy,specificity,sensitivity,auc,acc_normal,acc_benign,acc_malignant");
  std::vector<std::string> rows;
  while (std::getline(f, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 4u);  // 2 folds + mean + sd
  EXPECT_EQ(rows[2].rfind("mean,", 0), 0u);
  EXPECT_EQ(rows[3].rfind("sd,", 0), 0u);
}
