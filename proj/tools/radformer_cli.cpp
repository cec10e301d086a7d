// Command-line front end: synthetic corpus generation, staged training,
// ROI binarization benchmarking, lexicon-map construction, and explanation
// export. Exit codes: 0 success, 2 usage error, 3 data error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include "radformer/radformer.hpp"

namespace fs = std::filesystem;
using namespace radformer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::size_t thread_budget() {
  const char* env = std::getenv("RADFORMER_THREADS");
  if (!env) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v > 0 ? static_cast<std::size_t>(v) : 1;
}

data::Manifest load_manifest_checked(const std::string& path) {
  if (!fs::exists(path)) {
    throw UsageError("manifest not found: " + path);
  }
  try {
    return data::load_manifest(path);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

struct ModelFlags {
  std::string preset = "toy";
  std::string local_preset;  // empty: derived from --preset
  std::size_t input_size = 224;
  std::string binarize = "otsu";
  std::uint64_t seed = 0;

  RadFormer<float>::Config config() const {
    const std::string local =
        !local_preset.empty() ? local_preset : (preset == "toy" ? "toy" : "paper-33");
    auto cfg = RadFormer<float>::Config::make(preset, local, input_size, seed);
    cfg.binarize = roi::BinarizationStrategy::parse(binarize);
    return cfg;
  }
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--preset", mf.preset, "Global backbone preset")
      ->check(CLI::IsMember({"paper-50", "paper-34", "paper-18", "toy"}));
  cmd->add_option("--local-preset", mf.local_preset, "Local backbone preset (paper-33|toy)");
  cmd->add_option("--input-size", mf.input_size, "Branch input size in pixels");
  cmd->add_option("--binarize", mf.binarize,
                  "Binarization strategy: otsu|fixed:<t>|hysteresis:<hi>:<lo>|naive");
  cmd->add_option("--seed", mf.seed, "Master seed");
}

std::vector<train::TrainSample> samples_for(const data::Manifest& manifest,
                                            const std::set<std::string>* patients) {
  try {
    return train::load_samples(manifest, patients);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, std::size_t patients, std::uint64_t seed,
              std::size_t images_per_patient, std::size_t size) {
  data::SynthConfig cfg;
  cfg.images_per_patient = images_per_patient;
  cfg.image_size = size;
  auto res = data::synth_generate(seed, patients, out_dir, cfg);
  std::cout << "wrote " << res.manifest.samples.size() << " images under " << out_dir << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

std::vector<train::Stage> stages_for(const std::string& stage_flag) {
  if (stage_flag == "all") {
    return {train::Stage::global, train::Stage::local, train::Stage::full};
  }
  return {train::parse_stage(stage_flag)};
}

void run_stages(RadFormer<float>& model, const std::vector<train::Stage>& stages,
                const std::vector<train::TrainSample>& samples, const train::TrainConfig& tcfg,
                const std::string& out_dir, train::JsonlLogger* log) {
  for (auto stage : stages) {
    train::stage_train(model, stage, samples, tcfg, log);
    model.save(out_dir + "/ckpt_" + train::stage_name(stage) + ".rfckpt");
    if (log) log->flush();
  }
}

int cmd_train(const std::string& manifest_path, const std::string& out_dir, const ModelFlags& mf,
              const std::string& stage_flag, train::TrainConfig tcfg, std::size_t folds,
              const std::string& init_from) {
  auto manifest = load_manifest_checked(manifest_path);
  fs::create_directories(out_dir);
  const auto stages = stages_for(stage_flag);

  if (folds <= 1) {
    RadFormer<float> model(mf.config());
    if (!init_from.empty()) model.load(init_from);
    auto samples = samples_for(manifest, nullptr);
    train::JsonlLogger log(out_dir + "/train_log.jsonl");
    run_stages(model, stages, samples, tcfg, out_dir, &log);
    std::cout << "training complete; checkpoints under " << out_dir << "\n";
    return kExitOk;
  }

  auto splits = train::kfold_split(manifest, folds, tcfg.seed);
  std::vector<train::MetricsReport> reports(splits.size());
  auto run_fold = [&](std::size_t fi) {
    const auto& split = splits[fi];
    ModelFlags fold_mf = mf;
    fold_mf.seed = mf.seed + fi;
    RadFormer<float> model(fold_mf.config());
    if (!init_from.empty()) model.load(init_from);
    auto train_samples = samples_for(manifest, &split.train_patients);
    auto val_samples = samples_for(manifest, &split.val_patients);
    train::TrainConfig fold_cfg = tcfg;
    fold_cfg.seed = tcfg.seed + fi;
    const std::string fold_dir = out_dir + "/fold" + std::to_string(fi);
    fs::create_directories(fold_dir);
    train::JsonlLogger log(fold_dir + "/train_log.jsonl");
    run_stages(model, stages, train_samples, fold_cfg, fold_dir, &log);
    auto scores = train::predict_scores(model, val_samples);
    std::vector<int> labels;
    for (const auto& s : val_samples) labels.push_back(s.label);
    reports[fi] = train::evaluate(scores, labels);
  };

  const std::size_t jobs = std::min(thread_budget(), splits.size());
  if (jobs <= 1) {
    for (std::size_t fi = 0; fi < splits.size(); ++fi) run_fold(fi);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t t = 0; t < jobs; ++t) {
      pool.emplace_back([&] {
        for (std::size_t fi = next.fetch_add(1); fi < splits.size(); fi = next.fetch_add(1)) {
          run_fold(fi);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  train::write_fold_csv(out_dir + "/folds.csv", reports);
  std::cout << "cross-validation complete; summary at " << out_dir << "/folds.csv\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// roi-bench
// ---------------------------------------------------------------------------

int cmd_roi_bench(const std::string& manifest_path, const std::string& out_dir,
                  const ModelFlags& mf, const std::string& checkpoint, std::size_t folds,
                  std::uint64_t seed, const std::string& strategies_flag) {
  auto manifest = load_manifest_checked(manifest_path);
  bool any_box = false;
  for (const auto& s : manifest.samples) any_box = any_box || s.roi_box.has_value();
  if (!any_box) throw DataError("roi-bench requires a manifest with annotated ROI boxes");
  fs::create_directories(out_dir);

  RadFormer<float> model(mf.config());
  model.load(checkpoint);
  model.set_eval();

  std::vector<std::string> strategy_names;
  {
    std::stringstream ss(strategies_flag);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) strategy_names.push_back(item);
    }
  }

  auto splits = train::kfold_split(manifest, folds, seed);
  const std::size_t S = mf.input_size;
  data::AugmentConfig acfg;

  std::ofstream csv(out_dir + "/table3.csv");
  csv << "method,mIoU,mIntersection,ROI_Area/Img_Area,accuracy,specificity,sensitivity\n";

  for (const auto& name : strategy_names) {
    model.set_binarization(roi::BinarizationStrategy::parse(name));
    std::vector<double> fold_iou, fold_inter, fold_area, fold_acc, fold_spec, fold_sens;
    for (const auto& split : splits) {
      auto val = samples_for(manifest, &split.val_patients);
      double iou = 0, inter = 0, area = 0;
      std::size_t with_box = 0;
      std::vector<std::array<double, 3>> scores;
      std::vector<int> labels;
      for (const auto& ts : val) {
        auto input = train::prepare_inputs<float>({ts}, S);
        auto batch = train::make_batch(input, {0});
        Tape<float>::NoGrad ng;
        auto fwd = model.forward(batch);
        auto probs = softmax(row(fwd.fused_logits, 0));
        scores.push_back({probs[0], probs[1], probs[2]});
        labels.push_back(ts.label);
        const auto& rec = manifest.samples[ts.manifest_index];
        if (rec.roi_box) {
          auto annotated =
              data::augment_box(*rec.roi_box, ts.image.width, ts.image.height, acfg);
          if (acfg.crop != S) {
            const double sc = static_cast<double>(S) / static_cast<double>(acfg.crop);
            annotated.x_min = static_cast<int>(annotated.x_min * sc);
            annotated.y_min = static_cast<int>(annotated.y_min * sc);
            annotated.x_max = std::min<int>(static_cast<int>(S) - 1,
                                            static_cast<int>(annotated.x_max * sc));
            annotated.y_max = std::min<int>(static_cast<int>(S) - 1,
                                            static_cast<int>(annotated.y_max * sc));
          }
          auto m = roi::roi_metrics(fwd.samples[0].box, annotated, S, S);
          iou += m.iou;
          inter += m.intersection_fraction;
          area += m.area_fraction;
          ++with_box;
        }
      }
      if (with_box) {
        fold_iou.push_back(iou / with_box);
        fold_inter.push_back(inter / with_box);
        fold_area.push_back(area / with_box);
      }
      auto rep = train::evaluate(scores, labels);
      fold_acc.push_back(rep.accuracy);
      if (rep.specificity) fold_spec.push_back(*rep.specificity);
      if (rep.sensitivity) fold_sens.push_back(*rep.sensitivity);
    }
    csv << name << "," << train::format_mean_sd(train::mean_std(fold_iou)) << ","
        << train::format_mean_sd(train::mean_std(fold_inter)) << ","
        << train::format_mean_sd(train::mean_std(fold_area)) << ","
        << train::format_mean_sd(train::mean_std(fold_acc)) << ","
        << train::format_mean_sd(train::mean_std(fold_spec)) << ","
        << train::format_mean_sd(train::mean_std(fold_sens)) << "\n";
  }
  std::cout << "ROI benchmark written to " << out_dir << "/table3.csv\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// map
// ---------------------------------------------------------------------------

int cmd_map(const std::string& manifest_path, const std::string& out_dir, const ModelFlags& mf,
            const std::string& checkpoint, double epsilon) {
  auto manifest = load_manifest_checked(manifest_path);
  if (manifest.vocabulary.size() > explain::kMaxVocabulary) {
    throw DataError("vocabulary of " + std::to_string(manifest.vocabulary.size()) +
                    " lexicons exceeds the supported maximum of " +
                    std::to_string(explain::kMaxVocabulary));
  }
  fs::create_directories(out_dir);
  RadFormer<float> model(mf.config());
  model.load(checkpoint);

  std::vector<std::pair<Tensor<float>, explain::LabelSet>> dataset;
  for (const auto& s : manifest.samples) {
    if (!s.lexicons || s.lexicons->empty()) continue;
    auto img = read_pgm(s.path);
    auto t = data::augment<float>(img, false);
    if (mf.input_size != t.dim(1)) t = resize_bilinear(t, mf.input_size, mf.input_size);
    dataset.push_back({t, explain::LabelSet(s.lexicons->begin(), s.lexicons->end())});
  }
  if (dataset.empty()) throw DataError("map requires samples with non-empty lexicon labels");

  auto map = explain::build_lexicon_map(model, dataset, epsilon, manifest.vocabulary);
  std::ofstream f(out_dir + "/lexicon_map.json");
  f << explain::lexicon_map_to_json(map).dump(2) << "\n";
  std::cout << "lexicon map over " << dataset.size() << " labeled images -> " << out_dir
            << "/lexicon_map.json (" << map.unresolved.size() << " unresolved)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

int cmd_explain(const std::string& manifest_path, const std::string& out_dir,
                const ModelFlags& mf, const std::string& checkpoint, const std::string& map_path,
                double epsilon, std::size_t limit) {
  auto manifest = load_manifest_checked(manifest_path);
  if (!fs::exists(map_path)) {
    throw UsageError("lexicon map not found: " + map_path + " (build one with `radformer map`)");
  }
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/activations");
  fs::create_directories(out_dir + "/attention");

  RadFormer<float> model(mf.config());
  model.load(checkpoint);
  nlohmann::json map_json;
  {
    std::ifstream f(map_path);
    f >> map_json;
  }
  auto map = explain::lexicon_map_from_json(map_json);

  std::array<std::vector<explain::Explanation>, 3> by_class;
  std::vector<AttentionRecord> attention_sum;
  std::size_t count = 0;
  for (const auto& s : manifest.samples) {
    if (limit && count >= limit) break;
    auto img = read_pgm(s.path);
    auto t = data::augment<float>(img, false);
    if (mf.input_size != t.dim(1)) t = resize_bilinear(t, mf.input_size, mf.input_size);
    auto e = explain::explain(model, t, map, epsilon);
    const std::string base = "img" + std::to_string(count);
    {
      std::ofstream f(out_dir + "/" + base + ".json");
      auto j = explain::explanation_to_json(e);
      j["source"] = s.path;
      j["label"] = s.label;
      f << j.dump(2) << "\n";
    }
    for (const auto& [fid, img_map] : e.activation_maps) {
      write_pgm(out_dir + "/activations/" + base + "_feat" + std::to_string(fid) + ".pgm",
                img_map);
    }
    write_attention_csv(out_dir + "/attention/" + base + ".csv", e.attention);
    if (attention_sum.empty()) {
      attention_sum = e.attention;
    } else {
      for (std::size_t i = 0; i < attention_sum.size(); ++i)
        for (int k = 0; k < 4; ++k) attention_sum[i].scores[k] += e.attention[i].scores[k];
    }
    by_class[e.predicted_class].push_back(std::move(e));
    ++count;
  }
  if (count == 0) throw DataError("explain: no samples processed");

  for (int c = 0; c < 3; ++c) {
    if (by_class[c].empty()) continue;
    explain::write_frequency_csv(
        out_dir + "/frequency_" + data::kClassNames[c] + ".csv",
        explain::feature_frequency(by_class[c]));
  }
  for (auto& rec : attention_sum)
    for (int k = 0; k < 4; ++k) rec.scores[k] /= static_cast<double>(count);
  write_attention_csv(out_dir + "/attention_mean.csv", attention_sum);
  std::cout << "explanations for " << count << " images under " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Global-local attention pipeline for interpretable 3-class ultrasound "
               "classification"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic glyph corpus");
  std::string synth_out = "synth";
  std::size_t synth_patients = 30;
  std::uint64_t synth_seed = 0;
  std::size_t synth_ipp = 5, synth_size = 256;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--patients", synth_patients, "Number of synthetic patients");
  synth->add_option("--seed", synth_seed, "Corpus seed");
  synth->add_option("--images-per-patient", synth_ipp, "Images per patient");
  synth->add_option("--size", synth_size, "Image size in pixels");

  // train
  auto* tr = app.add_subcommand("train", "Run the staged training protocol");
  std::string tr_manifest, tr_out = "runs", tr_stage = "all", tr_init;
  ModelFlags tr_mf;
  train::TrainConfig tcfg;
  std::size_t tr_folds = 1;
  double tr_target_acc = 0.0;
  tr->add_option("--manifest", tr_manifest, "Dataset manifest JSON")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  add_model_flags(tr, tr_mf);
  tr->add_option("--stage", tr_stage, "Training stage")
      ->check(CLI::IsMember({"global", "local", "full", "all"}));
  tr->add_option("--epochs", tcfg.epochs, "Epochs per stage");
  tr->add_option("--batch", tcfg.batch_size, "Batch size");
  tr->add_option("--lr", tcfg.lr0, "Initial learning rate");
  tr->add_option("--folds", tr_folds, "Patient-disjoint folds (1 = no cross-validation)");
  tr->add_option("--init-from", tr_init, "Checkpoint to start from");
  tr->add_option("--target-acc", tr_target_acc, "Stop a stage early at this train accuracy");

  // roi-bench
  auto* rb = app.add_subcommand("roi-bench", "Benchmark binarization strategies");
  std::string rb_manifest, rb_out = "roi-bench", rb_ckpt;
  ModelFlags rb_mf;
  std::size_t rb_folds = 3;
  std::uint64_t rb_seed = 0;
  std::string rb_strategies = "otsu,fixed:120,hysteresis:120:50,naive";
  rb->add_option("--manifest", rb_manifest, "Manifest with annotated ROI boxes")->required();
  rb->add_option("--out", rb_out, "Output directory")->required();
  rb->add_option("--checkpoint", rb_ckpt, "Trained checkpoint")->required();
  add_model_flags(rb, rb_mf);
  rb->add_option("--folds", rb_folds, "Folds for mean/sd aggregation");
  rb->add_option("--strategies", rb_strategies, "Comma-separated strategy list");

  // map
  auto* mp = app.add_subcommand("map", "Build the lexicon-feature map");
  std::string mp_manifest, mp_out = "map", mp_ckpt;
  ModelFlags mp_mf;
  double mp_eps = 0.05;
  mp->add_option("--manifest", mp_manifest, "Manifest with lexicon labels")->required();
  mp->add_option("--out", mp_out, "Output directory")->required();
  mp->add_option("--checkpoint", mp_ckpt, "Trained checkpoint")->required();
  add_model_flags(mp, mp_mf);
  mp->add_option("--epsilon", mp_eps, "Top-feature tolerance as a fraction of the max weight");

  // explain
  auto* ex = app.add_subcommand("explain", "Export per-image explanations");
  std::string ex_manifest, ex_out = "explanations", ex_ckpt, ex_map;
  ModelFlags ex_mf;
  double ex_eps = 0.05;
  std::size_t ex_limit = 0;
  ex->add_option("--manifest", ex_manifest, "Manifest of images to explain")->required();
  ex->add_option("--out", ex_out, "Output directory")->required();
  ex->add_option("--checkpoint", ex_ckpt, "Trained checkpoint")->required();
  ex->add_option("--map", ex_map, "Lexicon map JSON")->required();
  add_model_flags(ex, ex_mf);
  ex->add_option("--epsilon", ex_eps, "Top-feature tolerance fraction");
  ex->add_option("--limit", ex_limit, "Explain at most this many images (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (synth->parsed()) {
      return cmd_synth(synth_out, synth_patients, synth_seed, synth_ipp, synth_size);
    }
    if (tr->parsed()) {
      if (tr_target_acc > 0) tcfg.target_train_accuracy = tr_target_acc;
      tcfg.seed = tr_mf.seed;
      return cmd_train(tr_manifest, tr_out, tr_mf, tr_stage, tcfg, tr_folds, tr_init);
    }
    if (rb->parsed()) {
      return cmd_roi_bench(rb_manifest, rb_out, rb_mf, rb_ckpt, rb_folds, rb_mf.seed,
                           rb_strategies);
    }
    if (mp->parsed()) {
      return cmd_map(mp_manifest, mp_out, mp_mf, mp_ckpt, mp_eps);
    }
    if (ex->parsed()) {
      return cmd_explain(ex_manifest, ex_out, ex_mf, ex_ckpt, ex_map, ex_eps, ex_limit);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
