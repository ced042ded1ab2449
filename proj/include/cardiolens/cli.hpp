#pragma once

// Batch front end: preprocess, train, evaluate, predict.
//
// Exit codes: 0 success, 1 partial failure, 2 usage or config error,
// 3 numerical divergence.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cardiolens/config.hpp"
#include "cardiolens/data.hpp"
#include "cardiolens/image_io.hpp"
#include "cardiolens/imgproc.hpp"
#include "cardiolens/metrics.hpp"
#include "cardiolens/model.hpp"
#include "cardiolens/nn.hpp"
#include "cardiolens/optim.hpp"

namespace cardiolens::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kPartial = 1, kUsage = 2, kDiverged = 3 };

inline constexpr const char* kSeedEnv = "CARDIOLENS_SEED";
inline constexpr const char* kCurvesHeader = "epoch,split,loss,accuracy,precision,recall,specificity,sensitivity,f1,auc";

// ---------------------------------------------------------------------------
// Run configuration

enum class KeyType { kInt, kDouble, kBool, kString, kPath };

struct KeySpec {
  std::string name;
  KeyType type;
  std::optional<std::string> default_value;
  std::string help;
};

using Schema = std::vector<KeySpec>;

inline Schema preprocess_schema() {
  return {
      {"input_dir", KeyType::kPath, std::nullopt, "directory of PNG/PGM images"},
      {"output_dir", KeyType::kPath, std::nullopt, "destination for processed images and report.csv"},
      {"target_width", KeyType::kInt, "128", "output width"},
      {"target_height", KeyType::kInt, "128", "output height"},
      {"sharpen_k", KeyType::kDouble, "1", "Laplacian sharpening strength"},
      {"apply_v_offset", KeyType::kBool, "false", "add the squared log-intensity statistic when sharpening"},
      {"canny_low", KeyType::kDouble, "30", "Canny low threshold"},
      {"canny_high", KeyType::kDouble, "100", "Canny high threshold"},
      {"se_size", KeyType::kInt, "3", "side of the square structuring element"},
      {"reconstruction_n", KeyType::kInt, "0", "erosion count for opening by reconstruction (0: plain opening)"},
      {"seed", KeyType::kInt, "42", "random seed"},
  };
}

inline Schema train_schema() {
  return {
      {"manifest", KeyType::kPath, std::nullopt, "id,label CSV"},
      {"image_root", KeyType::kPath, std::nullopt, "directory holding the manifest images (default: manifest dir)"},
      {"synthetic", KeyType::kInt, "0", "train on n generated images instead of a manifest"},
      {"out_dir", KeyType::kPath, "run", "run directory"},
      {"epochs", KeyType::kInt, "50", "training epochs"},
      {"batch_size", KeyType::kInt, "16", "mini-batch size"},
      {"optimizer", KeyType::kString, "rmsprop", "sgd|momentum|rmsprop|adam"},
      {"learning_rate", KeyType::kDouble, std::nullopt, "step size (default: optimizer default)"},
      {"image_size", KeyType::kInt, "64", "model input side; images are preprocessed to this size"},
      {"train_fraction", KeyType::kDouble, "0.8", "split fraction"},
      {"val_fraction", KeyType::kDouble, "0.1", "split fraction"},
      {"test_fraction", KeyType::kDouble, "0.1", "split fraction"},
      {"augment", KeyType::kBool, "true", "on-the-fly rotation/flip/scale/noise augmentation"},
      {"dropout_rate", KeyType::kDouble, "0.4", "dropout before the classifier"},
      {"heads", KeyType::kInt, "4", "attention heads"},
      {"sharpen_k", KeyType::kDouble, "1", "Laplacian sharpening strength"},
      {"apply_v_offset", KeyType::kBool, "false", "add the squared log-intensity statistic when sharpening"},
      {"se_size", KeyType::kInt, "3", "side of the square structuring element"},
      {"reconstruction_n", KeyType::kInt, "0", "erosion count for opening by reconstruction (0: plain opening)"},
      {"divergence_loss", KeyType::kDouble, "6.931471805599453",
       "epoch mean training loss above this counts as divergence"},
      {"seed", KeyType::kInt, "42", "random seed"},
  };
}

inline Schema evaluate_schema() {
  return {
      {"checkpoint", KeyType::kPath, std::nullopt, "model checkpoint"},
      {"manifest", KeyType::kPath, std::nullopt, "id,label CSV with ground truth"},
      {"image_root", KeyType::kPath, std::nullopt, "directory holding the manifest images (default: manifest dir)"},
      {"predictions", KeyType::kPath, std::nullopt, "id,label[,score] CSV used instead of running a checkpoint"},
      {"out_dir", KeyType::kPath, ".", "where metrics.csv is written"},
      {"seed", KeyType::kInt, "42", "random seed"},
  };
}

inline Schema predict_schema() {
  return {
      {"checkpoint", KeyType::kPath, std::nullopt, "model checkpoint"},
      {"image", KeyType::kPath, std::nullopt, "image to classify"},
      {"seed", KeyType::kInt, "42", "random seed"},
  };
}

inline Schema schema_for(const std::string& command) {
  if (command == "preprocess") return preprocess_schema();
  if (command == "train") return train_schema();
  if (command == "evaluate") return evaluate_schema();
  if (command == "predict") return predict_schema();
  throw config::ConfigError("unknown command '" + command + "'");
}

/// Resolved settings for one command. Precedence: flags, then config file,
/// then `CARDIOLENS_SEED` (seed only), then built-in defaults.
class RunConfig {
 public:
  static RunConfig resolve(const Schema& schema, const config::Entries& file_entries,
                           const std::map<std::string, std::string>& flags, const char* env_seed) {
    RunConfig rc;
    rc.schema_ = schema;
    std::set<std::string> known;
    for (const auto& k : schema) known.insert(k.name);
    for (const auto& k : schema)
      if (k.default_value) rc.set(k.name, *k.default_value, "default");
    for (const auto& [key, value] : file_entries) {
      if (!known.count(key)) throw config::ConfigError("unknown config key '" + key + "'");
      rc.set(key, value, "file");
    }
    if (known.count("seed") && rc.sources_["seed"] == "default" && env_seed != nullptr && *env_seed != '\0')
      rc.set("seed", env_seed, std::string("env ") + kSeedEnv);
    for (const auto& [key, value] : flags) {
      if (!known.count(key)) throw config::ConfigError("unknown option '" + key + "'");
      rc.set(key, value, "flag");
    }
    for (const auto& k : schema)
      if (rc.has(k.name)) rc.check_type(k);
    return rc;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw config::ConfigError("missing required setting '" + key + "'");
    return it->second;
  }
  long long integer(const std::string& key) const { return config::to_int(key, str(key)); }
  double number(const std::string& key) const { return config::to_double(key, str(key)); }
  bool boolean(const std::string& key) const { return config::to_bool(key, str(key)); }
  fs::path path(const std::string& key) const { return fs::path(str(key)); }

  std::size_t positive(const std::string& key) const {
    const long long v = integer(key);
    if (v <= 0) throw config::ConfigError("'" + key + "' must be positive");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t seed() const {
    const long long v = integer("seed");
    if (v < 0) throw config::ConfigError("'seed' must be >= 0");
    return static_cast<std::uint64_t>(v);
  }

  /// Writes every resolved value and where it came from.
  void echo(std::ostream& out) const {
    for (const auto& k : schema_)
      if (has(k.name)) out << "[config] " << k.name << " = " << values_.at(k.name) << " (" << sources_.at(k.name) << ")\n";
  }

 private:
  void set(const std::string& key, std::string value, std::string source) {
    values_[key] = std::move(value);
    sources_[key] = std::move(source);
  }

  void check_type(const KeySpec& k) const {
    switch (k.type) {
      case KeyType::kInt: integer(k.name); break;
      case KeyType::kDouble: number(k.name); break;
      case KeyType::kBool: boolean(k.name); break;
      case KeyType::kString:
      case KeyType::kPath:
        if (str(k.name).empty()) throw config::ConfigError("'" + k.name + "' must not be empty");
        break;
    }
  }

  Schema schema_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> sources_;
};

// ---------------------------------------------------------------------------
// Shared pieces

/// Preprocessing settings stored in checkpoint sidecars under `prep.`.
struct PrepSettings {
  bool enabled = true;
  imgproc::PreprocessConfig cfg;
  std::size_t se_size = 3;

  static PrepSettings from_run(const RunConfig& rc, std::size_t width, std::size_t height) {
    PrepSettings p;
    p.cfg.target_width = width;
    p.cfg.target_height = height;
    p.cfg.sharpen_k = rc.number("sharpen_k");
    p.cfg.apply_v_offset = rc.boolean("apply_v_offset");
    if (rc.has("canny_low")) p.cfg.canny_low = rc.number("canny_low");
    if (rc.has("canny_high")) p.cfg.canny_high = rc.number("canny_high");
    p.se_size = rc.positive("se_size");
    if (p.se_size % 2 == 0) throw config::ConfigError("'se_size' must be odd");
    p.cfg.se = StructuringElement::box(p.se_size, p.se_size);
    p.cfg.reconstruction_n = static_cast<int>(rc.integer("reconstruction_n"));
    p.cfg.validate();
    return p;
  }

  config::Entries to_entries() const {
    return {{"prep.enabled", enabled ? "true" : "false"},
            {"prep.sharpen_k", config::format_double(cfg.sharpen_k)},
            {"prep.apply_v_offset", cfg.apply_v_offset ? "true" : "false"},
            {"prep.se_size", std::to_string(se_size)},
            {"prep.reconstruction_n", std::to_string(cfg.reconstruction_n)}};
  }

  /// Missing keys keep their defaults.
  static PrepSettings from_sidecar(const config::Entries& side, std::size_t width, std::size_t height) {
    std::map<std::string, std::string> kv(side.begin(), side.end());
    PrepSettings p;
    p.cfg.target_width = width;
    p.cfg.target_height = height;
    if (kv.count("prep.enabled")) p.enabled = config::to_bool("prep.enabled", kv["prep.enabled"]);
    if (kv.count("prep.sharpen_k")) p.cfg.sharpen_k = config::to_double("prep.sharpen_k", kv["prep.sharpen_k"]);
    if (kv.count("prep.apply_v_offset"))
      p.cfg.apply_v_offset = config::to_bool("prep.apply_v_offset", kv["prep.apply_v_offset"]);
    if (kv.count("prep.se_size")) p.se_size = static_cast<std::size_t>(config::to_int("prep.se_size", kv["prep.se_size"]));
    if (kv.count("prep.reconstruction_n"))
      p.cfg.reconstruction_n = static_cast<int>(config::to_int("prep.reconstruction_n", kv["prep.reconstruction_n"]));
    p.cfg.se = StructuringElement::box(p.se_size, p.se_size);
    return p;
  }

  /// The model input image for a raw grayscale image.
  GrayImage apply(const GrayImage& raw) const {
    if (enabled) return imgproc::preprocess(raw, cfg).image;
    if (raw.width() == cfg.target_width && raw.height() == cfg.target_height) return raw;
    return imgproc::resize_bilinear(raw, cfg.target_width, cfg.target_height);
  }
};

inline fs::path default_image_root(const RunConfig& rc) {
  if (rc.has("image_root")) return rc.path("image_root");
  return rc.path("manifest").parent_path();
}

/// Class probabilities for a list of images, in batches.
inline std::vector<std::array<double, 2>> infer(const model::Model& m, const std::vector<GrayImage>& imgs,
                                                std::size_t batch = 32) {
  std::vector<std::array<double, 2>> out;
  out.reserve(imgs.size());
  for (std::size_t b = 0; b < imgs.size(); b += batch) {
    std::vector<const GrayImage*> ptrs;
    for (std::size_t i = b; i < std::min(imgs.size(), b + batch); ++i) ptrs.push_back(&imgs[i]);
    const Tensor probs = m.forward(model::images_to_batch(ptrs), false);
    for (std::size_t i = 0; i < ptrs.size(); ++i) out.push_back({probs[2 * i], probs[2 * i + 1]});
  }
  return out;
}

struct SplitEval {
  double loss = 0.0;
  metrics::ConfusionMatrix cm;
  metrics::MetricReport report;
};

inline SplitEval evaluate_probs(const std::vector<std::array<double, 2>>& probs, const std::vector<Label>& truth) {
  SplitEval e;
  std::vector<Label> pred;
  std::vector<double> scores;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i][class_index(truth[i])];
    e.loss -= std::log(std::max(p, nn::kLogClamp));
    pred.push_back(model::decide(probs[i][0], probs[i][1]).label);
    scores.push_back(probs[i][0]);
  }
  e.loss /= static_cast<double>(probs.size());
  e.cm = metrics::confusion_matrix(pred, truth);
  e.report = metrics::scalar_metrics(e.cm);
  e.report.auc = metrics::roc_auc_or_undefined(scores, truth);
  return e;
}

inline std::string curves_row(std::size_t epoch, const char* split, const SplitEval& e) {
  char loss[40];
  std::snprintf(loss, sizeof loss, "%.9g", e.loss);
  const auto& r = e.report;
  std::string row = std::to_string(epoch) + "," + split + "," + loss;
  for (const metrics::Metric* m : {&r.accuracy, &r.precision, &r.recall, &r.specificity, &r.sensitivity, &r.f1, &r.auc})
    row += "," + metrics::format_metric(*m);
  return row;
}

inline void write_metrics_csv(const fs::path& path, const metrics::MetricReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics::kMetricCsvHeader << '\n' << metrics::to_csv_row(r) << '\n';
}

inline void print_evaluation(std::ostream& out, const metrics::ConfusionMatrix& cm, const metrics::MetricReport& r) {
  out << metrics::kMetricCsvHeader << '\n' << metrics::to_csv_row(r) << '\n';
  out << "tp,tn,fp,fn\n" << cm.tp << ',' << cm.tn << ',' << cm.fp << ',' << cm.fn << '\n';
}

inline bool all_finite(const model::Model& m) {
  for (const auto& p : m.parameters()) {
    for (double v : p.value.data())
      if (!std::isfinite(v)) return false;
    for (double v : p.value.grad())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_preprocess(const RunConfig& rc, std::ostream& log = std::cerr) {
  const fs::path in_dir = rc.path("input_dir");
  const fs::path out_dir = rc.path("output_dir");
  if (!fs::is_directory(in_dir)) {
    log << "error: input directory " << in_dir.string() << " does not exist\n";
    return kUsage;
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(in_dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    log << "error: input directory " << in_dir.string() << " contains no images\n";
    return kUsage;
  }
  const PrepSettings prep = PrepSettings::from_run(rc, rc.positive("target_width"), rc.positive("target_height"));
  fs::create_directories(out_dir / "edges");
  std::ofstream report(out_dir / "report.csv", std::ios::binary);
  if (!report) throw std::runtime_error("cannot write " + (out_dir / "report.csv").string());
  report << "file," << imgproc::kReportCsvHeader << '\n';
  std::size_t failed = 0;
  for (const auto& f : files) {
    try {
      const auto r = imgproc::preprocess(io::read_gray(f), prep.cfg);
      const std::string name = f.stem().string() + ".png";
      io::write_image(out_dir / name, r.image);
      io::write_image(out_dir / "edges" / name, r.edges);
      report << f.filename().string() << ',' << imgproc::to_csv_row(r.report) << '\n';
    } catch (const std::exception& e) {
      const std::string what = e.what();
      log << "error: " << (what.find(f.string()) == std::string::npos ? f.string() + ": " + what : what) << '\n';
      ++failed;
    }
  }
  log << "preprocessed " << files.size() - failed << " of " << files.size() << " images\n";
  return failed == 0 ? kOk : kPartial;
}

inline int cmd_train(const RunConfig& rc, std::ostream& log = std::cerr) {
  const std::uint64_t seed = rc.seed();
  const fs::path out_dir = rc.path("out_dir");
  const std::size_t epochs = rc.positive("epochs");
  const std::size_t batch_size = rc.positive("batch_size");
  const std::size_t image_size = rc.positive("image_size");
  const optim::Kind kind = optim::parse_kind(rc.str("optimizer"));
  optim::Hyperparams hp;
  if (rc.has("learning_rate")) hp.set_learning_rate(kind, rc.number("learning_rate"));
  const double divergence_loss = rc.number("divergence_loss");
  const PrepSettings prep = PrepSettings::from_run(rc, image_size, image_size);

  model::ModelConfig mcfg;
  mcfg.input_height = mcfg.input_width = image_size;
  mcfg.dropout_rate = rc.number("dropout_rate");
  mcfg.heads = rc.positive("heads");
  mcfg.validate();

  fs::create_directories(out_dir);
  data::Dataset ds;
  const long long synthetic = rc.integer("synthetic");
  if (synthetic > 0) {
    ds = data::synth_dataset(static_cast<std::size_t>(synthetic), image_size, seed);
    ds.root = out_dir / "images";
    fs::create_directories(ds.root);
    for (const auto& s : ds.samples) io::write_image(ds.root / s.id, *s.image);
  } else if (rc.has("manifest")) {
    ds = data::load_manifest(rc.path("manifest"), default_image_root(rc));
  } else {
    throw config::ConfigError("train needs either 'manifest' or 'synthetic'");
  }
  const auto bal = ds.balance();
  log << "dataset: " << ds.size() << " samples (" << bal.present << " Present, " << bal.not_present
      << " NotPresent)\n";

  const data::Split sp =
      data::split(ds, {rc.number("train_fraction"), rc.number("val_fraction"), rc.number("test_fraction")}, seed);
  data::write_manifest(out_dir / "train.csv", sp.train);
  data::write_manifest(out_dir / "val.csv", sp.val);
  data::write_manifest(out_dir / "test.csv", sp.test);

  auto load_split = [&](const data::Dataset& d) {
    std::vector<GrayImage> imgs;
    for (std::size_t i = 0; i < d.size(); ++i) imgs.push_back(prep.apply(d.load_image(i)));
    return imgs;
  };
  const std::vector<GrayImage> train_imgs = load_split(sp.train);
  const std::vector<GrayImage> val_imgs = load_split(sp.val);
  const std::vector<Label> train_truth = sp.train.labels();
  const std::vector<Label> val_truth = sp.val.labels();

  model::Model net = model::build_model(mcfg, seed);
  optim::Optimizer opt(kind, hp);
  const data::AugmentSpec aug = data::AugmentSpec::training_default(seed);
  const bool augment = rc.boolean("augment");
  std::seed_seq dropout_seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xd4u};
  nn::Rng dropout_rng(dropout_seq);

  std::ofstream curves(out_dir / "curves.csv", std::ios::binary);
  if (!curves) throw std::runtime_error("cannot write " + (out_dir / "curves.csv").string());
  curves << kCurvesHeader << '\n';

  config::Entries extra = prep.to_entries();
  extra.emplace_back("optimizer", optim::kind_name(kind));
  extra.emplace_back("seed", std::to_string(seed));

  const std::size_t n = train_imgs.size();
  std::vector<std::size_t> order(n);
  double best_acc = -1.0, best_loss = 0.0;
  std::size_t best_epoch = 0;
  std::optional<model::Model> best;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq shuffle_seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(epoch)};
    nn::Rng shuffle_rng(shuffle_seq);
    for (std::size_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(nn::uniform01(shuffle_rng) * static_cast<double>(i + 1));
      std::swap(order[i], order[std::min(j, i)]);
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += batch_size) {
      std::vector<GrayImage> imgs;
      std::vector<double> onehot;
      for (std::size_t k = b; k < std::min(n, b + batch_size); ++k) {
        const std::size_t idx = order[k];
        imgs.push_back(augment ? data::augment(train_imgs[idx], aug, (epoch - 1) * n + k) : train_imgs[idx]);
        onehot.push_back(train_truth[idx] == Label::kPresent ? 1.0 : 0.0);
        onehot.push_back(train_truth[idx] == Label::kPresent ? 0.0 : 1.0);
      }
      std::vector<const GrayImage*> ptrs;
      for (const auto& im : imgs) ptrs.push_back(&im);
      const Tensor probs = net.forward(model::images_to_batch(ptrs), true, &dropout_rng);
      const Tensor loss = nn::cross_entropy(probs, Tensor({imgs.size(), 2}, onehot));
      backward(loss);
      if (!std::isfinite(loss.item()) || !all_finite(net)) {
        log << "error: divergence at epoch " << epoch << ": non-finite loss, weight or gradient\n";
        return kDiverged;
      }
      opt.step(net.parameters());
      net.zero_grad();
      loss_sum += loss.item();
      ++batches;
    }
    const double mean_loss = loss_sum / static_cast<double>(batches);
    if (!(mean_loss <= divergence_loss) || !all_finite(net)) {
      log << "error: divergence at epoch " << epoch << ": mean training loss " << mean_loss << " exceeds "
          << divergence_loss << '\n';
      return kDiverged;
    }

    const SplitEval tr = evaluate_probs(infer(net, train_imgs), train_truth);
    const SplitEval va = evaluate_probs(infer(net, val_imgs), val_truth);
    curves << curves_row(epoch, "train", tr) << '\n' << curves_row(epoch, "val", va) << '\n';
    curves.flush();
    log << "epoch " << epoch << "/" << epochs << " train_loss " << tr.loss << " train_acc "
        << metrics::format_metric(tr.report.accuracy) << " val_loss " << va.loss << " val_acc "
        << metrics::format_metric(va.report.accuracy) << '\n';

    const double acc = va.report.accuracy.value_or(0.0);
    if (acc > best_acc || (acc == best_acc && va.loss < best_loss)) {
      best_acc = acc;
      best_loss = va.loss;
      best_epoch = epoch;
      best = net;
    }
  }

  config::Entries final_extra = extra;
  final_extra.emplace_back("epoch", std::to_string(epochs));
  model::save_model(out_dir / "final.ckpt", net, final_extra, opt.state());
  config::Entries best_extra = extra;
  best_extra.emplace_back("epoch", std::to_string(best_epoch));
  model::save_model(out_dir / "best.ckpt", *best, best_extra);

  const std::vector<GrayImage> test_imgs = load_split(sp.test);
  const SplitEval te = evaluate_probs(infer(*best, test_imgs), sp.test.labels());
  write_metrics_csv(out_dir / "test_metrics.csv", te.report);
  std::cout << "test (best epoch " << best_epoch << ")\n";
  print_evaluation(std::cout, te.cm, te.report);
  return kOk;
}

/// Reads an injected prediction file: header `id,label` or `id,label,score`,
/// labels Yes/No, score = probability of Present.
struct InjectedPrediction {
  Label label;
  std::optional<double> score;
};

inline std::map<std::string, InjectedPrediction> read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data::DataError("cannot open predictions " + path.string());
  std::string line;
  std::getline(in, line);
  const std::string header = config::trim(line);
  if (header != "id,label" && header != "id,label,score")
    throw data::DataError(path.string() + ": expected header `id,label` or `id,label,score`");
  const bool with_score = header == "id,label,score";
  std::map<std::string, InjectedPrediction> out;
  while (std::getline(in, line)) {
    if (config::trim(line).empty()) continue;
    std::vector<std::string> cols;
    std::stringstream s(line);
    for (std::string c; std::getline(s, c, ',');) cols.push_back(config::trim(c));
    if (cols.size() != (with_score ? 3u : 2u)) throw data::DataError(path.string() + ": bad row '" + line + "'");
    InjectedPrediction p{parse_manifest_label(cols[1]), std::nullopt};
    if (with_score) p.score = config::to_double("score", cols[2]);
    if (!out.emplace(cols[0], p).second) throw data::DataError(path.string() + ": duplicate id '" + cols[0] + "'");
  }
  return out;
}

inline int cmd_evaluate(const RunConfig& rc, std::ostream& log = std::cerr) {
  const fs::path out_dir = rc.path("out_dir");
  std::vector<Label> truth, pred;
  std::vector<double> scores;
  bool have_scores = true;
  std::size_t failed = 0;

  if (rc.has("predictions")) {
    const data::Dataset ds = data::load_manifest(rc.path("manifest"), default_image_root(rc), false);
    const auto injected = read_predictions(rc.path("predictions"));
    for (const auto& s : ds.samples) {
      auto it = injected.find(s.id);
      if (it == injected.end()) throw data::DataError("no prediction for id '" + s.id + "'");
      truth.push_back(s.label);
      pred.push_back(it->second.label);
      if (it->second.score)
        scores.push_back(*it->second.score);
      else
        have_scores = false;
    }
  } else {
    const fs::path ckpt = rc.path("checkpoint");
    if (!fs::exists(ckpt)) {
      log << "error: checkpoint " << ckpt.string() << " not found\n";
      return kUsage;
    }
    const model::LoadedModel lm = model::load_model(ckpt);
    const auto& mc = lm.model.config();
    const PrepSettings prep = PrepSettings::from_sidecar(lm.sidecar, mc.input_width, mc.input_height);
    const data::Dataset ds = data::load_manifest(rc.path("manifest"), default_image_root(rc));
    std::vector<GrayImage> imgs;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      try {
        imgs.push_back(prep.apply(ds.load_image(i)));
        truth.push_back(ds.samples[i].label);
      } catch (const std::exception& e) {
        log << "error: " << ds.samples[i].id << ": " << e.what() << '\n';
        ++failed;
      }
    }
    if (imgs.empty()) {
      log << "error: no readable images\n";
      return kUsage;
    }
    for (const auto& p : infer(lm.model, imgs)) {
      pred.push_back(model::decide(p[0], p[1]).label);
      scores.push_back(p[0]);
    }
  }

  const metrics::ConfusionMatrix cm = metrics::confusion_matrix(pred, truth);
  metrics::MetricReport r = metrics::scalar_metrics(cm);
  if (have_scores) r.auc = metrics::roc_auc_or_undefined(scores, truth);
  fs::create_directories(out_dir);
  write_metrics_csv(out_dir / "metrics.csv", r);
  print_evaluation(std::cout, cm, r);
  return failed == 0 ? kOk : kPartial;
}

/// `label,confidence` with six decimals; confidence is capped below 1 so the
/// line always reads 0.dddddd.
inline std::string format_prediction(const model::Prediction& p) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s,%.6f", label_name(p.label).c_str(), std::min(p.confidence, 0.999999));
  return buf;
}

inline int cmd_predict(const RunConfig& rc, std::ostream& log = std::cerr) {
  const fs::path ckpt = rc.path("checkpoint");
  const fs::path image = rc.path("image");
  if (!fs::exists(ckpt)) {
    log << "error: checkpoint " << ckpt.string() << " not found\n";
    return kUsage;
  }
  std::optional<GrayImage> raw;
  try {
    raw = io::read_gray(image);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kUsage;
  }
  const model::LoadedModel lm = model::load_model(ckpt);
  const auto& mc = lm.model.config();
  const PrepSettings prep = PrepSettings::from_sidecar(lm.sidecar, mc.input_width, mc.input_height);
  std::cout << format_prediction(model::predict(lm.model, prep.apply(*raw))) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Argument parsing

inline std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

/// Parses argv, resolves the run configuration and dispatches. Every error
/// is mapped onto the exit-code contract.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cerr) {
  CLI::App app{"cardiomegaly screening: preprocessing, training and evaluation"};
  app.require_subcommand(1);
  struct Sub {
    CLI::App* app;
    Schema schema;
    std::map<std::string, std::string> flags;
    std::string config_file;
  };
  std::map<std::string, Sub> subs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"preprocess", "enhance a directory of radiographs"},
      {"train", "train the classifier and write learning curves"},
      {"evaluate", "score a checkpoint or a prediction file against a manifest"},
      {"predict", "classify one image"}};
  for (const auto& [name, help] : commands) subs[name] = Sub{nullptr, schema_for(name), {}, {}};
  for (const auto& [name, help] : commands) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.app->add_option("--config", s.config_file, "key = value config file");
    for (const auto& k : s.schema) {
      std::string names = "--" + dashed(k.name);
      if (name == "predict" && k.name == "image") names = "image," + names;
      s.app->add_option(names, s.flags[k.name], k.help);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, std::cout, log);
    return code == 0 ? kOk : kUsage;
  }

  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    try {
      std::map<std::string, std::string> given;
      for (const auto& k : s.schema)
        if (s.app->count("--" + dashed(k.name)) > 0) given[k.name] = s.flags[k.name];
      config::Entries file;
      if (!s.config_file.empty()) file = config::parse_kv_file(s.config_file);
      const RunConfig rc = RunConfig::resolve(s.schema, file, given, std::getenv(kSeedEnv));
      rc.echo(log);
      if (name == "preprocess") return cmd_preprocess(rc, log);
      if (name == "train") return cmd_train(rc, log);
      if (name == "evaluate") return cmd_evaluate(rc, log);
      return cmd_predict(rc, log);
    } catch (const std::exception& e) {
      log << "error: " << e.what() << '\n';
      return kUsage;
    }
  }
  return kUsage;
}

}  // namespace cardiolens::cli
