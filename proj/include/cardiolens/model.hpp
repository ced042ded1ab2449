#pragma once

// Inception-style classifier with a residual multi-head attention block:
//
//   stem conv 3x3/2 -> ReLU -> maxpool 2/2
//   -> inception blocks (maxpool 2/2 between blocks)
//   -> attention over the final feature map (residual)
//   -> global average pool -> dropout -> dense(2) -> softmax
//
// Each inception block runs four parallel branches and concatenates them on
// the channel axis: 1x1; 1x1 reduce -> 3x3; 1x1 reduce -> 5x5 (or two stacked
// 3x3 when factorized); 3x3 average pool -> 1x1 projection. Every convolution
// is followed by ReLU.
//
// Parameter names are hierarchical (`backbone.block2.b3x3.w`, `attn.head0.wq`,
// `head.dense.b`) so layer groups can be frozen by prefix.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cardiolens/attention.hpp"
#include "cardiolens/checkpoint.hpp"
#include "cardiolens/config.hpp"
#include "cardiolens/image.hpp"
#include "cardiolens/label.hpp"
#include "cardiolens/nn.hpp"
#include "cardiolens/optim.hpp"
#include "cardiolens/tensor.hpp"

namespace cardiolens::model {

struct BlockSpec {
  std::size_t c1x1 = 8;
  std::size_t c3x3_reduce = 8;
  std::size_t c3x3 = 16;
  std::size_t c5x5_reduce = 4;
  std::size_t c5x5 = 8;
  std::size_t pool_proj = 8;
  bool factorize_5x5 = true;

  std::size_t out_channels() const { return c1x1 + c3x3 + c5x5 + pool_proj; }

  void validate() const {
    if (c1x1 == 0 || c3x3_reduce == 0 || c3x3 == 0 || c5x5_reduce == 0 || c5x5 == 0 || pool_proj == 0)
      throw std::invalid_argument("BlockSpec: all branch channel counts must be >= 1");
  }

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct ModelConfig {
  std::size_t input_height = 128;
  std::size_t input_width = 128;
  std::size_t stem_channels = 16;
  std::vector<BlockSpec> blocks = {
      BlockSpec{8, 8, 16, 4, 8, 8, true},     // 40 channels
      BlockSpec{16, 16, 24, 8, 12, 12, true},  // 64
      BlockSpec{16, 16, 24, 8, 12, 12, true},  // 64
  };
  std::size_t heads = 4;
  double dropout_rate = 0.4;
  std::size_t num_classes = 2;

  /// 8x8 input, one block; small enough for finite-difference checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.input_height = 8;
    c.input_width = 8;
    c.stem_channels = 4;
    c.blocks = {BlockSpec{2, 2, 2, 2, 2, 2, true}};
    c.heads = 2;
    c.dropout_rate = 0.0;
    return c;
  }

  std::size_t final_channels() const { return blocks.empty() ? stem_channels : blocks.back().out_channels(); }

  /// Spatial size after the stem conv (stride 2, pad 1), stem pool and the
  /// pools between blocks.
  std::pair<std::size_t, std::size_t> final_spatial() const {
    auto conv_s2 = [](std::size_t n) { return (n + 2 - 3) / 2 + 1; };
    auto pool2 = [](std::size_t n) { return n / 2; };
    std::size_t h = pool2(conv_s2(input_height));
    std::size_t w = pool2(conv_s2(input_width));
    for (std::size_t i = 0; i + 1 < blocks.size(); ++i) {
      h = pool2(h);
      w = pool2(w);
    }
    return {h, w};
  }

  void validate() const {
    if (num_classes != 2) throw std::invalid_argument("ModelConfig: num_classes must be 2");
    if (stem_channels == 0) throw std::invalid_argument("ModelConfig: stem_channels must be >= 1");
    if (blocks.empty()) throw std::invalid_argument("ModelConfig: at least one inception block required");
    for (const auto& b : blocks) b.validate();
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("ModelConfig: dropout_rate must be in [0,1)");
    attention::AttentionWeights::check_divisible(final_channels(), heads);
    const auto [h, w] = final_spatial();
    if (h == 0 || w == 0) throw std::invalid_argument("ModelConfig: input too small for the block count");
  }

  config::Entries to_entries() const {
    config::Entries e{{"input_height", std::to_string(input_height)},
                      {"input_width", std::to_string(input_width)},
                      {"stem_channels", std::to_string(stem_channels)},
                      {"heads", std::to_string(heads)},
                      {"dropout_rate", config::format_double(dropout_rate)},
                      {"num_classes", std::to_string(num_classes)},
                      {"blocks", std::to_string(blocks.size())}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      std::ostringstream s;
      s << b.c1x1 << ',' << b.c3x3_reduce << ',' << b.c3x3 << ',' << b.c5x5_reduce << ',' << b.c5x5 << ','
        << b.pool_proj << ',' << (b.factorize_5x5 ? 1 : 0);
      e.emplace_back("block" + std::to_string(i + 1), s.str());
    }
    return e;
  }

  static ModelConfig from_entries(const config::Entries& entries) {
    ModelConfig c;
    std::map<std::string, std::string> kv(entries.begin(), entries.end());
    auto get = [&](const std::string& k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end()) throw config::ConfigError("model config: missing key '" + k + "'");
      return it->second;
    };
    auto as_size = [&](const std::string& k) { return static_cast<std::size_t>(config::to_int(k, get(k))); };
    c.input_height = as_size("input_height");
    c.input_width = as_size("input_width");
    c.stem_channels = as_size("stem_channels");
    c.heads = as_size("heads");
    c.dropout_rate = config::to_double("dropout_rate", get("dropout_rate"));
    c.num_classes = as_size("num_classes");
    const std::size_t nblocks = as_size("blocks");
    c.blocks.clear();
    for (std::size_t i = 0; i < nblocks; ++i) {
      const std::string key = "block" + std::to_string(i + 1);
      std::stringstream s(get(key));
      std::vector<long long> v;
      for (std::string tok; std::getline(s, tok, ',');) v.push_back(config::to_int(key, config::trim(tok)));
      if (v.size() != 7) throw config::ConfigError("model config: '" + key + "' needs 7 comma-separated values");
      c.blocks.push_back(BlockSpec{static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]),
                                   static_cast<std::size_t>(v[2]), static_cast<std::size_t>(v[3]),
                                   static_cast<std::size_t>(v[4]), static_cast<std::size_t>(v[5]), v[6] != 0});
    }
    c.validate();
    return c;
  }
};

struct Prediction {
  Label label;
  double confidence;
};

/// Class decision from a (Present, NotPresent) probability pair; exact ties
/// resolve to NotPresent.
inline Prediction decide(double p_present, double p_not_present) {
  if (p_present > p_not_present) return {Label::kPresent, p_present};
  return {Label::kNotPresent, p_not_present};
}

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  // Deep copies, so a snapshot never aliases the live parameters.
  Model(const Model& other) : cfg_(other.cfg_) { copy_params_from(other); }
  Model& operator=(const Model& other) {
    if (this != &other) {
      cfg_ = other.cfg_;
      copy_params_from(other);
    }
    return *this;
  }
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  const Tensor& param(const std::string& name) const { return params_.at(index_.at(name)).value; }

  void add_parameter(std::string name, Tensor t) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(t), true});
  }

  /// Sets the trainable flag of every parameter whose name starts with
  /// `prefix`; returns how many matched.
  std::size_t set_trainable(const std::string& prefix, bool flag) {
    std::size_t matched = 0;
    for (auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) {
        p.trainable = flag;
        ++matched;
      }
    if (matched == 0) throw std::invalid_argument("set_trainable: prefix '" + prefix + "' matches no layer");
    return matched;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// Class probabilities [N, 2] for a batch [N, 1, H, W]. Training mode
  /// applies dropout with `rng`, which is then required.
  Tensor forward(const Tensor& batch, bool training, nn::Rng* rng = nullptr) const {
    if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != cfg_.input_height || batch.dim(3) != cfg_.input_width)
      throw ShapeError("Model::forward: expected [N,1," + std::to_string(cfg_.input_height) + "," +
                       std::to_string(cfg_.input_width) + "], got " + shape_str(batch.shape()));
    const bool use_dropout = training && cfg_.dropout_rate > 0.0;
    if (use_dropout && rng == nullptr) throw std::invalid_argument("Model::forward: training dropout needs an rng");

    Tensor x = conv_relu(batch, "backbone.stem.conv", 2, 1);
    x = nn::pool2d(x, 2, 2, nn::PoolMode::kMax);
    for (std::size_t i = 0; i < cfg_.blocks.size(); ++i) {
      if (i > 0) x = nn::pool2d(x, 2, 2, nn::PoolMode::kMax);
      x = inception(x, i);
    }
    x = attention::attend_feature_map(x, attention_weights());
    x = nn::global_average_pool(x);
    if (use_dropout) x = nn::dropout(x, cfg_.dropout_rate, true, *rng);
    x = nn::dense(x, {param("head.dense.w"), param("head.dense.b")});
    return nn::softmax(x, -1);
  }

  attention::AttentionWeights attention_weights() const {
    attention::AttentionWeights w;
    w.model_dim = cfg_.final_channels();
    w.heads = cfg_.heads;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const std::string p = "attn.head" + std::to_string(h);
      w.wq.push_back(param(p + ".wq"));
      w.wk.push_back(param(p + ".wk"));
      w.wv.push_back(param(p + ".wv"));
    }
    w.wo = param("attn.wo");
    return w;
  }

  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) out.push_back({p.name, p.value});
    return out;
  }

  /// Copies values from checkpoint entries (entries with other names, such as
  /// optimizer slots, are ignored). Every parameter must be present.
  void load_tensors(const std::vector<NamedTensor>& entries) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.tensor;
    for (auto& p : params_) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw CheckpointError("checkpoint is missing parameter " + p.name);
      if (it->second->shape() != p.value.shape())
        throw CheckpointError("checkpoint shape mismatch for " + p.name + ": " + shape_str(it->second->shape()) +
                              " vs " + shape_str(p.value.shape()));
      std::copy(it->second->data().begin(), it->second->data().end(), p.value.mutable_data().begin());
    }
  }

 private:
  Tensor conv_relu(const Tensor& x, const std::string& name, std::size_t stride, std::size_t pad) const {
    return nn::relu(nn::conv2d(x, param(name + ".w"), param(name + ".b"), stride, pad));
  }

  Tensor inception(const Tensor& x, std::size_t i) const {
    const auto& spec = cfg_.blocks[i];
    const std::string p = "backbone.block" + std::to_string(i + 1);
    Tensor b1 = conv_relu(x, p + ".b1x1", 1, 0);
    Tensor b3 = conv_relu(conv_relu(x, p + ".b3x3_reduce", 1, 0), p + ".b3x3", 1, 1);
    Tensor b5 = conv_relu(x, p + ".b5x5_reduce", 1, 0);
    if (spec.factorize_5x5) {
      b5 = conv_relu(conv_relu(b5, p + ".b5x5a", 1, 1), p + ".b5x5b", 1, 1);
    } else {
      b5 = conv_relu(b5, p + ".b5x5", 1, 2);
    }
    Tensor bp = conv_relu(nn::pool2d(x, 3, 1, nn::PoolMode::kAvg, 1), p + ".pool_proj", 1, 0);
    return nn::concat_channels({b1, b3, b5, bp});
  }

  void copy_params_from(const Model& other) {
    params_.clear();
    index_ = other.index_;
    for (const auto& p : other.params_) {
      Tensor t = p.value.detach();
      t.set_requires_grad(p.value.requires_grad());
      params_.push_back({p.name, t, p.trainable});
    }
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Deterministic construction: He-uniform convolution and dense weights,
/// Glorot-uniform attention projections, zero biases.
inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m(cfg);
  nn::Rng rng(seed);
  auto he = [&](Shape shape, std::size_t fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> v(numel(shape));
    for (double& x : v) x = (2.0 * nn::uniform01(rng) - 1.0) * limit;
    return Tensor(std::move(shape), std::move(v), true);
  };
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    m.add_parameter(name + ".w", he({out, in, k, k}, in * k * k));
    m.add_parameter(name + ".b", Tensor::zeros({out}, true));
  };

  conv("backbone.stem.conv", cfg.stem_channels, 1, 3);
  std::size_t in = cfg.stem_channels;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const auto& b = cfg.blocks[i];
    const std::string p = "backbone.block" + std::to_string(i + 1);
    conv(p + ".b1x1", b.c1x1, in, 1);
    conv(p + ".b3x3_reduce", b.c3x3_reduce, in, 1);
    conv(p + ".b3x3", b.c3x3, b.c3x3_reduce, 3);
    conv(p + ".b5x5_reduce", b.c5x5_reduce, in, 1);
    if (b.factorize_5x5) {
      conv(p + ".b5x5a", b.c5x5, b.c5x5_reduce, 3);
      conv(p + ".b5x5b", b.c5x5, b.c5x5, 3);
    } else {
      conv(p + ".b5x5", b.c5x5, b.c5x5_reduce, 5);
    }
    conv(p + ".pool_proj", b.pool_proj, in, 1);
    in = b.out_channels();
  }
  for (auto& e : attention::AttentionWeights::init(in, cfg.heads, rng).named("attn")) m.add_parameter(e.name, e.tensor);
  m.add_parameter("head.dense.w", he({cfg.num_classes, in}, in));
  m.add_parameter("head.dense.b", Tensor::zeros({cfg.num_classes}, true));
  return m;
}

/// Model input [1, 1, H, W] from a grayscale image scaled to [0, 1].
inline Tensor image_to_input(const GrayImage& img) {
  std::vector<double> v(img.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.values()[i] / img.max_level();
  return Tensor({1, 1, img.height(), img.width()}, std::move(v));
}

/// Batch [N, 1, H, W] from equally sized images.
inline Tensor images_to_batch(const std::vector<const GrayImage*>& imgs) {
  if (imgs.empty()) throw ShapeError("images_to_batch: empty batch");
  const std::size_t h = imgs[0]->height(), w = imgs[0]->width();
  std::vector<double> v;
  v.reserve(imgs.size() * h * w);
  for (const GrayImage* img : imgs) {
    if (img->height() != h || img->width() != w) throw ShapeError("images_to_batch: image size mismatch");
    for (double x : img->values()) v.push_back(x / img->max_level());
  }
  return Tensor({imgs.size(), 1, h, w}, std::move(v));
}

/// Classifies one image that is already at the model's input size.
inline Prediction predict(const Model& m, const GrayImage& img) {
  if (img.height() != m.config().input_height || img.width() != m.config().input_width)
    throw ShapeError("predict: image is " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                     ", model expects " + std::to_string(m.config().input_width) + "x" +
                     std::to_string(m.config().input_height));
  const Tensor probs = m.forward(image_to_input(img), false);
  return decide(probs[0], probs[1]);
}

// ---------------------------------------------------------------------------
// Checkpoint files: binary tensors plus a `<path>.cfg` key = value sidecar.

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  return std::filesystem::path(ckpt.string() + ".cfg");
}

inline void save_model(const std::filesystem::path& path, const Model& m, const config::Entries& extra = {},
                       const std::vector<NamedTensor>& optimizer_state = {}) {
  std::vector<NamedTensor> all = m.named_tensors();
  all.insert(all.end(), optimizer_state.begin(), optimizer_state.end());
  save_checkpoint(path, all);
  std::ofstream cfg(sidecar_path(path));
  if (!cfg) throw CheckpointError("cannot write " + sidecar_path(path).string());
  config::write_kv(cfg, m.config().to_entries());
  config::write_kv(cfg, extra);
}

struct LoadedModel {
  Model model;
  config::Entries sidecar;  // every sidecar entry, including non-model keys
  std::vector<NamedTensor> raw;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  config::Entries side = config::parse_kv_file(sidecar_path(path));
  Model built = build_model(ModelConfig::from_entries(side), 0);
  auto raw = load_checkpoint(path);
  built.load_tensors(raw);
  return {std::move(built), std::move(side), std::move(raw)};
}

}  // namespace cardiolens::model
