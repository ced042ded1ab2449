#pragma once

// Datasets: `id,label` manifests, stratified splits, deterministic
// augmentation and a synthetic stand-in for chest radiographs.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardiolens/config.hpp"
#include "cardiolens/image.hpp"
#include "cardiolens/image_io.hpp"
#include "cardiolens/label.hpp"
#include "cardiolens/nn.hpp"

namespace cardiolens::data {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::string id;  // image file name relative to the dataset root
  Label label = Label::kNotPresent;
  std::optional<GrayImage> image;  // in-memory images (synthetic data); otherwise loaded on demand
};

struct ClassBalance {
  std::size_t present = 0;
  std::size_t not_present = 0;
  friend bool operator==(const ClassBalance&, const ClassBalance&) = default;
};

struct Dataset {
  std::filesystem::path root;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  ClassBalance balance() const {
    ClassBalance b;
    for (const auto& s : samples) (s.label == Label::kPresent ? b.present : b.not_present)++;
    return b;
  }

  GrayImage load_image(std::size_t i) const {
    const Sample& s = samples.at(i);
    if (s.image) return *s.image;
    return io::read_gray(root / s.id);
  }

  std::vector<Label> labels() const {
    std::vector<Label> out;
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }
};

/// Reads a UTF-8 `id,label` CSV (labels Yes/No). Ids must be unique and,
/// unless `check_files` is false, exist as files under `image_root`.
inline Dataset load_manifest(const std::filesystem::path& csv_path, const std::filesystem::path& image_root,
                             bool check_files = true) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open manifest " + csv_path.string());
  std::string line;
  if (!std::getline(in, line) || config::trim(line) != "id,label")
    throw DataError(csv_path.string() + ": expected header `id,label`");
  Dataset ds{image_root, {}};
  std::set<std::string> ids;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (config::trim(line).empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(csv_path.string() + ":" + std::to_string(lineno) + ": missing comma");
    const std::string id = config::trim(std::string_view(line).substr(0, comma));
    const std::string lab = config::trim(std::string_view(line).substr(comma + 1));
    if (id.empty()) throw DataError(csv_path.string() + ":" + std::to_string(lineno) + ": empty id");
    Label label;
    try {
      label = parse_manifest_label(lab);
    } catch (const std::invalid_argument& e) {
      throw DataError(csv_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!ids.insert(id).second) throw DataError(csv_path.string() + ": duplicate id '" + id + "'");
    if (check_files && !std::filesystem::exists(image_root / id)) throw DataError("missing image file " + (image_root / id).string());
    ds.samples.push_back({id, label, std::nullopt});
  }
  if (ds.samples.empty()) throw DataError(csv_path.string() + ": manifest has no rows");
  return ds;
}

inline void write_manifest(const std::filesystem::path& csv_path, const Dataset& ds) {
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + csv_path.string());
  out << "id,label\n";
  for (const auto& s : ds.samples) out << s.id << ',' << manifest_label(s.label) << '\n';
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Stratified three-way split. Per class, sizes are round(f_train * n) and
/// round(f_val * n) with the remainder going to test; membership is drawn
/// with a seeded shuffle and each split keeps the original sample order.
inline Split split(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (!(f > 0.0)) throw std::invalid_argument("split: fractions must be positive");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
    throw std::invalid_argument("split: fractions must sum to 1");
  std::vector<int> assignment(ds.size(), -1);
  nn::Rng rng(seed);
  for (Label cls : {Label::kPresent, Label::kNotPresent}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.samples[i].label == cls) idx.push_back(i);
    if (idx.empty()) continue;
    if (idx.size() < 3)
      throw std::invalid_argument("split: class " + label_name(cls) + " has fewer samples than splits");
    // Fisher-Yates with our own uniform draw keeps the permutation identical across standard libraries.
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(nn::uniform01(rng) * static_cast<double>(i + 1));
      std::swap(idx[i], idx[std::min(j, i)]);
    }
    const auto n = static_cast<double>(idx.size());
    auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * n));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 2);
    n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - n_train - 1);
    for (std::size_t k = 0; k < idx.size(); ++k) assignment[idx[k]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
  }
  Split out{{ds.root, {}}, {ds.root, {}}, {ds.root, {}}};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Dataset* dst = assignment[i] == 0 ? &out.train : (assignment[i] == 1 ? &out.val : &out.test);
    dst->samples.push_back(ds.samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentSpec {
  double rotation_min_deg = 0.0;
  double rotation_max_deg = 0.0;
  bool horizontal_flip = false;  // flip with probability 1/2 when enabled
  double scale_min = 1.0;
  double scale_max = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (rotation_min_deg > rotation_max_deg) throw std::invalid_argument("AugmentSpec: rotation range reversed");
    if (!(scale_min > 0.0) || scale_min > scale_max) throw std::invalid_argument("AugmentSpec: bad scale range");
    if (noise_sigma < 0.0) throw std::invalid_argument("AugmentSpec: noise_sigma must be >= 0");
  }

  /// Mild training-time defaults for radiographs.
  static AugmentSpec training_default(std::uint64_t seed) { return {-5.0, 5.0, true, 0.95, 1.05, 2.0, seed}; }
};

inline GrayImage flip_horizontal(const GrayImage& img) {
  GrayImage out(img.width(), img.height(), 0.0, img.levels());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) out.set(x, y, img.at(img.width() - 1 - x, y));
  return out;
}

namespace detail {

inline double sample_bilinear(const GrayImage& img, double sx, double sy) {
  sx = std::clamp(sx, 0.0, static_cast<double>(img.width() - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(img.height() - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(sx));
  const auto y0 = static_cast<std::size_t>(std::floor(sy));
  const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
  const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = sx - static_cast<double>(x0);
  const double fy = sy - static_cast<double>(y0);
  const double top = img.at(x0, y0) * (1 - fx) + img.at(x1, y0) * fx;
  const double bottom = img.at(x0, y1) * (1 - fx) + img.at(x1, y1) * fx;
  return top * (1 - fy) + bottom * fy;
}

/// Inverse-maps every output pixel through rotation by `deg` and zoom `scale`
/// about the image center.
inline GrayImage warp(const GrayImage& img, double deg, double scale) {
  GrayImage out(img.width(), img.height(), 0.0, img.levels());
  const double cx = (static_cast<double>(img.width()) - 1.0) / 2.0;
  const double cy = (static_cast<double>(img.height()) - 1.0) / 2.0;
  const double rad = deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad) / scale;
  const double s = std::sin(rad) / scale;
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      out.set(x, y, sample_bilinear(img, c * dx + s * dy + cx, -s * dx + c * dy + cy));
    }
  return out;
}

}  // namespace detail

/// Deterministic in (spec.seed, draw_index): draws rotation, flip, scale and
/// noise parameters, then applies them in that order.
inline GrayImage augment(const GrayImage& img, const AugmentSpec& spec, std::uint64_t draw_index) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(draw_index), static_cast<std::uint32_t>(draw_index >> 32)};
  nn::Rng rng(seq);
  const double angle = spec.rotation_min_deg + (spec.rotation_max_deg - spec.rotation_min_deg) * nn::uniform01(rng);
  const bool flip = spec.horizontal_flip && nn::uniform01(rng) < 0.5;
  const double scale = spec.scale_min + (spec.scale_max - spec.scale_min) * nn::uniform01(rng);

  GrayImage out = angle != 0.0 ? detail::warp(img, angle, 1.0) : img;
  if (flip) out = flip_horizontal(out);
  if (scale != 1.0) out = detail::warp(out, 0.0, scale);
  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (std::size_t y = 0; y < out.height(); ++y)
      for (std::size_t x = 0; x < out.width(); ++x) out.set(x, y, out.at(x, y) + noise(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic radiographs

inline constexpr double kSynthBrightThreshold = 140.0;

/// `n` square images, alternating Present / NotPresent. Each has a dark
/// textured background (mean 40..80, Gaussian sigma 10) and a bright
/// (180..220) ellipse near the center standing in for the cardiac
/// silhouette: Present ellipses span 55-70% of the width, NotPresent 25-40%.
inline Dataset synth_dataset(std::size_t n, std::size_t image_size, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw std::invalid_argument("synth_dataset: n must be even and >= 2");
  if (image_size < 8) throw std::invalid_argument("synth_dataset: image_size must be >= 8");
  nn::Rng rng(seed);
  std::normal_distribution<double> texture(0.0, 10.0);
  Dataset ds{"", {}};
  const auto size = static_cast<double>(image_size);
  for (std::size_t i = 0; i < n; ++i) {
    const Label label = i % 2 == 0 ? Label::kPresent : Label::kNotPresent;
    const double width_frac =
        label == Label::kPresent ? 0.55 + 0.15 * nn::uniform01(rng) : 0.25 + 0.15 * nn::uniform01(rng);
    const double a = width_frac * size / 2.0;            // horizontal semi-axis
    const double b = a * (0.8 + 0.2 * nn::uniform01(rng));  // vertical semi-axis
    const double cx = size / 2.0 + (nn::uniform01(rng) - 0.5) * 0.1 * size;
    const double cy = size / 2.0 + (nn::uniform01(rng) - 0.5) * 0.1 * size;
    const double bg = 40.0 + 40.0 * nn::uniform01(rng);
    const double fg = 180.0 + 40.0 * nn::uniform01(rng);
    GrayImage img(image_size, image_size);
    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / a;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / b;
        const double base = dx * dx + dy * dy <= 1.0 ? fg : bg;
        img.set(x, y, std::round(base + texture(rng)));
      }
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05zu.png", i);
    ds.samples.push_back({name, label, std::move(img)});
  }
  return ds;
}

}  // namespace cardiolens::data
