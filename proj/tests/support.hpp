#pragma once

// Generators and independent oracles shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cardiolens/image.hpp"
#include "cardiolens/label.hpp"
#include "cardiolens/nn.hpp"
#include "cardiolens/tensor.hpp"

namespace testsupport {

using cardiolens::GrayImage;
using cardiolens::Label;
using cardiolens::Shape;
using cardiolens::StructuringElement;
using cardiolens::Tensor;
using Rng = std::mt19937_64;

/// Owning copies, safe to iterate over results of temporaries.
inline std::vector<double> pixels(const GrayImage& img) { return img.values(); }
inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Binary image with values {0, L-1}; each pixel set with probability `density`.
inline GrayImage random_binary(Rng& rng, std::size_t w, std::size_t h, double density) {
  GrayImage img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img.set(x, y, uniform(rng, 0, 1) < density ? img.max_level() : 0.0);
  return img;
}

inline GrayImage random_gray(Rng& rng, std::size_t w, std::size_t h) {
  GrayImage img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img.set(x, y, std::floor(uniform(rng, 0, 256)));
  return img;
}

/// Random mask inside a 3x3 (or given) grid with a random set anchor.
inline StructuringElement random_se(Rng& rng, std::size_t rows = 3, std::size_t cols = 3) {
  std::vector<bool> mask(rows * cols);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = uniform(rng, 0, 1) < 0.5;
  const std::size_t ar = pick(rng, 0, rows - 1), ac = pick(rng, 0, cols - 1);
  mask[ar * cols + ac] = true;
  return StructuringElement(rows, cols, mask, ar, ac);
}

inline GrayImage pixel_max(const GrayImage& a, const GrayImage& b) {
  GrayImage out = a;
  for (std::size_t y = 0; y < a.height(); ++y)
    for (std::size_t x = 0; x < a.width(); ++x) out.set(x, y, std::max(a.at(x, y), b.at(x, y)));
  return out;
}

inline bool leq(const GrayImage& a, const GrayImage& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.values()[i] > b.values()[i]) return false;
  return true;
}

/// Binary reconstruction oracle: the union of the 8-connected components of
/// `mask` that contain at least one set pixel of `marker`.
inline GrayImage flood_fill_reconstruction(const GrayImage& marker, const GrayImage& mask) {
  const std::size_t w = mask.width(), h = mask.height();
  GrayImage out(w, h);
  std::vector<bool> seen(w * h, false);
  std::deque<std::pair<std::size_t, std::size_t>> queue;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (marker.at(x, y) > 0 && mask.at(x, y) > 0 && !seen[y * w + x]) {
        seen[y * w + x] = true;
        queue.emplace_back(x, y);
      }
  while (!queue.empty()) {
    const auto [x, y] = queue.front();
    queue.pop_front();
    out.set(x, y, mask.at(x, y));
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const long nx = static_cast<long>(x) + dx, ny = static_cast<long>(y) + dy;
        if (nx < 0 || ny < 0 || nx >= static_cast<long>(w) || ny >= static_cast<long>(h)) continue;
        const std::size_t i = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (!seen[i] && mask.values()[i] > 0) {
          seen[i] = true;
          queue.emplace_back(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny));
        }
      }
  }
  return out;
}

inline Tensor random_tensor(Rng& rng, const Shape& shape, double lo, double hi, bool requires_grad = true) {
  std::vector<double> v(cardiolens::numel(shape));
  for (double& x : v) x = uniform(rng, lo, hi);
  return Tensor(shape, std::move(v), requires_grad);
}

inline Tensor onehot_batch(Rng& rng, std::size_t n) {
  std::vector<double> v(2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[2 * i + pick(rng, 0, 1)] = 1.0;
  return Tensor({n, 2}, v);
}

/// Central finite differences against reverse-mode gradients for every
/// element of every input. Returns the worst |a - b| / max(1, |a|, |b|).
inline double gradient_check(std::vector<Tensor> inputs, const std::function<Tensor()>& loss_fn, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = loss_fn();
  cardiolens::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = loss_fn().item();
      data[i] = saved - h;
      const double fm = loss_fn().item();
      data[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

/// AUC by enumerating every (positive, negative) pair.
inline double brute_force_auc(std::span<const double> scores, std::span<const Label> truth) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (truth[i] == Label::kPresent && truth[j] == Label::kNotPresent) {
        ++pairs;
        if (scores[i] > scores[j]) wins += 1.0;
        else if (scores[i] == scores[j]) wins += 0.5;
      }
  return wins / static_cast<double>(pairs);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("cardiolens_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
