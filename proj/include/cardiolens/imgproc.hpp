#pragma once

// Radiograph enhancement: grayscale conversion, resampling, histogram
// equalization, Laplacian sharpening, Sobel/Canny edges and grayscale
// mathematical morphology (erosion, dilation, opening, closing and geodesic
// reconstruction), plus the scalar quality report of the enhancement chain.
//
// Morphology border rule: pixels outside the image are ignored by the min/max
// (equivalently +inf padding for erosion, -inf for dilation). For box-shaped
// elements that contain their anchor this is identical to replicate padding,
// and for every element it keeps erosion and dilation an exact adjunction, so
// opening/closing stay idempotent on the finite grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardiolens/image.hpp"

namespace cardiolens::imgproc {

// ---------------------------------------------------------------------------
// Point operations and resampling

/// ITU-R BT.601 luma, rounded to the nearest 8-bit level.
inline GrayImage to_grayscale(const RgbImage& img) {
  if (img.data.size() != 3 * img.width * img.height || img.width == 0 || img.height == 0)
    throw std::invalid_argument("to_grayscale: malformed RgbImage");
  GrayImage out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::uint8_t* p = img.pixel(x, y);
      out.set(x, y, std::round(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]));
    }
  }
  return out;
}

/// Bilinear resampling with pixel-center alignment: destination pixel x' samples
/// source coordinate (x' + 0.5) / r_x - 0.5, clamped to the source extent.
inline GrayImage resize_bilinear(const GrayImage& img, std::size_t target_w, std::size_t target_h) {
  if (target_w == 0 || target_h == 0) throw std::invalid_argument("resize_bilinear: zero target dimension");
  GrayImage out(target_w, target_h, 0.0, img.levels());
  const double rx = static_cast<double>(target_w) / static_cast<double>(img.width());
  const double ry = static_cast<double>(target_h) / static_cast<double>(img.height());
  const double max_x = static_cast<double>(img.width() - 1);
  const double max_y = static_cast<double>(img.height() - 1);
  for (std::size_t y = 0; y < target_h; ++y) {
    const double sy = std::clamp((static_cast<double>(y) + 0.5) / ry - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, img.height() - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_w; ++x) {
      const double sx = std::clamp((static_cast<double>(x) + 0.5) / rx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, img.width() - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
      const double bottom = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
      out.set(x, y, top * (1.0 - fy) + bottom * fy);
    }
  }
  return out;
}

/// Intensity lookup table T(i) = floor(cdf(i) * (L - 1)).
///
/// Computed in integer arithmetic so the table is exact; values are binned by
/// rounding to the nearest level.
inline std::vector<double> equalization_table(const GrayImage& img) {
  const auto levels = static_cast<std::size_t>(img.levels());
  std::vector<std::size_t> hist(levels, 0);
  for (double v : img.values()) {
    const long bin = std::clamp<long>(std::lround(v), 0, static_cast<long>(levels) - 1);
    ++hist[static_cast<std::size_t>(bin)];
  }
  std::vector<double> table(levels);
  const std::size_t total = img.size();
  std::size_t cumulative = 0;
  for (std::size_t i = 0; i < levels; ++i) {
    cumulative += hist[i];
    table[i] = static_cast<double>((cumulative * (levels - 1)) / total);
  }
  return table;
}

inline GrayImage equalize_histogram(const GrayImage& img) {
  const std::vector<double> table = equalization_table(img);
  GrayImage out(img.width(), img.height(), 0.0, img.levels());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      const long bin = std::clamp<long>(std::lround(img.at(x, y)), 0, img.levels() - 1);
      out.set(x, y, table[static_cast<std::size_t>(bin)]);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Linear filtering

/// Cross-correlation sum_i sum_j I(x + j, y + i) * K(i, j) with replicate borders.
/// The result is left unclamped.
inline FloatGrid convolve2d(const FloatGrid& img, const Kernel& k) {
  FloatGrid out(img.width, img.height);
  const long hr = static_cast<long>(k.rows / 2);
  const long hc = static_cast<long>(k.cols / 2);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (long dy = -hr; dy <= hr; ++dy)
        for (long dx = -hc; dx <= hc; ++dx)
          acc += img.clamped(static_cast<long>(x) + dx, static_cast<long>(y) + dy) * k.at(dy, dx);
      out.at(x, y) = acc;
    }
  }
  return out;
}

inline FloatGrid convolve2d(const GrayImage& img, const Kernel& k) { return convolve2d(img.to_grid(), k); }

/// 4-neighbour Laplacian with negative center.
inline Kernel laplacian_kernel() { return Kernel(3, 3, {0, 1, 0, 1, -4, 1, 0, 1, 0}); }

inline Kernel sobel_x_kernel() { return Kernel(3, 3, {-1, 0, 1, -2, 0, 2, -1, 0, 1}); }
inline Kernel sobel_y_kernel() { return Kernel(3, 3, {-1, -2, -1, 0, 0, 0, 1, 2, 1}); }

/// Log-intensity statistic V = sum_i log(max(I(i), 1)) / sqrt(N).
inline double log_intensity_statistic(const GrayImage& img) {
  double acc = 0.0;
  for (double v : img.values()) acc += std::log(std::max(v, 1.0));
  return acc / std::sqrt(static_cast<double>(img.size()));
}

/// Edge-amplifying sharpen I - k * lap(I), optionally offset by V^2, clamped to range.
inline GrayImage sharpen(const GrayImage& img, double k, bool apply_v_offset) {
  if (k < 0.0) throw std::invalid_argument("sharpen: strength must be >= 0");
  const FloatGrid lap = convolve2d(img, laplacian_kernel());
  const double offset = apply_v_offset ? std::pow(log_intensity_statistic(img), 2) : 0.0;
  FloatGrid out(img.width(), img.height());
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = img.values()[i] - k * lap.data[i] + offset;
  return GrayImage::from_grid(out, img.levels());
}

struct SobelResult {
  FloatGrid gx;
  FloatGrid gy;
  double e1 = 0.0;  // sum(Gx^2) / sqrt(N)
  double e2 = 0.0;  // (sum(Gy) / N)^3
};

inline SobelResult sobel_gradients(const GrayImage& img) {
  if (img.width() < 3 || img.height() < 3) throw std::invalid_argument("sobel_gradients: image smaller than 3x3");
  SobelResult r;
  r.gx = convolve2d(img, sobel_x_kernel());
  r.gy = convolve2d(img, sobel_y_kernel());
  const auto n = static_cast<double>(img.size());
  double sq = 0.0;
  double sum_y = 0.0;
  for (double v : r.gx.data) sq += v * v;
  for (double v : r.gy.data) sum_y += v;
  r.e1 = sq / std::sqrt(n);
  r.e2 = std::pow(sum_y / n, 3);
  return r;
}

/// Canny edge map with outputs in {0, L - 1}.
///
/// Stages: 5x5 Gaussian (sigma ~1.4, integer weights / 159), Sobel gradient,
/// non-maximum suppression over four quantized directions, double threshold,
/// and 8-connected hysteresis. The Gaussian is applied unnormalized so that
/// integer-valued inputs yield exact integer gradients; magnitudes are divided
/// by 159 only when compared with the thresholds. On exact ties across the
/// gradient direction the pixel on the negative side is kept.
inline GrayImage canny(const GrayImage& img, double low, double high) {
  if (!(low >= 0.0) || !(low < high)) throw std::invalid_argument("canny: require 0 <= low < high");
  static const Kernel gauss(5, 5, {2, 4, 5, 4, 2, 4, 9, 12, 9, 4, 5, 12, 15, 12, 5, 4, 9, 12, 9, 4, 2, 4, 5, 4, 2});
  constexpr double kGaussNorm = 159.0;
  const std::size_t w = img.width();
  const std::size_t h = img.height();

  const FloatGrid smooth = convolve2d(img, gauss);
  const FloatGrid gx = convolve2d(smooth, sobel_x_kernel());
  const FloatGrid gy = convolve2d(smooth, sobel_y_kernel());

  FloatGrid mag(w, h);
  for (std::size_t i = 0; i < mag.data.size(); ++i) mag.data[i] = std::hypot(gx.data[i], gy.data[i]);

  auto mag_at = [&](long x, long y) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) return 0.0;
    return mag.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };

  // 0 = none, 1 = weak, 2 = strong
  std::vector<std::uint8_t> cls(w * h, 0);
  const double low_raw = low * kGaussNorm;
  const double high_raw = high * kGaussNorm;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double m = mag.at(x, y);
      if (m <= 0.0 || m < low_raw) continue;
      double angle = std::atan2(gy.at(x, y), gx.at(x, y)) * 180.0 / std::numbers::pi;
      if (angle < 0) angle += 180.0;
      long dx = 1, dy = 0;
      if (angle >= 22.5 && angle < 67.5) {
        dx = 1; dy = 1;
      } else if (angle >= 67.5 && angle < 112.5) {
        dx = 0; dy = 1;
      } else if (angle >= 112.5 && angle < 157.5) {
        dx = -1; dy = 1;
      }
      const auto lx = static_cast<long>(x);
      const auto ly = static_cast<long>(y);
      const double before = mag_at(lx - dx, ly - dy);
      const double after = mag_at(lx + dx, ly + dy);
      if (!(m > before && m >= after)) continue;
      cls[y * w + x] = m >= high_raw ? 2 : 1;
    }
  }

  GrayImage out(w, h, 0.0, img.levels());
  std::deque<std::size_t> queue;
  std::vector<bool> kept(w * h, false);
  for (std::size_t i = 0; i < cls.size(); ++i)
    if (cls[i] == 2) {
      kept[i] = true;
      queue.push_back(i);
    }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const long x = static_cast<long>(i % w);
    const long y = static_cast<long>(i / w);
    for (long ny = y - 1; ny <= y + 1; ++ny)
      for (long nx = x - 1; nx <= x + 1; ++nx) {
        if (nx < 0 || ny < 0 || nx >= static_cast<long>(w) || ny >= static_cast<long>(h)) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (!kept[j] && cls[j] == 1) {
          kept[j] = true;
          queue.push_back(j);
        }
      }
  }
  for (std::size_t i = 0; i < kept.size(); ++i)
    if (kept[i]) out.set(i % w, i / w, out.max_level());
  return out;
}

// ---------------------------------------------------------------------------
// Morphology

/// Grayscale erosion: min over { I(x + b) : b in B, x + b inside the image }.
/// On binary images this is A (-) B = { z | B_z subset of A }.
inline GrayImage erode(const GrayImage& img, const StructuringElement& se) {
  GrayImage out(img.width(), img.height(), 0.0, img.levels());
  const auto w = static_cast<long>(img.width());
  const auto h = static_cast<long>(img.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double m = std::numeric_limits<double>::infinity();
      for (const auto& [dx, dy] : se.offsets()) {
        const long sx = x + dx;
        const long sy = y + dy;
        if (sx < 0 || sy < 0 || sx >= w || sy >= h) continue;
        m = std::min(m, img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy)));
      }
      out.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), m);
    }
  return out;
}

/// Grayscale dilation: max over { I(x - b) : b in B, x - b inside the image },
/// i.e. the union of translates A_b, equivalently { z | (B^s)_z meets A }.
inline GrayImage dilate(const GrayImage& img, const StructuringElement& se) {
  GrayImage out(img.width(), img.height(), 0.0, img.levels());
  const auto w = static_cast<long>(img.width());
  const auto h = static_cast<long>(img.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double m = -std::numeric_limits<double>::infinity();
      for (const auto& [dx, dy] : se.offsets()) {
        const long sx = x - dx;
        const long sy = y - dy;
        if (sx < 0 || sy < 0 || sx >= w || sy >= h) continue;
        m = std::max(m, img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy)));
      }
      out.set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), m);
    }
  return out;
}

inline GrayImage open(const GrayImage& img, const StructuringElement& se) { return dilate(erode(img, se), se); }
inline GrayImage close(const GrayImage& img, const StructuringElement& se) { return erode(dilate(img, se), se); }

/// Intensity complement (L - 1) - I.
inline GrayImage complement(const GrayImage& img) {
  GrayImage out(img.width(), img.height(), 0.0, img.levels());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) out.set(x, y, img.max_level() - img.at(x, y));
  return out;
}

inline GrayImage pointwise_min(const GrayImage& a, const GrayImage& b) {
  GrayImage out(a.width(), a.height(), 0.0, a.levels());
  for (std::size_t y = 0; y < a.height(); ++y)
    for (std::size_t x = 0; x < a.width(); ++x) out.set(x, y, std::min(a.at(x, y), b.at(x, y)));
  return out;
}

struct Reconstruction {
  GrayImage image;
  std::size_t iterations = 0;  // geodesic dilations that changed the marker
};

/// Morphological reconstruction by dilation: iterate m <- min(dilate(m), mask)
/// until the marker stops changing.
inline Reconstruction reconstruct_by_dilation_counted(const GrayImage& marker, const GrayImage& mask,
                                                      const StructuringElement& se) {
  if (marker.width() != mask.width() || marker.height() != mask.height())
    throw std::invalid_argument("reconstruct_by_dilation: marker/mask dimensions differ");
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (marker.values()[i] > mask.values()[i])
      throw std::invalid_argument("reconstruct_by_dilation: marker exceeds mask at pixel " + std::to_string(i));
  Reconstruction r{GrayImage::from_values(marker.width(), marker.height(), marker.values(), mask.levels()), 0};
  for (;;) {
    GrayImage next = pointwise_min(dilate(r.image, se), mask);
    if (next == r.image) break;
    r.image = std::move(next);
    ++r.iterations;
  }
  return r;
}

inline GrayImage reconstruct_by_dilation(const GrayImage& marker, const GrayImage& mask,
                                         const StructuringElement& se) {
  return reconstruct_by_dilation_counted(marker, mask, se).image;
}

/// Opening by reconstruction: erode n times, then reconstruct under the input.
inline GrayImage opening_by_reconstruction(const GrayImage& img, const StructuringElement& se, int n) {
  if (n < 0) throw std::invalid_argument("opening_by_reconstruction: n must be >= 0");
  if (n == 0) return img;
  GrayImage marker = img;
  for (int i = 0; i < n; ++i) marker = erode(marker, se);
  return reconstruct_by_dilation(marker, img, se);
}

// ---------------------------------------------------------------------------
// Full enhancement chain

struct PreprocessReport {
  double variance_v = 0.0;
  double edge_energy_e1 = 0.0;
  double edge_energy_e2 = 0.0;
  double morph_m1 = 0.0;
  double morph_m2 = 0.0;
};

inline constexpr const char* kReportCsvHeader = "variance_v,edge_energy_e1,edge_energy_e2,morph_m1,morph_m2";

inline std::string to_csv_row(const PreprocessReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%.9g,%.9g", r.variance_v, r.edge_energy_e1, r.edge_energy_e2,
                r.morph_m1, r.morph_m2);
  return buf;
}

struct PreprocessConfig {
  std::size_t target_width = 128;
  std::size_t target_height = 128;
  double sharpen_k = 1.0;
  bool apply_v_offset = false;
  double canny_low = 30.0;
  double canny_high = 100.0;
  StructuringElement se = StructuringElement::box(3, 3);
  int reconstruction_n = 0;  // 0 selects plain opening

  void validate() const {
    if (target_width < 8 || target_height < 8) throw std::invalid_argument("PreprocessConfig: target must be >= 8x8");
    if (sharpen_k < 0.0) throw std::invalid_argument("PreprocessConfig: sharpen_k must be >= 0");
    if (!(canny_low >= 0.0 && canny_low < canny_high))
      throw std::invalid_argument("PreprocessConfig: require 0 <= canny_low < canny_high");
    if (reconstruction_n < 0) throw std::invalid_argument("PreprocessConfig: reconstruction_n must be >= 0");
  }
};

/// V, E1, E2, M1, M2 of an (equalized) image.
inline PreprocessReport quality_report(const GrayImage& img, const StructuringElement& se) {
  PreprocessReport r;
  const auto n = static_cast<double>(img.size());
  r.variance_v = log_intensity_statistic(img);
  const SobelResult s = sobel_gradients(img);
  r.edge_energy_e1 = s.e1;
  r.edge_energy_e2 = s.e2;
  double sq = 0.0;
  const GrayImage eroded = erode(img, se);
  for (double v : eroded.values()) sq += v * v;
  double sum = 0.0;
  const GrayImage dilated = dilate(img, se);
  for (double v : dilated.values()) sum += v;
  r.morph_m1 = sq / std::sqrt(n);
  r.morph_m2 = std::pow(sum / n, 3);
  return r;
}

struct PreprocessResult {
  GrayImage image;  // sharpened then morphologically opened
  GrayImage edges;  // Canny map of the equalized image
  PreprocessReport report;
};

inline PreprocessResult preprocess(const GrayImage& gray, const PreprocessConfig& cfg) {
  cfg.validate();
  const GrayImage resized = resize_bilinear(gray, cfg.target_width, cfg.target_height);
  const GrayImage equalized = equalize_histogram(resized);
  const GrayImage sharpened = sharpen(equalized, cfg.sharpen_k, cfg.apply_v_offset);
  PreprocessResult r;
  r.edges = canny(equalized, cfg.canny_low, cfg.canny_high);
  r.report = quality_report(equalized, cfg.se);
  r.image = cfg.reconstruction_n > 0 ? opening_by_reconstruction(sharpened, cfg.se, cfg.reconstruction_n)
                                     : open(sharpened, cfg.se);
  return r;
}

inline PreprocessResult preprocess(const RgbImage& img, const PreprocessConfig& cfg) {
  return preprocess(to_grayscale(img), cfg);
}

}  // namespace cardiolens::imgproc
