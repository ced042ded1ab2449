#pragma once

// Raster types shared by the preprocessing pipeline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cardiolens {

/// 8-bit interleaved RGB raster, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;  // r, g, b per pixel

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), data(3 * w * h, 0) {
    if (w == 0 || h == 0) throw std::invalid_argument("RgbImage: zero dimension");
  }

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return &data[3 * (y * width + x)]; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const { return &data[3 * (y * width + x)]; }
};

/// Unclamped float raster used for filter responses (gradients, Laplacians).
struct FloatGrid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> data;

  FloatGrid() = default;
  FloatGrid(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), data(w * h, fill) {}

  double& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return data[y * width + x]; }

  /// Replicate-border read.
  double clamped(long x, long y) const {
    const long cx = std::clamp<long>(x, 0, static_cast<long>(width) - 1);
    const long cy = std::clamp<long>(y, 0, static_cast<long>(height) - 1);
    return data[static_cast<std::size_t>(cy) * width + static_cast<std::size_t>(cx)];
  }
};

/// Single-channel image whose intensities live in [0, levels - 1].
///
/// Values are stored as doubles so intermediate stages (bilinear resampling,
/// sharpening) do not quantize; every mutation path re-clamps to the range.
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, double fill = 0.0, int levels = 256)
      : width_(w), height_(h), levels_(levels), data_(w * h, 0.0) {
    if (w == 0 || h == 0) throw std::invalid_argument("GrayImage: zero dimension");
    if (levels < 2) throw std::invalid_argument("GrayImage: levels must be >= 2");
    std::fill(data_.begin(), data_.end(), clamp_value(fill));
  }

  /// Builds an image from a float grid, clamping every value into range.
  static GrayImage from_grid(const FloatGrid& g, int levels = 256) {
    GrayImage img(g.width, g.height, 0.0, levels);
    for (std::size_t i = 0; i < g.data.size(); ++i) img.data_[i] = img.clamp_value(g.data[i]);
    return img;
  }

  static GrayImage from_values(std::size_t w, std::size_t h, const std::vector<double>& values,
                               int levels = 256) {
    if (values.size() != w * h) throw std::invalid_argument("GrayImage: value count mismatch");
    GrayImage img(w, h, 0.0, levels);
    for (std::size_t i = 0; i < values.size(); ++i) img.data_[i] = img.clamp_value(values[i]);
    return img;
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  int levels() const { return levels_; }
  double max_level() const { return static_cast<double>(levels_ - 1); }

  double at(std::size_t x, std::size_t y) const { return data_[y * width_ + x]; }
  void set(std::size_t x, std::size_t y, double v) { data_[y * width_ + x] = clamp_value(v); }

  double clamped(long x, long y) const {
    const long cx = std::clamp<long>(x, 0, static_cast<long>(width_) - 1);
    const long cy = std::clamp<long>(y, 0, static_cast<long>(height_) - 1);
    return data_[static_cast<std::size_t>(cy) * width_ + static_cast<std::size_t>(cx)];
  }

  const std::vector<double>& values() const { return data_; }

  FloatGrid to_grid() const {
    FloatGrid g(width_, height_);
    g.data = data_;
    return g;
  }

  double clamp_value(double v) const { return std::clamp(v, 0.0, max_level()); }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  int levels_ = 256;
  std::vector<double> data_;
};

/// Binary structuring element with an anchor cell.
///
/// Offsets are stored relative to the anchor as (dx, dy) pairs, which is the
/// form every morphology routine iterates over.
class StructuringElement {
 public:
  StructuringElement(std::size_t rows, std::size_t cols, std::vector<bool> mask, std::size_t anchor_row,
                     std::size_t anchor_col)
      : rows_(rows), cols_(cols), mask_(std::move(mask)), anchor_row_(anchor_row), anchor_col_(anchor_col) {
    if (rows == 0 || cols == 0 || mask_.size() != rows * cols)
      throw std::invalid_argument("StructuringElement: mask size mismatch");
    if (anchor_row >= rows || anchor_col >= cols)
      throw std::invalid_argument("StructuringElement: anchor outside grid");
    if (!mask_[anchor_row * cols + anchor_col])
      throw std::invalid_argument("StructuringElement: anchor cell must be set");
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        if (mask_[r * cols + c])
          offsets_.emplace_back(static_cast<long>(c) - static_cast<long>(anchor_col),
                                static_cast<long>(r) - static_cast<long>(anchor_row));
  }

  /// Full rectangle anchored at its center; side lengths must be odd.
  static StructuringElement box(std::size_t rows = 3, std::size_t cols = 3) {
    if (rows % 2 == 0 || cols % 2 == 0) throw std::invalid_argument("StructuringElement::box: odd sides required");
    return StructuringElement(rows, cols, std::vector<bool>(rows * cols, true), rows / 2, cols / 2);
  }

  /// Point reflection through the anchor (B^s).
  StructuringElement reflected() const {
    std::vector<bool> m(mask_.size());
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) m[(rows_ - 1 - r) * cols_ + (cols_ - 1 - c)] = mask_[r * cols_ + c];
    return StructuringElement(rows_, cols_, std::move(m), rows_ - 1 - anchor_row_, cols_ - 1 - anchor_col_);
  }

  const std::vector<std::pair<long, long>>& offsets() const { return offsets_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool cell(std::size_t r, std::size_t c) const { return mask_[r * cols_ + c]; }
  std::size_t anchor_row() const { return anchor_row_; }
  std::size_t anchor_col() const { return anchor_col_; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<bool> mask_;
  std::size_t anchor_row_;
  std::size_t anchor_col_;
  std::vector<std::pair<long, long>> offsets_;
};

/// Odd-sized correlation kernel anchored at its center.
struct Kernel {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> coefficients;

  Kernel(std::size_t r, std::size_t c, std::vector<double> coeffs) : rows(r), cols(c), coefficients(std::move(coeffs)) {
    if (r % 2 == 0 || c % 2 == 0) throw std::invalid_argument("Kernel: side lengths must be odd");
    if (coefficients.size() != r * c) throw std::invalid_argument("Kernel: coefficient count mismatch");
  }

  double at(long dy, long dx) const {
    return coefficients[static_cast<std::size_t>(dy + static_cast<long>(rows / 2)) * cols +
                        static_cast<std::size_t>(dx + static_cast<long>(cols / 2))];
  }
};

}  // namespace cardiolens
