#pragma once

// Differentiable tensor operations: elementwise arithmetic, matrix products,
// activations, NCHW convolution and pooling, global average pooling, dense
// layers, dropout and the classification loss.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "cardiolens/tensor.hpp"

namespace cardiolens::nn {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits of the engine output.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](cardiolens::detail::Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](cardiolens::detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](cardiolens::detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tensor::from_op(a.shape(), std::move(out), {a}, [s](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return Tensor::from_op({1}, {acc}, {a}, [](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) throw ShapeError("reshape: element count mismatch to " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::from_op(std::move(shape), std::move(out), {a}, [](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return Tensor::from_op({m, n}, std::move(out), {a, b}, [m, k, n](cardiolens::detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* G = self.grad.data();
    if (pa.requires_grad)  // dA = dC B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * pb.data[p * n + j];
          pa.grad[i * k + p] += acc;
        }
    if (pb.requires_grad)  // dB = A^T dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) pb.grad[p * n + j] += av * G[i * n + j];
        }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return Tensor::from_op({c, r}, std::move(out), {a}, [r, c](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
  });
}

/// Concatenates 2-D tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& t : parts) {
    detail::require_rank(t, 2, "concat_cols");
    if (t.dim(0) != rows) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(t.dim(1));
    total += t.dim(1);
  }
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = parts[k][i * widths[k] + j];
    off += widths[k];
  }
  return Tensor::from_op({rows, total}, std::move(out), parts,
                         [rows, total, widths](cardiolens::detail::Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                             auto& p = *self.parents[k];
                             if (p.requires_grad)
                               for (std::size_t i = 0; i < rows; ++i)
                                 for (std::size_t j = 0; j < widths[k]; ++j)
                                   p.grad[i * widths[k] + j] += self.grad[i * total + off + j];
                             off += widths[k];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Softmax and loss

/// exp(x - max) / sum(exp(x - max)) along `axis` (negative counts from the end).
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(static_cast<std::size_t>(i));
  for (int i = ax + 1; i < r; ++i) inner *= x.dim(static_cast<std::size_t>(i));
  const std::size_t len = x.dim(static_cast<std::size_t>(ax));
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      if (!std::isfinite(mx)) throw std::invalid_argument("softmax: slice has no finite entry");
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  return Tensor::from_op(x.shape(), std::move(out), {x}, [outer, inner, len](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    const auto& y = self.data;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t i = base + j * inner;
          p.grad[i] += y[i] * (self.grad[i] - dot);
        }
      }
  });
}

inline constexpr double kLogClamp = 1e-12;

/// Mean over the batch of -sum_i y_i log(max(p_i, 1e-12)).
inline Tensor cross_entropy(const Tensor& probs, const Tensor& onehot) {
  detail::require_rank(probs, 2, "cross_entropy");
  detail::require_same_shape(probs, onehot, "cross_entropy");
  const std::size_t n = probs.dim(0);
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (onehot[i] != 0.0) loss -= onehot[i] * std::log(std::max(probs[i], kLogClamp));
  loss /= static_cast<double>(n);
  return Tensor::from_op({1}, {loss}, {probs, onehot}, [n](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    const auto& y = self.parents[1]->data;
    if (!p.requires_grad) return;
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < p.data.size(); ++i)
      if (y[i] != 0.0 && p.data[i] > kLogClamp) p.grad[i] -= g * y[i] / p.data[i];
  });
}

// ---------------------------------------------------------------------------
// Convolutional layers (NCHW)

/// Cross-correlation out(i, j) = sum_m sum_n in(i*s + m - p, j*s + n - p) * k(m, n)
/// with zero padding. `bias` may be undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride = 1,
                     std::size_t pad = 0) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != C) throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (KH > H + 2 * pad || KW > W + 2 * pad) throw ShapeError("conv2d: kernel larger than padded input");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != F)) throw ShapeError("conv2d: bias shape mismatch");
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1;
  const std::size_t OW = (W + 2 * pad - KW) / stride + 1;

  struct Geometry {
    std::size_t N, C, H, W, F, KH, KW, OH, OW, s, p;
    // Valid output column range for kernel column kj.
    std::pair<std::size_t, std::size_t> cols(std::size_t kj) const {
      const long off = static_cast<long>(kj) - static_cast<long>(p);
      long lo = 0;
      if (off < 0) lo = (-off + static_cast<long>(s) - 1) / static_cast<long>(s);
      const long last = static_cast<long>(W) - 1 - off;
      long hi = last < 0 ? 0 : last / static_cast<long>(s) + 1;
      hi = std::min<long>(hi, static_cast<long>(OW));
      return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
    }
  };
  const Geometry g{N, C, H, W, F, KH, KW, OH, OW, stride, pad};

  std::vector<double> out(N * F * OH * OW, 0.0);
  const auto X = x.data();
  const auto Wt = w.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f) {
      double* op = &out[(n * F + f) * OH * OW];
      if (bias.defined()) std::fill(op, op + OH * OW, bias[f]);
      for (std::size_t c = 0; c < C; ++c) {
        const double* ip = &X[(n * C + c) * H * W];
        for (std::size_t ki = 0; ki < KH; ++ki)
          for (std::size_t kj = 0; kj < KW; ++kj) {
            const double wv = Wt[((f * C + c) * KH + ki) * KW + kj];
            const auto [lo, hi] = g.cols(kj);
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              const double* row = ip + static_cast<std::size_t>(ih) * W;
              double* orow = op + oh * OW;
              for (std::size_t ow = lo; ow < hi; ++ow) orow[ow] += wv * row[ow * stride + kj - pad];
            }
          }
      }
    }

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::from_op({N, F, OH, OW}, std::move(out), inputs, [g](cardiolens::detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const double* G = self.grad.data();
    for (std::size_t n = 0; n < g.N; ++n)
      for (std::size_t f = 0; f < g.F; ++f) {
        const double* gp = G + (n * g.F + f) * g.OH * g.OW;
        for (std::size_t c = 0; c < g.C; ++c) {
          const std::size_t in_off = (n * g.C + c) * g.H * g.W;
          for (std::size_t ki = 0; ki < g.KH; ++ki)
            for (std::size_t kj = 0; kj < g.KW; ++kj) {
              const std::size_t widx = ((f * g.C + c) * g.KH + ki) * g.KW + kj;
              const double wv = pw.data[widx];
              const auto [lo, hi] = g.cols(kj);
              double wacc = 0.0;
              for (std::size_t oh = 0; oh < g.OH; ++oh) {
                const long ih = static_cast<long>(oh * g.s + ki) - static_cast<long>(g.p);
                if (ih < 0 || ih >= static_cast<long>(g.H)) continue;
                const std::size_t row = in_off + static_cast<std::size_t>(ih) * g.W;
                const double* grow = gp + oh * g.OW;
                for (std::size_t ow = lo; ow < hi; ++ow) {
                  const std::size_t iw = ow * g.s + kj - g.p;
                  if (px.requires_grad) px.grad[row + iw] += wv * grow[ow];
                  wacc += px.data[row + iw] * grow[ow];
                }
              }
              if (pw.requires_grad) pw.grad[widx] += wacc;
            }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.OH * g.OW; ++i) acc += gp[i];
          self.parents[2]->grad[f] += acc;
        }
      }
  });
}

enum class PoolMode { kMax, kAvg };

/// Windowed max or mean. Average pooling divides by the full window area
/// (padding counts as zeros); max pooling ignores padded cells and routes the
/// gradient to the first maximal cell in row-major order.
inline Tensor pool2d(const Tensor& x, std::size_t window, std::size_t stride, PoolMode mode, std::size_t pad = 0) {
  detail::require_rank(x, 4, "pool2d");
  if (window == 0 || stride == 0) throw std::invalid_argument("pool2d: window and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H + 2 * pad || window > W + 2 * pad) throw ShapeError("pool2d: window larger than input");
  if (pad >= window) throw std::invalid_argument("pool2d: padding must be smaller than the window");
  const std::size_t OH = (H + 2 * pad - window) / stride + 1;
  const std::size_t OW = (W + 2 * pad - window) / stride + 1;
  const std::size_t planes = N * C;
  std::vector<double> out(planes * OH * OW);
  std::vector<std::size_t> argmax(mode == PoolMode::kMax ? out.size() : 0);
  const double area = static_cast<double>(window * window);
  const auto X = x.data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        double acc = 0.0;
        for (std::size_t a = 0; a < window; ++a) {
          const long ih = static_cast<long>(oh * stride + a) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t b = 0; b < window; ++b) {
            const long iw = static_cast<long>(ow * stride + b) - static_cast<long>(pad);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t idx = pl * H * W + static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (X[idx] > best) {
              best = X[idx];
              best_i = idx;
            }
            acc += X[idx];
          }
        }
        const std::size_t o = (pl * OH + oh) * OW + ow;
        if (mode == PoolMode::kMax) {
          out[o] = best;
          argmax[o] = best_i;
        } else {
          out[o] = acc / area;
        }
      }
  return Tensor::from_op(
      {N, C, OH, OW}, std::move(out), {x},
      [mode, argmax = std::move(argmax), planes, H, W, OH, OW, window, stride, pad, area](cardiolens::detail::Node& self) {
        auto& p = *self.parents[0];
        if (mode == PoolMode::kMax) {
          for (std::size_t o = 0; o < self.grad.size(); ++o) p.grad[argmax[o]] += self.grad[o];
          return;
        }
        for (std::size_t pl = 0; pl < planes; ++pl)
          for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
              const double gv = self.grad[(pl * OH + oh) * OW + ow] / area;
              for (std::size_t a = 0; a < window; ++a) {
                const long ih = static_cast<long>(oh * stride + a) - static_cast<long>(pad);
                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                for (std::size_t b = 0; b < window; ++b) {
                  const long iw = static_cast<long>(ow * stride + b) - static_cast<long>(pad);
                  if (iw < 0 || iw >= static_cast<long>(W)) continue;
                  p.grad[pl * H * W + static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw)] += gv;
                }
              }
            }
      });
}

/// [N, C, H, W] -> [N, C] spatial means.
inline Tensor global_average_pool(const Tensor& x) {
  detail::require_rank(x, 4, "global_average_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(N * C, 0.0);
  for (std::size_t pl = 0; pl < N * C; ++pl) {
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += x[pl * HW + i];
    out[pl] = acc / static_cast<double>(HW);
  }
  return Tensor::from_op({N, C}, std::move(out), {x}, [HW](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t pl = 0; pl < self.grad.size(); ++pl) {
      const double gv = self.grad[pl] / static_cast<double>(HW);
      for (std::size_t i = 0; i < HW; ++i) p.grad[pl * HW + i] += gv;
    }
  });
}

/// Concatenates NCHW tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& t : parts) {
    detail::require_rank(t, 4, "concat_channels");
    if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W) throw ShapeError("concat_channels: geometry mismatch");
    chans.push_back(t.dim(1));
    total += t.dim(1);
  }
  const std::size_t HW = H * W;
  std::vector<double> out(N * total * HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto src = parts[k].data().subspan(n * chans[k] * HW, chans[k] * HW);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<long>((n * total + off) * HW));
      off += chans[k];
    }
  }
  return Tensor::from_op({N, total, H, W}, std::move(out), parts, [N, total, HW, chans](cardiolens::detail::Node& self) {
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < chans.size(); ++k) {
        auto& p = *self.parents[k];
        if (p.requires_grad)
          for (std::size_t i = 0; i < chans[k] * HW; ++i)
            p.grad[n * chans[k] * HW + i] += self.grad[(n * total + off) * HW + i];
        off += chans[k];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Classifier head

struct DenseParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

/// x W^T + b for x of shape [N, in].
inline Tensor dense(const Tensor& x, const DenseParams& p) {
  detail::require_rank(x, 2, "dense");
  const std::size_t N = x.dim(0), in = x.dim(1), out_dim = p.weight.dim(0);
  if (p.weight.rank() != 2 || p.weight.dim(1) != in)
    throw ShapeError("dense: input width " + std::to_string(in) + " vs weight " + shape_str(p.weight.shape()));
  if (p.bias.rank() != 1 || p.bias.dim(0) != out_dim) throw ShapeError("dense: bias shape mismatch");
  std::vector<double> out(N * out_dim);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = p.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[n * in + i] * p.weight[o * in + i];
      out[n * out_dim + o] = acc;
    }
  return Tensor::from_op({N, out_dim}, std::move(out), {x, p.weight, p.bias},
                         [N, in, out_dim](cardiolens::detail::Node& self) {
                           auto& px = *self.parents[0];
                           auto& pw = *self.parents[1];
                           auto& pb = *self.parents[2];
                           for (std::size_t n = 0; n < N; ++n)
                             for (std::size_t o = 0; o < out_dim; ++o) {
                               const double gv = self.grad[n * out_dim + o];
                               if (pb.requires_grad) pb.grad[o] += gv;
                               for (std::size_t i = 0; i < in; ++i) {
                                 if (px.requires_grad) px.grad[n * in + i] += gv * pw.data[o * in + i];
                                 if (pw.requires_grad) pw.grad[o * in + i] += gv * px.data[n * in + i];
                               }
                             }
                         });
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by 1 / (1 - rate). Identity at inference.
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = uniform01(rng) < rate ? 0.0 : keep_scale;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return Tensor::from_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Feature map <-> token views

/// Image `n` of an NCHW tensor as an [H*W, C] token matrix.
inline Tensor feature_tokens(const Tensor& x, std::size_t n) {
  detail::require_rank(x, 4, "feature_tokens");
  const std::size_t C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (n >= x.dim(0)) throw ShapeError("feature_tokens: batch index out of range");
  std::vector<double> out(HW * C);
  const std::size_t base = n * C * HW;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < HW; ++t) out[t * C + c] = x[base + c * HW + t];
  return Tensor::from_op({HW, C}, std::move(out), {x}, [C, HW, base](cardiolens::detail::Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < HW; ++t) p.grad[base + c * HW + t] += self.grad[t * C + c];
  });
}

/// Stacks per-image [H*W, C] token matrices back into [N, C, H, W].
inline Tensor tokens_to_feature_map(const std::vector<Tensor>& tokens, std::size_t H, std::size_t W) {
  if (tokens.empty()) throw ShapeError("tokens_to_feature_map: no inputs");
  const std::size_t N = tokens.size(), C = tokens[0].dim(1), HW = H * W;
  for (const auto& t : tokens)
    if (t.rank() != 2 || t.dim(0) != HW || t.dim(1) != C) throw ShapeError("tokens_to_feature_map: shape mismatch");
  std::vector<double> out(N * C * HW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < HW; ++t) out[(n * C + c) * HW + t] = tokens[n][t * C + c];
  return Tensor::from_op({N, C, H, W}, std::move(out), tokens, [N, C, HW](cardiolens::detail::Node& self) {
    for (std::size_t n = 0; n < N; ++n) {
      auto& p = *self.parents[n];
      if (!p.requires_grad) continue;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < HW; ++t) p.grad[t * C + c] += self.grad[(n * C + c) * HW + t];
    }
  });
}

}  // namespace cardiolens::nn
