#pragma once

// Scaled dot-product, masked and multi-head attention over token matrices,
// and the residual attention block applied to convolutional feature maps.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cardiolens/checkpoint.hpp"
#include "cardiolens/nn.hpp"
#include "cardiolens/tensor.hpp"

namespace cardiolens::attention {

/// Per-head query/key/value projections and the shared output projection.
struct AttentionWeights {
  std::size_t model_dim = 0;
  std::size_t heads = 0;
  std::vector<Tensor> wq;  // heads x [model_dim, head_dim]
  std::vector<Tensor> wk;
  std::vector<Tensor> wv;
  Tensor wo;  // [heads * head_dim, model_dim]

  std::size_t head_dim() const { return model_dim / heads; }

  static void check_divisible(std::size_t model_dim, std::size_t heads) {
    if (heads == 0 || model_dim == 0 || model_dim % heads != 0)
      throw std::invalid_argument("attention: model_dim " + std::to_string(model_dim) + " not divisible by heads " +
                                  std::to_string(heads));
  }

  /// Glorot-uniform projections.
  static AttentionWeights init(std::size_t model_dim, std::size_t heads, nn::Rng& rng, bool requires_grad = true) {
    check_divisible(model_dim, heads);
    AttentionWeights w;
    w.model_dim = model_dim;
    w.heads = heads;
    const std::size_t hd = model_dim / heads;
    auto glorot = [&](std::size_t fan_in, std::size_t fan_out) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::vector<double> v(fan_in * fan_out);
      for (double& x : v) x = (2.0 * nn::uniform01(rng) - 1.0) * limit;
      return Tensor({fan_in, fan_out}, std::move(v), requires_grad);
    };
    for (std::size_t h = 0; h < heads; ++h) {
      w.wq.push_back(glorot(model_dim, hd));
      w.wk.push_back(glorot(model_dim, hd));
      w.wv.push_back(glorot(model_dim, hd));
    }
    w.wo = glorot(heads * hd, model_dim);
    return w;
  }

  void validate() const {
    check_divisible(model_dim, heads);
    const Shape proj{model_dim, head_dim()};
    if (wq.size() != heads || wk.size() != heads || wv.size() != heads)
      throw ShapeError("attention: projection count differs from head count");
    for (std::size_t h = 0; h < heads; ++h)
      if (wq[h].shape() != proj || wk[h].shape() != proj || wv[h].shape() != proj)
        throw ShapeError("attention: head " + std::to_string(h) + " projection shape mismatch");
    if (wo.shape() != Shape{heads * head_dim(), model_dim}) throw ShapeError("attention: output projection shape");
  }

  /// Checkpoint entries `<prefix>.head{i}.{wq|wk|wv}` and `<prefix>.wo`.
  std::vector<NamedTensor> named(const std::string& prefix = "attn") const {
    std::vector<NamedTensor> out;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::string p = prefix + ".head" + std::to_string(h);
      out.push_back({p + ".wq", wq[h]});
      out.push_back({p + ".wk", wk[h]});
      out.push_back({p + ".wv", wv[h]});
    }
    out.push_back({prefix + ".wo", wo});
    return out;
  }
};

/// Additive score mask: 0 keeps a key visible, a large negative value or
/// -infinity blocks it.
struct AttentionMask {
  Tensor values;  // [queries, keys]

  explicit AttentionMask(Tensor m) : values(std::move(m)) {
    if (values.rank() != 2) throw ShapeError("AttentionMask: must be 2-D");
    for (double v : values.data())
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw std::invalid_argument("AttentionMask: entries must be finite or -inf");
  }

  static AttentionMask zeros(std::size_t queries, std::size_t keys) {
    return AttentionMask(Tensor::zeros({queries, keys}));
  }

  /// Query i may attend to keys j <= i.
  static AttentionMask causal(std::size_t tokens) {
    std::vector<double> m(tokens * tokens, 0.0);
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t j = i + 1; j < tokens; ++j) m[i * tokens + j] = -std::numeric_limits<double>::infinity();
    return AttentionMask(Tensor({tokens, tokens}, std::move(m)));
  }
};

struct AttentionResult {
  Tensor output;   // [queries, d_v]
  Tensor weights;  // [queries, keys], rows are probability vectors
};

namespace detail {

inline AttentionResult attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("attention: q, k, v must be 2-D");
  if (q.dim(1) != k.dim(1))
    throw ShapeError("attention: query/key width mismatch " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  if (k.dim(0) != v.dim(0)) throw ShapeError("attention: key/value token count mismatch");
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor scores = nn::scale(nn::matmul(q, nn::transpose(k)), inv_sqrt_dk);
  if (mask) {
    if (mask->values.shape() != scores.shape())
      throw ShapeError("masked_attention: mask " + shape_str(mask->values.shape()) + " vs scores " +
                       shape_str(scores.shape()));
    scores = nn::add(scores, mask->values);
  }
  Tensor weights = nn::softmax(scores, -1);
  return {nn::matmul(weights, v), weights};
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d_k)) V
inline AttentionResult scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return detail::attend(q, k, v, nullptr);
}

/// softmax(M + Q K^T / sqrt(d_k)) V
inline AttentionResult masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& m) {
  return detail::attend(q, k, v, &m);
}

/// Concat_i(Attention(X Wq_i, X Wk_i, X Wv_i)) Wo for X of shape [tokens, model_dim].
inline Tensor multi_head_attention(const Tensor& x, const AttentionWeights& w) {
  w.validate();
  if (x.rank() != 2 || x.dim(1) != w.model_dim)
    throw ShapeError("multi_head_attention: input " + shape_str(x.shape()) + " vs model_dim " +
                     std::to_string(w.model_dim));
  std::vector<Tensor> heads;
  heads.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h)
    heads.push_back(
        scaled_dot_product_attention(nn::matmul(x, w.wq[h]), nn::matmul(x, w.wk[h]), nn::matmul(x, w.wv[h])).output);
  return nn::matmul(w.heads == 1 ? heads[0] : nn::concat_cols(heads), w.wo);
}

/// Treats each image's H*W grid as tokens of width C, applies multi-head
/// attention and adds the result back onto the feature map.
inline Tensor attend_feature_map(const Tensor& fmap, const AttentionWeights& w) {
  if (fmap.rank() != 4) throw ShapeError("attend_feature_map: expected NCHW input");
  AttentionWeights::check_divisible(fmap.dim(1), w.heads);
  if (fmap.dim(1) != w.model_dim) throw ShapeError("attend_feature_map: channel count differs from model_dim");
  std::vector<Tensor> attended;
  attended.reserve(fmap.dim(0));
  for (std::size_t n = 0; n < fmap.dim(0); ++n) attended.push_back(multi_head_attention(nn::feature_tokens(fmap, n), w));
  return nn::add(fmap, nn::tokens_to_feature_map(attended, fmap.dim(2), fmap.dim(3)));
}

}  // namespace cardiolens::attention
