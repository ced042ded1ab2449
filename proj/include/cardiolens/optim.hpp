#pragma once

// First-order optimizers. Each rule is available as a raw elementwise update
// over spans (what the unit tests pin against hand-derived values) and as an
// Optimizer that walks a parameter list, skips frozen entries, and keeps its
// per-parameter slots keyed by parameter name.

#include <cmath>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardiolens/checkpoint.hpp"
#include "cardiolens/tensor.hpp"

namespace cardiolens {

/// A named trainable tensor. Optimizers leave it untouched when `trainable` is false.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

}  // namespace cardiolens

namespace cardiolens::optim {

namespace detail {
inline void require_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": parameter/gradient size mismatch");
}
}  // namespace detail

/// w <- w - alpha * g
inline void sgd_update(std::span<double> w, std::span<const double> g, double alpha) {
  detail::require_same_size(w.size(), g.size(), "sgd_update");
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= alpha * g[i];
}

/// z <- beta * z + g ; w <- w - alpha * z
inline void momentum_update(std::span<double> w, std::span<const double> g, std::span<double> z, double alpha,
                            double beta) {
  detail::require_same_size(w.size(), g.size(), "momentum_update");
  detail::require_same_size(w.size(), z.size(), "momentum_update");
  for (std::size_t i = 0; i < w.size(); ++i) {
    z[i] = beta * z[i] + g[i];
    w[i] -= alpha * z[i];
  }
}

/// s <- avg * s + (1 - avg) * g^2 ; w <- w - eta / sqrt(s + eps) * g
///
/// The printed parameter update scales w_k by beta and adds the step; that form
/// diverges on a quadratic, so the conventional decreasing step is used.
inline void rmsprop_update(std::span<double> w, std::span<const double> g, std::span<double> sq_avg, double avg,
                           double eta, double eps) {
  detail::require_same_size(w.size(), g.size(), "rmsprop_update");
  detail::require_same_size(w.size(), sq_avg.size(), "rmsprop_update");
  for (std::size_t i = 0; i < w.size(); ++i) {
    sq_avg[i] = avg * sq_avg[i] + (1.0 - avg) * g[i] * g[i];
    w[i] -= eta / std::sqrt(sq_avg[i] + eps) * g[i];
  }
}

/// m <- b1 m + (1 - b1) g ; v <- b2 v + (1 - b2) g^2 ; w <- w - lr * m / sqrt(v + eps)
/// No bias correction.
inline void adaptive_moment_update(std::span<double> w, std::span<const double> g, std::span<double> m,
                                   std::span<double> v, double lr, double beta1, double beta2, double eps) {
  detail::require_same_size(w.size(), g.size(), "adaptive_moment_update");
  detail::require_same_size(w.size(), m.size(), "adaptive_moment_update");
  detail::require_same_size(w.size(), v.size(), "adaptive_moment_update");
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    w[i] -= lr * m[i] / std::sqrt(v[i] + eps);
  }
}

enum class Kind { kSgd, kMomentum, kRmsProp, kAdaptiveMoment };

inline Kind parse_kind(const std::string& s) {
  if (s == "sgd") return Kind::kSgd;
  if (s == "momentum") return Kind::kMomentum;
  if (s == "rmsprop") return Kind::kRmsProp;
  if (s == "adam" || s == "adaptive_moment") return Kind::kAdaptiveMoment;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd|momentum|rmsprop|adam)");
}

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::kSgd: return "sgd";
    case Kind::kMomentum: return "momentum";
    case Kind::kRmsProp: return "rmsprop";
    case Kind::kAdaptiveMoment: return "adam";
  }
  return "?";
}

struct Hyperparams {
  double sgd_alpha = 0.01;
  double momentum_alpha = 0.01;
  double momentum_beta = 0.9;
  double rms_avg = 0.9;
  double rms_eta = 0.001;
  double adam_lr = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double eps = 1e-8;

  /// Overrides the step size of the selected rule.
  void set_learning_rate(Kind k, double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    switch (k) {
      case Kind::kSgd: sgd_alpha = lr; break;
      case Kind::kMomentum: momentum_alpha = lr; break;
      case Kind::kRmsProp: rms_eta = lr; break;
      case Kind::kAdaptiveMoment: adam_lr = lr; break;
    }
  }
};

class Optimizer {
 public:
  Optimizer(Kind kind, Hyperparams hp) : kind_(kind), hp_(hp) {
    if (!(hp.momentum_beta >= 0.0 && hp.momentum_beta < 1.0)) throw std::invalid_argument("momentum beta must be in [0,1)");
    if (!(hp.rms_avg >= 0.0 && hp.rms_avg < 1.0)) throw std::invalid_argument("rmsprop averaging must be in [0,1)");
    if (!(hp.adam_beta1 >= 0.0 && hp.adam_beta1 < 1.0 && hp.adam_beta2 >= 0.0 && hp.adam_beta2 < 1.0))
      throw std::invalid_argument("adaptive-moment betas must be in [0,1)");
    if (!(hp.eps > 0.0)) throw std::invalid_argument("eps must be > 0");
  }

  Kind kind() const { return kind_; }
  const Hyperparams& hyperparams() const { return hp_; }

  /// One update of every trainable parameter from its accumulated gradient.
  void step(std::span<Parameter> params) {
    for (Parameter& p : params) {
      if (!p.trainable || !p.value.requires_grad()) continue;
      auto w = p.value.mutable_data();
      auto g = p.value.grad();
      switch (kind_) {
        case Kind::kSgd:
          sgd_update(w, g, hp_.sgd_alpha);
          break;
        case Kind::kMomentum:
          momentum_update(w, g, slot("z", p), hp_.momentum_alpha, hp_.momentum_beta);
          break;
        case Kind::kRmsProp:
          rmsprop_update(w, g, slot("sq", p), hp_.rms_avg, hp_.rms_eta, hp_.eps);
          break;
        case Kind::kAdaptiveMoment:
          adaptive_moment_update(w, g, slot("m", p), slot("v", p), hp_.adam_lr, hp_.adam_beta1, hp_.adam_beta2,
                                 hp_.eps);
          break;
      }
    }
  }

  /// Slots as checkpoint entries named `opt.<slot>.<parameter>`.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    for (const auto& [key, values] : slots_) out.push_back({"opt." + key, Tensor({values.size()}, values)});
    return out;
  }

  void load_state(const std::vector<NamedTensor>& entries) {
    for (const auto& e : entries)
      if (e.name.rfind("opt.", 0) == 0)
        slots_[e.name.substr(4)] = std::vector<double>(e.tensor.data().begin(), e.tensor.data().end());
  }

  /// Read access for tests.
  const std::vector<double>* find_slot(const std::string& slot_name, const std::string& param) const {
    auto it = slots_.find(slot_name + "." + param);
    return it == slots_.end() ? nullptr : &it->second;
  }

 private:
  std::span<double> slot(const char* slot_name, const Parameter& p) {
    auto& s = slots_[std::string(slot_name) + "." + p.name];
    if (s.size() != p.value.size()) s.assign(p.value.size(), 0.0);
    return s;
  }

  Kind kind_;
  Hyperparams hp_;
  std::map<std::string, std::vector<double>> slots_;
};

}  // namespace cardiolens::optim
