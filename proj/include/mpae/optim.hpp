#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <string>

#include "mpae/tensor.hpp"

namespace mpae {

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::map<std::string, Tensor> m, v;
  std::size_t step = 0;
};

/// One decoupled-decay AdamW step over every named parameter that has a
/// gradient. Throws NumericalError (and leaves params and state untouched)
/// on any non-finite gradient.
inline void adamw_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
                       AdamWState& state, const AdamWOptions& o) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("adamw_step: gradient for unknown parameter " + name);
    if (it->second.shape() != g.shape()) {
      throw ShapeError("adamw_step: " + name + " has shape " + to_string(it->second.shape()) + ", gradient " + to_string(g.shape()));
    }
    for (double x : g.data()) {
      if (!std::isfinite(x)) throw NumericalError("adamw_step: non-finite gradient in " + name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mi, fresh_m] = state.m.try_emplace(name, g.shape(), 0.0);
    auto [vi, fresh_v] = state.v.try_emplace(name, g.shape(), 0.0);
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= o.lr * o.weight_decay * p[i];
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

/// Linear warm-up to `lr` over `warmup` epochs, then cosine decay to zero.
/// lr * e / warmup for e < warmup; lr * (1 + cos(pi (e - warmup) / (T - warmup))) / 2 after.
inline double lr_schedule(std::size_t epoch, std::size_t total, std::size_t warmup, double lr) {
  if (epoch >= total) throw ValidationError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total) + ")");
  if (epoch < warmup) return lr * static_cast<double>(epoch) / static_cast<double>(warmup);
  const double span = static_cast<double>(total - warmup);
  const double x = static_cast<double>(epoch - warmup) / span;
  return lr * (1.0 + std::cos(std::numbers::pi * x)) / 2.0;
}

}  // namespace mpae
