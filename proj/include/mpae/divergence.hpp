#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mpae/autodiff.hpp"
#include "mpae/tensor.hpp"

namespace mpae {

/// Nonnegative weights over a finite support of size >= 2, not all zero.
/// Weights need not sum to one; normalized() reports whether they do.
class DiscreteDistribution {
 public:
  static constexpr double kNormTolerance = 1e-9;

  explicit DiscreteDistribution(std::vector<double> weights) : weights_(std::move(weights)) {
    if (weights_.size() < 2) throw ValidationError("distribution: support size must be >= 2");
    bool positive = false;
    double total = 0.0;
    for (double w : weights_) {
      if (!std::isfinite(w) || w < 0.0) throw DomainError("distribution: weight " + std::to_string(w) + " is not a nonnegative real");
      positive = positive || w > 0.0;
      total += w;
    }
    if (!positive) throw DomainError("distribution: all weights are zero");
    normalized_ = std::abs(total - 1.0) <= kNormTolerance;
  }

  /// Rescales arbitrary nonnegative weights to sum to one.
  static DiscreteDistribution normalize(std::vector<double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw DomainError("distribution: cannot normalize zero mass");
    for (auto& w : weights) w /= total;
    return DiscreteDistribution(std::move(weights));
  }

  std::size_t size() const noexcept { return weights_.size(); }
  bool normalized() const noexcept { return normalized_; }
  bool strictly_positive() const {
    return std::all_of(weights_.begin(), weights_.end(), [](double w) { return w > 0.0; });
  }
  std::span<const double> weights() const noexcept { return weights_; }
  double operator[](std::size_t i) const { return weights_[i]; }

 private:
  std::vector<double> weights_;
  bool normalized_ = false;
};

enum class HolderRegime { standard, reverse };

/// Conjugate exponents (alpha, beta = alpha / (alpha - 1)) plus the PHD
/// power gamma. alpha > 1 is the standard regime; alpha < 1 (alpha != 0) is
/// the reverse one.
struct HolderParams {
  double alpha = 1.6;
  double beta = 1.6 / 0.6;
  double gamma = 1.0;
  HolderRegime regime = HolderRegime::standard;

  static HolderParams conjugate(double alpha, double gamma = 1.0) {
    if (!std::isfinite(alpha) || alpha == 0.0 || alpha == 1.0) {
      throw DomainError("holder: invalid exponent alpha=" + std::to_string(alpha));
    }
    if (!(gamma > 0.0)) throw DomainError("holder: gamma must be positive, got " + std::to_string(gamma));
    HolderParams p;
    p.alpha = alpha;
    p.beta = alpha / (alpha - 1.0);
    p.gamma = gamma;
    p.regime = alpha > 1.0 ? HolderRegime::standard : HolderRegime::reverse;
    return p;
  }
};

namespace detail {

inline void require_same_support(const DiscreteDistribution& p, const DiscreteDistribution& q, const char* op) {
  if (p.size() != q.size()) {
    throw ShapeError(std::string(op) + ": support mismatch " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
  }
}

inline double neg_log_ratio(double num, double log_den, const char* op) {
  if (!(num > 0.0)) throw DivergenceInfinite(std::string(op) + ": distributions have disjoint support");
  return log_den - std::log(num);
}

}  // namespace detail

/// Sum p log(p/q), with 0 log(0/q) = 0. Requires normalized p.
inline double kl_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  detail::require_same_support(p, q, "kl");
  if (!p.normalized()) throw ValidationError("kl: p must be normalized");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) throw DivergenceInfinite("kl: q vanishes where p is positive at index " + std::to_string(i));
    acc += p[i] * std::log(p[i] / q[i]);
  }
  return acc;
}

/// Hölder statistical pseudo-divergence: the log-ratio gap of Hölder's
/// inequality (reverse inequality for alpha < 1). Projective in p and q.
inline double holder_pseudo_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q,
                                       const HolderParams& params) {
  detail::require_same_support(p, q, "hpd");
  const auto h = HolderParams::conjugate(params.alpha, params.gamma);
  if (h.regime == HolderRegime::reverse && (!p.strictly_positive() || !q.strictly_positive())) {
    throw DomainError("hpd: reverse regime requires strictly positive weights");
  }
  double pq = 0.0, pa = 0.0, qb = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pq += p[i] * q[i];
    pa += std::pow(p[i], h.alpha);
    qb += std::pow(q[i], h.beta);
  }
  const double log_rhs = std::log(pa) / h.alpha + std::log(qb) / h.beta;
  const double gap = detail::neg_log_ratio(pq, log_rhs, "hpd");
  return h.regime == HolderRegime::standard ? gap : -gap;
}

/// Proper Hölder divergence. Zero iff p is proportional to q.
inline double proper_holder_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q,
                                       const HolderParams& params) {
  detail::require_same_support(p, q, "phd");
  const auto h = HolderParams::conjugate(params.alpha, params.gamma);
  if (h.regime != HolderRegime::standard) throw DomainError("phd: requires alpha, beta > 0");
  if (std::equal(p.weights().begin(), p.weights().end(), q.weights().begin())) return 0.0;
  double cross = 0.0, pg = 0.0, qg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cross += std::pow(p[i], h.gamma / h.alpha) * std::pow(q[i], h.gamma / h.beta);
    pg += std::pow(p[i], h.gamma);
    qg += std::pow(q[i], h.gamma);
  }
  return detail::neg_log_ratio(cross, std::log(pg) / h.alpha + std::log(qg) / h.beta, "phd");
}

/// -log(<p,q> / (|p| |q|)). Reference form for HPD at alpha = 2.
inline double cauchy_schwarz_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  detail::require_same_support(p, q, "cauchy-schwarz");
  double pq = 0.0, pp = 0.0, qq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pq += p[i] * q[i];
    pp += p[i] * p[i];
    qq += q[i] * q[i];
  }
  if (!(pq > 0.0)) throw DivergenceInfinite("cauchy-schwarz: orthogonal supports");
  return -std::log(pq / (std::sqrt(pp) * std::sqrt(qq)));
}

/// -log sum sqrt(p q). Reference form for PHD at alpha = beta = 2, gamma = 1.
inline double bhattacharyya_distance(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  detail::require_same_support(p, q, "bhattacharyya");
  double bc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) bc += std::sqrt(p[i] * q[i]);
  if (!(bc > 0.0)) throw DivergenceInfinite("bhattacharyya: disjoint supports");
  return -std::log(bc);
}

/// softmax(logits / tau).
inline DiscreteDistribution soft_class_probabilities(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw DomainError("soft_class_probabilities: tau must be positive, got " + std::to_string(tau));
  if (logits.size() < 2) throw ValidationError("soft_class_probabilities: need at least 2 classes");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> w(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp((logits[i] - mx) / tau);
    z += w[i];
  }
  for (auto& v : w) v /= z;
  return DiscreteDistribution(std::move(w));
}

// ---------------------------------------------------------------------------
// Tape versions, evaluated independently at every position along `axis`.
// The result has `axis` removed.

/// Per-position KL(p || q) along `axis`. Both inputs must be strictly positive.
inline Var kl_divergence(Var p, Var q, std::size_t axis) {
  return sum(mul(p, sub(log(p), log(q))), {axis});
}

/// Per-position Hölder pseudo-divergence along `axis`.
inline Var holder_pseudo_divergence(Var p, Var q, const HolderParams& params, std::size_t axis) {
  const auto h = HolderParams::conjugate(params.alpha, params.gamma);
  Var cross = log(sum(mul(p, q), {axis}));
  Var p_norm = scale(log(sum(pow(p, h.alpha), {axis})), 1.0 / h.alpha);
  Var q_norm = scale(log(sum(pow(q, h.beta), {axis})), 1.0 / h.beta);
  Var gap = sub(add(p_norm, q_norm), cross);
  return h.regime == HolderRegime::standard ? gap : scale(gap, -1.0);
}

}  // namespace mpae
