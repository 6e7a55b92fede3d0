#pragma once

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mpae/autodiff.hpp"
#include "mpae/divergence.hpp"
#include "mpae/masking.hpp"
#include "mpae/model.hpp"
#include "mpae/random.hpp"
#include "mpae/seg_loss.hpp"

// Self-check suites behind the `gradcheck` and `divcheck` subcommands.

namespace mpae::checks {

struct CheckResult {
  std::string name;
  double value = 0.0;      // worst error observed
  double tolerance = 0.0;  // pass iff value <= tolerance (or < for strict)
  bool passed = false;
};

inline Tensor random_normal(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

inline Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Entries ~ N(0,1) pushed at least `gap` away from zero, for ops with a kink there.
inline Tensor away_from_zero(Shape shape, Rng& rng, double gap) {
  Tensor t = random_normal(std::move(shape), rng);
  for (auto& v : t.data()) v = v >= 0 ? v + gap : v - gap;
  return t;
}

// ---------------------------------------------------------------------------
// gradcheck

namespace detail {

// Contracts an op output with fixed random weights so every coordinate of
// the gradient is generic (a bare sum would make e.g. softmax's gradient 0).
inline Var project(Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_normal(y.shape(), rng);
  return sum(mul(y, y.tape().constant(std::move(w))));
}

struct GradCase {
  std::string name;
  double tolerance;
  std::size_t trials;
  std::function<Tensor(Rng&)> point;
  std::function<Var(Var, std::uint64_t)> fn;
};

inline LabelVolume random_labels(Shape extents, std::size_t classes, Rng& rng) {
  LabelVolume l{extents, std::vector<std::uint8_t>(numel(extents)), classes};
  for (auto& v : l.labels) v = static_cast<std::uint8_t>(rng.below(classes));
  return l;
}

inline std::vector<GradCase> op_cases() {
  constexpr double tol = 1e-4;
  constexpr std::size_t n = 10;
  auto normal = [](Shape s) { return [s](Rng& r) { return random_normal(s, r); }; };
  auto positive = [](Shape s) { return [s](Rng& r) { return random_uniform(s, r, 0.2, 2.0); }; };
  auto kinked = [](Shape s) { return [s](Rng& r) { return away_from_zero(s, r, 0.05); }; };
  const Shape s{3, 4};
  // Second operands are drawn from the trial seed so each trial differs.
  auto other = [](Shape sh, std::uint64_t seed) {
    Rng r(seed ^ 0xABCDEFu);
    return random_normal(sh, r);
  };
  std::vector<GradCase> c;
  c.push_back({"add", tol, n, normal(s), [=](Var x, std::uint64_t k) { return project(add(x, x.tape().constant(other(s, k))), k); }});
  c.push_back({"sub", tol, n, normal(s), [=](Var x, std::uint64_t k) { return project(sub(x.tape().constant(other(s, k)), x), k); }});
  c.push_back({"mul", tol, n, normal(s), [=](Var x, std::uint64_t k) { return project(mul(x, x.tape().constant(other(s, k))), k); }});
  c.push_back({"mul-self", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(mul(x, x), k); }});
  c.push_back({"matmul-left", tol, n, normal(s),
               [=](Var x, std::uint64_t k) { return project(matmul(x, x.tape().constant(other(Shape{4, 5}, k))), k); }});
  c.push_back({"matmul-right", tol, n, normal(Shape{4, 5}),
               [=](Var x, std::uint64_t k) { return project(matmul(x.tape().constant(other(s, k)), x), k); }});
  c.push_back({"matmul-batched", tol, n, normal(Shape{2, 3, 4}),
               [=](Var x, std::uint64_t k) { return project(matmul(x, x.tape().constant(other(Shape{2, 4, 3}, k))), k); }});
  c.push_back({"scale", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(scale(x, -1.7), k); }});
  c.push_back({"exp", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(exp(x), k); }});
  c.push_back({"log", tol, n, positive(s), [](Var x, std::uint64_t k) { return project(log(x), k); }});
  c.push_back({"pow-real", tol, n, positive(s), [](Var x, std::uint64_t k) { return project(pow(x, 1.6), k); }});
  c.push_back({"pow-negative", tol, n, positive(s), [](Var x, std::uint64_t k) { return project(pow(x, -0.5), k); }});
  c.push_back({"pow-integer", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(pow(x, 3.0), k); }});
  c.push_back({"sqrt", tol, n, positive(s), [](Var x, std::uint64_t k) { return project(sqrt(x), k); }});
  c.push_back({"relu", tol, n, kinked(s), [](Var x, std::uint64_t k) { return project(relu(x), k); }});
  c.push_back({"abs", tol, n, kinked(s), [](Var x, std::uint64_t k) { return project(abs(x), k); }});
  c.push_back({"sigmoid", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(sigmoid(x), k); }});
  c.push_back({"gelu", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(gelu(x), k); }});
  c.push_back({"softmax-axis0", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(softmax(x, 0), k); }});
  c.push_back({"softmax-axis1", tol, n, normal(Shape{2, 3, 4}), [](Var x, std::uint64_t k) { return project(softmax(x, 1), k); }});
  c.push_back({"layer-norm", tol, n, normal(Shape{3, 6}), [](Var x, std::uint64_t k) { return project(layer_norm(x, 1), k); }});
  c.push_back({"layer-norm-axis0", tol, n, normal(Shape{5, 2}), [](Var x, std::uint64_t k) { return project(layer_norm(x, 0), k); }});
  c.push_back({"sum-axes", tol, n, normal(Shape{2, 3, 4}), [](Var x, std::uint64_t k) { return project(sum(x, {0, 2}), k); }});
  c.push_back({"mean-axes", tol, n, normal(Shape{2, 3, 4}), [](Var x, std::uint64_t k) { return project(mean(x, {1}), k); }});
  c.push_back({"mean-all", tol, n, normal(s), [](Var x, std::uint64_t) { return scale(mean(mul(x, x)), 3.0); }});
  c.push_back({"reshape", tol, n, normal(s), [](Var x, std::uint64_t k) { return project(reshape(x, Shape{2, 6}), k); }});
  c.push_back({"permute", tol, n, normal(Shape{2, 3, 4}), [](Var x, std::uint64_t k) { return project(permute(x, {2, 0, 1}), k); }});
  c.push_back({"concat", tol, n, normal(s),
               [=](Var x, std::uint64_t k) { return project(concat({x, x.tape().constant(other(Shape{3, 2}, k)), x}, 1), k); }});
  c.push_back({"gather", tol, n, normal(s), [](Var x, std::uint64_t k) {
                 Rng r(k);
                 auto idx = std::make_shared<std::vector<std::size_t>>(20);
                 for (auto& i : *idx) i = static_cast<std::size_t>(r.below(12));
                 return project(gather(x, idx, Shape{4, 5}), k);
               }});
  c.push_back({"masked-select", tol, n, normal(s), [](Var x, std::uint64_t k) {
                 Rng r(k);
                 std::vector<std::uint8_t> m(12);
                 for (auto& b : m) b = static_cast<std::uint8_t>(r.below(2));
                 m[0] = 1;
                 return project(masked_select(x, m), k);
               }});
  return c;
}

inline std::vector<GradCase> loss_cases() {
  constexpr double tol = 1e-4;
  std::vector<GradCase> c;
  const Shape logits{4, 3, 3, 3};
  auto normal = [](Shape s) { return [s](Rng& r) { return random_normal(s, r); }; };
  c.push_back({"soft-dice-loss", tol, 10, normal(logits), [=](Var x, std::uint64_t k) {
                 Rng r(k);
                 return soft_dice_loss(softmax(x, 0), random_labels(Shape{3, 3, 3}, 4, r));
               }});
  for (auto kind : {KdKind::kl, KdKind::holder}) {
    c.push_back({std::string("kd-") + kd_kind_name(kind), tol, 10, normal(logits), [=](Var x, std::uint64_t k) {
                   Rng r(k);
                   Var teacher = x.tape().constant(random_normal(logits, r));
                   return pixelwise_kd_loss(x, teacher, 2.0, kind, HolderParams::conjugate(1.6));
                 }});
  }
  for (auto norm : {RecNorm::l1, RecNorm::l2}) {
    c.push_back({std::string("reconstruction-") + (norm == RecNorm::l1 ? "l1" : "l2"), tol, 10, normal(Shape{4, 4, 4, 4}),
                 [=](Var x, std::uint64_t k) {
                   Rng r(k);
                   MultiModalVolume target{random_normal(Shape{4, 4, 4, 4}, r), {}};
                   target.channels.assign(kCanonicalModalities.begin(), kCanonicalModalities.end());
                   // keep residuals away from the l1 kink
                   for (std::size_t i = 0; i < target.data.size(); ++i) {
                     const double d = x.value()[i] - target.data[i];
                     if (std::abs(d) < 0.05) target.data[i] -= d >= 0 ? 0.05 : -0.05;
                   }
                   const MaskSpec spec = sample_patch_mask({2, 2, 2}, 0.5, k, 2);
                   return masked_reconstruction_loss(x, target, spec, norm, RecScope::masked_plus_missing, {Modality::t1c});
                 }});
  }
  return c;
}

inline double worst_over_trials(const GradCase& gc, std::uint64_t seed, double step) {
  double worst = 0.0;
  for (std::size_t t = 0; t < gc.trials; ++t) {
    Rng rng = Rng::derive(seed, t, 17);
    const Tensor point = gc.point(rng);
    const std::uint64_t key = Rng::derive(seed, t, 18).next();
    worst = std::max(worst, grad_check([&](Var x) { return gc.fn(x, key); }, point, step));
  }
  return worst;
}

}  // namespace detail

/// Central-difference check of the finetune loss (Dice + Hoelder KD) through
/// the 8^3 model, w.r.t. the input volume and a spread of parameters.
/// The default step is coarser than the per-op one: input gradients here are
/// ~1e-8, so at 1e-5 the difference quotient is dominated by rounding in the
/// loss (its error grows as 1/step), while truncation at 1e-3 is still tiny.
inline std::vector<CheckResult> end_to_end_checks(std::uint64_t seed, double step = 1e-3, double tolerance = 1e-3) {
  ModelConfig cfg;
  const Model model(cfg, seed);
  const Model teacher(cfg, seed + 1);
  Rng rng = Rng::derive(seed, 99);
  const Tensor volume = random_normal(Shape{4, 8, 8, 8}, rng);
  const LabelVolume truth = detail::random_labels(Shape{8, 8, 8}, 4, rng);
  const Tensor teacher_logits = segment(teacher, volume);
  const HolderParams holder = HolderParams::conjugate(1.6);
  auto loss_for = [&](Tape& tape, const BoundParams& p, Var input) {
    Var logits = forward_segment(input, p);
    return finetune_loss(logits, truth, tape.constant(teacher_logits), 1.0, 1.0, KdKind::holder, holder);
  };
  std::vector<CheckResult> out;
  {
    const double e = grad_check(
        [&](Var x) {
          BoundParams p(x.tape(), model, false);
          return loss_for(x.tape(), p, x);
        },
        volume, step);
    out.push_back({"end-to-end/input", e, tolerance, e < tolerance});
  }
  for (const char* name : {"encoder.patch_embed.weight", "encoder.stage0.block0.attn.q.weight", "encoder.stage0.block0.norm1.weight",
                           "encoder.stage1.block0.mlp.fc1.bias", "encoder.merge0.weight", "decoder.up0.weight", "decoder.out.weight",
                           "decoder.out.bias"}) {
    const Tensor& point = model.param(name);
    // Large tensors are probed on a strided subset of coordinates.
    const std::size_t stride = std::max<std::size_t>(1, point.size() / 48);
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < point.size(); i += stride) coords.push_back(i);
    auto sel = std::make_shared<std::vector<std::size_t>>(coords);
    Tensor sub_point(Shape{coords.size()});
    for (std::size_t i = 0; i < coords.size(); ++i) sub_point[i] = point[coords[i]];
    const double e = grad_check(
        [&](Var x) {
          Tape& tape = x.tape();
          BoundParams p(tape, model, false);
          // Scatter the probed coordinates into the frozen tensor:
          // full = frozen * keep + gather(x) * take.
          Tensor keep(point.shape(), 1.0), take(point.shape(), 0.0);
          auto scatter = std::make_shared<std::vector<std::size_t>>(point.size(), 0);
          for (std::size_t i = 0; i < coords.size(); ++i) {
            keep[coords[i]] = 0.0;
            take[coords[i]] = 1.0;
            (*scatter)[coords[i]] = i;
          }
          Var spread = mul(gather(x, scatter, point.shape()), tape.constant(std::move(take)));
          Var full = add(mul(tape.constant(point), tape.constant(std::move(keep))), spread);
          p.rebind(name, full);
          return loss_for(tape, p, tape.constant(volume));
        },
        sub_point, step);
    out.push_back({std::string("end-to-end/") + name, e, tolerance, e < tolerance});
  }
  return out;
}

/// Every differentiable op and loss, 10 random points each.
inline std::vector<CheckResult> gradcheck_suite(std::uint64_t seed = 0, bool include_end_to_end = true) {
  std::vector<CheckResult> out;
  constexpr double step = 1e-5;
  for (const auto& cases : {detail::op_cases(), detail::loss_cases()}) {
    for (const auto& gc : cases) {
      const double e = detail::worst_over_trials(gc, seed, step);
      out.push_back({gc.name, e, gc.tolerance, e < gc.tolerance});
    }
  }
  if (include_end_to_end) {
    for (auto& r : end_to_end_checks(seed)) out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// divcheck

namespace reference {

using Real = boost::multiprecision::cpp_bin_float_50;

inline Real kl(const std::vector<double>& p, const std::vector<double>& q) {
  Real s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += Real(p[i]) * log(Real(p[i]) / Real(q[i]));
  }
  return s;
}

inline Real hpd(const std::vector<double>& p, const std::vector<double>& q, Real a) {
  const Real b = a / (a - 1);
  Real pq = 0, pa = 0, qb = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pq += Real(p[i]) * Real(q[i]);
    pa += pow(Real(p[i]), a);
    qb += pow(Real(q[i]), b);
  }
  return -log(pq / (pow(pa, 1 / a) * pow(qb, 1 / b)));
}

inline Real phd(const std::vector<double>& p, const std::vector<double>& q, Real a, Real g) {
  const Real b = a / (a - 1);
  Real num = 0, pg = 0, qg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    num += pow(Real(p[i]), g / a) * pow(Real(q[i]), g / b);
    pg += pow(Real(p[i]), g);
    qg += pow(Real(q[i]), g);
  }
  return -log(num / (pow(pg, 1 / a) * pow(qg, 1 / b)));
}

}  // namespace reference

/// A random strictly positive distribution on 2..16 points.
inline std::vector<double> random_distribution(Rng& rng, std::size_t n = 0) {
  if (n == 0) n = 2 + static_cast<std::size_t>(rng.below(15));
  std::vector<double> w(n);
  double total = 0.0;
  for (auto& v : w) {
    v = 0.01 + rng.uniform();
    total += v;
  }
  for (auto& v : w) v /= total;
  return w;
}

inline std::vector<CheckResult> divcheck_suite(std::uint64_t seed = 0) {
  std::vector<CheckResult> out;
  Rng rng = Rng::derive(seed, 31);
  auto record = [&](const std::string& name, double worst, double tol) { out.push_back({name, worst, tol, worst <= tol}); };
  {
    double w_kl = 0.0, w_hpd = 0.0, w_phd = 0.0;
    for (int t = 0; t < 200; ++t) {
      const auto pv = random_distribution(rng);
      const auto qv = random_distribution(rng, pv.size());
      const DiscreteDistribution p(pv), q(qv);
      w_kl = std::max(w_kl, std::abs(kl_divergence(p, q) - reference::kl(pv, qv).convert_to<double>()));
      for (double a : {1.1, 1.5, 1.6, 2.0, 4.0}) {
        const auto h = HolderParams::conjugate(a);
        w_hpd = std::max(w_hpd, std::abs(holder_pseudo_divergence(p, q, h) - reference::hpd(pv, qv, a).convert_to<double>()));
        w_phd = std::max(w_phd, std::abs(proper_holder_divergence(p, q, h) - reference::phd(pv, qv, a, 1).convert_to<double>()));
      }
    }
    record("oracle/kl", w_kl, 1e-9);
    record("oracle/hpd", w_hpd, 1e-9);
    record("oracle/phd", w_phd, 1e-9);
  }
  {
    double w_cs = 0.0, w_bh = 0.0;
    for (int t = 0; t < 100; ++t) {
      const auto pv = random_distribution(rng);
      const DiscreteDistribution p(pv), q(random_distribution(rng, pv.size()));
      const auto two = HolderParams::conjugate(2.0);
      w_cs = std::max(w_cs, std::abs(holder_pseudo_divergence(p, q, two) - cauchy_schwarz_divergence(p, q)));
      w_bh = std::max(w_bh, std::abs(proper_holder_divergence(p, q, two) - bhattacharyya_distance(p, q)));
    }
    record("identity/hpd2=cauchy-schwarz", w_cs, 1e-12);
    record("identity/phd2=bhattacharyya", w_bh, 1e-12);
  }
  {
    double neg = 0.0, proj = 0.0, skew = 0.0, eq = 0.0;
    for (int t = 0; t < 200; ++t) {
      const auto pv = random_distribution(rng);
      const auto qv = random_distribution(rng, pv.size());
      const double a = 1.1 + 3.0 * rng.uniform();
      const auto h = HolderParams::conjugate(a);
      const DiscreteDistribution p(pv), q(qv);
      const double d = holder_pseudo_divergence(p, q, h);
      neg = std::max(neg, -std::min(d, proper_holder_divergence(p, q, h)));
      const double sp = 0.1 + 10.0 * rng.uniform(), sq = 0.1 + 10.0 * rng.uniform();
      std::vector<double> ps = pv, qs = qv;
      for (auto& v : ps) v *= sp;
      for (auto& v : qs) v *= sq;
      proj = std::max(proj, std::abs(holder_pseudo_divergence(DiscreteDistribution(ps), DiscreteDistribution(qs), h) - d));
      const auto swapped = HolderParams::conjugate(h.beta);
      skew = std::max(skew, std::abs(holder_pseudo_divergence(q, p, swapped) - d));
      std::vector<double> r(pv.size());
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::pow(pv[i], h.alpha / h.beta);
      eq = std::max(eq, holder_pseudo_divergence(p, DiscreteDistribution::normalize(r), h));
    }
    record("property/non-negativity", neg, 1e-12);
    record("property/projectivity", proj, 1e-9);
    record("property/skew-symmetry", skew, 1e-9);
    record("property/equality-condition", eq, 1e-10);
  }
  return out;
}

}  // namespace mpae::checks
