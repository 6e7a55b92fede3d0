#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mpae/tensor.hpp"

namespace mpae {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records operations in execution order (which is a topological order) and
/// runs reverse-mode differentiation over them.
///
/// Leaf gradients accumulate across backward() calls; interior gradients are
/// recomputed on every call. Callers reset with reset_grads() between steps.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, requires_grad, true});
    return Var(this, nodes_.size() - 1);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(Shape shape, double fill) { return leaf(Tensor(std::move(shape), fill), false); }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool any = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      ids.push_back(in.id());
      any = any || nodes_[in.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(ids), any ? std::move(fn) : nullptr, any, false});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated zero-filled on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  const std::vector<double>* grad_if_any(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  bool has_grad(Var v) const { return grad_if_any(v.id()) != nullptr; }

  /// Gradient of any node after backward(); zeros when nothing reached it.
  Tensor grad(Var v) const {
    const auto& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return Tensor(n.value.shape(), n.grad);
  }

  void reset_grads() {
    for (auto& n : nodes_) n.grad.clear();
  }

  void backward(Var loss) {
    if (loss.shape() != Shape{1}) {
      throw ShapeError("backward: loss must have shape [1], got " + to_string(loss.shape()));
    }
    for (auto& n : nodes_) {
      if (!n.leaf) n.grad.clear();
    }
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] += 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.leaf || !n.backward || n.grad.empty()) continue;
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool leaf = false;
  };

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

/// Shared, immutable index map for gather-style ops (window partition,
/// upsampling, patch extraction). Reused across steps without copying.
using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;

enum class OpKind {
  add,
  sub,
  mul,
  matmul,
  scale,
  exp,
  log,
  pow,
  softmax,
  layer_norm,
  gelu,
  relu,
  sigmoid,
  abs,
  sum,
  mean,
  reshape,
  permute,
  concat,
  gather,
  masked_select,
  sqrt,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::scale: return "scale";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::pow: return "pow";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer-norm";
    case OpKind::gelu: return "gelu";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::abs: return "abs";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::concat: return "concat";
    case OpKind::gather: return "index-permute";
    case OpKind::masked_select: return "masked-select";
    case OpKind::sqrt: return "sqrt";
  }
  return "?";
}

struct OpAttrs {
  double scalar = 1.0;                // scale factor, or exponent for pow
  std::size_t axis = 0;               // softmax, layer_norm, concat
  std::vector<std::size_t> axes;      // sum/mean axes (empty = all), permute order
  Shape shape;                        // reshape target, gather output shape
  IndexMap index;                     // gather source index per output element
  std::vector<std::uint8_t> mask;     // masked_select
  double eps = 1e-5;                  // layer_norm
};

namespace detail {

inline void require_same_tape(std::span<const Var> in, const char* op) {
  for (const auto& v : in) {
    if (&v.tape() != &in[0].tape()) throw Error(std::string(op) + ": inputs live on different tapes");
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// Elementwise unary op: forward f(x), derivative df(x, y).
template <class F, class DF>
Var unary(Var x, F f, DF df) {
  const auto& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id();
  Var in[] = {x};
  return x.tape().record(std::move(out), in, [xid, df](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const auto& g = *t.grad_if_any(self);
    const auto& xv = t.value(xid);
    const auto& yv = t.value(self);
    auto& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

// Splits a shape around one axis into (outer, n, inner).
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline void matmul_kernel(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (exact shape match, no broadcasting)

inline Var add(Var a, Var b) {
  Var in[] = {a, b};
  detail::require_same_tape(in, "add");
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), in, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& gx = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Var in[] = {a, b};
  detail::require_same_tape(in, "sub");
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), in, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    if (t.requires_grad(ia)) {
      auto& gx = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gx = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Var in[] = {a, b};
  detail::require_same_tape(in, "mul");
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), in, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    const auto &av = t.value(ia), &bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& gx = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gx = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * av[i];
    }
  });
}

/// [M,K]x[K,N] -> [M,N], or batched [B,M,K]x[B,K,N] -> [B,M,N].
inline Var matmul(Var a, Var b) {
  Var in[] = {a, b};
  detail::require_same_tape(in, "matmul");
  const auto &sa = a.shape(), &sb = b.shape();
  const bool ok2 = sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0];
  const bool ok3 = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1];
  if (!ok2 && !ok3) throw ShapeError("matmul: shape mismatch " + to_string(sa) + " vs " + to_string(sb));
  const std::size_t batch = ok3 ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  Tensor out(ok3 ? Shape{batch, m, n} : Shape{m, n});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::matmul_kernel(a.value().data().data() + bi * m * k, b.value().data().data() + bi * k * n,
                          out.data().data() + bi * m * n, m, k, n);
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), in, [ia, ib, batch, m, k, n](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    const auto& av = t.value(ia).data();
    const auto& bv = t.value(ib).data();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* gp = g.data() + bi * m * n;
        const double* bp = bv.data() + bi * k * n;
        double* gap = ga.data() + bi * m * k;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += gp[i * n + j] * bp[p * n + j];
            gap[i * k + p] += s;
          }
        }
      }
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* gp = g.data() + bi * m * n;
        const double* ap = av.data() + bi * m * k;
        double* gbp = gb.data() + bi * k * n;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aval = ap[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gbp[p * n + j] += aval * gp[i * n + j];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

inline Var scale(Var x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var exp(Var x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
  for (double v : x.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var pow(Var x, double e) {
  const bool integral = std::floor(e) == e;
  for (double v : x.value().data()) {
    if ((!integral && v < 0.0) || (e < 0.0 && v == 0.0)) {
      throw DomainError("pow: input " + std::to_string(v) + " outside the domain of exponent " + std::to_string(e));
    }
  }
  return detail::unary(
      x, [e](double v) { return std::pow(v, e); }, [e](double v, double) { return e * std::pow(v, e - 1.0); });
}

inline Var sqrt(Var x) {
  for (double v : x.value().data()) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Var relu(Var x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var abs(Var x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); }, [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

/// Exact (erf) GELU.
inline Var gelu(Var x) {
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

// ---------------------------------------------------------------------------
// Axis ops

/// Max-subtracted softmax along one axis.
inline Var softmax(Var x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  std::size_t outer, n, inner;
  detail::split_axis(s, axis, outer, n, inner);
  const auto& xv = x.value();
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  }
  const auto ix = x.id();
  Var in[] = {x};
  return x.tape().record(std::move(out), in, [ix, outer, n, inner](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t j = base + k * inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
    }
  });
}

/// Normalizes to zero mean and unit variance along one axis (no affine part).
inline Var layer_norm(Var x, std::size_t axis, double eps = 1e-5) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("layer-norm: axis " + std::to_string(axis) + " out of range for " + to_string(s));
  std::size_t outer, n, inner;
  detail::split_axis(s, axis, outer, n, inner);
  const auto& xv = x.value();
  Tensor out(s);
  auto inv_sigma = std::make_shared<std::vector<double>>(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mu = 0.0;
      for (std::size_t k = 0; k < n; ++k) mu += xv[base + k * inner];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double d = xv[base + k * inner] - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_sigma)[o * inner + i] = is;
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] = (xv[base + k * inner] - mu) * is;
    }
  }
  const auto ix = x.id();
  Var in[] = {x};
  return x.tape().record(std::move(out), in, [ix, outer, n, inner, inv_sigma](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_buffer(ix);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double gm = 0.0, gy = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          gm += g[base + k * inner];
          gy += g[base + k * inner] * y[base + k * inner];
        }
        gm *= inv_n;
        gy *= inv_n;
        const double is = (*inv_sigma)[o * inner + i];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t j = base + k * inner;
          gx[j] += is * (g[j] - gm - y[j] * gy);
        }
      }
    }
  });
}

namespace detail {

// For each input element, the flat index of the output element it reduces into.
inline std::shared_ptr<std::vector<std::size_t>> reduction_map(const Shape& s, const std::vector<bool>& reduce,
                                                               Shape& out_shape) {
  out_shape.clear();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!reduce[i]) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Shape kept_extents;
  std::vector<std::size_t> kept_axes;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!reduce[i]) kept_axes.push_back(i);
  }
  auto map = std::make_shared<std::vector<std::size_t>>(numel(s));
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < map->size(); ++flat) {
    std::size_t o = 0;
    for (auto ax : kept_axes) o = o * s[ax] + idx[ax];
    (*map)[flat] = o;
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++idx[d] < s[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

inline Var reduce(Var x, std::vector<std::size_t> axes, bool average, const char* op) {
  const auto& s = x.shape();
  std::vector<bool> red(s.size(), axes.empty());
  for (auto a : axes) {
    if (a >= s.size()) throw ShapeError(std::string(op) + ": axis " + std::to_string(a) + " out of range for " + to_string(s));
    red[a] = true;
  }
  Shape out_shape;
  auto map = reduction_map(s, red, out_shape);
  Tensor out(out_shape);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) out[(*map)[i]] += xv[i];
  const double factor = average ? static_cast<double>(out.size()) / static_cast<double>(xv.size()) : 1.0;
  if (average) {
    for (auto& v : out.data()) v *= factor;
  }
  const auto ix = x.id();
  Var in[] = {x};
  return x.tape().record(std::move(out), in, [ix, map, factor](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[(*map)[i]];
  });
}

}  // namespace detail

/// Sums over the given axes (all axes when empty). Reduced axes are removed;
/// a full reduction has shape [1].
inline Var sum(Var x, std::vector<std::size_t> axes = {}) { return detail::reduce(x, std::move(axes), false, "sum"); }
inline Var mean(Var x, std::vector<std::size_t> axes = {}) { return detail::reduce(x, std::move(axes), true, "mean"); }

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  Var in[] = {x};
  return x.tape().record(std::move(out), in, [ix](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// out[i] = x[index[i]] with the given output shape. The map need not be a
/// bijection; repeated sources accumulate gradient.
inline Var gather(Var x, IndexMap index, Shape out_shape) {
  if (!index || index->size() != numel(out_shape)) {
    throw ShapeError("index-permute: map size does not match output shape " + to_string(out_shape));
  }
  const auto& xv = x.value();
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto src = (*index)[i];
    if (src >= xv.size()) {
      throw ShapeError("index-permute: source index " + std::to_string(src) + " out of range for " + to_string(xv.shape()));
    }
    out[i] = xv[src];
  }
  const auto ix = x.id();
  Var in[] = {x};
  return x.tape().record(std::move(out), in, [ix, index](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    auto& gx = t.grad_buffer(ix);
    const auto& m = *index;
    for (std::size_t i = 0; i < g.size(); ++i) gx[m[i]] += g[i];
  });
}

inline IndexMap permute_map(const Shape& s, const std::vector<std::size_t>& order, Shape& out_shape) {
  if (order.size() != s.size()) {
    throw ShapeError("permute: order of length " + std::to_string(order.size()) + " for " + to_string(s));
  }
  std::vector<bool> seen(s.size(), false);
  out_shape.resize(s.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= s.size() || seen[order[i]]) throw ShapeError("permute: invalid axis order for " + to_string(s));
    seen[order[i]] = true;
    out_shape[i] = s[order[i]];
  }
  const auto in_strides = strides_of(s);
  auto map = std::make_shared<std::vector<std::size_t>>(numel(s));
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < map->size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < s.size(); ++d) src += idx[d] * in_strides[order[d]];
    (*map)[flat] = src;
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

inline Var permute(Var x, const std::vector<std::size_t>& order) {
  Shape out_shape;
  auto map = permute_map(x.shape(), order, out_shape);
  return gather(x, std::move(map), std::move(out_shape));
}

inline Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  detail::require_same_tape(xs, "concat");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat: shape mismatch " + to_string(s0) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer, n, inner;
  detail::split_axis(out_shape, axis, outer, n, inner);
  Tensor out(out_shape);
  std::vector<std::size_t> offsets, ids;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t nx = x.shape()[axis];
    const auto& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(o * nx * inner), nx * inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * n * inner + off * inner));
    }
    offsets.push_back(off);
    ids.push_back(x.id());
    off += nx;
  }
  return xs[0].tape().record(std::move(out), xs, [ids, offsets, outer, n, inner](Tape& t, std::size_t self) {
    const auto& g = *t.grad_if_any(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      auto& gx = t.grad_buffer(ids[k]);
      const std::size_t nx = gx.size() / (outer * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < nx * inner; ++j) gx[o * nx * inner + j] += g[o * n * inner + offsets[k] * inner + j];
      }
    }
  });
}

inline Var concat(std::initializer_list<Var> xs, std::size_t axis) {
  return concat(std::span<const Var>(xs.begin(), xs.size()), axis);
}

/// Selects the elements where mask != 0 into a rank-1 tensor.
inline Var masked_select(Var x, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != x.value().size()) {
    throw ShapeError("masked-select: mask of " + std::to_string(mask.size()) + " elements vs " + to_string(x.shape()));
  }
  auto map = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) map->push_back(i);
  }
  if (map->empty()) throw ShapeError("masked-select: empty selection on " + to_string(x.shape()));
  const std::size_t count = map->size();
  return gather(x, std::move(map), Shape{count});
}

// ---------------------------------------------------------------------------
// Generic dispatcher

inline Var apply(OpKind kind, std::span<const Var> in, const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::scale: need(1); return scale(in[0], attrs.scalar);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::pow: need(1); return pow(in[0], attrs.scalar);
    case OpKind::softmax: need(1); return softmax(in[0], attrs.axis);
    case OpKind::layer_norm: need(1); return layer_norm(in[0], attrs.axis, attrs.eps);
    case OpKind::gelu: need(1); return gelu(in[0]);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::abs: need(1); return abs(in[0]);
    case OpKind::sum: need(1); return sum(in[0], attrs.axes);
    case OpKind::mean: need(1); return mean(in[0], attrs.axes);
    case OpKind::reshape: need(1); return reshape(in[0], attrs.shape);
    case OpKind::permute: need(1); return permute(in[0], attrs.axes);
    case OpKind::concat: return concat(in, attrs.axis);
    case OpKind::gather: need(1); return gather(in[0], attrs.index, attrs.shape);
    case OpKind::masked_select: need(1); return masked_select(in[0], attrs.mask);
    case OpKind::sqrt: need(1); return sqrt(in[0]);
  }
  throw Error("apply: unknown op kind");
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// Row-broadcast helper built from catalog ops: ones[N,1] x row[1,K] -> [N,K].
inline Var repeat_rows(Var row, std::size_t n) {
  const auto& s = row.shape();
  Var r = s.size() == 1 ? reshape(row, Shape{1, s[0]}) : row;
  return matmul(row.tape().constant(Shape{n, 1}, 1.0), r);
}

// ---------------------------------------------------------------------------
// Finite-difference verification

using ScalarFn = std::function<Var(Var)>;

/// Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
/// Any non-finite intermediate yields +inf.
inline double grad_check(const ScalarFn& f, const Tensor& point, double step) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (!(step > 0.0)) throw ValidationError("grad_check: step must be positive");
  std::vector<double> analytic;
  {
    Tape tape;
    Var x = tape.leaf(point, true);
    Var y = f(x);
    if (!std::isfinite(y.value().item())) return inf;
    tape.backward(y);
    analytic = tape.grad(x).data();
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    return f(tape.constant(p)).value().item();
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = eval(probe);
    probe[i] = point[i] - step;
    const double down = eval(probe);
    probe[i] = point[i];
    const double central = (up - down) / (2.0 * step);
    if (!std::isfinite(central) || !std::isfinite(analytic[i])) return inf;
    const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - central) / denom);
  }
  return worst;
}

}  // namespace mpae
