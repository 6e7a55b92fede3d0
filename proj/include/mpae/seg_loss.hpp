#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mpae/autodiff.hpp"
#include "mpae/divergence.hpp"
#include "mpae/volume.hpp"

namespace mpae {

inline constexpr double kDiceSmoothing = 1e-5;

enum class KdKind { none, kl, holder };

inline KdKind parse_kd_kind(const std::string& s) {
  if (s == "none") return KdKind::none;
  if (s == "kl") return KdKind::kl;
  if (s == "holder") return KdKind::holder;
  throw ValidationError("unknown distillation kind '" + s + "' (expected none, kl or holder)");
}

inline const char* kd_kind_name(KdKind k) {
  switch (k) {
    case KdKind::none: return "none";
    case KdKind::kl: return "kl";
    case KdKind::holder: return "holder";
  }
  return "?";
}

namespace detail {

inline std::size_t spatial_size(const Shape& s) {
  std::size_t v = 1;
  for (std::size_t i = 1; i < s.size(); ++i) v *= s[i];
  return v;
}

inline void require_class_volume(const Shape& s, const char* op) {
  if (s.size() < 2 || s[0] < 2) throw ShapeError(std::string(op) + ": expected a J x spatial volume with J >= 2, got " + to_string(s));
}

}  // namespace detail

/// One-hot encoding of labels as a J x V tensor.
inline Tensor one_hot(const LabelVolume& truth, std::size_t classes) {
  Tensor g(Shape{classes, truth.voxels()});
  for (std::size_t i = 0; i < truth.voxels(); ++i) {
    if (truth.labels[i] >= classes) throw ValidationError("one_hot: label " + std::to_string(truth.labels[i]) + " >= J");
    g[truth.labels[i] * truth.voxels() + i] = 1.0;
  }
  return g;
}

/// 1 - (2/J) sum_j (sum_i G Y + eps/2) / (sum_i G^2 + sum_i Y^2 + eps), with
/// `probabilities` a J x spatial volume already normalized over classes.
/// Each ratio is at most 1/2 (AM-GM); the halved numerator smoothing keeps
/// that bound, so an absent class predicted as zero scores exactly what a
/// perfectly predicted present class does, and the loss stays in [0, 1].
inline Var soft_dice_loss(Var probabilities, const LabelVolume& truth) {
  const auto& s = probabilities.shape();
  detail::require_class_volume(s, "soft_dice_loss");
  const std::size_t classes = s[0];
  const std::size_t voxels = detail::spatial_size(s);
  if (voxels != truth.voxels() || (s.size() == 4 && Shape(s.begin() + 1, s.end()) != truth.extents)) {
    throw ShapeError("soft_dice_loss: shape mismatch " + to_string(s) + " vs labels " + to_string(truth.extents));
  }
  Tape& tape = probabilities.tape();
  Var y = reshape(probabilities, Shape{classes, voxels});
  Tensor g = one_hot(truth, classes);
  Tensor g_sq_sum(Shape{classes});
  for (std::size_t j = 0; j < classes; ++j) {
    for (std::size_t i = 0; i < voxels; ++i) g_sq_sum[j] += g[j * voxels + i];
  }
  Var inter = sum(mul(y, tape.constant(std::move(g))), {1});
  Var y_sq = sum(mul(y, y), {1});
  Var num = add(inter, tape.constant(Shape{classes}, kDiceSmoothing / 2.0));
  for (auto& v : g_sq_sum.data()) v += kDiceSmoothing;
  Var den = add(y_sq, tape.constant(std::move(g_sq_sum)));
  Var ratio = sum(mul(num, pow(den, -1.0)));
  return add(tape.constant(Shape{1}, 1.0), scale(ratio, -2.0 / static_cast<double>(classes)));
}

/// 2|A and B| / (|A| + |B|); 1.0 when both masks are empty.
inline double dice_score(const std::vector<std::uint8_t>& prediction, const std::vector<std::uint8_t>& truth) {
  if (prediction.size() != truth.size()) {
    throw ShapeError("dice_score: mask sizes " + std::to_string(prediction.size()) + " vs " + std::to_string(truth.size()));
  }
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = prediction[i] != 0, t = truth[i] != 0;
    inter += p && t;
    a += p;
    b += t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

/// Nested evaluation regions: ET within TC within WT.
struct RegionMasks {
  std::vector<std::uint8_t> whole_tumor;
  std::vector<std::uint8_t> tumor_core;
  std::vector<std::uint8_t> enhancing_tumor;
};

inline RegionMasks region_decompose(const LabelVolume& labels) {
  RegionMasks r;
  const std::size_t n = labels.voxels();
  r.whole_tumor.resize(n);
  r.tumor_core.resize(n);
  r.enhancing_tumor.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<TissueClass>(labels.labels[i]);
    r.whole_tumor[i] = c != TissueClass::background;
    r.tumor_core[i] = c == TissueClass::necrotic || c == TissueClass::enhancing;
    r.enhancing_tumor[i] = c == TissueClass::enhancing;
  }
  return r;
}

/// Mean over voxels of Div(softmax(student/tau) : softmax(teacher/tau)),
/// student first. The teacher is detached: no gradient reaches it.
inline Var pixelwise_kd_loss(Var student, Var teacher, double tau, KdKind kind, const HolderParams& params = {}) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("pixelwise_kd_loss: shape mismatch " + to_string(student.shape()) + " vs " + to_string(teacher.shape()));
  }
  detail::require_class_volume(student.shape(), "pixelwise_kd_loss");
  if (!(tau > 0.0)) throw DomainError("pixelwise_kd_loss: tau must be positive, got " + std::to_string(tau));
  Tape& tape = student.tape();
  Var p = softmax(scale(student, 1.0 / tau), 0);
  Var frozen = tape.constant(teacher.value());
  Var q = softmax(scale(frozen, 1.0 / tau), 0);
  switch (kind) {
    case KdKind::kl: return mean(kl_divergence(p, q, 0));
    case KdKind::holder: return mean(holder_pseudo_divergence(p, q, params, 0));
    case KdKind::none: break;
  }
  throw ValidationError("pixelwise_kd_loss: distillation kind 'none' has no loss");
}

/// Dice on softmax(logits), plus w * distillation when a teacher is given.
inline Var finetune_loss(Var logits, const LabelVolume& truth, std::optional<Var> teacher, double w, double tau,
                         KdKind kind, const HolderParams& params = {}) {
  Var dice = soft_dice_loss(softmax(logits, 0), truth);
  if (!teacher || kind == KdKind::none) return dice;
  if (teacher->shape()[0] != logits.shape()[0]) {
    throw ValidationError("finetune_loss: teacher has " + std::to_string(teacher->shape()[0]) + " classes, student " +
                          std::to_string(logits.shape()[0]));
  }
  return add(dice, scale(pixelwise_kd_loss(logits, *teacher, tau, kind, params), w));
}

}  // namespace mpae
