#pragma once

#include <algorithm>
#include <array>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mpae/autodiff.hpp"
#include "mpae/random.hpp"
#include "mpae/volume.hpp"

namespace mpae {

enum class MaskMode { table, linear };
enum class RecNorm { l1, l2 };
enum class RecScope { masked_only, masked_plus_missing };

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "table") return MaskMode::table;
  if (s == "linear") return MaskMode::linear;
  throw ValidationError("unknown mask mode '" + s + "' (expected table or linear)");
}

inline RecScope parse_rec_scope(const std::string& s) {
  if (s == "masked_only") return RecScope::masked_only;
  if (s == "masked_plus_missing") return RecScope::masked_plus_missing;
  throw ValidationError("unknown reconstruction scope '" + s + "' (expected masked_only or masked_plus_missing)");
}

inline RecNorm parse_rec_norm(const std::string& s) {
  if (s == "l1") return RecNorm::l1;
  if (s == "l2") return RecNorm::l2;
  throw ValidationError("unknown reconstruction norm '" + s + "' (expected l1 or l2)");
}

/// Linear schedule p = k m + b through (0, 0.75) and (3, 0.5).
inline constexpr double kMaskSlope = -1.0 / 12.0;
inline constexpr double kMaskIntercept = 0.75;

/// Mask ratio for m missing modalities. The table is the measured optimum
/// per m; the linear fit only matches it at m = 0 and m = 3.
inline double mask_ratio_for_missing(std::size_t missing, MaskMode mode = MaskMode::table) {
  if (missing > 3) throw ValidationError("mask ratio: missing modality count " + std::to_string(missing) + " outside [0, 3]");
  if (mode == MaskMode::table) {
    constexpr std::array<double, 4> table = {0.75, 0.65, 0.60, 0.50};
    return table[missing];
  }
  // k m + b written as b - 0.25 m / 3 so the m = 3 anchor lands on 0.5 exactly.
  return kMaskIntercept - 0.25 * static_cast<double>(missing) / 3.0;
}

struct PatchGrid {
  std::size_t depth = 1, height = 1, width = 1;
  std::size_t count() const { return depth * height * width; }
  bool operator==(const PatchGrid&) const = default;
};

/// One boolean per patch of the grid; the same mask covers every channel.
struct MaskSpec {
  std::size_t patch_size = 2;
  PatchGrid grid;
  std::vector<std::uint8_t> masked;
  double ratio = 0.0;  // realized fraction of masked patches
  double k = kMaskSlope;
  double b = kMaskIntercept;

  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), 1)); }
  bool operator==(const MaskSpec&) const = default;
};

inline MaskSpec empty_mask(PatchGrid grid, std::size_t patch_size) {
  MaskSpec s;
  s.patch_size = patch_size;
  s.grid = grid;
  s.masked.assign(grid.count(), 0);
  return s;
}

/// Masks exactly round(ratio * #patches) patches (ties to even), chosen
/// uniformly without replacement from a seeded stream.
inline MaskSpec sample_patch_mask(PatchGrid grid, double ratio, std::uint64_t seed, std::size_t patch_size = 2) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ValidationError("sample_patch_mask: ratio must lie in [0, 1)");
  MaskSpec spec = empty_mask(grid, patch_size);
  const std::size_t n = grid.count();
  const auto count = static_cast<std::size_t>(std::nearbyint(ratio * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(order[i], order[j]);
    spec.masked[order[i]] = 1;
  }
  spec.ratio = static_cast<double>(count) / static_cast<double>(n);
  return spec;
}

/// Replaces the rows of masked patches in an N x S token matrix by the
/// learnable mask token (shape [S] or [1,S]).
inline Var apply_mask_tokens(Var tokens, const MaskSpec& spec, Var mask_token) {
  const auto& s = tokens.shape();
  if (s.size() != 2 || s[0] != spec.masked.size()) {
    throw ShapeError("apply_mask_tokens: " + to_string(s) + " tokens vs " + std::to_string(spec.masked.size()) + " patches");
  }
  if (mask_token.value().size() != s[1]) {
    throw ShapeError("apply_mask_tokens: mask token " + to_string(mask_token.shape()) + " vs token width " + std::to_string(s[1]));
  }
  const std::size_t n = s[0], width = s[1];
  Tensor keep(s, 1.0), take(s, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!spec.masked[i]) continue;
    for (std::size_t j = 0; j < width; ++j) {
      keep[i * width + j] = 0.0;
      take[i * width + j] = 1.0;
    }
  }
  Tape& tape = tokens.tape();
  Var kept = mul(tokens, tape.constant(std::move(keep)));
  Var filled = mul(repeat_rows(mask_token, n), tape.constant(std::move(take)));
  return add(kept, filled);
}

/// Reassembles the full-modality target from disjoint visible and missing
/// parts, channels in canonical order.
inline MultiModalVolume reconstruction_target(const MultiModalVolume& visible, const MultiModalVolume* missing) {
  const Shape& vs = visible.data.shape();
  ModalitySet have = visible.modalities();
  if (have.count() != visible.channels.size()) throw ValidationError("reconstruction_target: duplicate visible channel");
  if (missing) {
    const Shape& ms = missing->data.shape();
    if (ms.size() != 4 || vs.size() != 4 || !std::equal(vs.begin() + 1, vs.end(), ms.begin() + 1)) {
      throw ShapeError("reconstruction_target: spatial mismatch " + to_string(vs) + " vs " + to_string(ms));
    }
    for (auto m : missing->channels) {
      if (have.contains(m)) throw ValidationError("reconstruction_target: modality " + std::string(modality_name(m)) + " is both visible and missing");
      have.insert(m);
    }
  }
  if (have != ModalitySet::all()) throw ValidationError("reconstruction_target: channel sets do not cover all modalities");
  const std::size_t v = visible.voxels();
  MultiModalVolume out{Tensor(Shape{kModalityCount, vs[1], vs[2], vs[3]}), {}};
  auto copy_from = [&](const MultiModalVolume& src) {
    for (std::size_t c = 0; c < src.channels.size(); ++c) {
      const auto dst = static_cast<std::size_t>(src.channels[c]);
      std::copy_n(src.data.data().begin() + static_cast<std::ptrdiff_t>(c * v), v,
                  out.data.data().begin() + static_cast<std::ptrdiff_t>(dst * v));
    }
  };
  copy_from(visible);
  if (missing) copy_from(*missing);
  out.channels.assign(kCanonicalModalities.begin(), kCanonicalModalities.end());
  return out;
}

/// Per-element selection (C x D x H x W) of the voxels a reconstruction loss
/// counts: masked-patch voxels of the visible channels, plus every voxel of
/// the `missing` channels when the scope includes them. Under masked_only
/// the missing channels are not counted at all.
inline std::vector<std::uint8_t> reconstruction_domain(const MultiModalVolume& target, const MaskSpec& spec, RecScope scope,
                                                       ModalitySet missing) {
  const Shape& s = target.data.shape();
  const std::size_t p = spec.patch_size;
  if (s[1] != spec.grid.depth * p || s[2] != spec.grid.height * p || s[3] != spec.grid.width * p) {
    throw ShapeError("reconstruction loss: mask grid does not tile volume " + to_string(s));
  }
  const std::size_t v = s[1] * s[2] * s[3];
  std::vector<std::uint8_t> voxel_masked(v);
  std::size_t i = 0;
  for (std::size_t d = 0; d < s[1]; ++d) {
    for (std::size_t h = 0; h < s[2]; ++h) {
      for (std::size_t w = 0; w < s[3]; ++w, ++i) {
        voxel_masked[i] = spec.masked[((d / p) * spec.grid.height + h / p) * spec.grid.width + w / p];
      }
    }
  }
  std::vector<std::uint8_t> domain(s[0] * v);
  for (std::size_t c = 0; c < s[0]; ++c) {
    if (missing.contains(target.channels[c])) {
      if (scope == RecScope::masked_plus_missing) std::fill_n(domain.begin() + static_cast<std::ptrdiff_t>(c * v), v, 1);
      continue;
    }
    std::copy(voxel_masked.begin(), voxel_masked.end(), domain.begin() + static_cast<std::ptrdiff_t>(c * v));
  }
  return domain;
}

/// Mean l1 or squared error between `x_rec` and `target` over the counted
/// domain; zero when nothing is counted.
inline Var masked_reconstruction_loss(Var x_rec, const MultiModalVolume& target, const MaskSpec& spec, RecNorm norm,
                                      RecScope scope, ModalitySet missing = {}) {
  if (x_rec.shape() != target.data.shape()) {
    throw ShapeError("masked_reconstruction_loss: shape mismatch " + to_string(x_rec.shape()) + " vs " +
                     to_string(target.data.shape()));
  }
  if (target.channels.size() != target.data.extent(0)) throw ValidationError("masked_reconstruction_loss: channel list mismatch");
  Tape& tape = x_rec.tape();
  const auto domain = reconstruction_domain(target, spec, scope, missing);
  if (std::none_of(domain.begin(), domain.end(), [](std::uint8_t b) { return b != 0; })) {
    return tape.constant(Shape{1}, 0.0);
  }
  Var diff = masked_select(sub(x_rec, tape.constant(target.data)), domain);
  return norm == RecNorm::l1 ? mean(abs(diff)) : mean(mul(diff, diff));
}

}  // namespace mpae
