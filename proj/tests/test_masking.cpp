#include <gtest/gtest.h>

#include <random>

#include "mpae/masking.hpp"

using namespace mpae;

namespace {

MultiModalVolume random_volume(std::vector<Modality> channels, std::size_t e, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MultiModalVolume v{Tensor(Shape{channels.size(), e, e, e}), channels};
  for (auto& x : v.data.data()) x = u(g);
  return v;
}

MultiModalVolume select(const MultiModalVolume& full, std::vector<Modality> keep) {
  const std::size_t n = full.voxels();
  const auto& s = full.data.shape();
  MultiModalVolume out{Tensor(Shape{keep.size(), s[1], s[2], s[3]}), keep};
  for (std::size_t c = 0; c < keep.size(); ++c) {
    const std::size_t src = static_cast<std::size_t>(keep[c]);
    for (std::size_t i = 0; i < n; ++i) out.data[c * n + i] = full.data[src * n + i];
  }
  return out;
}

}  // namespace

TEST(MaskRatio, Table) {
  EXPECT_EQ(mask_ratio_for_missing(0), 0.75);
  EXPECT_EQ(mask_ratio_for_missing(1), 0.65);
  EXPECT_EQ(mask_ratio_for_missing(2), 0.60);
  EXPECT_EQ(mask_ratio_for_missing(3), 0.50);
  EXPECT_THROW(mask_ratio_for_missing(4), ValidationError);
}

TEST(MaskRatio, Linear) {
  EXPECT_EQ(mask_ratio_for_missing(0, MaskMode::linear), 0.75);
  EXPECT_EQ(mask_ratio_for_missing(3, MaskMode::linear), 0.5);
  for (std::size_t m = 0; m <= 3; ++m) {
    EXPECT_NEAR(mask_ratio_for_missing(m, MaskMode::linear), kMaskSlope * static_cast<double>(m) + kMaskIntercept, 1e-15);
  }
}

TEST(PatchMask, Counts) {
  const PatchGrid g{4, 4, 4};
  EXPECT_EQ(sample_patch_mask(g, 0.0, 1).masked_count(), 0u);
  const auto s = sample_patch_mask(g, 0.5, 1);
  EXPECT_EQ(s.masked_count(), 32u);
  EXPECT_EQ(s.ratio, 0.5);
  EXPECT_EQ(sample_patch_mask(g, 0.75, 9).masked_count(), 48u);
  EXPECT_THROW(sample_patch_mask(g, 1.0, 1), ValidationError);
  EXPECT_THROW(sample_patch_mask(g, -0.1, 1), ValidationError);
}

TEST(PatchMask, DeterministicPerSeed) {
  const PatchGrid g{4, 4, 4};
  EXPECT_EQ(sample_patch_mask(g, 0.6, 42), sample_patch_mask(g, 0.6, 42));
  EXPECT_NE(sample_patch_mask(g, 0.6, 42).masked, sample_patch_mask(g, 0.6, 43).masked);
}

TEST(PatchMask, RoughlyUniformCoverage) {
  const PatchGrid g{2, 2, 2};
  std::vector<int> hits(8, 0);
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    const auto s = sample_patch_mask(g, 0.5, static_cast<std::uint64_t>(t));
    for (std::size_t i = 0; i < 8; ++i) hits[i] += s.masked[i];
  }
  // each patch is masked with probability 1/2; 5 sigma band
  for (int h : hits) EXPECT_NEAR(h, trials / 2, 5 * std::sqrt(trials / 4.0));
}

TEST(MaskTokens, SaturationAndIdentity) {
  Tape t;
  Tensor x(Shape{8, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i) + 0.5;
  Tensor tok(Shape{3});
  tok[0] = -1;
  tok[1] = -2;
  tok[2] = -3;
  const PatchGrid g{2, 2, 2};
  auto all = empty_mask(g, 2);
  std::fill(all.masked.begin(), all.masked.end(), 1);
  const Tensor y = apply_mask_tokens(t.constant(x), all, t.constant(tok)).value();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y[r * 3 + j], tok[j]);
  EXPECT_EQ(apply_mask_tokens(t.constant(x), empty_mask(g, 2), t.constant(tok)).value().data(), x.data());
}

TEST(MaskTokens, TokenGradientCountsMaskedRows) {
  Tape t;
  const auto spec = sample_patch_mask({2, 2, 2}, 0.5, 5);
  Var x = t.leaf(Tensor(Shape{8, 3}, 1.0));
  Var tok = t.leaf(Tensor(Shape{3}, 0.0));
  t.backward(sum(apply_mask_tokens(x, spec, tok)));
  const Tensor gt = t.grad(tok);
  for (double v : gt.data()) EXPECT_EQ(v, 4.0);
  const Tensor gx = t.grad(x);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(gx[r * 3 + j], spec.masked[r] ? 0.0 : 1.0);
}

TEST(MaskTokens, ShapeErrors) {
  Tape t;
  const auto spec = empty_mask({2, 2, 2}, 2);
  EXPECT_THROW(apply_mask_tokens(t.constant(Tensor(Shape{7, 3})), spec, t.constant(Tensor(Shape{3}))), ShapeError);
  EXPECT_THROW(apply_mask_tokens(t.constant(Tensor(Shape{8, 3})), spec, t.constant(Tensor(Shape{4}))), ShapeError);
}

TEST(ReconstructionTarget, NoMissingIsIdentity) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 1);
  const auto r = reconstruction_target(full, nullptr);
  EXPECT_EQ(r.data.data(), full.data.data());
}

TEST(ReconstructionTarget, CanonicalReassembly) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 2);
  const auto vis = select(full, {Modality::t2});
  const auto mis = select(full, {Modality::flair, Modality::t1, Modality::t1c});
  EXPECT_EQ(reconstruction_target(vis, &mis).data.data(), full.data.data());
  const auto vis2 = select(full, {Modality::t1c, Modality::flair});
  const auto mis2 = select(full, {Modality::t2, Modality::t1});
  EXPECT_EQ(reconstruction_target(vis2, &mis2).data.data(), full.data.data());
  const auto vis3 = select(full, {Modality::flair, Modality::t1c});
  EXPECT_EQ(reconstruction_target(vis3, &mis2).data.data(), full.data.data());
}

TEST(ReconstructionTarget, Errors) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 3);
  const auto vis = select(full, {Modality::t2, Modality::t1});
  const auto mis = select(full, {Modality::t1, Modality::flair, Modality::t1c});
  EXPECT_THROW(reconstruction_target(vis, &mis), ValidationError);
  const auto short_mis = select(full, {Modality::flair});
  EXPECT_THROW(reconstruction_target(vis, &short_mis), ValidationError);
}

TEST(ReconstructionLoss, ZeroAtTarget) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 4);
  const auto spec = sample_patch_mask({2, 2, 2}, 0.5, 1);
  Tape t;
  for (auto norm : {RecNorm::l1, RecNorm::l2})
    for (auto scope : {RecScope::masked_only, RecScope::masked_plus_missing}) {
      EXPECT_EQ(masked_reconstruction_loss(t.constant(full.data), full, spec, norm, scope, ModalitySet::parse("T1")).value().item(), 0.0);
    }
}

TEST(ReconstructionLoss, EmptyDomainIsZero) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 5);
  Tape t;
  Tensor other(full.data.shape(), 7.0);
  EXPECT_EQ(masked_reconstruction_loss(t.constant(other), full, empty_mask({2, 2, 2}, 2), RecNorm::l2, RecScope::masked_plus_missing)
                .value()
                .item(),
            0.0);
}

TEST(ReconstructionLoss, HandExample) {
  // 2x2x2 single channel, one masked patch covering it, error 0.5 everywhere.
  MultiModalVolume target{Tensor(Shape{1, 2, 2, 2}, 1.0), {Modality::flair}};
  auto spec = empty_mask({1, 1, 1}, 2);
  spec.masked[0] = 1;
  Tape t;
  Var rec = t.constant(Tensor(Shape{1, 2, 2, 2}, 1.5));
  EXPECT_EQ(masked_reconstruction_loss(rec, target, spec, RecNorm::l1, RecScope::masked_only).value().item(), 0.5);
  EXPECT_EQ(masked_reconstruction_loss(rec, target, spec, RecNorm::l2, RecScope::masked_only).value().item(), 0.25);
}

TEST(ReconstructionLoss, UnmaskedVoxelsDoNotMatter) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 6);
  const auto spec = sample_patch_mask({2, 2, 2}, 0.5, 2);
  const auto missing = ModalitySet::parse("T1c");
  Tensor rec = full.data;
  std::mt19937_64 g(3);
  std::normal_distribution<double> n;
  for (auto& v : rec.data()) v += n(g);
  Tape t;
  const double before = masked_reconstruction_loss(t.constant(rec), full, spec, RecNorm::l1, RecScope::masked_plus_missing, missing).value().item();
  // perturb visible channels at unmasked voxels only
  const std::size_t V = 64;
  for (std::size_t c = 0; c < 4; ++c) {
    if (c == static_cast<std::size_t>(Modality::t1c)) continue;
    for (std::size_t d = 0; d < 4; ++d)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t w = 0; w < 4; ++w) {
          if (spec.masked[((d / 2) * 2 + h / 2) * 2 + w / 2]) continue;
          rec[c * V + (d * 4 + h) * 4 + w] += 100.0;
        }
  }
  EXPECT_EQ(masked_reconstruction_loss(t.constant(rec), full, spec, RecNorm::l1, RecScope::masked_plus_missing, missing).value().item(),
            before);
}

TEST(ReconstructionLoss, ScopesAgreeWithoutMissing) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 7);
  const auto spec = sample_patch_mask({2, 2, 2}, 0.5, 4);
  Tape t;
  Var rec = t.constant(Tensor(full.data.shape(), 0.3));
  EXPECT_EQ(masked_reconstruction_loss(rec, full, spec, RecNorm::l2, RecScope::masked_only).value().item(),
            masked_reconstruction_loss(rec, full, spec, RecNorm::l2, RecScope::masked_plus_missing).value().item());
}

TEST(ReconstructionLoss, MissingChannelsCountFullyUnderPlusScope) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 8);
  const auto spec = empty_mask({2, 2, 2}, 2);
  Tensor rec = full.data;
  const std::size_t V = 64, c = static_cast<std::size_t>(Modality::t2);
  for (std::size_t i = 0; i < V; ++i) rec[c * V + i] += 2.0;
  Tape t;
  const auto missing = ModalitySet::parse("T2");
  EXPECT_NEAR(masked_reconstruction_loss(t.constant(rec), full, spec, RecNorm::l1, RecScope::masked_plus_missing, missing).value().item(),
              2.0, 1e-15);
  EXPECT_EQ(masked_reconstruction_loss(t.constant(rec), full, spec, RecNorm::l1, RecScope::masked_only, missing).value().item(), 0.0);
}

TEST(ReconstructionLoss, GridMismatch) {
  const auto full = random_volume({kCanonicalModalities.begin(), kCanonicalModalities.end()}, 4, 9);
  Tape t;
  EXPECT_THROW(masked_reconstruction_loss(t.constant(full.data), full, empty_mask({3, 2, 2}, 2), RecNorm::l1, RecScope::masked_only),
               ShapeError);
}
