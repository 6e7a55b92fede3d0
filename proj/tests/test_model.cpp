#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "mpae/model.hpp"

using namespace mpae;

namespace {

Tensor random_input(std::size_t c, std::size_t e, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n;
  Tensor t(Shape{c, e, e, e});
  for (auto& v : t.data()) v = n(g);
  return t;
}

// Parameter count from layer shapes alone.
std::size_t count_oracle(const ModelConfig& c) {
  auto lin = [](std::size_t i, std::size_t o) { return i * o + o; };
  const std::size_t p3 = c.patch_size * c.patch_size * c.patch_size;
  std::size_t n = lin(c.input_channels * p3, c.feature_size) + c.feature_size;
  for (std::size_t s = 0; s < c.depths.size(); ++s) {
    const std::size_t w = c.feature_size << s;
    const std::size_t block = 4 * w + 4 * lin(w, w) + lin(w, w * c.mlp_ratio) + lin(w * c.mlp_ratio, w);
    n += c.depths[s] * block;
    if (s + 1 < c.depths.size()) n += lin(8 * w, 2 * w);
  }
  std::size_t w = c.feature_size << (c.depths.size() - 1);
  for (std::size_t s = 1; s < c.depths.size(); ++s, w = c.feature_size) n += lin(w, c.feature_size);
  w += c.feature_size;
  for (std::size_t p = c.patch_size; p > 1; p /= 2, w = c.feature_size) n += lin(w, c.feature_size);
  return n + lin(w, c.out_channels());
}

}  // namespace

TEST(Model, ParameterCountDefault) {
  const ModelConfig c;
  // 264 embed + 8 token + 872 stage0 + 1040 merge + 3280 stage1 + 136 + 136 + 36 decoder
  EXPECT_EQ(Model(c, 0).parameter_count(), 5772u);
  EXPECT_EQ(count_oracle(c), 5772u);
}

TEST(Model, ParameterCountOtherConfigs) {
  ModelConfig a;
  a.head = Head::reconstruction;
  a.feature_size = 12;
  a.heads = {3, 6};
  a.patch_size = 4;
  EXPECT_EQ(Model(a, 0).parameter_count(), count_oracle(a));
  ModelConfig b;
  b.depths = {2, 1, 1};
  b.heads = {2, 2, 4};
  EXPECT_EQ(Model(b, 0).parameter_count(), count_oracle(b));
}

TEST(Model, InitializationDeterministic) {
  const Model a(ModelConfig{}, 5), b(ModelConfig{}, 5), c(ModelConfig{}, 6);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_NE(a.param("encoder.patch_embed.weight").data(), c.param("encoder.patch_embed.weight").data());
  for (const auto& [name, t] : a.params()) {
    if (name.find(".norm") != std::string::npos && name.ends_with(".weight")) {
      for (double v : t.data()) EXPECT_EQ(v, 1.0);
    }
  }
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.heads = {3, 4};
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.patch_size = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  EXPECT_THROW(c.validate_input(16, 16, 12), ValidationError);  // grid 6 vs window 4
  EXPECT_THROW(c.validate_input(16, 16, 15), ValidationError);
  EXPECT_NO_THROW(c.validate_input(16, 8, 32));
}

TEST(PatchEmbed, TokenCountAndBias) {
  const Model m(ModelConfig{}, 1);
  Tape t;
  BoundParams p(t, m, false);
  const Tensor y = patch_embed(t.constant(random_input(4, 16, 1)), p).value();
  EXPECT_EQ(y.shape(), (Shape{512, 8}));
  const Tensor z = patch_embed(t.constant(Tensor(Shape{4, 16, 16, 16}, 0.0)), p).value();
  const auto& bias = m.param("encoder.patch_embed.bias");
  for (std::size_t r = 0; r < 512; ++r)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(z[r * 8 + j], bias[j]);
}

TEST(PatchEmbed, MatchesDirectConvolution) {
  const Model m(ModelConfig{}, 2);
  const Tensor x = random_input(4, 4, 2);
  Tape t;
  BoundParams p(t, m, false);
  const Tensor y = patch_embed(t.constant(x), p).value();
  const auto& W = m.param("encoder.patch_embed.weight");
  const auto& b = m.param("encoder.patch_embed.bias");
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t bb = 0; bb < 2; ++bb)
      for (std::size_t cc = 0; cc < 2; ++cc)
        for (std::size_t o = 0; o < 8; ++o) {
          double acc = b[o];
          std::size_t k = 0;
          for (std::size_t ch = 0; ch < 4; ++ch)
            for (std::size_t i = 0; i < 2; ++i)
              for (std::size_t j = 0; j < 2; ++j)
                for (std::size_t l = 0; l < 2; ++l, ++k)
                  acc += W[k * 8 + o] * x[((ch * 4 + 2 * a + i) * 4 + 2 * bb + j) * 4 + 2 * cc + l];
          EXPECT_NEAR(y[((a * 2 + bb) * 2 + cc) * 8 + o], acc, 1e-12);
        }
}

TEST(WindowOrder, IsPermutation) {
  for (std::size_t shift : {0u, 2u}) {
    auto o = window_order({8, 8, 8}, 4, shift);
    std::sort(o.begin(), o.end());
    std::vector<std::size_t> id(512);
    std::iota(id.begin(), id.end(), std::size_t{0});
    EXPECT_EQ(o, id);
  }
}

TEST(WindowOrder, WindowsAreCubicBlocks) {
  const Grid g{8, 8, 8};
  const auto o = window_order(g, 4, 2);
  for (std::size_t w = 0; w < 8; ++w) {
    std::set<std::size_t> xs, ys, zs;
    for (std::size_t r = 0; r < 64; ++r) {
      const std::size_t i = o[w * 64 + r];
      xs.insert(i / 64);
      ys.insert((i / 8) % 8);
      zs.insert(i % 8);
    }
    EXPECT_EQ(xs.size(), 4u);
    EXPECT_EQ(ys.size(), 4u);
    EXPECT_EQ(zs.size(), 4u);
  }
  // first shifted window starts at (2,2,2)
  EXPECT_EQ(o[0], (2u * 8 + 2) * 8 + 2);
}

TEST(WindowAttention, SingleWindowShiftIsNoOp) {
  // Without a border mask, cyclically shifting a grid that is one window
  // only permutes tokens inside the window, so attention is unchanged.
  const Model m(ModelConfig{}, 3);
  Tape t;
  BoundParams p(t, m, false);
  Tensor x(Shape{64, 8});
  std::mt19937_64 g(3);
  std::normal_distribution<double> n;
  for (auto& v : x.data()) v = n(g);
  const auto pre = Model::block_prefix(0, 0);
  const Tensor a = window_attention(t.constant(x), {4, 4, 4}, 4, false, 2, p, pre).value();
  const Tensor b = window_attention(t.constant(x), {4, 4, 4}, 4, true, 2, p, pre).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(PatchMerge, GroupsNeighbourhoods) {
  const Grid g{4, 4, 4};
  const auto rows = merge_order(g);
  for (std::size_t r = 0; r < 8; ++r) {
    const std::size_t a = r / 4, b = (r / 2) % 2, c = r % 2;
    for (std::size_t s = 0; s < 8; ++s) {
      const std::size_t i = s / 4, j = (s / 2) % 2, k = s % 2;
      EXPECT_EQ(rows[r * 8 + s], ((2 * a + i) * 4 + 2 * b + j) * 4 + 2 * c + k);
    }
  }
}

TEST(Upsample, NearestNeighbour) {
  Tape t;
  Tensor x(Shape{8, 1});
  for (std::size_t i = 0; i < 8; ++i) x[i] = static_cast<double>(i);
  const Tensor y = upsample2(t.constant(x), {2, 2, 2}).value();
  ASSERT_EQ(y.shape(), (Shape{64, 1}));
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y[(a * 4 + b) * 4 + c], static_cast<double>(((a / 2) * 2 + b / 2) * 2 + c / 2));
}

TEST(Forward, ShapesAndDeterminism) {
  const Model seg(ModelConfig{}, 4);
  const Tensor x = random_input(4, 16, 4);
  const Tensor y = segment(seg, x);
  EXPECT_EQ(y.shape(), (Shape{4, 16, 16, 16}));
  EXPECT_EQ(segment(seg, x).data(), y.data());
  ModelConfig rc;
  rc.head = Head::reconstruction;
  const Model rec(rc, 4);
  Tape t;
  BoundParams p(t, rec, false);
  const auto spec = sample_patch_mask({8, 8, 8}, 0.75, 1);
  EXPECT_EQ(forward_reconstruct(t.constant(x), p, &spec).shape(), (Shape{4, 16, 16, 16}));
  EXPECT_THROW(forward_segment(t.constant(x), p), ValidationError);
}

TEST(Forward, NonCubicInput) {
  const Model seg(ModelConfig{}, 5);
  EXPECT_EQ(segment(seg, random_input(4, 8, 5)).shape(), (Shape{4, 8, 8, 8}));
  Tensor x(Shape{4, 16, 8, 32});
  EXPECT_EQ(segment(seg, x).shape(), (Shape{4, 16, 8, 32}));
  EXPECT_THROW(segment(seg, Tensor(Shape{3, 16, 16, 16})), ShapeError);
}

TEST(Forward, MaskTokenOnlyReachesMaskedPatches) {
  ModelConfig rc;
  rc.head = Head::reconstruction;
  const Model rec(rc, 6);
  const Tensor x = random_input(4, 8, 6);
  Tape t;
  BoundParams p(t, rec, true);
  const auto none = empty_mask({4, 4, 4}, 2);
  t.backward(sum(forward_reconstruct(t.constant(x), p, &none)));
  const Tensor g = t.grad(p["encoder.mask_token"]);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(BoundParams, Rebind) {
  const Model m(ModelConfig{}, 7);
  Tape t;
  BoundParams p(t, m, false);
  EXPECT_THROW(p.rebind("encoder.mask_token", t.constant(Tensor(Shape{9}))), ShapeError);
  EXPECT_THROW(p.rebind("nope", t.constant(Tensor(Shape{8}))), ValidationError);
  Var v = t.constant(Tensor(Shape{8}, 3.0));
  p.rebind("encoder.mask_token", v);
  EXPECT_EQ(p["encoder.mask_token"].id(), v.id());
}
