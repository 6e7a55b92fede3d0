#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "mpae/autodiff.hpp"
#include "mpae/masking.hpp"
#include "mpae/random.hpp"
#include "mpae/volume.hpp"

namespace mpae {

enum class Head { reconstruction, segmentation };

/// Encoder/decoder hyperparameters. Stage i has width feature_size * 2^i.
struct ModelConfig {
  std::size_t input_channels = 4;
  std::size_t patch_size = 2;
  std::size_t feature_size = 8;
  std::vector<std::size_t> depths = {1, 1};
  std::vector<std::size_t> heads = {2, 4};
  std::size_t window = 4;
  std::size_t num_classes = 4;
  std::size_t mlp_ratio = 4;
  Head head = Head::segmentation;

  std::size_t stages() const { return depths.size(); }
  std::size_t stage_width(std::size_t i) const { return feature_size << i; }
  std::size_t out_channels() const { return head == Head::reconstruction ? input_channels : num_classes; }

  /// Structural checks independent of the input size.
  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
    if (depths.empty() || depths.size() != heads.size()) fail("depths and heads must be non-empty and of equal length");
    if (patch_size == 0 || (patch_size & (patch_size - 1)) != 0) fail("patch size must be a power of two");
    if (feature_size == 0 || window == 0 || mlp_ratio == 0 || input_channels == 0) fail("zero-sized dimension");
    if (num_classes < 2) fail("need at least 2 classes");
    for (std::size_t i = 0; i < stages(); ++i) {
      if (heads[i] == 0 || stage_width(i) % heads[i] != 0) {
        fail("stage " + std::to_string(i) + " width " + std::to_string(stage_width(i)) + " not divisible by " +
             std::to_string(heads[i]) + " heads");
      }
    }
  }

  /// Checks that a D x H x W input tiles into patches, merges and windows.
  void validate_input(std::size_t d, std::size_t h, std::size_t w) const {
    validate();
    for (std::size_t e : {d, h, w}) {
      if (e % patch_size != 0) throw ValidationError("model input: extent " + std::to_string(e) + " not divisible by patch size");
      std::size_t g = e / patch_size;
      for (std::size_t i = 0; i < stages(); ++i) {
        const std::size_t win = std::min(window, g);
        if (g % win != 0) {
          throw ValidationError("model input: stage " + std::to_string(i) + " grid " + std::to_string(g) +
                                " not divisible by window " + std::to_string(win));
        }
        if (i + 1 < stages()) {
          if (g % 2 != 0) throw ValidationError("model input: odd grid extent " + std::to_string(g) + " before patch merge");
          g /= 2;
        }
      }
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

struct Grid {
  std::size_t d = 1, h = 1, w = 1;
  std::size_t count() const { return d * h * w; }
  Grid halved() const { return {d / 2, h / 2, w / 2}; }
  Grid doubled() const { return {d * 2, h * 2, w * 2}; }
  bool operator==(const Grid&) const = default;
  auto key() const { return std::tuple(d, h, w); }
};

using ParamMap = std::map<std::string, Tensor>;

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Memoized index maps; geometry repeats on every step.
class MapCache {
 public:
  template <class Build>
  IndexMap get(const std::string& key, Build build) {
    std::lock_guard lock(mu_);
    auto it = maps_.find(key);
    if (it != maps_.end()) return it->second;
    IndexMap m = build();
    maps_.emplace(key, m);
    return m;
  }

  static MapCache& instance() {
    static MapCache cache;
    return cache;
  }

 private:
  std::mutex mu_;
  std::map<std::string, IndexMap> maps_;
};

inline std::string grid_key(const char* what, Grid g, std::size_t a, std::size_t b = 0, std::size_t c = 0) {
  return std::string(what) + ":" + std::to_string(g.d) + "," + std::to_string(g.h) + "," + std::to_string(g.w) + ":" +
         std::to_string(a) + "," + std::to_string(b) + "," + std::to_string(c);
}

}  // namespace detail

/// Parameter tensors of the network, keyed "encoder.*" / "decoder.*".
class Model {
 public:
  Model() = default;

  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    declare_parameters();
    initialize(seed, "");
  }

  const ModelConfig& config() const noexcept { return config_; }
  const ParamMap& params() const noexcept { return params_; }
  ParamMap& params() noexcept { return params_; }

  const Tensor& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("model: no parameter named " + name);
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  /// Re-draws every parameter whose name starts with `prefix`.
  void initialize(std::uint64_t seed, const std::string& prefix) {
    for (auto& [name, t] : params_) {
      if (name.rfind(prefix, 0) != 0) continue;
      Rng rng = Rng::derive(seed, detail::fnv1a(name));
      const bool is_bias = name.ends_with(".bias");
      const bool is_norm = name.find(".norm") != std::string::npos;
      if (name == "encoder.mask_token") {
        for (auto& v : t.data()) v = 0.02 * rng.normal();
      } else if (is_norm) {
        std::fill(t.data().begin(), t.data().end(), is_bias ? 0.0 : 1.0);
      } else if (is_bias) {
        std::fill(t.data().begin(), t.data().end(), 0.0);
      } else {
        for (auto& v : t.data()) v = rng.truncated_normal(0.02);
      }
    }
  }

  static std::string block_prefix(std::size_t stage, std::size_t block) {
    return "encoder.stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
  }

 private:
  void linear(const std::string& name, std::size_t in, std::size_t out) {
    params_.emplace(name + ".weight", Tensor(Shape{in, out}));
    params_.emplace(name + ".bias", Tensor(Shape{out}));
  }
  void norm(const std::string& name, std::size_t width) {
    params_.emplace(name + ".weight", Tensor(Shape{width}, 1.0));
    params_.emplace(name + ".bias", Tensor(Shape{width}));
  }

  void declare_parameters() {
    const auto& c = config_;
    const std::size_t p3 = c.patch_size * c.patch_size * c.patch_size;
    linear("encoder.patch_embed", c.input_channels * p3, c.feature_size);
    params_.emplace("encoder.mask_token", Tensor(Shape{c.feature_size}));
    for (std::size_t s = 0; s < c.stages(); ++s) {
      const std::size_t width = c.stage_width(s);
      for (std::size_t b = 0; b < c.depths[s]; ++b) {
        const auto pre = block_prefix(s, b);
        norm(pre + "norm1", width);
        for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.proj"}) linear(pre + n, width, width);
        norm(pre + "norm2", width);
        linear(pre + "mlp.fc1", width, width * c.mlp_ratio);
        linear(pre + "mlp.fc2", width * c.mlp_ratio, width);
      }
      if (s + 1 < c.stages()) linear("encoder.merge" + std::to_string(s), 8 * width, 2 * width);
    }
    // Decoder: one upsampling level per halving between the last stage and
    // full resolution; the patch-embedding tokens join at the patch grid.
    std::size_t width = c.stage_width(c.stages() - 1);
    std::size_t level = 0;
    for (std::size_t s = c.stages() - 1; s > 0; --s, ++level) {
      linear("decoder.up" + std::to_string(level), width, c.feature_size);
      width = c.feature_size;
    }
    width += c.feature_size;  // skip concat
    for (std::size_t p = c.patch_size; p > 1; p /= 2, ++level) {
      linear("decoder.up" + std::to_string(level), width, c.feature_size);
      width = c.feature_size;
    }
    linear("decoder.out", width, c.out_channels());
  }

  ModelConfig config_;
  ParamMap params_;
};

/// Model parameters recorded on a tape, looked up by name.
class BoundParams {
 public:
  BoundParams(Tape& tape, const Model& model, bool trainable) : config_(&model.config()) {
    for (const auto& [name, t] : model.params()) vars_.emplace(name, tape.leaf(t, trainable));
  }

  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ValidationError("model: no parameter named " + name);
    return it->second;
  }
  /// Rebinds one parameter to another tape value of the same shape.
  void rebind(const std::string& name, Var v) {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ValidationError("model: no parameter named " + name);
    if (it->second.shape() != v.shape()) throw ShapeError("model: rebind " + name + " with shape " + to_string(v.shape()));
    it->second = v;
  }
  const std::map<std::string, Var>& vars() const noexcept { return vars_; }
  const ModelConfig& config() const noexcept { return *config_; }

 private:
  const ModelConfig* config_;
  std::map<std::string, Var> vars_;
};

// ---------------------------------------------------------------------------
// Building blocks

inline Var linear(Var x, const BoundParams& p, const std::string& name) {
  Var y = matmul(x, p[name + ".weight"]);
  return add(y, repeat_rows(p[name + ".bias"], x.shape()[0]));
}

inline Var affine_layer_norm(Var x, const BoundParams& p, const std::string& name) {
  const std::size_t n = x.shape()[0];
  Var y = layer_norm(x, 1);
  return add(mul(y, repeat_rows(p[name + ".weight"], n)), repeat_rows(p[name + ".bias"], n));
}

/// Gathers C x D x H x W voxels into one row of C*P^3 values per patch.
inline IndexMap patch_extract_map(std::size_t channels, std::size_t d, std::size_t h, std::size_t w, std::size_t patch) {
  const Grid g{d / patch, h / patch, w / patch};
  return detail::MapCache::instance().get(detail::grid_key("patch", g, channels, patch), [&] {
    auto m = std::make_shared<std::vector<std::size_t>>();
    m->reserve(channels * d * h * w);
    for (std::size_t a = 0; a < g.d; ++a)
      for (std::size_t b = 0; b < g.h; ++b)
        for (std::size_t c = 0; c < g.w; ++c)
          for (std::size_t ch = 0; ch < channels; ++ch)
            for (std::size_t i = 0; i < patch; ++i)
              for (std::size_t j = 0; j < patch; ++j)
                for (std::size_t k = 0; k < patch; ++k)
                  m->push_back(((ch * d + a * patch + i) * h + b * patch + j) * w + c * patch + k);
    return IndexMap(std::move(m));
  });
}

/// Patchify with kernel == stride == P as block gather + matmul + bias.
/// Returns (D/P * H/P * W/P) x S tokens in row-major grid order.
inline Var patch_embed(Var volume, const BoundParams& p) {
  const auto& cfg = p.config();
  const auto& s = volume.shape();
  if (s.size() != 4 || s[0] != cfg.input_channels) {
    throw ShapeError("patch_embed: expected " + std::to_string(cfg.input_channels) + " x D x H x W, got " + to_string(s));
  }
  const std::size_t ps = cfg.patch_size;
  if (s[1] % ps || s[2] % ps || s[3] % ps) {
    throw ValidationError("patch_embed: extents " + to_string(s) + " not divisible by patch size " + std::to_string(ps));
  }
  const std::size_t n = (s[1] / ps) * (s[2] / ps) * (s[3] / ps);
  Var rows = gather(volume, patch_extract_map(s[0], s[1], s[2], s[3], ps), Shape{n, s[0] * ps * ps * ps});
  return linear(rows, p, "encoder.patch_embed");
}

/// Row order that partitions a grid into windows after a cyclic shift by
/// `shift` tokens: windowed row r reads grid token map[r].
inline std::vector<std::size_t> window_order(Grid g, std::size_t window, std::size_t shift) {
  const std::size_t wd = std::min(window, g.d), wh = std::min(window, g.h), ww = std::min(window, g.w);
  const std::size_t sd = shift % g.d, sh = shift % g.h, sw = shift % g.w;
  std::vector<std::size_t> order;
  order.reserve(g.count());
  for (std::size_t a = 0; a < g.d / wd; ++a)
    for (std::size_t b = 0; b < g.h / wh; ++b)
      for (std::size_t c = 0; c < g.w / ww; ++c)
        for (std::size_t i = 0; i < wd; ++i)
          for (std::size_t j = 0; j < wh; ++j)
            for (std::size_t k = 0; k < ww; ++k) {
              const std::size_t x = (a * wd + i + sd) % g.d;
              const std::size_t y = (b * wh + j + sh) % g.h;
              const std::size_t z = (c * ww + k + sw) % g.w;
              order.push_back((x * g.h + y) * g.w + z);
            }
  return order;
}

inline std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& p) {
  std::vector<std::size_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

// Expands a row map to an element map over rows of `width` values.
inline IndexMap rows_to_elements(const std::vector<std::size_t>& rows, std::size_t width) {
  auto m = std::make_shared<std::vector<std::size_t>>(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) (*m)[r * width + j] = rows[r] * width + j;
  return m;
}

/// Shift used by a shifted block: half the effective window.
inline std::size_t shift_for(Grid g, std::size_t window) {
  return std::min({window, g.d, g.h, g.w}) / 2;
}

/// Multi-head self-attention inside windows (no position bias, no border
/// mask). Input and output are N x S in grid order.
inline Var window_attention(Var x, Grid g, std::size_t window, bool shifted, std::size_t heads, const BoundParams& p,
                            const std::string& prefix) {
  const std::size_t n = x.shape()[0], width = x.shape()[1];
  const std::size_t tokens = std::min(window, g.d) * std::min(window, g.h) * std::min(window, g.w);
  const std::size_t windows = n / tokens, hd = width / heads;
  const std::size_t shift = shifted ? shift_for(g, window) : 0;
  auto& cache = detail::MapCache::instance();
  IndexMap fwd = cache.get(detail::grid_key("win", g, window, shift, width),
                           [&] { return rows_to_elements(window_order(g, window, shift), width); });
  IndexMap back = cache.get(detail::grid_key("unwin", g, window, shift, width),
                            [&] { return rows_to_elements(invert_permutation(window_order(g, window, shift)), width); });
  Var xw = gather(x, fwd, Shape{n, width});
  auto split_heads = [&](Var t, const std::vector<std::size_t>& order, Shape shape) {
    return reshape(permute(reshape(t, Shape{windows, tokens, heads, hd}), order), std::move(shape));
  };
  Var q = split_heads(linear(xw, p, prefix + "attn.q"), {0, 2, 1, 3}, Shape{windows * heads, tokens, hd});
  Var k = split_heads(linear(xw, p, prefix + "attn.k"), {0, 2, 3, 1}, Shape{windows * heads, hd, tokens});
  Var v = split_heads(linear(xw, p, prefix + "attn.v"), {0, 2, 1, 3}, Shape{windows * heads, tokens, hd});
  Var attn = softmax(scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(hd))), 2);
  Var out = matmul(attn, v);
  out = reshape(permute(reshape(out, Shape{windows, heads, tokens, hd}), {0, 2, 1, 3}), Shape{n, width});
  out = linear(out, p, prefix + "attn.proj");
  return gather(out, back, Shape{n, width});
}

/// LN -> (S)W-MSA -> residual, then LN -> MLP -> residual.
inline Var swin_block(Var tokens, Grid g, bool shifted, std::size_t heads, const BoundParams& p, const std::string& prefix) {
  const auto& s = tokens.shape();
  if (s.size() != 2 || s[0] != g.count()) {
    throw ShapeError("swin_block: " + to_string(s) + " tokens vs grid of " + std::to_string(g.count()));
  }
  const std::size_t window = p.config().window;
  for (std::size_t e : {g.d, g.h, g.w}) {
    if (e % std::min(window, e) != 0) throw ValidationError("swin_block: grid extent " + std::to_string(e) + " not divisible by window");
  }
  Var h = add(tokens, window_attention(affine_layer_norm(tokens, p, prefix + "norm1"), g, window, shifted, heads, p, prefix));
  Var m = linear(gelu(linear(affine_layer_norm(h, p, prefix + "norm2"), p, prefix + "mlp.fc1")), p, prefix + "mlp.fc2");
  return add(h, m);
}

/// Row map grouping each 2x2x2 neighbourhood: merged row r, slot s reads
/// token map[r * 8 + s].
inline std::vector<std::size_t> merge_order(Grid g) {
  std::vector<std::size_t> rows;
  rows.reserve(g.count());
  const Grid h = g.halved();
  for (std::size_t a = 0; a < h.d; ++a)
    for (std::size_t b = 0; b < h.h; ++b)
      for (std::size_t c = 0; c < h.w; ++c)
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t k = 0; k < 2; ++k) rows.push_back(((2 * a + i) * g.h + 2 * b + j) * g.w + 2 * c + k);
  return rows;
}

/// Concatenates 2x2x2 neighbouring tokens (8S wide) and projects to 2S.
inline Var patch_merge(Var tokens, Grid g, const BoundParams& p, const std::string& name) {
  if (g.d % 2 || g.h % 2 || g.w % 2) throw ValidationError("patch_merge: odd grid extent");
  const std::size_t width = tokens.shape()[1];
  if (tokens.shape()[0] != g.count()) throw ShapeError("patch_merge: token count does not match grid");
  IndexMap m = detail::MapCache::instance().get(detail::grid_key("merge", g, width),
                                                [&] { return rows_to_elements(merge_order(g), width); });
  Var grouped = gather(tokens, m, Shape{g.count() / 8, 8 * width});
  return linear(grouped, p, name);
}

/// Nearest-neighbour x2 upsampling of N x S tokens on grid g.
inline Var upsample2(Var tokens, Grid g) {
  const std::size_t width = tokens.shape()[1];
  const Grid u = g.doubled();
  IndexMap m = detail::MapCache::instance().get(detail::grid_key("up", g, width), [&] {
    std::vector<std::size_t> rows;
    rows.reserve(u.count());
    for (std::size_t x = 0; x < u.d; ++x)
      for (std::size_t y = 0; y < u.h; ++y)
        for (std::size_t z = 0; z < u.w; ++z) rows.push_back(((x / 2) * g.h + y / 2) * g.w + z / 2);
    return rows_to_elements(rows, width);
  });
  return gather(tokens, m, Shape{u.count(), width});
}

struct Encoded {
  Var embedded;  // patch tokens after mask substitution
  Var deepest;
  Grid patch_grid;
  Grid deepest_grid;
};

/// Blocks alternate W-MSA / SW-MSA over the global block index, so even a
/// one-block-per-stage encoder uses both window layouts.
inline Encoded encode(Var volume, const BoundParams& p, const MaskSpec* mask) {
  const auto& cfg = p.config();
  const auto& s = volume.shape();
  if (s.size() != 4) throw ShapeError("encode: expected C x D x H x W, got " + to_string(s));
  cfg.validate_input(s[1], s[2], s[3]);
  Encoded e;
  e.patch_grid = {s[1] / cfg.patch_size, s[2] / cfg.patch_size, s[3] / cfg.patch_size};
  Var t = patch_embed(volume, p);
  if (mask) t = apply_mask_tokens(t, *mask, p["encoder.mask_token"]);
  e.embedded = t;
  Grid g = e.patch_grid;
  std::size_t global_block = 0;
  for (std::size_t st = 0; st < cfg.stages(); ++st) {
    for (std::size_t b = 0; b < cfg.depths[st]; ++b, ++global_block) {
      t = swin_block(t, g, global_block % 2 == 1, cfg.heads[st], p, Model::block_prefix(st, b));
    }
    if (st + 1 < cfg.stages()) {
      t = patch_merge(t, g, p, "encoder.merge" + std::to_string(st));
      g = g.halved();
    }
  }
  e.deepest = t;
  e.deepest_grid = g;
  return e;
}

/// Upsample -> 1x1x1 projection -> GELU per level, skip from the patch
/// tokens, final projection. Returns out_channels x D x H x W.
inline Var decode(const Encoded& e, const BoundParams& p) {
  const auto& cfg = p.config();
  Var t = e.deepest;
  Grid g = e.deepest_grid;
  std::size_t level = 0;
  while (!(g == e.patch_grid)) {
    t = gelu(linear(upsample2(t, g), p, "decoder.up" + std::to_string(level++)));
    g = g.doubled();
  }
  t = concat({t, e.embedded}, 1);
  for (std::size_t ps = cfg.patch_size; ps > 1; ps /= 2) {
    t = gelu(linear(upsample2(t, g), p, "decoder.up" + std::to_string(level++)));
    g = g.doubled();
  }
  t = linear(t, p, "decoder.out");
  return reshape(permute(t, {1, 0}), Shape{cfg.out_channels(), g.d, g.h, g.w});
}

/// Full-resolution modality prediction from a (possibly masked) input.
inline Var forward_reconstruct(Var volume, const BoundParams& p, const MaskSpec* mask = nullptr) {
  if (p.config().head != Head::reconstruction) throw ValidationError("forward_reconstruct: model has a segmentation head");
  return decode(encode(volume, p, mask), p);
}

/// J x D x H x W class logits.
inline Var forward_segment(Var volume, const BoundParams& p) {
  if (p.config().head != Head::segmentation) throw ValidationError("forward_segment: model has a reconstruction head");
  return decode(encode(volume, p, nullptr), p);
}

/// Forward-only segmentation of a plain tensor.
inline Tensor segment(const Model& model, const Tensor& volume) {
  Tape tape;
  BoundParams p(tape, model, false);
  return forward_segment(tape.constant(volume), p).value();
}

}  // namespace mpae
