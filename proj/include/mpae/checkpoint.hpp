#pragma once

#include <zlib.h>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpae/binary_io.hpp"
#include "mpae/model.hpp"

namespace mpae {

// MPAE checkpoint files:
//   "MPAE", u32 version = 1, u32 tensor count,
//   per tensor: u16 name length, UTF-8 name, u8 rank, rank x u64 extents,
//               f32 values (row-major),
//   u32 CRC-32 of every preceding byte.
// All integers little-endian. Metadata travels as "meta.*" tensors.

inline constexpr std::string_view kCheckpointMagic = "MPAE";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Phase { pretrained = 0, finetuned = 1, teacher = 2 };
enum class LoadMode { encoder_only, full };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::pretrained: return "pretrained";
    case Phase::finetuned: return "finetuned";
    case Phase::teacher: return "teacher";
  }
  return "?";
}

struct CheckpointMeta {
  Phase phase = Phase::finetuned;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  ModelConfig config;
};

/// Ordered named tensors plus metadata.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  CheckpointMeta meta;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(::crc32(crc, bytes.data(), static_cast<uInt>(n)));
}

// Integers up to 2^64 split into exact 16-bit f32 chunks.
inline Tensor encode_u64(std::uint64_t v) {
  Tensor t(Shape{4});
  for (std::size_t i = 0; i < 4; ++i) t[i] = static_cast<double>((v >> (16 * i)) & 0xFFFF);
  return t;
}

inline std::uint64_t decode_u64(const Tensor& t) {
  if (t.size() != 4) throw FormatError("checkpoint: malformed integer metadata");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v |= static_cast<std::uint64_t>(t[i]) << (16 * i);
  return v;
}

inline Tensor encode_config(const ModelConfig& c) {
  std::vector<double> v = {double(c.input_channels), double(c.patch_size), double(c.feature_size), double(c.window),
                           double(c.num_classes),    double(c.mlp_ratio),  double(c.head == Head::segmentation),
                           double(c.stages())};
  for (auto d : c.depths) v.push_back(double(d));
  for (auto h : c.heads) v.push_back(double(h));
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

inline ModelConfig decode_config(const Tensor& t) {
  auto at = [&](std::size_t i) {
    if (i >= t.size()) throw FormatError("checkpoint: truncated config metadata");
    return static_cast<std::size_t>(t[i]);
  };
  ModelConfig c;
  c.input_channels = at(0);
  c.patch_size = at(1);
  c.feature_size = at(2);
  c.window = at(3);
  c.num_classes = at(4);
  c.mlp_ratio = at(5);
  c.head = at(6) ? Head::segmentation : Head::reconstruction;
  const std::size_t stages = at(7);
  c.depths.clear();
  c.heads.clear();
  for (std::size_t i = 0; i < stages; ++i) c.depths.push_back(at(8 + i));
  for (std::size_t i = 0; i < stages; ++i) c.heads.push_back(at(8 + stages + i));
  if (t.size() != 8 + 2 * stages) throw FormatError("checkpoint: malformed config metadata");
  return c;
}

}  // namespace detail

inline Checkpoint make_checkpoint(const Model& model, CheckpointMeta meta) {
  meta.config = model.config();
  Checkpoint ck;
  ck.meta = meta;
  for (const auto& [name, t] : model.params()) ck.tensors.emplace_back(name, t);
  return ck;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::pair<std::string, Tensor>> all = ck.tensors;
  all.emplace_back("meta.config", detail::encode_config(ck.meta.config));
  all.emplace_back("meta.epoch", detail::encode_u64(ck.meta.epoch));
  all.emplace_back("meta.phase", Tensor::scalar(static_cast<double>(ck.meta.phase)));
  all.emplace_back("meta.seed", detail::encode_u64(ck.meta.seed));
  io::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, t] : all) {
    if (name.size() > 0xFFFF) throw ValidationError("checkpoint: tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.u64(e);
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  std::vector<std::uint8_t> bytes = w.bytes();
  const std::uint32_t crc = detail::crc32_of(bytes, bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  return bytes;
}

/// Parses a whole checkpoint or throws FormatError; never returns a partial one.
inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 4 || std::string(bytes.begin(), bytes.begin() + 4) != kCheckpointMagic) {
    throw FormatError(what + ": bad magic, expected MPAE");
  }
  if (bytes.size() < 16) throw FormatError(what + ": truncated header");
  io::ByteReader r(bytes, what);
  r.raw(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.u32();
  Checkpoint ck;
  std::optional<Tensor> config, epoch, phase, seed;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u16();
    std::string name = r.raw(len);
    const std::size_t rank = r.u8();
    Shape shape = io::read_extents(r, rank, what);
    const std::size_t n = numel(shape);
    r.need(4 * n);
    std::vector<double> data(n);
    for (auto& v : data) v = static_cast<double>(r.f32());
    Tensor t(std::move(shape), std::move(data));
    if (name == "meta.config") config = std::move(t);
    else if (name == "meta.epoch") epoch = std::move(t);
    else if (name == "meta.phase") phase = std::move(t);
    else if (name == "meta.seed") seed = std::move(t);
    else ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  const std::size_t body = r.position();
  const auto stored = r.u32();
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after footer");
  if (stored != detail::crc32_of(bytes, body)) throw FormatError(what + ": CRC mismatch");
  if (!config || !epoch || !phase || !seed) throw FormatError(what + ": missing metadata tensors");
  ck.meta.config = detail::decode_config(*config);
  ck.meta.epoch = detail::decode_u64(*epoch);
  ck.meta.seed = detail::decode_u64(*seed);
  const auto ph = static_cast<int>(phase->item());
  if (ph < 0 || ph > 2) throw FormatError(what + ": unknown phase tag");
  ck.meta.phase = static_cast<Phase>(ph);
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) { io::write_file(path, encode_checkpoint(ck)); }
inline void save_checkpoint(const Model& model, CheckpointMeta meta, const std::string& path) {
  save_checkpoint(make_checkpoint(model, std::move(meta)), path);
}
inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path), path); }

/// Builds a model from a checkpoint. `full` restores every tensor of the
/// stored configuration. `encoder_only` initializes `target` from `seed`
/// and overwrites only the encoder tensors (the pretrain -> finetune transfer).
inline Model load_model(const Checkpoint& ck, LoadMode mode, std::optional<ModelConfig> target = std::nullopt,
                        std::uint64_t seed = 0) {
  ModelConfig cfg = mode == LoadMode::full ? ck.meta.config : target.value_or(ck.meta.config);
  if (mode == LoadMode::full && target && !(*target == ck.meta.config)) {
    throw ValidationError("checkpoint: stored configuration differs from the requested one");
  }
  Model model(cfg, seed);
  for (auto& [name, t] : model.params()) {
    const bool wanted = mode == LoadMode::full || name.rfind("encoder.", 0) == 0;
    if (!wanted) continue;
    const Tensor* src = ck.find(name);
    if (!src) throw FormatError("checkpoint: missing tensor " + name);
    if (src->shape() != t.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + to_string(src->shape()) + ", expected " +
                        to_string(t.shape()));
    }
    t = *src;
  }
  return model;
}

inline Model load_checkpoint(const std::string& path, LoadMode mode, std::optional<ModelConfig> target = std::nullopt,
                             std::uint64_t seed = 0) {
  return load_model(read_checkpoint(path), mode, std::move(target), seed);
}

}  // namespace mpae
