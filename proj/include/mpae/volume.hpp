#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mpae/binary_io.hpp"
#include "mpae/tensor.hpp"

namespace mpae {

enum class Modality : std::uint8_t { flair = 0, t1 = 1, t1c = 2, t2 = 3 };

inline constexpr std::size_t kModalityCount = 4;
inline constexpr std::array<Modality, kModalityCount> kCanonicalModalities = {Modality::flair, Modality::t1, Modality::t1c,
                                                                             Modality::t2};

inline std::string_view modality_name(Modality m) {
  constexpr std::array<std::string_view, kModalityCount> names = {"FLAIR", "T1", "T1c", "T2"};
  return names[static_cast<std::size_t>(m)];
}

/// Subset of {FLAIR, T1, T1c, T2}. Iteration is always in canonical order.
class ModalitySet {
 public:
  constexpr ModalitySet() = default;
  constexpr explicit ModalitySet(std::uint8_t bits) : bits_(bits & 0xF) {}
  ModalitySet(std::initializer_list<Modality> ms) {
    for (auto m : ms) insert(m);
  }

  static constexpr ModalitySet all() { return ModalitySet(0xF); }

  /// Parses "FLAIR,T1c" (case-insensitive, "all" accepted).
  static ModalitySet parse(std::string_view text) {
    ModalitySet s;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto end = std::min(text.find(',', start), text.size());
      std::string tok(text.substr(start, end - start));
      std::string up;
      for (char c : tok) {
        if (c != ' ' && c != '\t') up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
      }
      if (up == "ALL") {
        s = all();
      } else if (up == "FLAIR" || up == "F") {
        s.insert(Modality::flair);
      } else if (up == "T1") {
        s.insert(Modality::t1);
      } else if (up == "T1C" || up == "T1CE") {
        s.insert(Modality::t1c);
      } else if (up == "T2") {
        s.insert(Modality::t2);
      } else if (!up.empty()) {
        throw ValidationError("unknown modality '" + tok + "'");
      }
      start = end + 1;
    }
    return s;
  }

  void insert(Modality m) { bits_ |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(m)); }
  bool contains(Modality m) const { return (bits_ >> static_cast<unsigned>(m)) & 1u; }
  std::size_t count() const { return static_cast<std::size_t>(std::popcount(bits_)); }
  bool empty() const { return bits_ == 0; }
  std::uint8_t bits() const { return bits_; }
  ModalitySet complement() const { return ModalitySet(static_cast<std::uint8_t>(~bits_ & 0xF)); }
  /// Number of missing modalities, m = M - |present|.
  std::size_t missing_count() const { return kModalityCount - count(); }

  std::vector<Modality> members() const {
    std::vector<Modality> out;
    for (auto m : kCanonicalModalities) {
      if (contains(m)) out.push_back(m);
    }
    return out;
  }

  std::string to_string() const {
    std::string s;
    for (auto m : members()) {
      if (!s.empty()) s += '+';
      s += modality_name(m);
    }
    return s.empty() ? "none" : s;
  }

  bool operator==(const ModalitySet&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

/// C x D x H x W intensities, channel k holding modality channels[k].
struct MultiModalVolume {
  Tensor data;
  std::vector<Modality> channels;

  std::size_t depth() const { return data.extent(1); }
  std::size_t height() const { return data.extent(2); }
  std::size_t width() const { return data.extent(3); }
  std::size_t voxels() const { return depth() * height() * width(); }
  std::size_t channel_count() const { return data.extent(0); }

  ModalitySet modalities() const {
    ModalitySet s;
    for (auto m : channels) s.insert(m);
    return s;
  }
};

/// Tumor label classes; index 0 is background.
enum class TissueClass : std::uint8_t { background = 0, necrotic = 1, edema = 2, enhancing = 3 };
inline constexpr std::size_t kTissueClassCount = 4;
inline constexpr std::array<std::string_view, kTissueClassCount> kClassNames = {"background", "NCR/NE", "ED", "ET"};

/// D x H x W class indices in [0, classes).
struct LabelVolume {
  Shape extents;  // {D, H, W}
  std::vector<std::uint8_t> labels;
  std::size_t classes = kTissueClassCount;

  std::size_t voxels() const { return labels.size(); }
};

// ---------------------------------------------------------------------------
// MMV1 volume files: magic "MMV1", u8 rank, rank x u64 extents, f32 values.

inline constexpr std::string_view kVolumeMagic = "MMV1";

inline std::vector<std::uint8_t> encode_volume(const Tensor& t) {
  io::ByteWriter w;
  w.raw(kVolumeMagic);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) w.u64(e);
  for (double v : t.data()) w.f32(static_cast<float>(v));
  return w.bytes();
}

inline Tensor decode_volume(const std::vector<std::uint8_t>& bytes, const std::string& what = "volume") {
  io::ByteReader r(bytes, what);
  if (r.remaining() < 4 || r.raw(4) != kVolumeMagic) throw FormatError(what + ": bad magic, expected MMV1");
  const std::size_t rank = r.u8();
  Shape shape = io::read_extents(r, rank, what);
  const std::size_t n = numel(shape);
  r.need(4 * n);
  std::vector<double> data(n);
  for (auto& v : data) v = static_cast<double>(r.f32());
  if (r.remaining() != 0) throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return Tensor(std::move(shape), std::move(data));
}

inline void write_volume(const std::string& path, const Tensor& t) { io::write_file(path, encode_volume(t)); }
inline Tensor read_volume(const std::string& path) { return decode_volume(io::read_file(path), path); }

inline std::size_t volume_file_size(const Shape& shape) { return 4 + 1 + 8 * shape.size() + 4 * numel(shape); }

inline Tensor labels_to_tensor(const LabelVolume& l) {
  Tensor t(l.extents);
  for (std::size_t i = 0; i < l.labels.size(); ++i) t[i] = l.labels[i];
  return t;
}

inline LabelVolume labels_from_tensor(const Tensor& t, std::size_t classes = kTissueClassCount) {
  if (t.rank() != 3) throw FormatError("label volume must have rank 3, got " + to_string(t.shape()));
  LabelVolume l{t.shape(), std::vector<std::uint8_t>(t.size()), classes};
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    if (v < 0.0 || v >= static_cast<double>(classes) || v != std::floor(v)) {
      throw FormatError("label value " + std::to_string(v) + " outside [0, " + std::to_string(classes) + ")");
    }
    l.labels[i] = static_cast<std::uint8_t>(v);
  }
  return l;
}

}  // namespace mpae
