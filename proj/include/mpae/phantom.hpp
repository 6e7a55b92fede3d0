#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mpae/random.hpp"
#include "mpae/volume.hpp"

namespace mpae {

/// Contrast columns, in the order {background, edema, necrotic, enhancing}.
enum class ContrastColumn : std::size_t { background = 0, edema = 1, necrotic = 2, enhancing = 3 };

struct ContrastEntry {
  double mean = 0.0;
  double sigma = 0.05;
};

using ContrastTable = std::array<std::array<ContrastEntry, 4>, kModalityCount>;

/// T1c carries enhancing tumor; FLAIR and T2 carry edema.
inline ContrastTable default_contrast() {
  constexpr double s = 0.05;
  return {{
      {{{0.30, s}, {0.85, s}, {0.50, s}, {0.45, s}}},  // FLAIR
      {{{0.45, s}, {0.35, s}, {0.20, s}, {0.40, s}}},  // T1
      {{{0.40, s}, {0.35, s}, {0.25, s}, {0.90, s}}},  // T1c
      {{{0.25, s}, {0.85, s}, {0.45, s}, {0.40, s}}},  // T2
  }};
}

struct RadiusRange {
  double lo = 1.0, hi = 2.0;
};

struct PhantomConfig {
  std::size_t extent = 32;
  std::size_t min_tumors = 2, max_tumors = 3;
  RadiusRange whole_tumor{5.0, 9.0};
  RadiusRange tumor_core{3.0, 6.0};
  RadiusRange enhancing{1.0, 3.0};
  ContrastTable contrast = default_contrast();
  std::uint64_t seed = 0;
  /// Selects the noise realization; geometry depends only on `seed`.
  std::uint64_t noise_stream = 0;
};

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
};

/// Three nested ellipsoids sharing one center.
struct TumorGeometry {
  Ellipsoid whole, core, enhancing;
};

struct Phantom {
  MultiModalVolume volume;
  LabelVolume labels;
  std::vector<TumorGeometry> tumors;
};

inline constexpr double kRadiusGap = 0.5;

namespace detail {

inline ContrastColumn column_of(TissueClass c) {
  switch (c) {
    case TissueClass::background: return ContrastColumn::background;
    case TissueClass::edema: return ContrastColumn::edema;
    case TissueClass::necrotic: return ContrastColumn::necrotic;
    case TissueClass::enhancing: return ContrastColumn::enhancing;
  }
  return ContrastColumn::background;
}

// Fisher ratio of one contrast column against the equally weighted mixture
// of the other three, from the table alone.
inline double table_fisher(const ContrastTable& t, std::size_t modality, ContrastColumn target) {
  const auto col = static_cast<std::size_t>(target);
  double mu = 0.0, second = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    if (c == col) continue;
    mu += t[modality][c].mean / 3.0;
    second += (t[modality][c].sigma * t[modality][c].sigma + t[modality][c].mean * t[modality][c].mean) / 3.0;
  }
  const double var_rest = second - mu * mu;
  const double d = t[modality][col].mean - mu;
  return d * d / (t[modality][col].sigma * t[modality][col].sigma + var_rest);
}

inline int paint_priority(TissueClass c) {
  switch (c) {
    case TissueClass::background: return 0;
    case TissueClass::edema: return 1;
    case TissueClass::necrotic: return 2;
    case TissueClass::enhancing: return 3;
  }
  return 0;
}

inline bool inside(const Ellipsoid& e, double x, double y, double z) {
  const double a = (x - e.center[0]) / e.radii[0];
  const double b = (y - e.center[1]) / e.radii[1];
  const double c = (z - e.center[2]) / e.radii[2];
  return a * a + b * b + c * c <= 1.0;
}

}  // namespace detail

/// Rejects radius ranges that cannot keep ET < TC < WT, and contrast tables
/// where T1c is not the most ET-separable modality or edema is not most
/// separable in FLAIR or T2.
inline void validate_phantom_config(const PhantomConfig& c) {
  auto fail = [](const std::string& m) { throw ValidationError("phantom config: " + m); };
  if (c.extent < 4) fail("extent must be >= 4");
  if (c.min_tumors == 0 || c.min_tumors > c.max_tumors) fail("invalid tumor count range");
  for (const auto* r : {&c.whole_tumor, &c.tumor_core, &c.enhancing}) {
    if (!(r->lo > 0.0 && r->lo <= r->hi)) fail("invalid radius range");
  }
  if (c.tumor_core.lo + kRadiusGap > c.whole_tumor.lo || c.enhancing.lo + kRadiusGap > c.tumor_core.lo) {
    fail("infeasible radius ranges: need ET < TC < WT");
  }
  if (2.0 * c.whole_tumor.hi >= static_cast<double>(c.extent)) fail("whole-tumor radius does not fit the volume");
  const auto t1c = static_cast<std::size_t>(Modality::t1c);
  const double et_t1c = detail::table_fisher(c.contrast, t1c, ContrastColumn::enhancing);
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    if (m != t1c && detail::table_fisher(c.contrast, m, ContrastColumn::enhancing) >= et_t1c) {
      fail("enhancing tumor is not most separable in T1c");
    }
  }
  const auto flair = static_cast<std::size_t>(Modality::flair), t2 = static_cast<std::size_t>(Modality::t2);
  const double ed_best = std::max(detail::table_fisher(c.contrast, flair, ContrastColumn::edema),
                                  detail::table_fisher(c.contrast, t2, ContrastColumn::edema));
  for (std::size_t m : {static_cast<std::size_t>(Modality::t1), t1c}) {
    if (detail::table_fisher(c.contrast, m, ContrastColumn::edema) >= ed_best) fail("edema is not most separable in FLAIR/T2");
  }
}

/// Tumor geometry for case `index`; a function of (seed, index) only.
inline std::vector<TumorGeometry> phantom_geometry(const PhantomConfig& c, std::size_t index) {
  Rng rng = Rng::derive(c.seed, index, 1);
  const auto span = c.max_tumors - c.min_tumors + 1;
  const std::size_t count = c.min_tumors + static_cast<std::size_t>(rng.below(span));
  const double e = static_cast<double>(c.extent);
  std::vector<TumorGeometry> tumors;
  for (std::size_t t = 0; t < count; ++t) {
    TumorGeometry g;
    for (std::size_t a = 0; a < 3; ++a) {
      const double rw = rng.uniform(c.whole_tumor.lo, c.whole_tumor.hi);
      const double rt = rng.uniform(c.tumor_core.lo, std::min(c.tumor_core.hi, rw - kRadiusGap));
      const double re = rng.uniform(c.enhancing.lo, std::min(c.enhancing.hi, rt - kRadiusGap));
      g.whole.radii[a] = rw;
      g.core.radii[a] = rt;
      g.enhancing.radii[a] = re;
    }
    for (std::size_t a = 0; a < 3; ++a) {
      const double margin = c.whole_tumor.hi / 2.0;
      g.whole.center[a] = rng.uniform(margin, e - 1.0 - margin);
    }
    g.core.center = g.whole.center;
    g.enhancing.center = g.whole.center;
    tumors.push_back(g);
  }
  return tumors;
}

/// Rasterized labels + per-class Gaussian intensities. Deterministic for
/// (seed, noise_stream, index).
inline Phantom generate_phantom(const PhantomConfig& c, std::size_t index) {
  validate_phantom_config(c);
  Phantom ph;
  ph.tumors = phantom_geometry(c, index);
  const std::size_t n = c.extent;
  ph.labels = LabelVolume{Shape{n, n, n}, std::vector<std::uint8_t>(n * n * n, 0), kTissueClassCount};
  std::size_t i = 0;
  for (std::size_t x = 0; x < n; ++x) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t z = 0; z < n; ++z, ++i) {
        auto best = TissueClass::background;
        const double fx = double(x), fy = double(y), fz = double(z);
        for (const auto& t : ph.tumors) {
          TissueClass here = TissueClass::background;
          if (detail::inside(t.enhancing, fx, fy, fz)) here = TissueClass::enhancing;
          else if (detail::inside(t.core, fx, fy, fz)) here = TissueClass::necrotic;
          else if (detail::inside(t.whole, fx, fy, fz)) here = TissueClass::edema;
          if (detail::paint_priority(here) > detail::paint_priority(best)) best = here;
        }
        ph.labels.labels[i] = static_cast<std::uint8_t>(best);
      }
    }
  }
  Rng noise = Rng::derive(c.seed, index, 2, c.noise_stream);
  const std::size_t v = n * n * n;
  ph.volume.data = Tensor(Shape{kModalityCount, n, n, n});
  ph.volume.channels.assign(kCanonicalModalities.begin(), kCanonicalModalities.end());
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    for (std::size_t j = 0; j < v; ++j) {
      const auto col = static_cast<std::size_t>(detail::column_of(static_cast<TissueClass>(ph.labels.labels[j])));
      const auto& entry = c.contrast[m][col];
      ph.volume.data[m * v + j] = entry.mean + entry.sigma * noise.normal();
    }
  }
  return ph;
}

/// Empirical Fisher ratio of `cls` versus all other voxels in one channel.
inline double fisher_ratio(const MultiModalVolume& vol, const LabelVolume& labels, Modality m, TissueClass cls) {
  std::size_t ch = vol.channels.size();
  for (std::size_t c = 0; c < vol.channels.size(); ++c) {
    if (vol.channels[c] == m) ch = c;
  }
  if (ch == vol.channels.size()) throw ValidationError("fisher_ratio: modality not present");
  const std::size_t v = labels.voxels();
  double s[2] = {0, 0}, ss[2] = {0, 0};
  std::size_t cnt[2] = {0, 0};
  for (std::size_t j = 0; j < v; ++j) {
    const int k = labels.labels[j] == static_cast<std::uint8_t>(cls) ? 1 : 0;
    const double x = vol.data[ch * v + j];
    s[k] += x;
    ss[k] += x * x;
    ++cnt[k];
  }
  if (cnt[0] < 2 || cnt[1] < 2) return 0.0;
  double mu[2], var[2];
  for (int k = 0; k < 2; ++k) {
    mu[k] = s[k] / double(cnt[k]);
    var[k] = ss[k] / double(cnt[k]) - mu[k] * mu[k];
  }
  return (mu[1] - mu[0]) * (mu[1] - mu[0]) / (var[0] + var[1]);
}

struct ModalitySplit {
  MultiModalVolume kept;
  std::optional<MultiModalVolume> missing;
};

/// Restricts a volume to `keep` (canonical order); the dropped channels are
/// returned separately.
inline ModalitySplit drop_modalities(const MultiModalVolume& vol, ModalitySet keep) {
  if (keep.empty()) throw ValidationError("drop_modalities: keep set is empty");
  const auto& s = vol.data.shape();
  const std::size_t v = vol.voxels();
  auto extract = [&](ModalitySet which) {
    MultiModalVolume out;
    std::vector<double> data;
    for (auto m : which.members()) {
      bool found = false;
      for (std::size_t c = 0; c < vol.channels.size(); ++c) {
        if (vol.channels[c] != m) continue;
        data.insert(data.end(), vol.data.data().begin() + static_cast<std::ptrdiff_t>(c * v),
                    vol.data.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * v));
        found = true;
      }
      if (!found) throw ValidationError("drop_modalities: volume lacks " + std::string(modality_name(m)));
      out.channels.push_back(m);
    }
    out.data = Tensor(Shape{out.channels.size(), s[1], s[2], s[3]}, std::move(data));
    return out;
  };
  ModalitySplit split{extract(keep), std::nullopt};
  const ModalitySet rest(static_cast<std::uint8_t>(vol.modalities().bits() & ~keep.bits()));
  if (!rest.empty()) split.missing = extract(rest);
  return split;
}

/// Four-channel model input: visible channels in place, missing ones zero.
inline Tensor zero_filled(const MultiModalVolume& vol, ModalitySet keep) {
  const auto& s = vol.data.shape();
  const std::size_t v = vol.voxels();
  Tensor out(Shape{kModalityCount, s[1], s[2], s[3]}, 0.0);
  for (std::size_t c = 0; c < vol.channels.size(); ++c) {
    if (!keep.contains(vol.channels[c])) continue;
    const auto dst = static_cast<std::size_t>(vol.channels[c]);
    std::copy_n(vol.data.data().begin() + static_cast<std::ptrdiff_t>(c * v), v,
                out.data().begin() + static_cast<std::ptrdiff_t>(dst * v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets on disk: MMV1 volumes + a manifest of "index, volume_path, label_path".

struct ManifestEntry {
  std::size_t index = 0;
  std::string volume_path;
  std::string label_path;
};

inline constexpr const char* kManifestName = "manifest.csv";

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream in(path);
  if (!in) throw ValidationError("dataset: cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c)) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected 'index, volume_path, label_path'");
    }
    auto trim = [](std::string s) {
      const auto f = s.find_first_not_of(" \t\r");
      const auto l = s.find_last_not_of(" \t\r");
      return f == std::string::npos ? std::string() : s.substr(f, l - f + 1);
    };
    try {
      out.push_back({std::stoul(trim(a)), trim(b), trim(c)});
    } catch (const std::logic_error&) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": bad index '" + a + "'");
    }
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& dir, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw ValidationError("dataset: cannot write manifest in " + dir.string());
  for (const auto& e : entries) out << e.index << ", " << e.volume_path << ", " << e.label_path << '\n';
}

struct Case {
  std::size_t index = 0;
  MultiModalVolume volume;
  LabelVolume labels;
};

inline Case load_case(const std::filesystem::path& dir, const ManifestEntry& e) {
  Case c;
  c.index = e.index;
  c.volume.data = read_volume((dir / e.volume_path).string());
  if (c.volume.data.rank() != 4 || c.volume.data.extent(0) != kModalityCount) {
    throw FormatError("dataset: " + e.volume_path + " is not a 4-modality volume");
  }
  c.volume.channels.assign(kCanonicalModalities.begin(), kCanonicalModalities.end());
  c.labels = labels_from_tensor(read_volume((dir / e.label_path).string()));
  const Shape spatial(c.volume.data.shape().begin() + 1, c.volume.data.shape().end());
  if (spatial != c.labels.extents) throw FormatError("dataset: label extents differ from volume for case " + std::to_string(e.index));
  return c;
}

inline std::vector<Case> load_dataset(const std::filesystem::path& dir) {
  std::vector<Case> cases;
  for (const auto& e : read_manifest(dir)) cases.push_back(load_case(dir, e));
  if (cases.empty()) throw ValidationError("dataset: manifest in " + dir.string() + " lists no cases");
  return cases;
}

/// Writes `count` phantoms and the manifest into `dir`.
inline std::vector<ManifestEntry> write_dataset(const std::filesystem::path& dir, const PhantomConfig& cfg, std::size_t count) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    const Phantom ph = generate_phantom(cfg, i);
    char stem[32];
    std::snprintf(stem, sizeof stem, "case_%04zu", i);
    ManifestEntry e{i, std::string(stem) + ".mmv", std::string(stem) + "_label.mmv"};
    write_volume((dir / e.volume_path).string(), ph.volume.data);
    write_volume((dir / e.label_path).string(), labels_to_tensor(ph.labels));
    entries.push_back(e);
  }
  write_manifest(dir, entries);
  return entries;
}

}  // namespace mpae
