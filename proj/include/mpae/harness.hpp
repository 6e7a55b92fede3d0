#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mpae/checkpoint.hpp"
#include "mpae/masking.hpp"
#include "mpae/model.hpp"
#include "mpae/optim.hpp"
#include "mpae/phantom.hpp"
#include "mpae/seg_loss.hpp"

namespace mpae {

enum class TrainPhase { pretrain, finetune };

struct TrainConfig {
  TrainPhase phase = TrainPhase::finetune;
  ModalitySet modalities = ModalitySet::all();
  std::size_t epochs = 30;
  std::size_t batch_size = 2;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  std::size_t warmup = 5;
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  // distillation
  double tau = 1.0;
  double w = 1.0;
  double alpha = 1.6;
  KdKind kd = KdKind::none;
  // pretraining
  RecNorm rec_norm = RecNorm::l1;
  MaskMode mask_mode = MaskMode::table;
  RecScope rec_scope = RecScope::masked_plus_missing;
  bool mask = true;
  // data
  std::size_t crop = 16;
  std::size_t val_count = 10;
  // evaluation
  std::size_t eval_window = 16;
  double eval_overlap = 0.5;
  ModelConfig model;

  void validate() const {
    if (modalities.empty()) throw ValidationError("config: modality subset is empty");
    if (epochs == 0 || batch_size == 0) throw ValidationError("config: epochs and batch_size must be positive");
    if (warmup >= epochs && warmup != 0) throw ValidationError("config: warmup must be shorter than epochs");
    if (!(lr > 0.0) || weight_decay < 0.0) throw ValidationError("config: lr must be positive and weight_decay >= 0");
    if (!(tau > 0.0)) throw ValidationError("config: tau must be positive");
    if (!(eval_overlap >= 0.0 && eval_overlap < 1.0)) throw ValidationError("config: overlap must lie in [0, 1)");
    HolderParams::conjugate(alpha);
    model.validate();
    model.validate_input(crop, crop, crop);
  }
};

// ---------------------------------------------------------------------------
// key = value configuration files

inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& what = "config") {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](const std::string& s) {
    const auto f = s.find_first_not_of(" \t\r");
    const auto l = s.find_last_not_of(" \t\r");
    return f == std::string::npos ? std::string() : s.substr(f, l - f + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(what + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError(what + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace detail {

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const auto n = std::stoul(tok, &used);
      out.push_back(n);
    } catch (const std::logic_error&) {
      throw ValidationError("config: " + key + " expects a comma-separated integer list, got '" + v + "'");
    }
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ValidationError("config: " + key + " expects a number, got '" + v + "'");
  }
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const double d = parse_real(key, v);
  if (d < 0 || d != std::floor(d)) throw ValidationError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ValidationError("config: " + key + " expects on/off, got '" + v + "'");
}

}  // namespace detail

/// Applies one setting; unknown keys are a validation error.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "phase") {
    if (v == "pretrain") c.phase = TrainPhase::pretrain;
    else if (v == "finetune") c.phase = TrainPhase::finetune;
    else throw ValidationError("config: phase must be pretrain or finetune");
  } else if (key == "modalities") c.modalities = ModalitySet::parse(v);
  else if (key == "epochs") c.epochs = parse_count(key, v);
  else if (key == "batch_size") c.batch_size = parse_count(key, v);
  else if (key == "lr") c.lr = parse_real(key, v);
  else if (key == "weight_decay") c.weight_decay = parse_real(key, v);
  else if (key == "warmup") c.warmup = parse_count(key, v);
  else if (key == "seed") c.seed = parse_count(key, v);
  else if (key == "beta1") c.beta1 = parse_real(key, v);
  else if (key == "beta2") c.beta2 = parse_real(key, v);
  else if (key == "eps") c.eps = parse_real(key, v);
  else if (key == "tau") c.tau = parse_real(key, v);
  else if (key == "w") c.w = parse_real(key, v);
  else if (key == "alpha") c.alpha = parse_real(key, v);
  else if (key == "kd") c.kd = parse_kd_kind(v);
  else if (key == "rec_norm") c.rec_norm = parse_rec_norm(v);
  else if (key == "mask_mode") c.mask_mode = parse_mask_mode(v);
  else if (key == "rec_scope") c.rec_scope = parse_rec_scope(v);
  else if (key == "mask") c.mask = parse_bool(key, v);
  else if (key == "crop") c.crop = parse_count(key, v);
  else if (key == "val_count") c.val_count = parse_count(key, v);
  else if (key == "eval_window") c.eval_window = parse_count(key, v);
  else if (key == "eval_overlap") c.eval_overlap = parse_real(key, v);
  else if (key == "feature_size") c.model.feature_size = parse_count(key, v);
  else if (key == "patch_size") c.model.patch_size = parse_count(key, v);
  else if (key == "window") c.model.window = parse_count(key, v);
  else if (key == "depths") c.model.depths = parse_size_list(key, v);
  else if (key == "heads") c.model.heads = parse_size_list(key, v);
  else if (key == "mlp_ratio") c.model.mlp_ratio = parse_count(key, v);
  else throw ValidationError("config: unknown key '" + key + "'");
}

inline TrainConfig load_train_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path);
  for (const auto& [k, v] : parse_key_values(in, path)) apply_setting(base, k, v);
  return base;
}

// ---------------------------------------------------------------------------
// Scenarios and datasets

/// The 15 non-empty modality subsets: singletons, pairs, triples, full set.
inline std::vector<ModalitySet> enumerate_scenarios() {
  using M = Modality;
  return {
      {M::t2},
      {M::t1c},
      {M::t1},
      {M::flair},
      {M::t1c, M::t2},
      {M::t1, M::t1c},
      {M::flair, M::t1},
      {M::t1, M::t2},
      {M::flair, M::t2},
      {M::flair, M::t1c},
      {M::flair, M::t1, M::t1c},
      {M::flair, M::t1, M::t2},
      {M::flair, M::t1c, M::t2},
      {M::t1, M::t1c, M::t2},
      ModalitySet::all(),
  };
}

struct DatasetSplit {
  std::vector<Case> train, validation;
};

/// The last `val_count` manifest entries are held out for validation.
inline DatasetSplit split_dataset(std::vector<Case> cases, std::size_t val_count) {
  if (val_count >= cases.size()) {
    throw ValidationError("dataset: " + std::to_string(cases.size()) + " cases cannot hold out " + std::to_string(val_count));
  }
  DatasetSplit s;
  const auto cut = cases.end() - static_cast<std::ptrdiff_t>(val_count);
  s.train.assign(std::make_move_iterator(cases.begin()), std::make_move_iterator(cut));
  s.validation.assign(std::make_move_iterator(cut), std::make_move_iterator(cases.end()));
  return s;
}

/// Sub-volume [o, o + n) of a C x D x H x W tensor.
inline Tensor crop_tensor(const Tensor& t, std::array<std::size_t, 3> o, std::array<std::size_t, 3> n) {
  const auto& s = t.shape();
  if (s.size() != 4) throw ShapeError("crop: expected C x D x H x W, got " + to_string(s));
  for (std::size_t a = 0; a < 3; ++a) {
    if (o[a] + n[a] > s[a + 1]) throw ValidationError("crop: window exceeds volume " + to_string(s));
  }
  Tensor out(Shape{s[0], n[0], n[1], n[2]});
  std::size_t k = 0;
  for (std::size_t c = 0; c < s[0]; ++c) {
    for (std::size_t d = 0; d < n[0]; ++d) {
      for (std::size_t h = 0; h < n[1]; ++h) {
        const std::size_t base = ((c * s[1] + o[0] + d) * s[2] + o[1] + h) * s[3] + o[2];
        for (std::size_t w = 0; w < n[2]; ++w) out[k++] = t[base + w];
      }
    }
  }
  return out;
}

inline LabelVolume crop_labels(const LabelVolume& l, std::array<std::size_t, 3> o, std::size_t n) {
  LabelVolume out{Shape{n, n, n}, std::vector<std::uint8_t>(n * n * n), l.classes};
  const auto& e = l.extents;
  std::size_t k = 0;
  for (std::size_t d = 0; d < n; ++d) {
    for (std::size_t h = 0; h < n; ++h) {
      for (std::size_t w = 0; w < n; ++w) out.labels[k++] = l.labels[((o[0] + d) * e[1] + o[1] + h) * e[2] + o[2] + w];
    }
  }
  return out;
}

struct TrainingSample {
  MultiModalVolume volume;  // all four modalities
  LabelVolume labels;
};

/// Random crop on a grid of stride crop/2 (aligned with the evaluation
/// windows), drawn among the positions that contain tumor voxels when any do.
inline TrainingSample random_crop(const Case& c, std::size_t crop, Rng& rng) {
  const auto& s = c.volume.data.shape();
  const std::size_t stride = std::max<std::size_t>(1, crop / 2);
  std::array<std::vector<std::size_t>, 3> starts;
  for (std::size_t a = 0; a < 3; ++a) {
    if (s[a + 1] < crop) throw ValidationError("crop " + std::to_string(crop) + " exceeds volume " + to_string(s));
    for (std::size_t o = 0; o + crop <= s[a + 1]; o += stride) starts[a].push_back(o);
  }
  std::vector<std::array<std::size_t, 3>> all, positive;
  for (auto z : starts[0]) {
    for (auto y : starts[1]) {
      for (auto x : starts[2]) {
        const std::array<std::size_t, 3> o{z, y, x};
        all.push_back(o);
        const LabelVolume l = crop_labels(c.labels, o, crop);
        if (std::any_of(l.labels.begin(), l.labels.end(), [](std::uint8_t v) { return v != 0; })) positive.push_back(o);
      }
    }
  }
  const auto& pool = positive.empty() ? all : positive;
  const auto o = pool[static_cast<std::size_t>(rng.below(pool.size()))];
  TrainingSample t;
  t.volume.data = crop_tensor(c.volume.data, o, {crop, crop, crop});
  t.volume.channels = c.volume.channels;
  t.labels = crop_labels(c.labels, o, crop);
  return t;
}

// ---------------------------------------------------------------------------
// Training loops

struct LossRecord {
  std::size_t epoch = 0, step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Model model;
  Checkpoint checkpoint;
  std::vector<LossRecord> losses;
};

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string loss_csv(const std::vector<LossRecord>& losses) {
  std::string out = "epoch,step,loss\n";
  for (const auto& r : losses) out += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + format_real(r.loss) + "\n";
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out << text;
}

namespace detail {

inline AdamWOptions adamw_options(const TrainConfig& c, double lr) { return {lr, c.weight_decay, c.beta1, c.beta2, c.eps}; }

inline void check_finite(double loss, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
  }
}

// One optimizer step over a batch; `sample_loss` builds the loss for one
// sample on its own tape. Gradients are averaged over the batch.
template <class SampleLoss>
double batch_step(Model& model, AdamWState& state, const AdamWOptions& opt, std::size_t count, SampleLoss&& sample_loss) {
  std::map<std::string, Tensor> grads;
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    Tape tape;
    BoundParams p(tape, model, true);
    Var loss = sample_loss(i, tape, p);
    total += loss.value().item();
    tape.backward(loss);
    for (const auto& [name, v] : p.vars()) {
      if (!tape.has_grad(v)) continue;
      Tensor g = tape.grad(v);
      auto [it, fresh] = grads.try_emplace(name, g);
      if (!fresh) {
        for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
      }
    }
  }
  for (auto& [_, g] : grads) {
    for (auto& x : g.data()) x /= static_cast<double>(count);
  }
  adamw_step(model.params(), grads, state, opt);
  return total / static_cast<double>(count);
}

template <class Step>
std::vector<LossRecord> run_epochs(const TrainConfig& c, std::size_t train_size, std::uint64_t stream, Step&& step) {
  std::vector<LossRecord> losses;
  for (std::size_t e = 0; e < c.epochs; ++e) {
    const double lr = lr_schedule(e, c.epochs, c.warmup, c.lr);
    Rng order_rng = Rng::derive(c.seed, stream, 1, e);
    std::vector<std::size_t> order(train_size);
    for (std::size_t i = 0; i < train_size; ++i) order[i] = i;
    for (std::size_t i = train_size; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    std::size_t s = 0;
    for (std::size_t start = 0; start < train_size; start += c.batch_size, ++s) {
      const std::size_t n = std::min(c.batch_size, train_size - start);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(start + n));
      const double loss = step(e, s, batch, lr);
      check_finite(loss, e, s);
      losses.push_back({e, s, loss});
    }
  }
  return losses;
}

}  // namespace detail

inline ModelConfig with_head(ModelConfig m, Head h) {
  m.head = h;
  return m;
}

/// Masked (and/or missing-modality) reconstruction pretraining on the
/// configured visible subset.
inline TrainResult pretrain(const TrainConfig& c, const std::vector<Case>& train) {
  c.validate();
  if (train.empty()) throw ValidationError("pretrain: empty training set");
  const ModalitySet visible = c.modalities;
  const ModalitySet missing = visible.complement();
  const double ratio = c.mask ? mask_ratio_for_missing(missing.count(), c.mask_mode) : 0.0;
  const std::size_t grid_n = c.crop / c.model.patch_size;
  const PatchGrid grid{grid_n, grid_n, grid_n};
  Model model(with_head(c.model, Head::reconstruction), c.seed);
  AdamWState state;
  auto step = [&](std::size_t e, std::size_t s, const std::vector<std::size_t>& batch, double lr) {
    return detail::batch_step(model, state, detail::adamw_options(c, lr), batch.size(), [&](std::size_t i, Tape& tape, const BoundParams& p) {
      Rng crop_rng = Rng::derive(c.seed, 2, e, s * c.batch_size + i);
      const TrainingSample sample = random_crop(train[batch[i]], c.crop, crop_rng);
      const MaskSpec spec = c.mask ? sample_patch_mask(grid, ratio, Rng::derive(c.seed, 3, e, s * c.batch_size + i).next(), c.model.patch_size)
                                   : empty_mask(grid, c.model.patch_size);
      Var input = tape.constant(zero_filled(sample.volume, visible));
      Var rec = forward_reconstruct(input, p, c.mask ? &spec : nullptr);
      return masked_reconstruction_loss(rec, sample.volume, spec, c.rec_norm, c.rec_scope, missing);
    });
  };
  TrainResult r;
  r.losses = detail::run_epochs(c, train.size(), 10, step);
  r.checkpoint = make_checkpoint(model, {Phase::pretrained, c.seed, c.epochs, {}});
  r.model = std::move(model);
  return r;
}

/// Supervised fine-tuning of a segmentation model on the visible subset
/// (missing channels zero-filled), optionally distilled from a frozen
/// full-modality teacher.
inline TrainResult finetune(const TrainConfig& c, const std::vector<Case>& train, const Checkpoint* init,
                            const Model* teacher) {
  c.validate();
  if (train.empty()) throw ValidationError("finetune: empty training set");
  if (c.kd != KdKind::none && !teacher) throw ValidationError("finetune: distillation kind " + std::string(kd_kind_name(c.kd)) + " requires a teacher");
  const ModelConfig seg = with_head(c.model, Head::segmentation);
  if (teacher && teacher->config().out_channels() != seg.num_classes) {
    throw ValidationError("finetune: teacher predicts " + std::to_string(teacher->config().out_channels()) + " classes, student " +
                          std::to_string(seg.num_classes));
  }
  Model model = init ? load_model(*init, LoadMode::encoder_only, seg, c.seed) : Model(seg, c.seed);
  const HolderParams holder = HolderParams::conjugate(c.alpha);
  AdamWState state;
  auto step = [&](std::size_t e, std::size_t s, const std::vector<std::size_t>& batch, double lr) {
    return detail::batch_step(model, state, detail::adamw_options(c, lr), batch.size(), [&](std::size_t i, Tape& tape, const BoundParams& p) {
      Rng crop_rng = Rng::derive(c.seed, 2, e, s * c.batch_size + i);
      const TrainingSample sample = random_crop(train[batch[i]], c.crop, crop_rng);
      Var logits = forward_segment(tape.constant(zero_filled(sample.volume, c.modalities)), p);
      std::optional<Var> t;
      if (teacher && c.kd != KdKind::none) t = tape.constant(segment(*teacher, sample.volume.data));
      return finetune_loss(logits, sample.labels, t, c.w, c.tau, c.kd, holder);
    });
  };
  TrainResult r;
  r.losses = detail::run_epochs(c, train.size(), 20, step);
  const bool is_teacher = c.modalities == ModalitySet::all() && c.kd == KdKind::none;
  r.checkpoint = make_checkpoint(model, {is_teacher ? Phase::teacher : Phase::finetuned, c.seed, c.epochs, {}});
  r.model = std::move(model);
  return r;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Window origins along one axis: stride window * (1 - overlap), the last
/// window clamped to the border.
inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window, double overlap) {
  if (window == 0 || window > extent) throw ValidationError("sliding window: window " + std::to_string(window) + " exceeds extent " + std::to_string(extent));
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ValidationError("sliding window: overlap must lie in [0, 1)");
  const auto stride = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(window) * (1.0 - overlap))));
  std::vector<std::size_t> starts;
  for (std::size_t o = 0; o + window < extent; o += stride) starts.push_back(o);
  starts.push_back(extent - window);
  return starts;
}

using WindowPredictor = std::function<Tensor(const Tensor& window)>;

/// Tiles the C x D x H x W volume, runs `predict` on each window and averages
/// the overlapping J-channel outputs voxelwise.
inline Tensor sliding_window_infer(const WindowPredictor& predict, const Tensor& volume, std::size_t window, double overlap) {
  const auto& s = volume.shape();
  if (s.size() != 4) throw ShapeError("sliding window: expected C x D x H x W, got " + to_string(s));
  const auto zs = window_starts(s[1], window, overlap);
  const auto ys = window_starts(s[2], window, overlap);
  const auto xs = window_starts(s[3], window, overlap);
  Tensor sum;
  bool started = false;
  std::vector<double> counts(s[1] * s[2] * s[3], 0.0);
  for (auto z : zs) {
    for (auto y : ys) {
      for (auto x : xs) {
        const Tensor out = predict(crop_tensor(volume, {z, y, x}, {window, window, window}));
        const auto& os = out.shape();
        if (os.size() != 4 || os[1] != window || os[2] != window || os[3] != window) {
          throw ShapeError("sliding window: predictor returned " + to_string(os));
        }
        if (!started) {
          sum = Tensor(Shape{os[0], s[1], s[2], s[3]}, 0.0);
          started = true;
        } else if (sum.extent(0) != os[0]) {
          throw ShapeError("sliding window: predictor changed its channel count");
        }
        std::size_t k = 0;
        for (std::size_t c = 0; c < os[0]; ++c) {
          for (std::size_t d = 0; d < window; ++d) {
            for (std::size_t h = 0; h < window; ++h) {
              for (std::size_t w = 0; w < window; ++w, ++k) {
                const std::size_t vox = ((z + d) * s[2] + y + h) * s[3] + x + w;
                sum[c * counts.size() + vox] += out[k];
                if (c == 0) counts[vox] += 1.0;
              }
            }
          }
        }
      }
    }
  }
  for (std::size_t c = 0; c < sum.extent(0); ++c) {
    for (std::size_t v = 0; v < counts.size(); ++v) sum[c * counts.size() + v] /= counts[v];
  }
  return sum;
}

/// Per-voxel class with the largest logit; ties go to the lower index.
inline LabelVolume argmax_labels(const Tensor& logits) {
  const auto& s = logits.shape();
  if (s.size() != 4) throw ShapeError("argmax: expected J x D x H x W, got " + to_string(s));
  const std::size_t v = s[1] * s[2] * s[3];
  LabelVolume out{Shape{s[1], s[2], s[3]}, std::vector<std::uint8_t>(v), s[0]};
  for (std::size_t i = 0; i < v; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s[0]; ++c) {
      if (logits[c * v + i] > logits[best * v + i]) best = c;
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

struct RegionDice {
  double wt = 0.0, tc = 0.0, et = 0.0;
  double mean() const { return (wt + tc + et) / 3.0; }
};

inline RegionDice region_dice(const LabelVolume& prediction, const LabelVolume& truth) {
  const RegionMasks p = region_decompose(prediction), t = region_decompose(truth);
  return {dice_score(p.whole_tumor, t.whole_tumor), dice_score(p.tumor_core, t.tumor_core),
          dice_score(p.enhancing_tumor, t.enhancing_tumor)};
}

struct ScenarioRow {
  ModalitySet scenario;
  RegionDice dice;
};

struct EvaluationReport {
  std::vector<ScenarioRow> rows;

  RegionDice average() const {
    RegionDice a;
    for (const auto& r : rows) {
      a.wt += r.dice.wt / static_cast<double>(rows.size());
      a.tc += r.dice.tc / static_cast<double>(rows.size());
      a.et += r.dice.et / static_cast<double>(rows.size());
    }
    return a;
  }

  std::string csv() const {
    std::string out = "scenario,WT,TC,ET,mean\n";
    auto line = [&](const std::string& name, const RegionDice& d) {
      out += name + "," + format_real(d.wt) + "," + format_real(d.tc) + "," + format_real(d.et) + "," + format_real(d.mean()) + "\n";
    };
    for (const auto& r : rows) line(r.scenario.to_string(), r.dice);
    if (!rows.empty()) line("Average", average());
    return out;
  }
};

/// Scores the predicted J x D x H x W logits of every validation case under
/// each scenario. `predict(input, case)` receives the zero-filled input.
using CasePredictor = std::function<Tensor(const Tensor& input, std::size_t case_position)>;

inline EvaluationReport evaluate(const CasePredictor& predict, const std::vector<Case>& cases,
                                 const std::vector<ModalitySet>& scenarios) {
  if (cases.empty()) throw ValidationError("evaluate: no validation cases");
  EvaluationReport report;
  for (const auto& sc : scenarios) {
    RegionDice acc;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const LabelVolume pred = argmax_labels(predict(zero_filled(cases[i].volume, sc), i));
      const RegionDice d = region_dice(pred, cases[i].labels);
      acc.wt += d.wt / static_cast<double>(cases.size());
      acc.tc += d.tc / static_cast<double>(cases.size());
      acc.et += d.et / static_cast<double>(cases.size());
    }
    report.rows.push_back({sc, acc});
  }
  return report;
}

inline EvaluationReport evaluate_model(const Model& model, const std::vector<Case>& cases, const std::vector<ModalitySet>& scenarios,
                                       std::size_t window, double overlap) {
  const WindowPredictor net = [&](const Tensor& w) { return segment(model, w); };
  return evaluate([&](const Tensor& input, std::size_t) { return sliding_window_infer(net, input, window, overlap); }, cases,
                  scenarios);
}

// ---------------------------------------------------------------------------
// Ablations on the phantom task

enum class PretrainVariant { none, mask_only, predict_only, mask_predict };

inline const char* variant_name(PretrainVariant v) {
  switch (v) {
    case PretrainVariant::none: return "no-pretrain";
    case PretrainVariant::mask_only: return "mask-only";
    case PretrainVariant::predict_only: return "predict-only";
    case PretrainVariant::mask_predict: return "mask+predict";
  }
  return "?";
}

/// Pretraining settings of each variant: masking on/off and whether the loss
/// also covers the missing modalities.
inline TrainConfig variant_config(TrainConfig c, PretrainVariant v) {
  c.phase = TrainPhase::pretrain;
  c.mask = v != PretrainVariant::predict_only;
  c.rec_scope = v == PretrainVariant::mask_only ? RecScope::masked_only : RecScope::masked_plus_missing;
  return c;
}

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  RegionDice dice;
};

struct AblationResult {
  std::vector<AblationRow> rows;

  /// Mean over seeds of the three-region mean Dice for one variant.
  double mean_of(const std::string& variant) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.variant == variant) {
        s += r.dice.mean();
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : std::nan("");
  }

  std::string csv() const {
    std::string out = "variant,seed,WT,TC,ET,mean\n";
    std::vector<std::string> names;
    for (const auto& r : rows) {
      out += r.variant + "," + std::to_string(r.seed) + "," + format_real(r.dice.wt) + "," + format_real(r.dice.tc) + "," +
             format_real(r.dice.et) + "," + format_real(r.dice.mean()) + "\n";
      if (std::find(names.begin(), names.end(), r.variant) == names.end()) names.push_back(r.variant);
    }
    for (const auto& n : names) out += n + ",mean,,,," + format_real(mean_of(n)) + "\n";
    return out;
  }
};

struct AblationOutputs {
  AblationResult result;
  std::map<std::string, std::string> loss_csvs;  // keyed "<variant>-seed<k>[-pretrain]"
};

/// Pretraining ablation: a student on `c.modalities` per variant and seed,
/// scored on that same scenario.
struct PretrainPlan {
  std::size_t epochs = 30;
  double lr = 1e-4;
};

inline AblationOutputs run_pretrain_ablation(TrainConfig c, const PretrainPlan& plan, const DatasetSplit& data,
                                             const std::vector<std::uint64_t>& seeds) {
  AblationOutputs out;
  const std::vector<ModalitySet> scenario = {c.modalities};
  for (auto seed : seeds) {
    c.seed = seed;
    for (auto v : {PretrainVariant::none, PretrainVariant::mask_only, PretrainVariant::predict_only, PretrainVariant::mask_predict}) {
      const std::string key = std::string(variant_name(v)) + "-seed" + std::to_string(seed);
      std::optional<Checkpoint> init;
      if (v != PretrainVariant::none) {
        TrainConfig pc = variant_config(c, v);
        pc.epochs = plan.epochs;
        pc.lr = plan.lr;
        TrainResult pr = pretrain(pc, data.train);
        out.loss_csvs[key + "-pretrain"] = loss_csv(pr.losses);
        init = std::move(pr.checkpoint);
      }
      TrainConfig fc = c;
      fc.phase = TrainPhase::finetune;
      fc.kd = KdKind::none;
      TrainResult fr = finetune(fc, data.train, init ? &*init : nullptr, nullptr);
      out.loss_csvs[key] = loss_csv(fr.losses);
      const auto report = evaluate_model(fr.model, data.validation, scenario, c.eval_window, c.eval_overlap);
      out.result.rows.push_back({variant_name(v), seed, report.rows.front().dice});
    }
  }
  return out;
}

/// Distillation ablation: per seed, a full-modality teacher, then students
/// on `c.modalities` without KD, with KL and with the Hoelder divergence.
inline AblationOutputs run_distillation_ablation(TrainConfig c, const DatasetSplit& data, const std::vector<std::uint64_t>& seeds) {
  AblationOutputs out;
  const std::vector<ModalitySet> scenario = {c.modalities};
  for (auto seed : seeds) {
    TrainConfig tc = c;
    tc.seed = seed;
    tc.phase = TrainPhase::finetune;
    tc.modalities = ModalitySet::all();
    tc.kd = KdKind::none;
    TrainResult teacher = finetune(tc, data.train, nullptr, nullptr);
    out.loss_csvs["teacher-seed" + std::to_string(seed)] = loss_csv(teacher.losses);
    for (auto kd : {KdKind::none, KdKind::kl, KdKind::holder}) {
      TrainConfig sc = c;
      sc.seed = seed;
      sc.phase = TrainPhase::finetune;
      sc.kd = kd;
      std::string name = kd == KdKind::none ? "no-kd" : kd == KdKind::kl ? "kl" : "holder-" + format_real(c.alpha);
      TrainResult st = finetune(sc, data.train, nullptr, kd == KdKind::none ? nullptr : &teacher.model);
      out.loss_csvs[name + "-seed" + std::to_string(seed)] = loss_csv(st.losses);
      const auto report = evaluate_model(st.model, data.validation, scenario, c.eval_window, c.eval_overlap);
      out.result.rows.push_back({name, seed, report.rows.front().dice});
    }
  }
  return out;
}

/// Phantom set and schedules used by the desk-scale ablations.
struct DeskSetup {
  PhantomConfig phantom;
  std::size_t phantoms = 60;
  PretrainPlan pretrain;
  TrainConfig train;
};

inline DeskSetup desk_setup() {
  DeskSetup d;
  d.pretrain = {30, 3e-3};
  d.train.epochs = 30;
  d.train.lr = 5e-4;
  d.train.val_count = 10;
  return d;
}

}  // namespace mpae
