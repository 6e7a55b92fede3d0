#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "mpae/checks.hpp"
#include "mpae/harness.hpp"

namespace {

using namespace mpae;

constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

// Flags given on the command line override values from --config.
struct Overrides {
  std::string config;
  std::vector<std::pair<std::string, std::string*>> values;
  std::vector<std::string> storage = std::vector<std::string>(32);
  std::size_t used = 0;

  void add(CLI::App* app, const std::string& key, const std::string& help) {
    std::string* slot = &storage.at(used++);
    app->add_option("--" + key, *slot, help);
    values.emplace_back(key, slot);
  }

  TrainConfig resolve(TrainConfig base) const {
    if (!config.empty()) base = load_train_config(config, base);
    for (const auto& [k, v] : values) {
      if (!v->empty()) apply_setting(base, k, *v);
    }
    return base;
  }
};

void add_training_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "key = value configuration file");
  for (const char* k : {"epochs", "batch_size", "lr", "weight_decay", "warmup", "seed", "crop", "val_count", "feature_size",
                        "window", "depths", "heads"}) {
    o.add(app, k, std::string("override '") + k + "'");
  }
}

DatasetSplit load_split(const std::string& dir, std::size_t val_count) { return split_dataset(load_dataset(dir), val_count); }

void print_checks(const std::vector<checks::CheckResult>& rs, bool& ok) {
  for (const auto& r : rs) {
    std::printf("%-44s %s  worst=%.3e  tol=%.0e\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.value, r.tolerance);
    ok = ok && r.passed;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-predicted pretraining and Hoelder distillation on synthetic MRI phantoms"};
  app.require_subcommand(1);

  // gen-data
  std::uint64_t gen_seed = 0;
  std::size_t gen_count = 60, gen_extent = 32;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "write phantoms and a manifest");
  gen->add_option("--seed", gen_seed, "geometry and noise seed");
  gen->add_option("--count", gen_count, "number of phantoms");
  gen->add_option("--extent", gen_extent, "voxels per axis");
  gen->add_option("--out", gen_out, "output directory")->required();

  // pretrain
  Overrides pre_o;
  std::string pre_data, pre_mods, pre_out, pre_loss;
  auto* pre = app.add_subcommand("pretrain", "masked / missing-modality reconstruction pretraining");
  add_training_flags(pre, pre_o);
  pre_o.add(pre, "rec_norm", "l1 or l2");
  pre_o.add(pre, "mask_mode", "table or linear");
  pre_o.add(pre, "rec_scope", "masked_only or masked_plus_missing");
  pre_o.add(pre, "mask", "on or off");
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--modalities", pre_mods, "visible modalities, e.g. FLAIR,T1c");
  pre->add_option("--out", pre_out, "checkpoint path")->required();
  pre->add_option("--loss-csv", pre_loss, "loss curve path (default: <out>.loss.csv)");

  // finetune
  Overrides ft_o;
  std::string ft_data, ft_mods, ft_init, ft_teacher, ft_kd, ft_out, ft_loss;
  std::optional<double> ft_alpha, ft_tau, ft_w;
  auto* ft = app.add_subcommand("finetune", "segmentation fine-tuning with optional distillation");
  add_training_flags(ft, ft_o);
  ft->add_option("--data", ft_data, "dataset directory")->required();
  ft->add_option("--modalities", ft_mods, "visible modalities");
  ft->add_option("--init", ft_init, "pretrained checkpoint (encoder is transferred)");
  ft->add_option("--teacher", ft_teacher, "frozen full-modality teacher checkpoint");
  ft->add_option("--kd", ft_kd, "none, kl or holder");
  ft->add_option("--alpha", ft_alpha, "Hoelder exponent");
  ft->add_option("--tau", ft_tau, "distillation temperature");
  ft->add_option("--w", ft_w, "distillation weight");
  ft->add_option("--out", ft_out, "checkpoint path")->required();
  ft->add_option("--loss-csv", ft_loss, "loss curve path (default: <out>.loss.csv)");

  // eval
  std::string ev_ckpt, ev_data, ev_scen = "all", ev_report;
  std::size_t ev_val = 10, ev_window = 16;
  double ev_overlap = 0.5;
  auto* ev = app.add_subcommand("eval", "Dice over the modality scenarios");
  ev->add_option("--ckpt", ev_ckpt, "finetuned checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--scenarios", ev_scen, "'all' or one subset such as FLAIR,T1c");
  ev->add_option("--report", ev_report, "CSV output path (default: stdout)");
  ev->add_option("--val-count", ev_val, "held-out cases at the end of the manifest");
  ev->add_option("--window", ev_window, "sliding window extent");
  ev->add_option("--overlap", ev_overlap, "window overlap fraction");

  std::uint64_t check_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seed", check_seed, "random seed");
  auto* dc = app.add_subcommand("divcheck", "divergence oracle and property suite");
  dc->add_option("--seed", check_seed, "random seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      PhantomConfig pc;
      pc.seed = gen_seed;
      pc.extent = gen_extent;
      const auto entries = write_dataset(gen_out, pc, gen_count);
      std::printf("wrote %zu phantoms to %s\n", entries.size(), gen_out.c_str());
    } else if (*pre) {
      TrainConfig c = pre_o.resolve({});
      c.phase = TrainPhase::pretrain;
      if (!pre_mods.empty()) c.modalities = ModalitySet::parse(pre_mods);
      c.validate();
      const auto split = load_split(pre_data, c.val_count);
      const TrainResult r = pretrain(c, split.train);
      save_checkpoint(r.checkpoint, pre_out);
      write_text(pre_loss.empty() ? pre_out + ".loss.csv" : pre_loss, loss_csv(r.losses));
      std::printf("pretrained %zu epochs, final loss %s\n", c.epochs, format_real(r.losses.back().loss).c_str());
    } else if (*ft) {
      TrainConfig c = ft_o.resolve({});
      c.phase = TrainPhase::finetune;
      if (!ft_mods.empty()) c.modalities = ModalitySet::parse(ft_mods);
      if (!ft_kd.empty()) c.kd = parse_kd_kind(ft_kd);
      if (ft_alpha) c.alpha = *ft_alpha;
      if (ft_tau) c.tau = *ft_tau;
      if (ft_w) c.w = *ft_w;
      if (c.kd != KdKind::none && ft_teacher.empty()) throw ValidationError("finetune: --kd " + ft_kd + " requires --teacher");
      c.validate();
      std::optional<Checkpoint> init;
      if (!ft_init.empty()) init = read_checkpoint(ft_init);
      std::optional<Model> teacher;
      if (!ft_teacher.empty()) teacher = load_checkpoint(ft_teacher, LoadMode::full);
      const auto split = load_split(ft_data, c.val_count);
      const TrainResult r = finetune(c, split.train, init ? &*init : nullptr, teacher ? &*teacher : nullptr);
      save_checkpoint(r.checkpoint, ft_out);
      write_text(ft_loss.empty() ? ft_out + ".loss.csv" : ft_loss, loss_csv(r.losses));
      std::printf("finetuned (%s) %zu epochs, final loss %s\n", phase_name(r.checkpoint.meta.phase), c.epochs,
                  format_real(r.losses.back().loss).c_str());
    } else if (*ev) {
      const Model model = load_checkpoint(ev_ckpt, LoadMode::full);
      if (model.config().head != Head::segmentation) throw ValidationError("eval: checkpoint has no segmentation head");
      const auto split = load_split(ev_data, ev_val);
      const std::vector<ModalitySet> scenarios =
          ev_scen == "all" ? enumerate_scenarios() : std::vector<ModalitySet>{ModalitySet::parse(ev_scen)};
      const auto report = evaluate_model(model, split.validation, scenarios, ev_window, ev_overlap);
      if (ev_report.empty()) std::cout << report.csv();
      else write_text(ev_report, report.csv());
    } else if (*gc || *dc) {
      bool ok = true;
      print_checks(*gc ? checks::gradcheck_suite(check_seed) : checks::divcheck_suite(check_seed), ok);
      std::printf("%s\n", ok ? "all checks passed" : "FAILED");
      return ok ? 0 : kExitNumerical;
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return 0;
}
