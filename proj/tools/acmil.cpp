// acmil: synthetic-phantom generation, two-tier attention-MIL training,
// evaluation, adversary probes, representation attacks and the ablation grid.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "acmil/pipeline.hpp"

namespace fs = std::filesystem;
using namespace acmil;

namespace {

/// JSON config files: a flat object of option names to values; command-line
/// flags override file entries.
class ConfigJSON : public CLI::Config {
public:
  std::string to_config(const CLI::App* app, bool default_also, bool,
                        std::string) const override {
    json j;
    for (const CLI::Option* opt : app->get_options({})) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      const std::string name = opt->get_lnames()[0];
      if (opt->count() == 1)
        j[name] = opt->results().at(0);
      else if (opt->count() > 1)
        j[name] = opt->results();
      else if (default_also && !opt->get_default_str().empty())
        j[name] = opt->get_default_str();
    }
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::FileError(std::string("config is not valid JSON: ") + e.what());
    }
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      item.name = key;
      if (value.is_array())
        for (const auto& v : value) item.inputs.push_back(v.dump());
      else if (value.is_string())
        item.inputs.push_back(value.get<std::string>());
      else
        item.inputs.push_back(value.dump());
      items.push_back(std::move(item));
    }
    return items;
  }
};

struct ShapeArg {
  int depth = 24, height = 192, width = 192;
};

ShapeArg parse_shape(const std::string& s) {
  ShapeArg shape;
  if (std::sscanf(s.c_str(), "%d,%d,%d", &shape.depth, &shape.height,
                  &shape.width) != 3)
    throw ValidationError("--shape expects D,H,W");
  return shape;
}

void require_empty_or_force(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw ValidationError("output directory '" + dir.string() +
                          "' is not empty (use --force to overwrite)");
}

std::vector<int> split_indices(const FoldIndices& fold, const std::string& split) {
  if (split == "train") return fold.train;
  if (split == "val") return fold.val;
  if (split == "test") return fold.test;
  throw ValidationError("unknown split: " + split);
}

std::vector<int> all_indices(const Dataset& ds) {
  std::vector<int> idx(ds.volumes.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return idx;
}

// Train-side options shared by `train` and `ablate`.
struct TrainCliOptions {
  TrainConfig cfg;
  std::string ablation = "cbm,sad,adv";
  std::string data_dir, out_dir;
  int fold = 0;
  bool overfit = false;
  bool force = false;
  bool quiet = false;
};

void add_train_options(CLI::App* sub, TrainCliOptions& o, bool with_fold) {
  sub->add_option("--data", o.data_dir, "dataset directory")->required();
  sub->add_option("--out", o.out_dir, "output directory")->required();
  if (with_fold) {
    sub->add_option("--fold", o.fold, "fold index to train");
    sub->add_flag("--overfit", o.overfit,
                  "train and evaluate on the whole dataset (sanity mode)");
  }
  sub->add_option("--ablation", o.ablation,
                  "enabled components, comma-separated subset of cbm,sad,adv "
                  "(empty = task-only)");
  sub->add_option("--lambda-cbm", o.cfg.weights.lambda_cbm, "concept loss weight");
  sub->add_option("--lambda-adv", o.cfg.weights.lambda_adv,
                  "adversarial weight (applied inside the GRL)");
  sub->add_option("--lambda-sad", o.cfg.weights.lambda_sad,
                  "attention diversity weight");
  sub->add_flag("--adv-double-scale", o.cfg.weights.adv_double_scale,
                "also multiply the adversarial loss term by lambda-adv");
  sub->add_option("--lr", o.cfg.lr, "learning rate");
  sub->add_option("--wd", o.cfg.weight_decay, "weight decay");
  sub->add_option("--epochs", o.cfg.epochs_max, "maximum epochs");
  sub->add_option("--patience", o.cfg.patience, "early-stop patience (epochs)");
  sub->add_option("--folds", o.cfg.folds, "cross-validation fold count");
  sub->add_option("--seed", o.cfg.seed, "master seed");
  sub->add_option("--n-slices", o.cfg.n_slices, "slices per sub-bag");
  sub->add_option("--k-patches", o.cfg.k_patches, "patches per slice");
  sub->add_option("--subbags-per-volume", o.cfg.subbags_per_volume,
                  "sub-bags sampled per volume per epoch");
  sub->add_option("--val-frac", o.cfg.val_frac, "validation fraction of train");
  sub->add_option("--d", o.cfg.model.d, "shared embedding width");
  sub->add_option("--subspace", o.cfg.model.subspace, "concept subspace width");
  sub->add_option("--attn-hidden", o.cfg.model.attn_hidden,
                  "gated attention hidden width");
  sub->add_option("--patch", o.cfg.model.patch, "patch size in pixels");
  sub->add_flag("--force", o.force, "allow writing into a non-empty directory");
  sub->add_flag("--quiet", o.quiet, "suppress per-epoch progress lines");
  sub->set_config("--config", "", "JSON config file (flags override it)");
  sub->config_formatter(std::make_shared<ConfigJSON>());
}

int cmd_gen_data(const std::string& out, int count, uint64_t seed,
                 const std::string& shape_str, bool force) {
  ShapeArg shape = parse_shape(shape_str);
  require_empty_or_force(out, force);
  write_manifest(out, "gen-data",
                 json{{"count", count},
                      {"seed", seed},
                      {"depth", shape.depth},
                      {"height", shape.height},
                      {"width", shape.width}},
                 {}, {out + "/meta.json"}, seed);
  Dataset ds = generate_dataset(count, shape.depth, shape.height, shape.width, seed);
  write_dataset(ds, out);
  std::printf("wrote %d volumes to %s\n", count, out.c_str());
  return 0;
}

int cmd_train(const TrainCliOptions& o) {
  require_empty_or_force(o.out_dir, o.force);
  TrainConfig cfg = o.cfg;
  cfg.ablation = parse_ablation(o.ablation);
  Dataset ds = read_dataset(o.data_dir, MaskPolicy::kOptional);
  write_manifest(o.out_dir, "train", cfg.to_json(), {o.data_dir},
                 {o.out_dir + "/best.ckpt", o.out_dir + "/history.csv"}, cfg.seed);
  EpochCallback progress = nullptr;
  if (!o.quiet)
    progress = [](const EpochRow& r) {
      std::printf("epoch %3d  total %.4f  val_qwk %.4f  val_amae %.4f\n", r.epoch,
                  r.total, r.val_qwk, r.val_amae);
      std::fflush(stdout);
    };
  auto run = run_training(ds, cfg, o.fold, o.out_dir, o.overfit, progress);
  std::printf("best epoch %d  val_qwk %.4f  -> %s\n", run.result.history.best_epoch,
              run.result.history.best_val_qwk, run.checkpoint.string().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data,
             const std::string& out, const std::string& split,
             const std::string& folds_file, int fold, uint64_t seed, bool plots) {
  Dataset ds = read_dataset(data, MaskPolicy::kOptional);
  auto [params, meta] = load_checkpoint(ckpt);
  check(params.cfg.patch <= ds.height && params.cfg.patch <= ds.width,
        "checkpoint patch size is incompatible with the dataset shape");

  std::vector<int> eval_idx, train_idx;
  if (!folds_file.empty()) {
    auto folds = folds_from_json(read_json(folds_file));
    check(fold >= 0 && fold < static_cast<int>(folds.size()),
          "fold index out of range");
    eval_idx = split_indices(folds[fold], split);
    train_idx = folds[fold].train;
  } else {
    check(split == "all" || split == "test",
          "--split " + split + " requires --folds");
    eval_idx = all_indices(ds);
  }
  write_manifest(out, "eval",
                 json{{"ckpt", ckpt}, {"split", split}, {"fold", fold},
                      {"seed", seed}},
                 {ckpt, data}, {out + "/metrics.json"}, seed);
  EvalOptions opts;
  opts.seed = seed;
  opts.plots = plots;
  std::vector<VolumeFeatures> feats;
  EvalOutput ev = evaluate_model(params, ds, eval_idx, train_idx, opts, &feats);
  write_eval_outputs(ev, feats, out, plots);
  std::printf("qwk %.4f  amae %.4f  (n=%zu)\n", ev.qwk_value, ev.amae_value,
              eval_idx.size());
  return 0;
}

int cmd_probe(const std::string& ckpt, const std::string& data,
              const std::string& out, const std::string& folds_file, int fold,
              double train_frac, int epochs, double lr, uint64_t seed) {
  Dataset ds = read_dataset(data, MaskPolicy::kOptional);
  auto [params, meta] = load_checkpoint(ckpt);

  std::vector<int> train_idx, test_idx;
  if (!folds_file.empty()) {
    auto folds = folds_from_json(read_json(folds_file));
    check(fold >= 0 && fold < static_cast<int>(folds.size()),
          "fold index out of range");
    train_idx = folds[fold].train;
    train_idx.insert(train_idx.end(), folds[fold].val.begin(),
                     folds[fold].val.end());
    test_idx = folds[fold].test;
  } else {
    // stratified split over the global grade
    check(train_frac > 0 && train_frac < 1, "--train-frac must lie in (0,1)");
    std::vector<std::vector<int>> by_class(4);
    for (size_t i = 0; i < ds.volumes.size(); ++i)
      by_class[ds.volumes[i].y_vol].push_back(static_cast<int>(i));
    Rng rng(derive_seed(seed, 0x9e0be));
    for (auto& cls : by_class) {
      rng.shuffle(cls.begin(), cls.end());
      const size_t cut = static_cast<size_t>(std::lround(train_frac * cls.size()));
      for (size_t i = 0; i < cls.size(); ++i)
        (i < cut ? train_idx : test_idx).push_back(cls[i]);
    }
  }
  check(!train_idx.empty() && !test_idx.empty(), "probe split is degenerate");
  write_manifest(out, "probe",
                 json{{"ckpt", ckpt}, {"fold", fold}, {"train_frac", train_frac},
                      {"epochs", epochs}, {"lr", lr}, {"seed", seed}},
                 {ckpt, data}, {out + "/metrics.json"}, seed);
  ProbeConfig pc;
  pc.epochs = epochs;
  pc.lr = lr;
  pc.seed = seed;
  pc.num_classes = params.cfg.num_classes;
  ProbeRun run = run_probe(params, ds, train_idx, test_idx, pc, out);
  for (int c = 0; c < 3; ++c) {
    if (run.result.roc[c])
      std::printf("adversary auc %s = %.4f\n", concept_name(c),
                  run.result.roc[c]->auc);
    else
      std::printf("adversary auc %s absent: %s\n", concept_name(c),
                  run.result.note[c].c_str());
  }
  return 0;
}

int cmd_attack(const std::string& ckpt, const std::string& data,
               const std::string& out, const std::string& folds_file, int fold,
               double bracket, int bisect_steps, uint64_t seed) {
  Dataset ds = read_dataset(data, MaskPolicy::kOptional);
  auto [params, meta] = load_checkpoint(ckpt);
  std::vector<int> idx;
  if (!folds_file.empty()) {
    auto folds = folds_from_json(read_json(folds_file));
    check(fold >= 0 && fold < static_cast<int>(folds.size()),
          "fold index out of range");
    idx = folds[fold].test;
  } else {
    idx = all_indices(ds);
  }
  write_manifest(out, "attack",
                 json{{"ckpt", ckpt}, {"fold", fold}, {"bracket", bracket},
                      {"bisect_steps", bisect_steps}},
                 {ckpt, data}, {out + "/attack_costs.csv"}, seed);
  AttackConfig ac;
  ac.bracket = bracket;
  ac.bisect_steps = bisect_steps;
  ac.num_classes = params.cfg.num_classes;
  AttackRun run = run_attack(params, ds, idx, ac, out);
  std::printf("attacked %d top-grade volumes\n", run.n_top_grade);
  for (int c = 0; c < 4; ++c) {
    const char* name = concept_name(c);
    if (run.costs.count(name))
      std::printf("branch %s: median cost %.4f (n=%zu)\n", name,
                  median_of(run.costs.at(name)), run.costs.at(name).size());
  }
  return 0;
}

int cmd_ablate(const TrainCliOptions& o) {
  require_empty_or_force(o.out_dir, o.force);
  Dataset ds = read_dataset(o.data_dir, MaskPolicy::kOptional);
  TrainConfig base = o.cfg;
  write_manifest(o.out_dir, "ablate", base.to_json(), {o.data_dir},
                 {o.out_dir + "/ablation.csv"}, base.seed);

  std::vector<ArmSummary> summaries;
  for (const auto& arm : ablation_arms()) {
    ArmSummary summary;
    summary.arm = arm.name;
    for (int f = 0; f < base.folds; ++f) {
      TrainConfig cfg = base;
      cfg.ablation = arm.flags;
      const fs::path run_dir = fs::path(o.out_dir) / arm.name / ("fold_" + std::to_string(f));
      auto run = run_training(ds, cfg, f, run_dir);
      EvalOptions opts;
      opts.seed = cfg.seed;
      std::vector<VolumeFeatures> feats;
      EvalOutput ev = evaluate_model(run.result.best_params, ds,
                                     run.folds[f].test, run.folds[f].train, opts,
                                     &feats);
      write_eval_outputs(ev, feats, run_dir / "eval", /*plots=*/arm.name == "full");
      summary.qwk_folds.push_back(ev.qwk_value);
      summary.amae_folds.push_back(ev.amae_value);
      if (!o.quiet)
        std::printf("arm %-8s fold %d: best epoch %3d  test qwk %.4f  amae %.4f\n",
                    arm.name.c_str(), f, run.result.history.best_epoch,
                    ev.qwk_value, ev.amae_value);
      std::fflush(stdout);
    }
    summaries.push_back(std::move(summary));
  }
  write_text(fs::path(o.out_dir) / "ablation.csv", ablation_csv(summaries));
  std::printf("wrote %s\n", (fs::path(o.out_dir) / "ablation.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-MIL quality grading on synthetic phantoms"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out, gd_shape = "24,192,192";
  int gd_count = 120;
  uint64_t gd_seed = 0;
  bool gd_force = false;
  auto* gen = app.add_subcommand("gen-data", "generate a balanced phantom dataset");
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--count", gd_count, "number of volumes (multiple of 4)");
  gen->add_option("--seed", gd_seed, "master seed");
  gen->add_option("--shape", gd_shape, "volume shape D,H,W");
  gen->add_flag("--force", gd_force, "allow writing into a non-empty directory");

  // train
  TrainCliOptions tr;
  auto* train = app.add_subcommand("train", "train one cross-validation fold");
  add_train_options(train, tr, /*with_fold=*/true);

  // eval
  std::string ev_ckpt, ev_data, ev_out, ev_split = "all", ev_folds;
  int ev_fold = 0;
  uint64_t ev_seed = 0;
  bool ev_no_plots = false;
  auto* eval = app.add_subcommand("eval", "dense-inference evaluation of a checkpoint");
  eval->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--out", ev_out, "output directory")->required();
  eval->add_option("--split", ev_split, "all|train|val|test");
  eval->add_option("--folds", ev_folds, "folds.json from a training run");
  eval->add_option("--fold", ev_fold, "fold index into --folds");
  eval->add_option("--seed", ev_seed, "seed for the projection-based metrics");
  eval->add_flag("--no-plots", ev_no_plots, "skip png plots");

  // probe
  std::string pr_ckpt, pr_data, pr_out, pr_folds;
  int pr_fold = 0, pr_epochs = 400;
  double pr_frac = 0.5, pr_lr = 1e-2;
  uint64_t pr_seed = 0;
  auto* probe = app.add_subcommand(
      "probe", "retrain adversary heads on frozen residual features and report ROC");
  probe->add_option("--ckpt", pr_ckpt, "checkpoint file")->required();
  probe->add_option("--data", pr_data, "dataset directory")->required();
  probe->add_option("--out", pr_out, "output directory")->required();
  probe->add_option("--folds", pr_folds, "folds.json from a training run");
  probe->add_option("--fold", pr_fold, "fold index into --folds");
  probe->add_option("--train-frac", pr_frac, "probe train fraction without --folds");
  probe->add_option("--probe-epochs", pr_epochs, "probe training epochs");
  probe->add_option("--probe-lr", pr_lr, "probe learning rate");
  probe->add_option("--seed", pr_seed, "probe seed");

  // attack
  std::string at_ckpt, at_data, at_out, at_folds;
  int at_fold = 0, at_steps = 30;
  double at_bracket = 100.0;
  uint64_t at_seed = 0;
  auto* attack = app.add_subcommand(
      "attack", "minimum-perturbation cost of degrading top-grade volumes per branch");
  attack->add_option("--ckpt", at_ckpt, "checkpoint file")->required();
  attack->add_option("--data", at_data, "dataset directory")->required();
  attack->add_option("--out", at_out, "output directory")->required();
  attack->add_option("--folds", at_folds, "folds.json from a training run");
  attack->add_option("--fold", at_fold, "fold index into --folds");
  attack->add_option("--bracket", at_bracket, "search bracket for the cost");
  attack->add_option("--bisect-steps", at_steps, "bisection refinement steps");
  attack->add_option("--seed", at_seed, "recorded seed");

  // ablate
  TrainCliOptions ab;
  auto* ablate = app.add_subcommand(
      "ablate", "train the five component arms across folds and tabulate metrics");
  add_train_options(ablate, ab, /*with_fold=*/false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(gd_out, gd_count, gd_seed, gd_shape, gd_force);
    if (train->parsed()) return cmd_train(tr);
    if (eval->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_out, ev_split, ev_folds, ev_fold,
                      ev_seed, !ev_no_plots);
    if (probe->parsed())
      return cmd_probe(pr_ckpt, pr_data, pr_out, pr_folds, pr_fold, pr_frac,
                       pr_epochs, pr_lr, pr_seed);
    if (attack->parsed())
      return cmd_attack(at_ckpt, at_data, at_out, at_folds, at_fold, at_bracket,
                        at_steps, at_seed);
    if (ablate->parsed()) return cmd_ablate(ab);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
