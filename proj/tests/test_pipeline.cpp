#include "catch_amalgamated.hpp"

#include <filesystem>
#include <fstream>

#include "acmil/pipeline.hpp"
#include "test_util.hpp"

using namespace acmil;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

TrainConfig quick_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.model = testutil::tiny_config(8, 4, 6, 16);
  cfg.n_slices = 2;
  cfg.k_patches = 6;
  cfg.epochs_max = 2;
  cfg.patience = 2;
  cfg.lr = 1e-3;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("localization score counts attention mass inside the mask") {
  PhantomSpec spec;
  spec.depth = 8;
  spec.height = 64;
  spec.width = 64;
  spec.grades = {3, 3, 3};
  spec.noise_level = 0;
  spec.seed = 9;
  PhantomVolume vol = generate_volume(spec);

  InferenceResult<float> infer;
  infer.patch_size = 16;
  infer.slices = la_slices(vol);
  // dense 16px tiles at stride 8: centres land on the aorta tube
  auto tiles = tile_dense(vol, infer.slices[0], 16, 0.5);
  for (const auto& t : tiles) infer.origins.emplace_back(t.row, t.col);
  const int k = static_cast<int>(infer.origins.size());

  // find tiles whose centre falls in the aorta mask on the first LA slice
  const int z = infer.slices[0];
  std::vector<int> inside;
  for (int i = 0; i < k; ++i) {
    const int cy = infer.origins[i].first + 8, cx = infer.origins[i].second + 8;
    if (vol.mask_at(kMaskAorta, z, cy, cx)) inside.push_back(i);
  }
  REQUIRE_FALSE(inside.empty());

  for (int c = 0; c < 4; ++c)
    for (size_t m = 0; m < infer.slices.size(); ++m)
      infer.alpha[c].push_back(VecF::Constant(k, 1.f / k));

  SECTION("uniform attention scores the in-mask fraction") {
    // uniform attention: per-slice mass equals (#in-mask centres)/k
    auto s = localization_score(infer, vol, kAorta);
    REQUIRE(s.has_value());
    REQUIRE(*s > 0.0);
    REQUIRE(*s < 0.5);
  }

  SECTION("one-hot attention on an in-mask tile scores 1 on that slice") {
    for (size_t m = 0; m < infer.slices.size(); ++m) {
      VecF a = VecF::Zero(k);
      a[inside[0]] = 1.f;  // tube spans all slices at the same (y, x)
      infer.alpha[kAorta][m] = a;
    }
    auto s = localization_score(infer, vol, kAorta);
    REQUIRE(s.has_value());
    REQUIRE_THAT(*s, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }

  SECTION("missing masks yield an absent score") {
    PhantomVolume bare = vol;
    bare.masks.clear();
    REQUIRE_FALSE(localization_score(infer, bare, kAorta).has_value());
  }
}

TEST_CASE("attack finds finite costs only where forward influence exists") {
  Rng rng(71);
  ModelConfig cfg = testutil::tiny_config();
  ParamSet<float> params = ParamSet<float>::init(cfg, rng);

  InferenceResult<float> infer;
  infer.patch_size = cfg.patch;
  infer.slices = {0, 1, 2};
  const int L = cfg.subspace;
  for (int c = 0; c < 4; ++c)
    for (int m = 0; m < 3; ++m) {
      infer.alpha[c].push_back(VecF::Constant(4, 0.25f));
      infer.z[c].push_back(VecF::Random(L));
    }
  infer.beta = VecF::Constant(3, 1.f / 3);
  VecF v_vol = VecF::Zero(4 * L);
  for (int c = 0; c < 4; ++c)
    for (int m = 0; m < 3; ++m)
      v_vol.segment(c * L, L) += infer.beta[m] * infer.z[c][m];
  infer.v_vol = v_vol;

  // force a confident top-grade prediction
  params.at("task.w").setZero();
  params.at("task.b").setConstant(3.f);
  params.at("task.w").row(0).setConstant(0.5f);
  params.at("task.w").row(1).setConstant(0.4f);
  params.at("task.w").row(2).setConstant(0.3f);
  VecF logits = params.at("task.w") * infer.v_vol + params.at("task.b").col(0);
  infer.task_logits = logits;
  infer.rank = corn_rank(VecF(infer.task_logits));
  REQUIRE(infer.rank == 3);

  SECTION("a live branch yields a finite cost") {
    auto cost = attack_min_perturbation(params, infer, kResidual);
    REQUIRE(cost.has_value());
    REQUIRE(*cost > 0.0);
    REQUIRE(*cost <= 100.0);

    // enlarging the bracket cannot increase the certified cost
    AttackConfig wide;
    wide.bracket = 200.0;
    auto cost2 = attack_min_perturbation(params, infer, kResidual, wide);
    REQUIRE(cost2.has_value());
    REQUIRE(*cost2 <= *cost + 1e-9);
  }

  SECTION("zeroing a branch's task-head columns removes its influence") {
    params.at("task.w").middleCols(kAorta * L, L).setZero();
    VecF l2 = params.at("task.w") * infer.v_vol + params.at("task.b").col(0);
    infer.task_logits = l2;
    infer.rank = corn_rank(VecF(l2));
    REQUIRE(infer.rank == 3);
    REQUIRE_FALSE(attack_min_perturbation(params, infer, kAorta).has_value());
    REQUIRE(attack_min_perturbation(params, infer, kResidual).has_value());
  }

  SECTION("volumes below the top grade are rejected") {
    params.at("task.b").setConstant(-3.f);
    infer.task_logits = params.at("task.w") * infer.v_vol + params.at("task.b").col(0);
    infer.rank = corn_rank(VecF(infer.task_logits));
    REQUIRE(infer.rank < 3);
    REQUIRE_THROWS_AS(attack_min_perturbation(params, infer, kResidual),
                      ValidationError);
  }
}

TEST_CASE("probe recovers signal planted in the residual features") {
  Rng rng(72);
  const int L = 6;
  // synthetic features: nulling grade is linearly readable from z_un,
  // the other concepts are pure noise
  auto make_feats = [&](int n, uint64_t salt) {
    std::vector<VolumeFeatures> feats;
    for (int i = 0; i < n; ++i) {
      VolumeFeatures f;
      f.volume_id = i;
      f.grades = {rng.uniform_int(0, 3), rng.uniform_int(0, 3), rng.uniform_int(0, 3)};
      f.y_vol = 0;
      f.infer.slices = {0, 1};
      for (int c = 0; c < 4; ++c)
        for (int m = 0; m < 2; ++m) {
          VecF z(L);
          for (int d = 0; d < L; ++d) z[d] = float(rng.normal() * 0.3);
          z[0] += float(f.grades.nulling) * 1.0f;
          f.infer.z[c].push_back(z);
          f.infer.alpha[c].push_back(VecF::Constant(3, 1.f / 3));
        }
      feats.push_back(std::move(f));
    }
    (void)salt;
    return feats;
  };
  auto train = make_feats(48, 1);
  auto test = make_feats(32, 2);

  ProbeConfig pc;
  pc.epochs = 300;
  pc.lr = 2e-2;
  pc.seed = 4;
  ProbeResult r = probe_adversary(train, test, L, pc);
  REQUIRE(r.roc[kNulling].has_value());
  REQUIRE(r.roc[kNulling]->auc > 0.85);  // planted signal is recovered
  REQUIRE(r.roc[kSharpness].has_value());
  REQUIRE(std::abs(r.roc[kSharpness]->auc - 0.5) < 0.3);  // noise stays near chance
}

TEST_CASE("probe reports single-class test labels as absent") {
  Rng rng(73);
  const int L = 4;
  auto feats = [&](int n, bool fixed_grades) {
    std::vector<VolumeFeatures> out;
    for (int i = 0; i < n; ++i) {
      VolumeFeatures f;
      f.grades = fixed_grades
                     ? ConceptGrades{3, 3, 3}
                     : ConceptGrades{rng.uniform_int(0, 3), rng.uniform_int(0, 3),
                                     rng.uniform_int(0, 3)};
      f.infer.slices = {0};
      for (int c = 0; c < 4; ++c) {
        VecF z(L);
        for (int d = 0; d < L; ++d) z[d] = float(rng.normal());
        f.infer.z[c].push_back(z);
      }
      out.push_back(std::move(f));
    }
    return out;
  };
  ProbeConfig pc;
  pc.epochs = 5;
  ProbeResult r = probe_adversary(feats(8, false), feats(8, true), L, pc);
  for (int c = 0; c < 3; ++c) {
    REQUIRE_FALSE(r.roc[c].has_value());
    REQUIRE_FALSE(r.note[c].empty());
  }
}

TEST_CASE("canvas writes decodable png files") {
  const fs::path dir = fresh_dir("acmil_png_test");
  Canvas cv(80, 60);
  cv.line(0, 0, 79, 59, palette::red);
  cv.text(4, 4, "QWK 0.95", palette::black);
  cv.disc(40, 30, 5, palette::blue);
  cv.save_png(dir / "t.png");

  std::string bytes = slurp(dir / "t.png");
  REQUIRE(bytes.size() > 100);
  REQUIRE(bytes.substr(1, 3) == "PNG");
  REQUIRE(bytes.find("IHDR") != std::string::npos);
  REQUIRE(bytes.find("IEND") != std::string::npos);

  // identical content twice -> identical bytes
  cv.save_png(dir / "t2.png");
  REQUIRE(slurp(dir / "t2.png") == bytes);
}

TEST_CASE("plot helpers produce files") {
  const fs::path dir = fresh_dir("acmil_plot_test");
  line_plot(dir / "roc.png",
            {{"A", {0, 0.5, 1}, {0, 0.8, 1}}, {"B", {0, 1}, {0, 1}}}, "ROC",
            "FPR", "TPR", true);
  box_plot(dir / "box.png", {{"nu_ao", {0.1, 0.4, 0.3}}, {"ao_un", {0.5, 0.6, 0.9}}},
           "JSD", "JSD");
  scatter_plot(dir / "scatter.png", {{"sh", {{0, 0}, {1, 1}}}, {"un", {{2, 0.5}}}},
               "PCA", "PC1", "PC2");
  REQUIRE(fs::file_size(dir / "roc.png") > 400);
  REQUIRE(fs::file_size(dir / "box.png") > 400);
  REQUIRE(fs::file_size(dir / "scatter.png") > 400);
}

TEST_CASE("training run directory contains the full artifact set") {
  const fs::path dir = fresh_dir("acmil_run_test");
  Dataset ds = generate_dataset(12, 8, 64, 64, 55);
  TrainConfig cfg = quick_config(7);
  auto run = run_training(ds, cfg, 0, dir);

  REQUIRE(fs::exists(dir / "config.json"));
  REQUIRE(fs::exists(dir / "folds.json"));
  REQUIRE(fs::exists(dir / "history.csv"));
  REQUIRE(fs::exists(dir / "best.ckpt"));
  auto folds = folds_from_json(read_json(dir / "folds.json"));
  REQUIRE(folds.size() == 3);

  auto [params, meta] = load_checkpoint(dir / "best.ckpt");
  REQUIRE(meta.step == run.result.history.best_epoch);

  SECTION("evaluation emits metrics, csv files and plots") {
    EvalOptions opts;
    std::vector<VolumeFeatures> feats;
    auto eval = evaluate_model(params, ds, folds[0].test, folds[0].train, opts, &feats);
    write_eval_outputs(eval, feats, dir / "eval");
    REQUIRE(fs::exists(dir / "eval/metrics.json"));
    REQUIRE(fs::exists(dir / "eval/predictions.csv"));
    REQUIRE(fs::exists(dir / "eval/jsd_pairs.csv"));
    REQUIRE(fs::exists(dir / "eval/jsd_boxplot.png"));
    REQUIRE(fs::exists(dir / "eval/pca_features.png"));

    json m = read_json(dir / "eval/metrics.json");
    REQUIRE(m.contains("qwk"));
    REQUIRE(m.contains("amae"));
    REQUIRE(m["qwk"].get<double>() >= -1.0);
    REQUIRE(m["qwk"].get<double>() <= 1.0);
    REQUIRE(m["amae"].get<double>() >= 0.0);
    REQUIRE(m["wasserstein"].size() == 4);

    // deterministic: a second evaluation writes identical bytes
    std::string first = slurp(dir / "eval/metrics.json");
    std::vector<VolumeFeatures> feats2;
    auto eval2 = evaluate_model(params, ds, folds[0].test, folds[0].train, opts, &feats2);
    write_eval_outputs(eval2, feats2, dir / "eval");
    REQUIRE(slurp(dir / "eval/metrics.json") == first);
  }

  SECTION("probe and attack runs write their artifact files") {
    ProbeConfig pc;
    pc.epochs = 10;
    auto probe = run_probe(params, ds, folds[0].train, folds[0].test, pc,
                           dir / "probe");
    REQUIRE(fs::exists(dir / "probe/metrics.json"));
    json pj = read_json(dir / "probe/metrics.json");
    REQUIRE(pj.contains("adversary_auc"));

    AttackConfig ac;
    auto attack = run_attack(params, ds, folds[0].test, ac, dir / "attack");
    REQUIRE(fs::exists(dir / "attack/attack_costs.csv"));
    REQUIRE(fs::exists(dir / "attack/metrics.json"));
  }
}

TEST_CASE("manifest is written with the run configuration") {
  const fs::path dir = fresh_dir("acmil_manifest_test");
  write_manifest(dir, "gen-data", json{{"count", 8}}, {"(none)"},
                 {(dir / "meta.json").string()}, 42);
  json m = read_json(dir / "run_manifest.json");
  REQUIRE(m["command"] == "gen-data");
  REQUIRE(m["master_seed"] == 42);
  REQUIRE(m["config"]["count"] == 8);
  REQUIRE(m.contains("timestamp_utc"));
  REQUIRE(m["version"] == kVersion);
}

TEST_CASE("ablation csv carries mean, std and confidence bounds per arm") {
  std::vector<ArmSummary> arms;
  arms.push_back({"full", {0.7, 0.8, 0.75}, {0.3, 0.25, 0.35}});
  arms.push_back({"task", {0.5, 0.45, 0.55}, {0.6, 0.66, 0.63}});
  std::string csv = ablation_csv(arms);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 2 arms x 2 metrics
  REQUIRE(csv.find("full,qwk,0.7500") != std::string::npos);
  REQUIRE(csv.find("task,amae,0.6300") != std::string::npos);
  REQUIRE(csv.starts_with("arm,metric,mean,std,ci_lo,ci_hi"));
}
