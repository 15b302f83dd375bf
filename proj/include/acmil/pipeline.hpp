#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "acmil/analysis.hpp"
#include "acmil/plots.hpp"
#include "acmil/training.hpp"

namespace acmil {

namespace fs = std::filesystem;

inline void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  std::ofstream f(p);
  if (!f) throw IoError("cannot write: " + p.string());
  f << s;
  if (!f) throw IoError("write failed: " + p.string());
}

inline void write_json(const fs::path& p, const json& j) {
  write_text(p, j.dump(2) + "\n");
}

inline json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("missing file: " + p.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError("corrupt json " + p.string() + ": " + e.what());
  }
  return j;
}

/// Every command writes one manifest into its output directory before any
/// real work starts.
inline void write_manifest(const fs::path& out_dir, const std::string& command,
                           const json& resolved_config,
                           const std::vector<std::string>& inputs,
                           const std::vector<std::string>& outputs,
                           uint64_t master_seed) {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  char stamp[64];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  json m;
  m["command"] = command;
  m["config"] = resolved_config;
  m["version"] = kVersion;
  m["timestamp_utc"] = stamp;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  m["master_seed"] = master_seed;
  fs::create_directories(out_dir);
  write_json(out_dir / "run_manifest.json", m);
}

// ---------------------------------------------------------------------------
// fold persistence

inline json folds_to_json(const std::vector<FoldIndices>& folds) {
  json arr = json::array();
  for (const auto& f : folds)
    arr.push_back(json{{"index", f.index},
                       {"train", f.train},
                       {"val", f.val},
                       {"test", f.test}});
  return arr;
}

inline std::vector<FoldIndices> folds_from_json(const json& arr) {
  std::vector<FoldIndices> folds;
  for (const auto& j : arr) {
    FoldIndices f;
    f.index = j.at("index").get<int>();
    f.train = j.at("train").get<std::vector<int>>();
    f.val = j.at("val").get<std::vector<int>>();
    f.test = j.at("test").get<std::vector<int>>();
    folds.push_back(std::move(f));
  }
  return folds;
}

// ---------------------------------------------------------------------------
// training run directory

struct TrainRunOutput {
  TrainResult result;
  std::vector<FoldIndices> folds;
  fs::path checkpoint;
};

inline TrainRunOutput run_training(const Dataset& ds, const TrainConfig& cfg,
                                   int fold_index, const fs::path& out_dir,
                                   bool overfit_mode = false,
                                   const EpochCallback& on_epoch = nullptr) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_json(out_dir / "config.json", cfg.to_json());

  TrainRunOutput out;
  if (overfit_mode) {
    FoldIndices all;
    all.index = 0;
    for (size_t i = 0; i < ds.volumes.size(); ++i) {
      all.train.push_back(static_cast<int>(i));
      all.val.push_back(static_cast<int>(i));
      all.test.push_back(static_cast<int>(i));
    }
    out.folds = {all};
    fold_index = 0;
  } else {
    out.folds = make_folds(ds.labels(), cfg.folds, cfg.seed, cfg.val_frac,
                           cfg.model.num_classes);
    check(fold_index >= 0 && fold_index < cfg.folds, "fold index out of range");
  }
  write_json(out_dir / "folds.json", folds_to_json(out.folds));

  out.result = train_fold(ds, out.folds[fold_index], cfg, on_epoch);
  write_text(out_dir / "history.csv", history_csv(out.result.history));
  out.checkpoint = out_dir / "best.ckpt";
  CheckpointMeta meta;
  meta.step = out.result.history.best_epoch;
  meta.rng_state = out.result.rng_at_best.state();
  save_checkpoint(out.checkpoint, out.result.best_params, meta);
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalOptions {
  double overlap = 0.5;
  uint64_t seed = 0;
  int n_projections = 128;
  bool plots = true;
};

struct EvalOutput {
  double qwk_value = 0;
  double amae_value = 0;
  std::map<std::string, std::vector<double>> jsd_values;
  std::map<std::string, double> jsd_mean;
  std::map<std::string, std::optional<double>> localization;
  std::map<std::string, double> wasserstein;  // empty without a train split
  std::vector<std::array<int, 3>> predictions;  // id, y_true, y_pred

  json to_json() const {
    json j;
    j["qwk"] = qwk_value;
    j["amae"] = amae_value;
    json jp;
    for (const auto& [k, v] : jsd_mean) jp[k] = v;
    j["jsd_pairs_mean"] = jp;
    json loc;
    for (const auto& [k, v] : localization) {
      if (v)
        loc[k] = *v;
      else
        loc[k] = nullptr;
    }
    j["localization"] = loc;
    if (!wasserstein.empty()) {
      json w;
      for (const auto& [k, v] : wasserstein) w[k] = v;
      j["wasserstein"] = w;
    }
    return j;
  }
};

inline EvalOutput evaluate_model(const ParamSet<float>& params, const Dataset& ds,
                                 const std::vector<int>& eval_idx,
                                 const std::vector<int>& train_idx,
                                 const EvalOptions& opts = {},
                                 std::vector<VolumeFeatures>* feats_out = nullptr) {
  check(!eval_idx.empty(), "evaluate_model: empty evaluation split");
  EvalOutput out;
  auto feats = extract_features(params, ds, eval_idx, opts.overlap);

  std::vector<int> y_true, y_pred;
  for (size_t i = 0; i < feats.size(); ++i) {
    y_true.push_back(feats[i].y_vol);
    y_pred.push_back(feats[i].infer.rank);
    out.predictions.push_back({feats[i].volume_id, feats[i].y_vol, feats[i].infer.rank});
  }
  out.qwk_value = qwk(y_true, y_pred, params.cfg.num_classes);
  out.amae_value = amae(y_true, y_pred, params.cfg.num_classes);

  out.jsd_values = jsd_pair_distributions(feats);
  for (const auto& [k, v] : out.jsd_values) out.jsd_mean[k] = mean_of(v);

  for (int c : {kNulling, kAorta}) {
    std::vector<double> scores;
    for (size_t i = 0; i < feats.size(); ++i) {
      auto s = localization_score(feats[i].infer, ds.volumes[eval_idx[i]], c);
      if (s) scores.push_back(*s);
    }
    out.localization[concept_name(c)] =
        scores.empty() ? std::optional<double>{} : mean_of(scores);
  }

  if (!train_idx.empty()) {
    auto train_feats = extract_features(params, ds, train_idx, opts.overlap);
    for (int c = 0; c < 4; ++c) {
      MatD a = branch_feature_matrix(train_feats, c);
      MatD b = branch_feature_matrix(feats, c);
      out.wasserstein[concept_name(c)] =
          sliced_wasserstein(a, b, opts.n_projections, derive_seed(opts.seed, c));
    }
  }
  if (feats_out) *feats_out = std::move(feats);
  return out;
}

inline std::string predictions_csv(const EvalOutput& out) {
  std::string s = "volume_id,y_true,y_pred\n";
  for (const auto& row : out.predictions)
    s += std::to_string(row[0]) + "," + std::to_string(row[1]) + "," +
         std::to_string(row[2]) + "\n";
  return s;
}

inline std::string jsd_csv(const EvalOutput& out) {
  std::string s = "pair,jsd\n";
  for (const auto& [pair, values] : out.jsd_values)
    for (double v : values) s += pair + "," + std::to_string(v) + "\n";
  return s;
}

/// 2-D PCA projection of the pooled slice-level branch features.
inline std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>
pca_branch_scatter(const std::vector<VolumeFeatures>& feats) {
  std::array<MatD, 4> branch;
  Eigen::Index total = 0;
  for (int c = 0; c < 4; ++c) {
    branch[c] = branch_feature_matrix(feats, c);
    total += branch[c].cols();
  }
  MatD pooled(branch[0].rows(), total);
  Eigen::Index at = 0;
  for (int c = 0; c < 4; ++c) {
    pooled.middleCols(at, branch[c].cols()) = branch[c];
    at += branch[c].cols();
  }
  VecD mean = pooled.rowwise().mean();
  pooled.colwise() -= mean;
  MatD cov = pooled * pooled.transpose() / double(std::max<Eigen::Index>(1, total - 1));
  Eigen::SelfAdjointEigenSolver<MatD> eig(cov);
  MatD basis = eig.eigenvectors().rightCols(2);  // top-2 components

  std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> groups;
  for (int c = 0; c < 4; ++c) {
    std::vector<std::pair<double, double>> pts;
    for (Eigen::Index j = 0; j < branch[c].cols(); ++j) {
      VecD p = basis.transpose() * (branch[c].col(j) - mean);
      pts.emplace_back(p[1], p[0]);  // first component on x
    }
    groups.emplace_back(concept_name(c), std::move(pts));
  }
  return groups;
}

inline void write_eval_outputs(const EvalOutput& out,
                               const std::vector<VolumeFeatures>& feats,
                               const fs::path& dir, bool plots = true) {
  fs::create_directories(dir);
  write_json(dir / "metrics.json", out.to_json());
  write_text(dir / "predictions.csv", predictions_csv(out));
  write_text(dir / "jsd_pairs.csv", jsd_csv(out));
  if (plots) {
    std::vector<std::pair<std::string, std::vector<double>>> groups;
    for (const auto& [k, v] : out.jsd_values) groups.emplace_back(k, v);
    box_plot(dir / "jsd_boxplot.png", groups, "ATTENTION JSD BY CONCEPT PAIR",
             "JSD");
    scatter_plot(dir / "pca_features.png", pca_branch_scatter(feats),
                 "BRANCH FEATURES (PCA)", "PC1", "PC2");
  }
}

// ---------------------------------------------------------------------------
// probe and attack runs

struct ProbeRun {
  ProbeResult result;
  json to_json() const {
    json auc, notes;
    for (int c = 0; c < 3; ++c) {
      const char* name = concept_name(c);
      if (result.roc[c])
        auc[name] = result.roc[c]->auc;
      else {
        auc[name] = nullptr;
        notes[name] = result.note[c];
      }
    }
    json j;
    j["adversary_auc"] = auc;
    if (!notes.empty()) j["notes"] = notes;
    j["probe_final_train_loss"] = result.final_train_loss;
    return j;
  }
};

inline ProbeRun run_probe(const ParamSet<float>& params, const Dataset& ds,
                          const std::vector<int>& train_idx,
                          const std::vector<int>& test_idx, const ProbeConfig& pc,
                          const fs::path& out_dir, bool plots = true) {
  auto train_feats = extract_features(params, ds, train_idx);
  auto test_feats = extract_features(params, ds, test_idx);
  ProbeRun run;
  run.result = probe_adversary(train_feats, test_feats, params.cfg.subspace, pc);
  fs::create_directories(out_dir);
  write_json(out_dir / "metrics.json", run.to_json());

  std::vector<PlotSeries> curves;
  for (int c = 0; c < 3; ++c) {
    if (!run.result.roc[c]) continue;
    std::string csv = "fpr,tpr,threshold\n";
    const RocCurve& roc = *run.result.roc[c];
    for (size_t i = 0; i < roc.fpr.size(); ++i)
      csv += std::to_string(roc.fpr[i]) + "," + std::to_string(roc.tpr[i]) + "," +
             std::to_string(roc.threshold[i]) + "\n";
    write_text(out_dir / (std::string("roc_") + concept_name(c) + ".csv"), csv);
    char label[64];
    std::snprintf(label, sizeof label, "%s AUC=%.2f", concept_name(c), roc.auc);
    curves.push_back({label, roc.fpr, roc.tpr});
  }
  if (plots && !curves.empty())
    line_plot(out_dir / "roc.png", curves, "ADVERSARY PROBE ROC", "FPR", "TPR",
              true);
  return run;
}

struct AttackRun {
  // per branch: finite costs and the count of non-degradable volumes
  std::map<std::string, std::vector<double>> costs;
  std::map<std::string, int> not_degradable;
  int n_top_grade = 0;

  json to_json() const {
    json j;
    j["n_top_grade"] = n_top_grade;
    json per;
    for (int c = 0; c < 4; ++c) {
      const char* name = concept_name(c);
      json e;
      const auto it = costs.find(name);
      const int n = it == costs.end() ? 0 : static_cast<int>(it->second.size());
      e["n"] = n;
      e["not_degradable"] =
          not_degradable.count(name) ? not_degradable.at(name) : 0;
      if (n) e["median"] = median_of(it->second);
      per[name] = e;
    }
    j["attack_cost"] = per;
    return j;
  }
};

inline AttackRun run_attack(const ParamSet<float>& params, const Dataset& ds,
                            const std::vector<int>& indices, const AttackConfig& ac,
                            const fs::path& out_dir, bool plots = true) {
  AttackRun run;
  std::string csv = "volume_id,branch,cost\n";
  for (int i : indices) {
    auto infer = infer_dense(params, ds.volumes[i]);
    if (infer.rank != params.cfg.num_classes - 1) continue;
    ++run.n_top_grade;
    for (int c = 0; c < 4; ++c) {
      auto cost = attack_min_perturbation(params, infer, c, ac);
      if (cost) {
        run.costs[concept_name(c)].push_back(*cost);
        csv += std::to_string(ds.volumes[i].id) + "," + concept_name(c) + "," +
               std::to_string(*cost) + "\n";
      } else {
        run.not_degradable[concept_name(c)]++;
        csv += std::to_string(ds.volumes[i].id) + "," + concept_name(c) + ",inf\n";
      }
    }
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "attack_costs.csv", csv);
  write_json(out_dir / "metrics.json", run.to_json());
  if (plots && !run.costs.empty()) {
    std::vector<std::pair<std::string, std::vector<double>>> groups;
    for (int c = 0; c < 4; ++c)
      if (run.costs.count(concept_name(c)))
        groups.emplace_back(concept_name(c), run.costs.at(concept_name(c)));
    box_plot(out_dir / "attack_boxplot.png", groups,
             "MIN L2 PERTURBATION COST BY BRANCH", "COST");
  }
  return run;
}

// ---------------------------------------------------------------------------
// ablation grid

struct AblationArm {
  std::string name;
  AblationFlags flags;
};

inline std::vector<AblationArm> ablation_arms() {
  auto f = [](bool cbm, bool sad, bool adv) {
    AblationFlags a;
    a.cbm = cbm;
    a.sad = sad;
    a.adv = adv;
    return a;
  };
  return {{"task", f(false, false, false)},
          {"cbm", f(true, false, false)},
          {"cbm_sad", f(true, true, false)},
          {"cbm_adv", f(true, false, true)},
          {"full", f(true, true, true)}};
}

struct ArmSummary {
  std::string arm;
  std::vector<double> qwk_folds, amae_folds;
};

inline std::string ablation_csv(const std::vector<ArmSummary>& arms) {
  auto stats = [](const std::vector<double>& v) {
    const double m = mean_of(v);
    double var = 0;
    for (double x : v) var += (x - m) * (x - m);
    const double sd = v.size() > 1 ? std::sqrt(var / (v.size() - 1)) : 0.0;
    const double se = sd / std::sqrt(double(v.size()));
    return std::array<double, 4>{m, sd, m - 1.96 * se, m + 1.96 * se};
  };
  std::string csv = "arm,metric,mean,std,ci_lo,ci_hi\n";
  char buf[160];
  for (const auto& a : arms) {
    auto q = stats(a.qwk_folds);
    std::snprintf(buf, sizeof buf, "%s,qwk,%.4f,%.4f,%.4f,%.4f\n", a.arm.c_str(),
                  q[0], q[1], q[2], q[3]);
    csv += buf;
    auto e = stats(a.amae_folds);
    std::snprintf(buf, sizeof buf, "%s,amae,%.4f,%.4f,%.4f,%.4f\n", a.arm.c_str(),
                  e[0], e[1], e[2], e[3]);
    csv += buf;
  }
  return csv;
}

}  // namespace acmil
