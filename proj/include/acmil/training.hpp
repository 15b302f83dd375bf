#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "acmil/inference.hpp"
#include "acmil/losses.hpp"
#include "acmil/metrics.hpp"
#include "acmil/synthdata.hpp"

namespace acmil {

class TrainingDiverged : public std::runtime_error {
public:
  explicit TrainingDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  int epochs_max = 150;
  int patience = 20;  // early-stop epochs on validation qwk
  int folds = 3;
  uint64_t seed = 0;
  AblationFlags ablation;
  LossWeights weights;
  int n_slices = 8;
  int k_patches = 80;
  int subbags_per_volume = 1;
  double val_frac = 0.1;
  double overlap = 0.5;
  ModelConfig model;

  void validate() const {
    check(lr > 0 && weight_decay > 0, "lr and weight_decay must be positive");
    check(patience >= 1, "patience must be >= 1");
    check(epochs_max >= 1, "epochs_max must be >= 1");
    check(folds >= 2, "need at least 2 folds");
    check(n_slices >= 1 && k_patches >= 1 && subbags_per_volume >= 1,
          "sub-bag shape must be positive");
    check(val_frac > 0 && val_frac < 0.5, "val_frac must lie in (0, 0.5)");
  }

  json to_json() const {
    return json{{"lr", lr},
                {"weight_decay", weight_decay},
                {"epochs_max", epochs_max},
                {"patience", patience},
                {"folds", folds},
                {"seed", seed},
                {"ablation", ablation.to_string()},
                {"weights", weights.to_json()},
                {"n_slices", n_slices},
                {"k_patches", k_patches},
                {"subbags_per_volume", subbags_per_volume},
                {"val_frac", val_frac},
                {"overlap", overlap},
                {"model", model.to_json()}};
  }
};

inline AblationFlags parse_ablation(const std::string& tokens) {
  AblationFlags f;
  f.cbm = f.sad = f.adv = false;
  size_t at = 0;
  while (at <= tokens.size()) {
    size_t comma = tokens.find(',', at);
    std::string tok = tokens.substr(at, comma == std::string::npos
                                            ? std::string::npos
                                            : comma - at);
    if (!tok.empty()) {
      if (tok == "cbm")
        f.cbm = true;
      else if (tok == "sad")
        f.sad = true;
      else if (tok == "adv")
        f.adv = true;
      else
        throw ValidationError("unknown ablation token: '" + tok + "'");
    }
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return f;
}

// ---------------------------------------------------------------------------
// AdamW: adaptive moments with decoupled weight decay

template <class S>
struct AdamWState {
  std::vector<Mat<S>> m, v;
  int64_t t = 0;

  static AdamWState init(const ParamSet<S>& params) {
    AdamWState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& [name, p] : params.items) {
      s.m.push_back(Mat<S>::Zero(p.rows(), p.cols()));
      s.v.push_back(Mat<S>::Zero(p.rows(), p.cols()));
    }
    return s;
  }
};

/// One optimizer step. The adaptive update uses bias-corrected first and
/// second moments; the weight decay is applied directly to the parameters,
/// separately from the gradient path.
template <class S>
void optimizer_step(ParamSet<S>& params, const std::vector<Mat<S>>& grads,
                    AdamWState<S>& state, double lr, double weight_decay,
                    double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  check(grads.size() == params.size(), "optimizer_step: gradient count mismatch");
  state.t += 1;
  const S bc1 = S(1) - S(std::pow(beta1, double(state.t)));
  const S bc2 = S(1) - S(std::pow(beta2, double(state.t)));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params.items[i];
    const Mat<S>& g = grads[i];
    check(g.rows() == p.rows() && g.cols() == p.cols(),
          "optimizer_step: gradient shape mismatch for '" + name + "'");
    if (!g.allFinite())
      throw std::runtime_error("NaN gradient in parameter group '" +
                               ParamSet<S>::group_of(name) + "' (" + name + ")");
    Mat<S>& m = state.m[i];
    Mat<S>& v = state.v[i];
    m = S(beta1) * m + S(1 - beta1) * g;
    v = S(beta2) * v + (S(1 - beta2) * g.array().square()).matrix();
    p.array() -= S(lr) * (m.array() / bc1) / ((v.array() / bc2).sqrt() + S(eps));
    p -= S(lr) * S(weight_decay) * p;
  }
}

// ---------------------------------------------------------------------------
// stratified cross-validation folds

struct FoldIndices {
  int index = 0;
  std::vector<int> train, val, test;
};

/// Stratified k-fold split with an internal validation carve-out: per-class
/// round-robin dealing keeps every test fold within one sample of the
/// global class proportions; the validation split takes val_frac of each
/// class of the remaining training portion.
inline std::vector<FoldIndices> make_folds(const std::vector<int>& labels, int k,
                                           uint64_t seed, double val_frac = 0.1,
                                           int num_classes = 4) {
  check(k >= 2, "make_folds: need k >= 2");
  check(!labels.empty(), "make_folds: empty label set");
  std::vector<std::vector<int>> by_class(num_classes);
  for (size_t i = 0; i < labels.size(); ++i) {
    check(labels[i] >= 0 && labels[i] < num_classes, "make_folds: label out of range");
    by_class[labels[i]].push_back(static_cast<int>(i));
  }
  for (int c = 0; c < num_classes; ++c)
    if (static_cast<int>(by_class[c].size()) < k)
      throw ValidationError("class " + std::to_string(c) + " has " +
                            std::to_string(by_class[c].size()) +
                            " samples, fewer than k=" + std::to_string(k));

  Rng rng(derive_seed(seed, 0xf01d5));
  std::vector<std::vector<int>> test_folds(k);
  for (int c = 0; c < num_classes; ++c) {
    rng.shuffle(by_class[c].begin(), by_class[c].end());
    for (size_t i = 0; i < by_class[c].size(); ++i)
      test_folds[i % k].push_back(by_class[c][i]);
  }

  std::vector<FoldIndices> folds(k);
  for (int f = 0; f < k; ++f) {
    folds[f].index = f;
    folds[f].test = test_folds[f];
    std::sort(folds[f].test.begin(), folds[f].test.end());
    // remaining samples, stratified validation carve-out
    std::vector<std::vector<int>> rest_by_class(num_classes);
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      for (int i : test_folds[g]) rest_by_class[labels[i]].push_back(i);
    }
    for (int c = 0; c < num_classes; ++c) {
      auto& rest = rest_by_class[c];
      rng.shuffle(rest.begin(), rest.end());
      const int n_val = std::max(
          1, static_cast<int>(std::lround(val_frac * double(rest.size()))));
      for (size_t i = 0; i < rest.size(); ++i)
        (static_cast<int>(i) < n_val ? folds[f].val : folds[f].train)
            .push_back(rest[i]);
    }
    std::sort(folds[f].val.begin(), folds[f].val.end());
    std::sort(folds[f].train.begin(), folds[f].train.end());
  }
  return folds;
}

// ---------------------------------------------------------------------------
// per-fold training loop

struct EpochRow {
  int epoch = 0;
  double task = 0, cbm = 0, adv = 0, sad = 0, total = 0;
  double val_qwk = 0, val_amae = 0;
};

struct TrainHistory {
  std::vector<EpochRow> rows;
  int best_epoch = -1;  // 1-based epoch index of the kept checkpoint
  double best_val_qwk = -std::numeric_limits<double>::infinity();
};

struct TrainResult {
  ParamSet<float> best_params;
  TrainHistory history;
  Rng rng_at_best;
};

using EpochCallback = std::function<void(const EpochRow&)>;

/// Train one fold: per epoch, one freshly sampled sub-bag per training
/// volume, AdamW on the joint loss restricted to the enabled components,
/// and dense-inference validation QWK for early stopping.
inline TrainResult train_fold(const Dataset& ds, const FoldIndices& fold,
                              const TrainConfig& cfg,
                              const EpochCallback& on_epoch = nullptr) {
  cfg.validate();
  check(!fold.train.empty() && !fold.val.empty(), "train_fold: empty split");
  ModelConfig mc = cfg.model;
  mc.resolve();
  mc.validate();

  Rng rng_init(derive_seed(cfg.seed, 0x171cu + uint64_t(fold.index)));
  Rng rng_data(derive_seed(cfg.seed, 0xda7au + uint64_t(fold.index)));
  ParamSet<float> params = ParamSet<float>::init(mc, rng_init);
  AdamWState<float> adam = AdamWState<float>::init(params);

  ForwardOptions<float> opts;
  opts.grl_lambda = static_cast<float>(cfg.weights.lambda_adv);
  opts.build_adversary = cfg.ablation.adv;

  TrainResult result;
  result.best_params = params;
  result.rng_at_best = rng_data;
  TrainHistory& hist = result.history;

  std::vector<int> val_true;
  for (int i : fold.val) val_true.push_back(ds.volumes[i].y_vol);

  std::vector<int> order = fold.train;
  int epochs_since_best = 0;
  for (int epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    rng_data.shuffle(order.begin(), order.end());
    EpochRow row;
    row.epoch = epoch;
    int steps = 0;
    for (int vol_idx : order) {
      for (int rep = 0; rep < cfg.subbags_per_volume; ++rep) {
        SubBag bag = sample_subbag(ds.volumes[vol_idx], cfg.n_slices,
                                   cfg.k_patches, mc.patch, rng_data);
        Tape<float> tape;
        auto g = forward_subbag(tape, params, bag, opts);
        auto lg = total_loss_op(tape, g, bag.y_vol, bag.grades, cfg.weights,
                                cfg.ablation, mc.num_classes);
        LossReport lr = lg.report(tape);
        if (!std::isfinite(lr.total))
          throw TrainingDiverged(
              "total loss became non-finite at epoch " + std::to_string(epoch) +
              "; last finite epoch: " + std::to_string(epoch - 1));
        tape.backward(lg.total);
        std::vector<Mat<float>> grads;
        grads.reserve(params.size());
        for (size_t i = 0; i < params.size(); ++i)
          grads.push_back(tape.grad_or_zero(g.leaves[i]));
        optimizer_step(params, grads, adam, cfg.lr, cfg.weight_decay);
        row.task += lr.task;
        row.cbm += lr.cbm_sum();
        row.adv += lr.adv_sum();
        row.sad += lr.sad;
        row.total += lr.total;
        ++steps;
      }
    }
    row.task /= steps;
    row.cbm /= steps;
    row.adv /= steps;
    row.sad /= steps;
    row.total /= steps;

    std::vector<int> val_pred = predict_ranks(params, ds, fold.val, cfg.overlap);
    row.val_qwk = qwk(val_true, val_pred, mc.num_classes);
    row.val_amae = amae(val_true, val_pred, mc.num_classes);
    hist.rows.push_back(row);
    if (on_epoch) on_epoch(row);

    if (row.val_qwk > hist.best_val_qwk) {
      hist.best_val_qwk = row.val_qwk;
      hist.best_epoch = epoch;
      result.best_params = params;
      result.rng_at_best = rng_data;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (epochs_since_best >= cfg.patience) break;
    }
  }
  return result;
}

inline std::string history_csv(const TrainHistory& h) {
  std::string out = "epoch,task,cbm,adv,sad,total,val_qwk,val_amae,is_best\n";
  char buf[256];
  for (const auto& r : h.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%d\n",
                  r.epoch, r.task, r.cbm, r.adv, r.sad, r.total, r.val_qwk,
                  r.val_amae, r.epoch == h.best_epoch ? 1 : 0);
    out += buf;
  }
  return out;
}

}  // namespace acmil
