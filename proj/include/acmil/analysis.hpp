#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "acmil/inference.hpp"
#include "acmil/metrics.hpp"
#include "acmil/training.hpp"

namespace acmil {

/// Dense-inference features of one volume, kept for probes and metrics.
struct VolumeFeatures {
  int volume_id = 0;
  int y_vol = 0;
  ConceptGrades grades;
  InferenceResult<float> infer;
};

inline std::vector<VolumeFeatures> extract_features(const ParamSet<float>& params,
                                                    const Dataset& ds,
                                                    const std::vector<int>& indices,
                                                    double overlap = 0.5) {
  std::vector<VolumeFeatures> out;
  out.reserve(indices.size());
  for (int i : indices) {
    const PhantomVolume& vol = ds.volumes[i];
    out.push_back({vol.id, vol.y_vol, vol.grades, infer_dense(params, vol, overlap)});
  }
  return out;
}

/// Slice-level vectors of one branch across a set of volumes, one column
/// per slice.
inline MatD branch_feature_matrix(const std::vector<VolumeFeatures>& feats,
                                  int branch) {
  size_t cols = 0;
  for (const auto& f : feats) cols += f.infer.z[branch].size();
  check(cols > 0, "branch_feature_matrix: no slices");
  const Eigen::Index dim = feats[0].infer.z[branch][0].size();
  MatD m(dim, static_cast<Eigen::Index>(cols));
  Eigen::Index at = 0;
  for (const auto& f : feats)
    for (const auto& z : f.infer.z[branch])
      m.col(at++) = z.template cast<double>();
  return m;
}

// ---------------------------------------------------------------------------
// adversary probe: retrain fresh heads on the frozen residual features

struct ProbeConfig {
  int epochs = 400;
  double lr = 1e-2;
  double weight_decay = 0.0;
  int hidden = 0;  // 0 -> the model's adversary hidden width
  uint64_t seed = 0;
  int num_classes = 4;
};

struct ProbeResult {
  std::array<std::optional<RocCurve>, 3> roc;
  std::array<std::string, 3> note;  // reason when a curve is absent
  double final_train_loss = 0;

  std::optional<double> auc(int c) const {
    if (!roc[c]) return std::nullopt;
    return roc[c]->auc;
  }
};

/// Retrain adversary-shaped heads to convergence on frozen residual
/// features, then report the per-concept ROC of predicting a high grade
/// (>= 2) on held-out volumes. Retraining gives a fair upper bound on the
/// leakage left in the branch; the heads as trained adversarially would
/// trivially sit at chance.
inline ProbeResult probe_adversary(const std::vector<VolumeFeatures>& train_feats,
                                   const std::vector<VolumeFeatures>& test_feats,
                                   int subspace, const ProbeConfig& cfg = {}) {
  check(!train_feats.empty() && !test_feats.empty(),
        "probe_adversary: need train and test features");
  const int hidden = cfg.hidden > 0 ? cfg.hidden : subspace;
  const int n_logits = cfg.num_classes - 1;

  Rng rng(derive_seed(cfg.seed, 0x9120be));
  ModelConfig pcfg;  // carrier for the probe parameter list
  ParamSet<double> heads;
  heads.cfg = pcfg;
  auto he = [&](int r, int c, double gain) {
    MatD m(r, c);
    const double stddev = std::sqrt(gain / c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
    return m;
  };
  for (int c = 0; c < 3; ++c) {
    const std::string base = std::string("probe.") + concept_name(c);
    heads.items.emplace_back(base + ".w0", he(hidden, subspace, 2.0));
    heads.items.emplace_back(base + ".b0", MatD::Zero(hidden, 1));
    heads.items.emplace_back(base + ".w1", he(n_logits, hidden, 1.0));
    heads.items.emplace_back(base + ".b1", MatD::Zero(n_logits, 1));
  }
  AdamWState<double> adam = AdamWState<double>::init(heads);

  // cache the residual features as double matrices, one per volume
  std::vector<MatD> z_train;
  z_train.reserve(train_feats.size());
  for (const auto& f : train_feats) {
    MatD z(subspace, static_cast<Eigen::Index>(f.infer.z[kResidual].size()));
    for (size_t m = 0; m < f.infer.z[kResidual].size(); ++m)
      z.col(static_cast<Eigen::Index>(m)) =
          f.infer.z[kResidual][m].template cast<double>();
    z_train.push_back(std::move(z));
  }

  ProbeResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape<double> tape;
    std::vector<Var> leaves = make_leaves(tape, heads);
    std::vector<Var> losses;
    for (size_t v = 0; v < z_train.size(); ++v) {
      Var z = tape.constant(z_train[v]);
      for (int c = 0; c < 3; ++c) {
        Var h = tape.relu(tape.linear(leaves[4 * c], leaves[4 * c + 1], z));
        Var logits = tape.meancols(tape.linear(leaves[4 * c + 2], leaves[4 * c + 3], h));
        losses.push_back(corn_loss_op(tape, logits, train_feats[v].grades.get(c),
                                      cfg.num_classes));
      }
    }
    Var total = tape.scale(tape.sum_list(losses), 1.0 / double(z_train.size()));
    tape.backward(total);
    std::vector<MatD> grads;
    grads.reserve(heads.size());
    for (size_t i = 0; i < heads.size(); ++i)
      grads.push_back(tape.grad_or_zero(leaves[i]));
    optimizer_step(heads, grads, adam, cfg.lr, cfg.weight_decay);
    result.final_train_loss = tape.value(total)(0, 0);
  }

  // score the held-out volumes: P(grade > 1) from the chained rank probs
  for (int c = 0; c < 3; ++c) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& f : test_feats) {
      MatD z(subspace, static_cast<Eigen::Index>(f.infer.z[kResidual].size()));
      for (size_t m = 0; m < f.infer.z[kResidual].size(); ++m)
        z.col(static_cast<Eigen::Index>(m)) =
            f.infer.z[kResidual][m].template cast<double>();
      MatD h = (heads.items[4 * c].second * z).colwise() +
               heads.items[4 * c + 1].second.col(0);
      h = h.cwiseMax(0.0);
      MatD logits = (heads.items[4 * c + 2].second * h).colwise() +
                    heads.items[4 * c + 3].second.col(0);
      VecD mean_logits = logits.rowwise().mean();
      VecD probs = corn_rank_probs(VecD(mean_logits));
      scores.push_back(probs[1]);  // P(grade >= 2)
      labels.push_back(f.grades.get(c) >= 2 ? 1 : 0);
    }
    result.roc[c] = roc_curve(scores, labels);
    if (!result.roc[c])
      result.note[c] = std::string("test labels single-class for concept ") +
                       concept_name(c);
  }
  return result;
}

// ---------------------------------------------------------------------------
// minimum-perturbation attack in representation space

struct AttackConfig {
  double bracket = 100.0;
  int bisect_steps = 30;
  double prescan_step = 0.5;
  int num_classes = 4;
};

/// Minimum L2 norm of a joint perturbation of one branch's slice vectors
/// that pulls the predicted rank below the top grade. The tier-2 attention
/// weights are held at their clean values, so the perturbation probes the
/// branch's direct contribution to the fused volume vector. Returns the
/// cost, or nullopt when no perturbation inside the bracket degrades the
/// prediction.
inline std::optional<double> attack_min_perturbation(
    const ParamSet<float>& params, const InferenceResult<float>& infer, int branch,
    const AttackConfig& cfg = {}) {
  check(branch >= 0 && branch < 4, "attack: invalid branch");
  const int top = cfg.num_classes - 1;
  check(infer.rank == top, "attack: volume is not predicted at the top grade");

  const int L = params.cfg.subspace;
  const int m_slices = static_cast<int>(infer.slices.size());
  const MatD w = params.at("task.w").cast<double>();
  const VecD b = params.at("task.b").col(0).cast<double>();
  const VecD beta = infer.beta.cast<double>();
  const VecD v_vol = infer.v_vol.cast<double>();
  const MatD w_seg = w.middleCols(branch * L, L);

  auto margin_from_logits = [&](const VecD& logits) {
    double prod = 1;
    for (Eigen::Index k = 0; k < logits.size(); ++k)
      prod *= 1.0 / (1.0 + std::exp(-logits[k]));
    return prod - 0.5;
  };
  // V_vol shifts by sum_m beta_m * delta_m in the branch segment
  auto margin_at = [&](const MatD& delta) {
    VecD v = v_vol;
    v.segment(branch * L, L) += delta * beta;
    return margin_from_logits(w * v + b);
  };

  // gradient of the margin at delta = 0
  const VecD l0 = w * v_vol + b;
  double prod = 1;
  for (Eigen::Index k = 0; k < l0.size(); ++k)
    prod *= 1.0 / (1.0 + std::exp(-l0[k]));
  VecD dmargin_dl(l0.size());
  for (Eigen::Index k = 0; k < l0.size(); ++k)
    dmargin_dl[k] = prod * (1.0 - 1.0 / (1.0 + std::exp(-l0[k])));
  const VecD g_common = w_seg.transpose() * dmargin_dl;  // shared across slices
  MatD grad(L, m_slices);
  for (int m = 0; m < m_slices; ++m) grad.col(m) = beta[m] * g_common;
  const double gnorm = grad.norm();
  if (gnorm < 1e-12) return std::nullopt;  // no forward influence
  const MatD dir = grad / gnorm;

  auto f = [&](double t) { return margin_at(MatD(-t * dir)); };
  check(f(0.0) > 0, "attack: margin not positive at the clean point");

  // fixed-step prescan locates the first crossing; bisection refines it
  double lo = 0.0, hi = -1.0;
  for (double t = cfg.prescan_step; t <= cfg.bracket + 1e-12;
       t += cfg.prescan_step) {
    if (f(t) <= 0) {
      hi = t;
      break;
    }
    lo = t;
  }
  if (hi < 0) return std::nullopt;
  for (int it = 0; it < cfg.bisect_steps; ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) <= 0 ? hi : lo) = mid;
  }
  return hi;
}

// ---------------------------------------------------------------------------
// attention localization against the ground-truth masks

/// Fraction of dense attention mass on tiles whose centre lies inside the
/// concept's mask (nulling -> myocardium, aorta -> aorta), averaged over
/// the slices where the mask is present. Absent when the mask never
/// appears or was not stored.
inline std::optional<double> localization_score(const InferenceResult<float>& infer,
                                                const PhantomVolume& vol,
                                                int concept_id) {
  check(concept_id == kNulling || concept_id == kAorta,
        "localization_score: only localized labeled concepts have masks");
  if (!vol.has_masks()) return std::nullopt;
  const int plane = concept_id == kNulling ? kMaskMyocardium : kMaskAorta;
  const int half = infer.patch_size / 2;

  double acc = 0;
  int counted = 0;
  for (size_t m = 0; m < infer.slices.size(); ++m) {
    const int z = infer.slices[m];
    bool any = false;
    for (int y = 0; y < vol.height && !any; ++y)
      for (int x = 0; x < vol.width && !any; ++x)
        any = vol.mask_at(plane, z, y, x);
    if (!any) continue;
    double mass = 0;
    const auto& alpha = infer.alpha[concept_id][m];
    for (size_t k = 0; k < infer.origins.size(); ++k) {
      const int cy = infer.origins[k].first + half;
      const int cx = infer.origins[k].second + half;
      if (vol.mask_at(plane, z, cy, cx)) mass += alpha[static_cast<Eigen::Index>(k)];
    }
    acc += mass;
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return acc / counted;
}

/// Per-slice attention JSD for the three localized-concept pairs.
inline std::map<std::string, std::vector<double>> jsd_pair_distributions(
    const std::vector<VolumeFeatures>& feats) {
  std::map<std::string, std::vector<double>> out;
  const std::array<std::pair<int, int>, 3> pairs = {
      std::make_pair(kNulling, kAorta), std::make_pair(kNulling, kResidual),
      std::make_pair(kAorta, kResidual)};
  for (const auto& f : feats) {
    for (size_t m = 0; m < f.infer.slices.size(); ++m) {
      for (const auto& [a, b] : pairs) {
        VecD pa = f.infer.alpha[a][m].cast<double>();
        VecD pb = f.infer.alpha[b][m].cast<double>();
        pa /= pa.sum();  // remove float rounding before the divergence
        pb /= pb.sum();
        const std::string key =
            std::string(concept_name(a)) + "_" + concept_name(b);
        out[key].push_back(jsd(pa, pb));
      }
    }
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  check(!v.empty(), "mean of empty set");
  double acc = 0;
  for (double x : v) acc += x;
  return acc / double(v.size());
}

inline double median_of(std::vector<double> v) {
  check(!v.empty(), "median of empty set");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace acmil
