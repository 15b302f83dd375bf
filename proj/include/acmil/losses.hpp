#pragma once

#include <cmath>
#include <vector>

#include "acmil/autodiff.hpp"
#include "acmil/model.hpp"

namespace acmil {

/// Loss weights of the joint objective. The adversarial term is scaled by
/// lambda_adv inside the gradient reversal layer; adv_double_scale
/// additionally multiplies the loss term itself (the alternative reading of
/// the weighting, off by default).
struct LossWeights {
  double lambda_cbm = 1.0;
  double lambda_adv = 0.5;
  double lambda_sad = 0.1;
  bool adv_double_scale = false;

  void validate() const {
    check(lambda_cbm >= 0 && lambda_adv >= 0 && lambda_sad >= 0,
          "loss weights must be non-negative");
  }
  json to_json() const {
    return json{{"lambda_cbm", lambda_cbm},
                {"lambda_adv", lambda_adv},
                {"lambda_sad", lambda_sad},
                {"adv_double_scale", adv_double_scale}};
  }
  static LossWeights from_json(const json& j) {
    LossWeights w;
    w.lambda_cbm = j.at("lambda_cbm").get<double>();
    w.lambda_adv = j.at("lambda_adv").get<double>();
    w.lambda_sad = j.at("lambda_sad").get<double>();
    w.adv_double_scale = j.value("adv_double_scale", false);
    w.validate();
    return w;
  }
};

struct LossReport {
  double task = 0;
  std::array<double, 3> cbm{};  // per predefined concept
  std::array<double, 3> adv{};
  double sad = 0;
  double total = 0;

  double cbm_sum() const { return cbm[0] + cbm[1] + cbm[2]; }
  double adv_sum() const { return adv[0] + adv[1] + adv[2]; }
};

namespace detail {

// log(1 + exp(-|z|)) is the stable tail of binary cross-entropy on logits
template <class S>
S bce_with_logit(S z, S target) {
  return std::max(z, S(0)) - target * z + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace detail

/// Conditional ordinal loss on num_classes-1 rank logits. Binary task j
/// (is the label greater than j?) is admitted only when label > j-1, and
/// the per-sample loss is the mean binary cross-entropy over admitted tasks.
template <class S>
S corn_loss_value(const Vec<S>& logits, int label, int num_classes) {
  check(num_classes >= 2 && logits.size() == num_classes - 1,
        "corn_loss: need num_classes-1 rank logits");
  check(label >= 0 && label < num_classes, "corn_loss: label out of range");
  S acc = 0;
  int admitted = 0;
  for (int j = 0; j < num_classes - 1; ++j) {
    if (!(label > j - 1)) break;  // conditional subset: requires label > j-1
    const S target = label > j ? S(1) : S(0);
    acc += detail::bce_with_logit(logits[j], target);
    ++admitted;
  }
  return acc / S(admitted);
}

/// Rank-consistent inference: P(y > j) is the chained product of the first
/// j+1 sigmoids, so the probabilities are non-increasing by construction.
template <class S>
Vec<S> corn_rank_probs(const Vec<S>& logits) {
  Vec<S> p(logits.size());
  S run = 1;
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    run *= S(1) / (S(1) + std::exp(-logits[j]));
    p[j] = run;
  }
  return p;
}

template <class S>
int corn_rank(const Vec<S>& logits) {
  check(logits.allFinite(), "corn_rank: logits must be finite");
  Vec<S> p = corn_rank_probs(logits);
  int rank = 0;
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (p[j] > S(0.5)) ++rank;
  return rank;
}

/// Tape node for the CORN loss of a single (num_classes-1) x 1 logit column.
template <class S>
Var corn_loss_op(Tape<S>& tape, Var logits, int label, int num_classes) {
  const auto& z = tape.value(logits);
  check(z.cols() == 1 && z.rows() == num_classes - 1,
        "corn_loss: need a (num_classes-1) x 1 logit column");
  check(label >= 0 && label < num_classes, "corn_loss: label out of range");
  int admitted = 0;
  S acc = 0;
  Vec<S> targets = Vec<S>::Zero(z.rows());
  for (int j = 0; j < num_classes - 1 && label > j - 1; ++j) {
    targets[j] = label > j ? S(1) : S(0);
    acc += detail::bce_with_logit(z(j, 0), targets[j]);
    ++admitted;
  }
  Mat<S> val(1, 1);
  val(0, 0) = acc / S(admitted);
  const int adm = admitted;
  return tape.make(std::move(val), {logits},
                   [logits, targets, adm](Tape<S>& t, const Mat<S>& g) {
                     const auto& zz = t.value(logits);
                     Mat<S> dz = Mat<S>::Zero(zz.rows(), 1);
                     for (int j = 0; j < adm; ++j) {
                       const S sig = S(1) / (S(1) + std::exp(-zz(j, 0)));
                       dz(j, 0) = g(0, 0) * (sig - targets[j]) / S(adm);
                     }
                     t.accumulate(logits, dz);
                   });
}

/// Spatial attention diversity: the summed cosine similarity over the three
/// unordered pairs of localized-concept attention maps, per slice, averaged
/// over the slices of the hierarchy.
template <class S>
Var sad_loss_op(Tape<S>& tape, const ForwardGraph<S>& g) {
  std::vector<Var> per_slice;
  for (int m = 0; m < g.n_slices; ++m) {
    Var nu_ao = tape.cosine(g.alpha[kNulling][m], g.alpha[kAorta][m]);
    Var nu_un = tape.cosine(g.alpha[kNulling][m], g.alpha[kResidual][m]);
    Var ao_un = tape.cosine(g.alpha[kAorta][m], g.alpha[kResidual][m]);
    per_slice.push_back(tape.add(tape.add(nu_ao, nu_un), ao_un));
  }
  return tape.scale(tape.sum_list(per_slice), S(1) / S(g.n_slices));
}

/// Plain-vector SAD for evaluation-time checks.
template <class S>
S sad_loss_value(const std::array<std::vector<Vec<S>>, 4>& alpha, int n_slices) {
  S total = 0;
  auto cos = [](const Vec<S>& a, const Vec<S>& b) {
    const S den = std::max(a.norm() * b.norm(), S(1e-12));
    return a.dot(b) / den;
  };
  for (int m = 0; m < n_slices; ++m)
    total += cos(alpha[kNulling][m], alpha[kAorta][m]) +
             cos(alpha[kNulling][m], alpha[kResidual][m]) +
             cos(alpha[kAorta][m], alpha[kResidual][m]);
  return total / S(n_slices);
}

struct AblationFlags {
  bool cbm = true;
  bool sad = true;
  bool adv = true;

  std::string to_string() const {
    std::string s;
    if (cbm) s += "cbm,";
    if (sad) s += "sad,";
    if (adv) s += "adv,";
    if (!s.empty()) s.pop_back();
    return s;
  }
};

template <class S>
struct LossGraph {
  Var total;
  Var task;
  std::array<Var, 3> cbm{};
  std::array<Var, 3> adv{};
  Var sad;
  LossReport report(const Tape<S>& tape) const {
    LossReport r;
    r.task = tape.value(task)(0, 0);
    for (int c = 0; c < 3; ++c) {
      if (cbm[c].valid()) r.cbm[c] = tape.value(cbm[c])(0, 0);
      if (adv[c].valid()) r.adv[c] = tape.value(adv[c])(0, 0);
    }
    if (sad.valid()) r.sad = tape.value(sad)(0, 0);
    r.total = tape.value(total)(0, 0);
    return r;
  }
};

/// Assemble the joint objective for one sub-bag forward pass. Disabled
/// components are simply not built, so they contribute neither loss nor
/// gradients.
template <class S>
LossGraph<S> total_loss_op(Tape<S>& tape, const ForwardGraph<S>& g, int y_vol,
                           const ConceptGrades& grades, const LossWeights& w,
                           const AblationFlags& flags, int num_classes) {
  w.validate();
  LossGraph<S> lg;
  lg.task = corn_loss_op(tape, g.task_logits, y_vol, num_classes);
  Var total = lg.task;
  if (flags.cbm) {
    std::vector<Var> terms;
    for (int c = 0; c < 3; ++c) {
      lg.cbm[c] = corn_loss_op(tape, g.concept_logits[c], grades.get(c), num_classes);
      terms.push_back(lg.cbm[c]);
    }
    total = tape.add(total, tape.scale(tape.sum_list(terms), S(w.lambda_cbm)));
  }
  if (flags.adv) {
    std::vector<Var> terms;
    for (int c = 0; c < 3; ++c) {
      lg.adv[c] = corn_loss_op(tape, g.adv_logits[c], grades.get(c), num_classes);
      terms.push_back(lg.adv[c]);
    }
    Var sum = tape.sum_list(terms);
    if (w.adv_double_scale) sum = tape.scale(sum, S(w.lambda_adv));
    total = tape.add(total, sum);
  }
  if (flags.sad) {
    lg.sad = sad_loss_op(tape, g);
    total = tape.add(total, tape.scale(lg.sad, S(w.lambda_sad)));
  }
  lg.total = total;
  return lg;
}

}  // namespace acmil
