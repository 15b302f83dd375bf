#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "acmil/core.hpp"
#include "acmil/rng.hpp"

namespace acmil {

/// Quadratic weighted kappa: chance-corrected ordinal agreement with
/// squared-distance weights. When the expected-disagreement denominator is
/// zero (both marginals concentrated on one identical class) the score is
/// 1.0 for exact agreement and 0.0 otherwise.
inline double qwk(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                  int num_classes = 4) {
  check(!y_true.empty() && y_true.size() == y_pred.size(),
        "qwk: need equally sized non-empty label vectors");
  check(y_true.size() >= 2, "qwk: need at least two samples");
  const int k = num_classes;
  MatD observed = MatD::Zero(k, k);
  for (size_t i = 0; i < y_true.size(); ++i) {
    check(y_true[i] >= 0 && y_true[i] < k && y_pred[i] >= 0 && y_pred[i] < k,
          "qwk: label out of range");
    observed(y_true[i], y_pred[i]) += 1.0;
  }
  const double n = static_cast<double>(y_true.size());
  VecD row = observed.rowwise().sum();
  VecD col = observed.colwise().sum();
  double num = 0, den = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double w = double(i - j) * (i - j) / double((k - 1) * (k - 1));
      num += w * observed(i, j);
      den += w * row[i] * col[j] / n;
    }
  if (den == 0.0) {
    for (size_t i = 0; i < y_true.size(); ++i)
      if (y_true[i] != y_pred[i]) return 0.0;
    return 1.0;
  }
  return 1.0 - num / den;
}

/// Macro-averaged per-class mean absolute error. Classes absent from
/// y_true are skipped; their ids are reported through `absent` if given.
inline double amae(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                   int num_classes = 4, std::vector<int>* absent = nullptr) {
  check(!y_true.empty() && y_true.size() == y_pred.size(),
        "amae: need equally sized non-empty label vectors");
  double total = 0;
  int present = 0;
  if (absent) absent->clear();
  for (int c = 0; c < num_classes; ++c) {
    double acc = 0;
    int n = 0;
    for (size_t i = 0; i < y_true.size(); ++i) {
      if (y_true[i] != c) continue;
      acc += std::abs(y_pred[i] - c);
      ++n;
    }
    if (n == 0) {
      if (absent) absent->push_back(c);
      continue;
    }
    total += acc / n;
    ++present;
  }
  check(present > 0, "amae: no class present");
  return total / present;
}

/// Base-2 Jensen-Shannon divergence between two probability vectors,
/// bounded in [0, 1].
inline double jsd(const VecD& a, const VecD& b) {
  check(a.size() == b.size() && a.size() >= 1, "jsd: size mismatch");
  check(std::abs(a.sum() - 1.0) <= 1e-5 && std::abs(b.sum() - 1.0) <= 1e-5,
        "jsd: inputs must be normalized distributions");
  check(a.minCoeff() >= 0.0 && b.minCoeff() >= 0.0,
        "jsd: inputs must be non-negative");
  double acc = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double m = 0.5 * (a[i] + b[i]);
    if (a[i] > 0) acc += 0.5 * a[i] * std::log2(a[i] / m);
    if (b[i] > 0) acc += 0.5 * b[i] * std::log2(b[i] / m);
  }
  return std::clamp(acc, 0.0, 1.0);
}

struct RocCurve {
  std::vector<double> fpr, tpr, threshold;
  double auc = 0;
};

/// ROC curve over binary labels with trapezoidal AUC; empty when only one
/// class is present.
inline std::optional<RocCurve> roc_curve(const std::vector<double>& scores,
                                         const std::vector<int>& labels) {
  check(scores.size() == labels.size() && !scores.empty(),
        "roc_curve: need matched non-empty inputs");
  int pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.fpr.push_back(0);
  roc.tpr.push_back(0);
  roc.threshold.push_back(std::numeric_limits<double>::infinity());
  int tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    roc.fpr.push_back(double(fp) / neg);
    roc.tpr.push_back(double(tp) / pos);
    roc.threshold.push_back(s);
  }
  for (size_t j = 1; j < roc.fpr.size(); ++j)
    roc.auc += (roc.fpr[j] - roc.fpr[j - 1]) * (roc.tpr[j] + roc.tpr[j - 1]) / 2;
  return roc;
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions:
/// the integral of |F_a - F_b| over the merged sample breakpoints. For
/// equally sized samples this reduces to the mean absolute difference of
/// the sorted values.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  check(!a.empty() && !b.empty(), "wasserstein_1d: empty sample set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<double> all;
  all.reserve(a.size() + b.size());
  all.insert(all.end(), a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());

  double dist = 0;
  size_t ia = 0, ib = 0;
  for (size_t i = 0; i + 1 < all.size(); ++i) {
    while (ia < a.size() && a[ia] <= all[i]) ++ia;
    while (ib < b.size() && b[ib] <= all[i]) ++ib;
    const double fa = double(ia) / a.size();
    const double fb = double(ib) / b.size();
    dist += std::abs(fa - fb) * (all[i + 1] - all[i]);
  }
  return dist;
}

/// Sliced Wasserstein distance between two point clouds given as columns of
/// (dim x n) matrices: the average 1-D Wasserstein-1 distance over random
/// unit projections. Deterministic for a fixed seed.
inline double sliced_wasserstein(const MatD& a, const MatD& b,
                                 int n_projections = 128, uint64_t seed = 0) {
  check(a.rows() == b.rows(), "sliced_wasserstein: dimension mismatch");
  check(a.cols() >= 2 && b.cols() >= 2,
        "sliced_wasserstein: need at least two points per set");
  check(n_projections >= 1, "sliced_wasserstein: need projections");
  Rng rng(derive_seed(seed, 0x51ced));
  const Eigen::Index dim = a.rows();
  double acc = 0;
  for (int p = 0; p < n_projections; ++p) {
    VecD dir(dim);
    double norm2 = 0;
    do {
      for (Eigen::Index i = 0; i < dim; ++i) dir[i] = rng.normal();
      norm2 = dir.squaredNorm();
    } while (norm2 < 1e-12);
    dir /= std::sqrt(norm2);
    VecD pa = a.transpose() * dir;
    VecD pb = b.transpose() * dir;
    acc += wasserstein_1d({pa.data(), pa.data() + pa.size()},
                          {pb.data(), pb.data() + pb.size()});
  }
  return acc / n_projections;
}

}  // namespace acmil
