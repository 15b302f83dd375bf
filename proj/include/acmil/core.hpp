#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace acmil {

constexpr const char* kVersion = "0.1.0";

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

/// Thrown when an argument violates a documented precondition.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown on I/O failures (missing, truncated or inconsistent files).
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

// Concept axes. The first three carry weak volume-level labels, the last is
// the unsupervised residual branch.
enum Concept : int { kSharpness = 0, kNulling = 1, kAorta = 2, kResidual = 3 };

inline const char* concept_name(int c) {
  static const char* names[4] = {"sh", "nu", "ao", "un"};
  return names[c];
}

// Localized concepts entering the attention-diversity penalty.
inline constexpr int kLocalizedConcepts[3] = {kNulling, kAorta, kResidual};

}  // namespace acmil
