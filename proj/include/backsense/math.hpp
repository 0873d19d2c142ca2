#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace backsense {

// Activation probabilities live in the open unit interval; values are clamped
// here before any log / Jacobian so densities stay finite.
inline constexpr double kThetaEps = 1e-9;

// Densities are floored at this value before taking logs.
inline constexpr double kDensityFloor = 1e-300;

// Smallest admissible noise variance estimate.
inline constexpr double kSigmaFloor = 1e-8;

inline constexpr double kPi = 3.141592653589793238462643383279502884;
inline constexpr double kTwoPi = 2.0 * kPi;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double clamp_theta(double theta) {
  return std::clamp(theta, kThetaEps, 1.0 - kThetaEps);
}

inline double log_floored(double v) { return std::log(std::max(v, kDensityFloor)); }

// log(sum_k exp(v_k)) with max subtraction; -inf for an empty or all -inf input.
inline double log_sum_exp(const Eigen::VectorXd& v) {
  if (v.size() == 0) return kNegInf;
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

}  // namespace backsense
