#pragma once

#include <Eigen/Dense>

namespace backsense {

// Gaussian prior on the per-sensor sensed values x together with the
// logistic-map scale/offset used to turn x into activation probabilities.
// Sigma_x = D^{1/2} C D^{1/2} where C[j][k] = rho^|j-k| and D = diag(sigma^2).
struct SensingPrior {
  Eigen::VectorXd mu;     // per-sensor mean of x
  Eigen::VectorXd sigma;  // per-sensor std-dev of x, all > 0
  double rho = 0.0;       // exponential correlation coefficient, in [0, 1)
  Eigen::MatrixXd Sigma_x;

  int size() const { return static_cast<int>(mu.size()); }

  // Scalar map parameters for the homogeneous model.
  double mu0() const { return mu[0]; }
  double sigma0() const { return sigma[0]; }

  static SensingPrior lear(Eigen::VectorXd mu, Eigen::VectorXd sigma, double rho);
  static SensingPrior homogeneous(int n, double mu, double sigma, double rho);

  void validate() const;
};

}  // namespace backsense
