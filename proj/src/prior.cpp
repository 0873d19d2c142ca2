#include "backsense/prior.hpp"

#include <cmath>
#include <stdexcept>

namespace backsense {

SensingPrior SensingPrior::lear(Eigen::VectorXd mu, Eigen::VectorXd sigma, double rho) {
  SensingPrior p;
  p.mu = std::move(mu);
  p.sigma = std::move(sigma);
  p.rho = rho;
  const int n = p.size();
  p.Sigma_x.resize(n, n);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k)
      p.Sigma_x(j, k) = p.sigma[j] * p.sigma[k] * std::pow(rho, std::abs(j - k));
  p.validate();
  return p;
}

SensingPrior SensingPrior::homogeneous(int n, double mu, double sigma, double rho) {
  return lear(Eigen::VectorXd::Constant(n, mu), Eigen::VectorXd::Constant(n, sigma), rho);
}

void SensingPrior::validate() const {
  if (mu.size() == 0) throw std::invalid_argument("SensingPrior: empty mean vector");
  if (sigma.size() != mu.size())
    throw std::invalid_argument("SensingPrior: mu/sigma size mismatch");
  if ((sigma.array() <= 0.0).any())
    throw std::invalid_argument("SensingPrior: sigma entries must be positive");
  if (rho < 0.0 || rho >= 1.0) throw std::invalid_argument("SensingPrior: rho must lie in [0,1)");
  if (Sigma_x.rows() != mu.size() || Sigma_x.cols() != mu.size())
    throw std::invalid_argument("SensingPrior: Sigma_x shape mismatch");
}

}  // namespace backsense
