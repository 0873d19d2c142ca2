#include "backsense/distributions.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

#include <Eigen/Cholesky>

#include "backsense/math.hpp"

namespace backsense::dist {

double sigmoid_map(double x_tilde, double mu, double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("sigmoid_map: sigma must be positive");
  return 1.0 / (1.0 + std::exp(-(x_tilde - mu) / sigma));
}

double inverse_map(double theta, double mu, double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("inverse_map: sigma must be positive");
  const double t = clamp_theta(theta);
  return mu - sigma * std::log(1.0 / t - 1.0);
}

Eigen::VectorXd r_transform(const Eigen::VectorXd& theta, const Eigen::VectorXd& sigma) {
  if (theta.size() != sigma.size())
    throw std::invalid_argument("r_transform: theta/sigma size mismatch");
  Eigen::VectorXd r(theta.size());
  for (Eigen::Index n = 0; n < theta.size(); ++n) {
    const double t = clamp_theta(theta[n]);
    r[n] = -sigma[n] * std::log(1.0 / t - 1.0);
  }
  return r;
}

double log_theta_prior_hetero(const Eigen::VectorXd& theta, const SensingPrior& prior) {
  const int n = prior.size();
  if (theta.size() != n) throw std::invalid_argument("theta_prior_hetero: size mismatch");
  const Eigen::VectorXd r = r_transform(theta, prior.sigma);

  Eigen::LLT<Eigen::MatrixXd> llt(prior.Sigma_x);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("theta_prior_hetero: Sigma_x is not positive definite");

  double log_det = 0.0;
  for (int j = 0; j < n; ++j) log_det += 2.0 * std::log(llt.matrixL()(j, j));
  const double quad = r.dot(llt.solve(r));

  double log_jac = 0.0;
  for (int j = 0; j < n; ++j) {
    const double t = clamp_theta(theta[j]);
    log_jac += std::log(prior.sigma[j]) - std::log(t - t * t);
  }
  return log_jac - 0.5 * n * std::log(kTwoPi) - 0.5 * log_det - 0.5 * quad;
}

double theta_prior_hetero(const Eigen::VectorXd& theta, const SensingPrior& prior) {
  return std::exp(log_theta_prior_hetero(theta, prior));
}

double log_theta_prior_uniform(double theta) {
  const double t = clamp_theta(theta);
  const double u = std::log(1.0 / t - 1.0);
  return -std::log(t - t * t) - 0.5 * std::log(kTwoPi) - 0.5 * u * u;
}

double theta_prior_uniform(double theta) { return std::exp(log_theta_prior_uniform(theta)); }

double log_theta_cond_scalar(double theta_n, double x_n, double mu_n, double sigma_n,
                             double delta2) {
  if (delta2 <= 0.0) throw std::invalid_argument("theta_cond_given_x: delta2 must be positive");
  const double t = clamp_theta(theta_n);
  const double resid = -sigma_n * std::log(1.0 / t - 1.0) + mu_n - x_n;
  return std::log(sigma_n) - std::log(t - t * t) - 0.5 * std::log(kTwoPi * delta2) -
         resid * resid / (2.0 * delta2);
}

double theta_cond_given_x(const Eigen::VectorXd& theta, const Eigen::VectorXd& x, double delta2,
                          const SensingPrior& prior) {
  const int n = prior.size();
  if (theta.size() != n || x.size() != n)
    throw std::invalid_argument("theta_cond_given_x: size mismatch");
  double acc = 0.0;
  for (int j = 0; j < n; ++j)
    acc += log_theta_cond_scalar(theta[j], x[j], prior.mu[j], prior.sigma[j], delta2);
  return std::exp(acc);
}

namespace {

void check_theta_vector(const Eigen::VectorXd& theta, const char* who) {
  if (theta.size() == 0) throw std::invalid_argument(std::string(who) + ": empty theta");
  for (Eigen::Index n = 0; n < theta.size(); ++n)
    if (!(theta[n] >= 0.0 && theta[n] <= 1.0))
      throw std::invalid_argument(std::string(who) + ": theta entries must lie in [0,1]");
}

}  // namespace

void poibin_pmf(const Eigen::VectorXd& theta, Eigen::VectorXd& pmf) {
  check_theta_vector(theta, "poibin_pmf");
  const int n = static_cast<int>(theta.size());
  if (pmf.size() != n + 1)
    throw std::invalid_argument("poibin_pmf: output length must be N + 1");
  pmf.setZero();
  pmf[0] = 1.0;
  for (int k = 0; k < n; ++k) {
    const double t = theta[k];
    for (int m = k + 1; m >= 1; --m) pmf[m] = pmf[m] * (1.0 - t) + pmf[m - 1] * t;
    pmf[0] *= (1.0 - t);
  }
}

Eigen::VectorXd poibin_pmf(const Eigen::VectorXd& theta) {
  Eigen::VectorXd pmf(theta.size() + 1);
  poibin_pmf(theta, pmf);
  return pmf;
}

Eigen::VectorXd poibin_pmf_dft(const Eigen::VectorXd& theta) {
  check_theta_vector(theta, "poibin_pmf_dft");
  const int n = static_cast<int>(theta.size());
  const std::complex<double> j(0.0, 1.0);

  std::vector<std::complex<double>> prod(n + 1);
  for (int l = 0; l <= n; ++l) {
    const std::complex<double> cl = std::exp(j * (kTwoPi * l / (n + 1)));
    std::complex<double> p(1.0, 0.0);
    for (int k = 0; k < n; ++k) p *= 1.0 + (cl - 1.0) * theta[k];
    prod[l] = p;
  }

  Eigen::VectorXd pmf(n + 1);
  for (int m = 0; m <= n; ++m) {
    std::complex<double> s(0.0, 0.0);
    for (int l = 0; l <= n; ++l)
      s += std::exp(-j * (kTwoPi * l * m / (n + 1))) * prod[l];
    pmf[m] = std::max(s.real() / (n + 1), 0.0);
  }
  return pmf;
}

std::vector<Eigen::VectorXd> poibin_leave_one_out(const Eigen::VectorXd& theta) {
  check_theta_vector(theta, "poibin_leave_one_out");
  const int n = static_cast<int>(theta.size());

  // prefix[k] = PMF of sensors [0,k), suffix[k] = PMF of sensors [k,n).
  std::vector<Eigen::VectorXd> prefix(n + 1), suffix(n + 1);
  prefix[0] = Eigen::VectorXd::Ones(1);
  for (int k = 0; k < n; ++k) {
    const auto& p = prefix[k];
    Eigen::VectorXd q = Eigen::VectorXd::Zero(k + 2);
    for (int m = 0; m <= k; ++m) {
      q[m] += p[m] * (1.0 - theta[k]);
      q[m + 1] += p[m] * theta[k];
    }
    prefix[k + 1] = std::move(q);
  }
  suffix[n] = Eigen::VectorXd::Ones(1);
  for (int k = n - 1; k >= 0; --k) {
    const auto& s = suffix[k + 1];
    Eigen::VectorXd q = Eigen::VectorXd::Zero(s.size() + 1);
    for (Eigen::Index m = 0; m < s.size(); ++m) {
      q[m] += s[m] * (1.0 - theta[k]);
      q[m + 1] += s[m] * theta[k];
    }
    suffix[k] = std::move(q);
  }

  std::vector<Eigen::VectorXd> out(n);
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd q = Eigen::VectorXd::Zero(n);
    const auto& a = prefix[k];
    const auto& b = suffix[k + 1];
    for (Eigen::Index i = 0; i < a.size(); ++i)
      for (Eigen::Index l = 0; l < b.size(); ++l) q[i + l] += a[i] * b[l];
    out[k] = std::move(q);
  }
  return out;
}

Eigen::VectorXd binomial_pmf(double theta, int n) {
  if (n < 1) throw std::invalid_argument("binomial_pmf: n must be positive");
  if (!(theta >= 0.0 && theta <= 1.0))
    throw std::invalid_argument("binomial_pmf: theta must lie in [0,1]");
  Eigen::VectorXd pmf = Eigen::VectorXd::Zero(n + 1);
  if (theta == 0.0) {
    pmf[0] = 1.0;
    return pmf;
  }
  if (theta == 1.0) {
    pmf[n] = 1.0;
    return pmf;
  }
  const double lt = std::log(theta), l1t = std::log1p(-theta);
  for (int m = 0; m <= n; ++m) {
    const double lc = std::lgamma(n + 1.0) - std::lgamma(m + 1.0) - std::lgamma(n - m + 1.0);
    pmf[m] = std::exp(lc + m * lt + (n - m) * l1t);
  }
  return pmf;
}

double log_obs_cond_density(double y_norm2, int m, double sigma_h2, double sigma_w2,
                            int n_antennas) {
  if (y_norm2 < 0.0) throw std::invalid_argument("obs_cond_density: negative squared norm");
  if (m < 0) throw std::invalid_argument("obs_cond_density: negative count");
  if (n_antennas < 1) throw std::invalid_argument("obs_cond_density: need at least one antenna");
  const double v = sigma_h2 * m + sigma_w2;
  if (v <= 0.0) throw std::invalid_argument("obs_cond_density: non-positive slot variance");
  return -n_antennas * std::log(kTwoPi * v) - y_norm2 / (2.0 * v);
}

double obs_cond_density(double y_norm2, int m, double sigma_h2, double sigma_w2, int n_antennas) {
  return std::exp(log_obs_cond_density(y_norm2, m, sigma_h2, sigma_w2, n_antennas));
}

}  // namespace backsense::dist
