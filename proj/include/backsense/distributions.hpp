#pragma once

#include <Eigen/Dense>
#include <vector>

#include "backsense/prior.hpp"

namespace backsense::dist {

// Logistic activation map theta = 1 / (1 + exp(-(x - mu) / sigma)).
double sigmoid_map(double x_tilde, double mu, double sigma);

// Inverse of sigmoid_map: x = mu - sigma * log(1/theta - 1). theta is clamped
// to the open unit interval before the log.
double inverse_map(double theta, double mu, double sigma);

// r(theta)_n = -sigma_n * log(1/theta_n - 1); equals x - mu under the map.
Eigen::VectorXd r_transform(const Eigen::VectorXd& theta, const Eigen::VectorXd& sigma);

// Density of theta induced by x ~ N(mu, Sigma_x) through the logistic map:
// prod_n sigma_n/(theta_n - theta_n^2) * N(r(theta); 0, Sigma_x).
double theta_prior_hetero(const Eigen::VectorXd& theta, const SensingPrior& prior);
double log_theta_prior_hetero(const Eigen::VectorXd& theta, const SensingPrior& prior);

// Scalar density of theta = sigmoid(x) for x ~ N(mu, sigma^2); the map scale
// cancels, leaving 1/((theta - theta^2) sqrt(2 pi)) exp(-log(1/theta-1)^2 / 2).
double theta_prior_uniform(double theta);
double log_theta_prior_uniform(double theta);

// Density of theta given the sensed values x when the reading feeding the map
// is x + noise with per-sensor variance delta2; factorizes across sensors.
double theta_cond_given_x(const Eigen::VectorXd& theta, const Eigen::VectorXd& x, double delta2,
                          const SensingPrior& prior);
double log_theta_cond_scalar(double theta_n, double x_n, double mu_n, double sigma_n,
                             double delta2);

// PMF of the number of active sensors T = sum_n Bernoulli(theta_n), length
// N+1. Default backend: stable O(N^2) convolution recursion.
Eigen::VectorXd poibin_pmf(const Eigen::VectorXd& theta);

// In-place variant for hot loops; `pmf` must already have length N + 1.
void poibin_pmf(const Eigen::VectorXd& theta, Eigen::VectorXd& pmf);

// Same PMF through the length-(N+1) DFT inversion formula; kept as an
// independent cross-validation backend. Tiny negative round-off is clamped.
Eigen::VectorXd poibin_pmf_dft(const Eigen::VectorXd& theta);

// PMFs of the sensor count with one sensor left out, index n -> vector of
// length N (support 0..N-1). Built from prefix/suffix convolutions; used by
// the count-distribution gradient.
std::vector<Eigen::VectorXd> poibin_leave_one_out(const Eigen::VectorXd& theta);

// Binomial(N, theta) PMF, length N+1; independent of poibin_pmf.
Eigen::VectorXd binomial_pmf(double theta, int n);

// Density of one slot's M-antenna observation given m active sensors, as a
// function of the cached squared norm:
//   [2 pi (sigma_h2 m + sigma_w2)]^-M * exp(-y_norm2 / (2 (sigma_h2 m + sigma_w2))).
double obs_cond_density(double y_norm2, int m, double sigma_h2, double sigma_w2, int n_antennas);
double log_obs_cond_density(double y_norm2, int m, double sigma_h2, double sigma_w2,
                            int n_antennas);

}  // namespace backsense::dist
