#pragma once

#include <Eigen/Dense>

#include "backsense/em_uniform.hpp"
#include "backsense/prior.hpp"
#include "backsense/simulator.hpp"
#include "backsense/trace.hpp"

namespace backsense::gem {

// Per-sensor activation rates plus the shared channel/noise variances.
struct HeteroParams {
  Eigen::VectorXd theta;
  double sigma_h2 = 1.0;
  double sigma_w2 = 1.0;
};

// Ascent settings for the rate update. One M-step runs inner_steps gradient
// ascents, each with a backtracking line search from step size alpha.
struct GemConfig {
  double alpha = 0.1;
  int inner_steps = 10;
  double backtrack = 0.5;
  Criterion criterion = Criterion::kMl;

  void validate() const;
};

struct GemResult {
  HeteroParams params;
  Eigen::VectorXd x_hat;  // sensing values recovered from theta via the inverse map
  em::PosteriorT q;
  EmTrace trace;
};

// Posterior responsibilities over the active-sensor count with a
// Poisson-Binomial count prior built from the per-sensor rates.
em::PosteriorT e_step_hetero(const sim::ObservationSet& obs, const HeteroParams& params);

// Expected count log-likelihood sum_m qbar(m) log((N+1) pmf_theta(m)); the
// penalized criterion subtracts sum_n log(theta_n - theta_n^2) and the
// quadratic prior form in r(theta).
double objective_theta(const em::PosteriorT& q, const Eigen::VectorXd& theta,
                       Criterion criterion, const SensingPrior& prior);

// Analytic gradient of objective_theta, via leave-one-out count PMFs.
Eigen::VectorXd grad_theta(const em::PosteriorT& q, const Eigen::VectorXd& theta,
                           Criterion criterion, const SensingPrior& prior);

// Backtracked gradient ascent on objective_theta, iterates projected into
// [eps, 1-eps]^N; never returns a point with a lower objective than the
// input. If a line search fails 50 halvings the input is returned unchanged
// and *gave_up is set.
Eigen::VectorXd m_step_theta_gem(const em::PosteriorT& q, const Eigen::VectorXd& theta,
                                 const GemConfig& cfg, const SensingPrior& prior,
                                 bool* gave_up = nullptr);

// Full fit: count posterior, ascent rate update, guarded variance regression;
// stops on relative objective change below tol or after max_iter cycles.
GemResult run_hetero(const sim::ObservationSet& obs, Criterion criterion,
                     const HeteroParams& init, const SensingPrior& prior, const GemConfig& cfg,
                     double tol = 1e-6, int max_iter = 500);

// Moment-matched start shared with the uniform-rate driver; all rates at 1/2.
HeteroParams default_init_hetero(const sim::ObservationSet& obs);

}  // namespace backsense::gem
