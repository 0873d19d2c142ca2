#pragma once

#include <Eigen/Dense>

#include "backsense/simulator.hpp"
#include "backsense/trace.hpp"

namespace backsense::em {

// Per-slot posterior over the active-sensor count; L rows, N+1 columns, each
// row summing to one.
using PosteriorT = Eigen::MatrixXd;

struct UniformParams {
  double theta = 0.5;
  double sigma_h2 = 1.0;
  double sigma_w2 = 1.0;
};

struct RunOptions {
  Criterion criterion = Criterion::kMl;
  double tol = 1e-6;       // relative change of the fitted objective
  int max_iter = 500;
  double proj_slack = 1e-3;  // tolerated per-cycle objective decrease after
                             // the variance regression, nats per slot
};

struct EmResult {
  UniformParams params;
  PosteriorT q;
  EmTrace trace;
};

// Posterior responsibilities over the count for every slot, computed in log
// space from the observation density and the Binomial count prior.
PosteriorT e_step(const sim::ObservationSet& obs, const UniformParams& params);

// Same computation with an arbitrary count prior pmf (length N+1); shared
// with the heterogeneous driver.
PosteriorT e_step_pmf(const sim::ObservationSet& obs, const Eigen::VectorXd& pmf,
                      double sigma_h2, double sigma_w2);

// Expected count-model log-likelihood as a function of the shared rate.
double theta_objective_ml(const PosteriorT& q, double theta);
// Same objective penalized by the log activation prior.
double theta_objective_map(const PosteriorT& q, double theta);

// Closed-form maximizer of theta_objective_ml: mean posterior count over LN.
double m_step_theta_ml(const PosteriorT& q);

// Maximizer of theta_objective_map by dense-grid bracketing plus
// golden-section refinement to 1e-8.
double m_step_theta_map(const PosteriorT& q);

// Root of the closed-form stationarity condition of the penalized rate
// objective, found by bisection; recorded in the trace as a cross-check.
double map_stationarity_root(const PosteriorT& q);

struct SigmaUpdate {
  Eigen::VectorXd Sigma;     // per-count slot variances; NaN where skipped
  Eigen::VectorXd weight;    // posterior mass per count
  double sigma_h2 = 0.0;
  double sigma_w2 = 0.0;
};

// Per-count variance updates followed by the least-squares projection onto
// the affine family sigma_h2 * m + sigma_w2. Counts whose posterior mass is
// below 1e-8 are skipped and left out of the regression.
SigmaUpdate m_step_sigma(const PosteriorT& q, const sim::ObservationSet& obs);

// Incomplete-data log-likelihood under the affine variance family.
double incomplete_loglik(const sim::ObservationSet& obs, const UniformParams& params);

// Same likelihood with an arbitrary count prior and free per-count variances;
// shared with the heterogeneous driver.
double incomplete_loglik_pmf(const sim::ObservationSet& obs, const Eigen::VectorXd& pmf,
                             const Eigen::VectorXd& Sigma);

// Outcome of the guarded variance move.
struct GuardedSigma {
  double sigma_h2 = 0.0;
  double sigma_w2 = 0.0;
  double loglik = 0.0;  // count-mixture log-likelihood at the returned pair
  double step = 1.0;    // fraction of the proposed move kept; 0 when the move
                        // was replaced by a direct search or dropped entirely
};

// Guarded variance move. Walks from the current pair toward the proposal,
// halving the step until the log-likelihood under pmf stays at or above
// ll_floor, then searches the two variances directly and returns whichever
// candidate scores best. The proposal can be globally misleading (a collapsed
// noise floor starves the quiet counts of the posterior mass that would
// correct it) or oscillate against the likelihood near a curved ridge, so it
// is kept only when it beats the searched conditional optimum. The returned
// pair never scores below the stay-put value.
GuardedSigma guarded_sigma_step(const sim::ObservationSet& obs, const Eigen::VectorXd& pmf,
                                double cur_h2, double cur_w2, double prop_h2, double prop_w2,
                                double ll_floor);

// Moment-matched starting point: rate 1/2, noise floor from the quietest
// slot, fading variance from the energy excess.
UniformParams default_init(const sim::ObservationSet& obs);

// Full fitted cycle: e_step, rate update (ML or penalized), per-count
// variance updates, affine projection; stops when the objective change falls
// below tol or after max_iter cycles.
EmResult run(const sim::ObservationSet& obs, const RunOptions& opts,
             const UniformParams& init);
EmResult run(const sim::ObservationSet& obs, const RunOptions& opts);

}  // namespace backsense::em
