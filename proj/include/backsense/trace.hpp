#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

namespace backsense {

enum class Criterion { kMl, kMap };

// One fitted-cycle record shared by the EM, generalized-EM, and variational
// drivers. theta holds the per-cycle parameter vector of the driver (a single
// activation rate, a rate per sensor, or the sensed-value estimate).
struct EmIterationRecord {
  int iteration = 0;
  double loglik = 0.0;     // incomplete-data log-likelihood (ELBO for the variational driver)
  double surrogate = 0.0;  // expected complete-data objective after the M-step
  Eigen::VectorXd theta;
  double sigma_h2 = 0.0;
  double sigma_w2 = 0.0;
  double penalized = 0.0;      // loglik + log prior when a prior is in play, else loglik
  double pre_projection = 0.0; // loglik before the variance-line projection
  double proj_drop = 0.0;      // pre_projection - loglik: cost of pinning the
                               // per-count variances to the affine model
  double proj_step = 1.0;      // fraction of the variance-regression move kept
                               // by the ascent guard (1 = full step)
  double stationarity_root = 0.0;  // root of the closed-form rate condition (prior-fit only)
  bool line_search_gave_up = false;
};

struct EmTrace {
  std::vector<EmIterationRecord> records;
  int iterations = 0;
  bool converged = false;
  std::string reason;
  int monotonicity_violations = 0;
  int projection_violations = 0;
  long clamp_count = 0;  // density-floor clamps hit inside Monte-Carlo expectations

  // Row per iteration: "iteration loglik theta sigma_h2 sigma_w2" with a
  // semicolon-joined theta column for vector parameters.
  void serialize(std::ostream& out) const;
};

}  // namespace backsense
