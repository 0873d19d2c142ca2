#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "backsense/em_uniform.hpp"
#include "backsense/prior.hpp"
#include "backsense/simulator.hpp"
#include "backsense/trace.hpp"

namespace backsense::vi {

// Parameters of the noisy-reading model: per-sensor sensed values, the
// reading-noise variance, and the shared channel/noise variances.
struct NoisyParams {
  Eigen::VectorXd x;
  double delta2 = 1.0;    // reading-noise variance, > 0
  double sigma_h2 = 1.0;  // per-part channel variance, >= 0
  double sigma_w2 = 1.0;  // per-part receiver-noise variance, > 0

  void validate() const;
};

// Discrete representation of the per-(slot, sensor) activation-rate
// posteriors: one shared Gauss-Legendre rule strictly inside (0, 1) plus
// density values at the nodes. Row i*N + n of `values` is the density for
// slot i, sensor n; weights.dot(row) equals one for a normalized density.
struct ThetaGrid {
  Eigen::VectorXd nodes;    // K nodes in (0, 1)
  Eigen::VectorXd weights;  // matching quadrature weights
  Eigen::MatrixXd values;   // (L*N) x K density values
  int n_sensors = 0;

  int k() const { return static_cast<int>(nodes.size()); }
  int n_slots() const {
    return n_sensors > 0 ? static_cast<int>(values.rows()) / n_sensors : 0;
  }
  Eigen::Index row_of(int slot, int n) const {
    return static_cast<Eigen::Index>(slot) * n_sensors + n;
  }
};

// Fresh grid with uniform (normalized) densities everywhere.
ThetaGrid make_theta_grid(int k, int n_slots, int n_sensors, double eps = 1e-6);

struct VariationalState {
  em::PosteriorT qT;  // L x (N+1) count posteriors, rows normalized
  ThetaGrid qTheta;
  std::vector<double> elbo_trace;     // evidence-bound value after each inner round
  std::vector<int> rounds_per_cycle;  // how many trace entries each outer cycle added

  void serialize(std::ostream& out) const;
};

// Monte-Carlo settings for one update call.
struct McConfig {
  int samples = 256;
  bool antenna_exponent_M = true;  // exponent on the count-conditional variance
                                   // factor: the antenna count (consistent with
                                   // the observation density) or the literal 1
  std::uint64_t seed = 0;          // stream seed for this call
};

// Geometric mean of the scaled count PMF under the slot's rate posteriors:
// exp(E[log((N+1) pmf(m; theta))]) with theta components drawn independently
// from the grid marginals by inverse CDF. Zero PMF draws are clamped at
// 1e-300 before the log and tallied into *clamp_count when given.
double geomean_count_pmf(int m, const ThetaGrid& grid, int slot, int samples, std::uint64_t seed,
                         long* clamp_count = nullptr);

// Same expectation with sensor n pinned at rate z: the count is averaged
// exactly under qt_row and the remaining theta components are drawn from
// their marginals, sharing one sample set across every (count, z) pair.
double geomean_count_pmf_pinned(int n, double z, const Eigen::VectorXd& qt_row,
                                const ThetaGrid& grid, int slot, int samples, std::uint64_t seed,
                                long* clamp_count = nullptr);

// One coordinate update of the slot's count posterior: the geometric-mean
// count factor times the count-conditional energy density, normalized.
Eigen::VectorXd update_count_posterior(const sim::ObservationSet& obs, int slot,
                                       const NoisyParams& params, const ThetaGrid& grid,
                                       const McConfig& mc, long* clamp_count = nullptr);

// One coordinate update of the (slot, n) rate posterior on the grid: the
// pinned count factor times the reading-noise density of the rate given x_n,
// normalized by grid quadrature. Throws when every node underflows.
Eigen::VectorXd update_rate_posterior(int n, int slot, const NoisyParams& params,
                                      const Eigen::VectorXd& qt_row, const ThetaGrid& grid,
                                      const SensingPrior& prior, const McConfig& mc,
                                      long* clamp_count = nullptr);

// Normalized grid density assembled from externally supplied count-likelihood
// factor values (linear scale) and the reading-noise density of the rate
// given x_n; the combination step of update_rate_posterior.
Eigen::VectorXd rate_posterior_from_factors(const Eigen::VectorXd& factor_values,
                                            const ThetaGrid& grid, int slot, int n, double x_n,
                                            double mu_n, double sigma_n, double delta2);

// Evidence lower bound of the factorized posterior at the given parameters.
// The count-model term is a Monte-Carlo estimate; its standard error is
// written to *mc_sigma when given, clamps to *clamp_count.
double evidence_bound(const sim::ObservationSet& obs, const SensingPrior& prior,
                      const NoisyParams& params, const VariationalState& state, int samples,
                      std::uint64_t seed, double* mc_sigma = nullptr, long* clamp_count = nullptr);

// Inner coordinate cycling: sweeps count and rate posteriors until the
// largest density change falls under inner_tol or max_rounds is hit, with
// per-(slot, sensor) Monte-Carlo streams held fixed across rounds. Appends
// one evidence-bound value per round to state.elbo_trace (and the round count
// to rounds_per_cycle); rounds that drop the bound by more than three times
// its Monte-Carlo standard error count into trace->monotonicity_violations
// when a trace is given. Returns the number of rounds run.
int cycle_posteriors(const sim::ObservationSet& obs, const NoisyParams& params,
                     VariationalState& state, const SensingPrior& prior, const McConfig& mc,
                     double inner_tol, int max_rounds, EmTrace* trace = nullptr);

// Parameter refresh from the current posteriors: quadrature means for the
// sensed values and the reading-noise variance, then the per-count variance
// regression shared with the count-model fit.
NoisyParams m_step_noisy(const VariationalState& state, const sim::ObservationSet& obs,
                         const SensingPrior& prior);

// Prior means for x, the prior's squared map scale for delta2, and the
// energy-moment start shared with the count-model fit for the variances.
NoisyParams default_init_noisy(const sim::ObservationSet& obs, const SensingPrior& prior);

struct ViOptions {
  int samples = 256;
  bool antenna_exponent_M = true;
  int grid_k = 64;
  double grid_eps = 1e-6;
  double inner_tol = 1e-4;
  int inner_max_rounds = 20;
};

struct ViResult {
  NoisyParams params;
  VariationalState state;
  EmTrace trace;
};

// Full fit: alternate the inner posterior cycling with the parameter
// refresh until the largest relative parameter change falls under tol or
// max_iter outer cycles elapse. Deterministic in (data, init, seed).
ViResult run_vi(const sim::ObservationSet& obs, const SensingPrior& prior,
                const NoisyParams& init, const ViOptions& opts, double tol = 1e-3,
                int max_iter = 50, std::uint64_t seed = 0);

// Reference EM fit with the exact joint posterior over (count, rates) on a
// tensor quadrature grid; cost grows as K^N, supported for N <= 3 only.
NoisyParams run_exact_em(const sim::ObservationSet& obs, const SensingPrior& prior,
                         const NoisyParams& init, double tol = 1e-6, int max_iter = 200);

}  // namespace backsense::vi
