#include "backsense/vi_noisy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "backsense/distributions.hpp"
#include "backsense/math.hpp"
#include "backsense/quadrature.hpp"
#include "backsense/rng.hpp"

namespace backsense::vi {

namespace {

// Count posteriors below this mass are skipped inside pinned expectations.
constexpr double kCountCut = 1e-12;
// Smallest admissible reading-noise variance estimate.
constexpr double kDelta2Floor = 1e-12;

// Prefix sums of one grid row's atom masses {w_k * value_k}, built once per
// update so every draw is a binary search instead of a full row sweep.
struct RowSampler {
  Eigen::ArrayXd cum;

  void build(const ThetaGrid& grid, Eigen::Index row) {
    const int kk = grid.k();
    cum.resize(kk);
    double c = 0.0;
    for (int k = 0; k < kk; ++k) {
      c += grid.weights[k] * grid.values(row, k);
      cum[k] = c;
    }
  }

  // Inverse-CDF draw: first node whose prefix mass reaches u * total.
  int draw(double u) const {
    const double* b = cum.data();
    const double* e = b + cum.size();
    const double* it = std::lower_bound(b, e, u * cum[cum.size() - 1]);
    return it == e ? static_cast<int>(cum.size()) - 1 : static_cast<int>(it - b);
  }
};

void check_slot(const ThetaGrid& grid, int slot) {
  if (slot < 0 || slot >= grid.n_slots())
    throw std::invalid_argument("slot index outside the grid");
  if (grid.n_sensors <= 0) throw std::invalid_argument("grid has no sensors");
}

double relative_drift(const NoisyParams& a, const NoisyParams& b) {
  const double dx = (b.x - a.x).lpNorm<Eigen::Infinity>() / (1.0 + a.x.lpNorm<Eigen::Infinity>());
  const double dd = std::abs(b.delta2 - a.delta2) / (1.0 + a.delta2);
  const double dh = std::abs(b.sigma_h2 - a.sigma_h2) / (1.0 + a.sigma_h2);
  const double dw = std::abs(b.sigma_w2 - a.sigma_w2) / (1.0 + a.sigma_w2);
  return std::max(std::max(dx, dd), std::max(dh, dw));
}

}  // namespace

void NoisyParams::validate() const {
  if (x.size() == 0 || !x.allFinite())
    throw std::invalid_argument("sensed-value vector must be non-empty and finite");
  if (!(delta2 > 0.0) || !std::isfinite(delta2))
    throw std::invalid_argument("reading-noise variance must be positive");
  if (!(sigma_h2 >= 0.0) || !std::isfinite(sigma_h2))
    throw std::invalid_argument("channel variance must be non-negative");
  if (!(sigma_w2 > 0.0) || !std::isfinite(sigma_w2))
    throw std::invalid_argument("receiver-noise variance must be positive");
}

ThetaGrid make_theta_grid(int k, int n_slots, int n_sensors, double eps) {
  if (k < 2) throw std::invalid_argument("grid needs at least two nodes");
  if (n_slots < 1 || n_sensors < 1)
    throw std::invalid_argument("grid needs at least one slot and sensor");
  if (!(eps > 0.0) || eps >= 0.5)
    throw std::invalid_argument("grid margin must lie in (0, 1/2)");
  const auto rule = quad::gauss_legendre(k, eps, 1.0 - eps);
  ThetaGrid grid;
  grid.nodes = rule.nodes;
  grid.weights = rule.weights;
  grid.n_sensors = n_sensors;
  // uniform density normalized against the rule: weights sum to 1 - 2 eps
  grid.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(n_slots) * n_sensors, k,
                                          1.0 / (1.0 - 2.0 * eps));
  return grid;
}

void VariationalState::serialize(std::ostream& out) const {
  out << "# grid k=" << qTheta.k() << " slots=" << qTheta.n_slots()
      << " sensors=" << qTheta.n_sensors << "\n";
  const auto row_out = [&out](const Eigen::VectorXd& v) {
    for (Eigen::Index k = 0; k < v.size(); ++k) out << (k ? " " : "") << v[k];
    out << "\n";
  };
  row_out(qTheta.nodes);
  row_out(qTheta.weights);
  out << "# count posteriors, one slot per row\n";
  for (Eigen::Index i = 0; i < qT.rows(); ++i) row_out(qT.row(i).transpose());
  out << "# rate posteriors, one (slot, sensor) per row\n";
  for (Eigen::Index r = 0; r < qTheta.values.rows(); ++r)
    row_out(qTheta.values.row(r).transpose());
}

double geomean_count_pmf(int m, const ThetaGrid& grid, int slot, int samples, std::uint64_t seed,
                         long* clamp_count) {
  check_slot(grid, slot);
  const int n_sensors = grid.n_sensors;
  if (m < 0 || m > n_sensors) throw std::invalid_argument("count outside its support");
  if (samples < 1) throw std::invalid_argument("need at least one sample");
  rng::SplitMix64 gen(seed);
  std::vector<RowSampler> rs(n_sensors);
  for (int n = 0; n < n_sensors; ++n) rs[n].build(grid, grid.row_of(slot, n));
  Eigen::VectorXd theta(n_sensors);
  long clamps = 0;
  double acc = 0.0;
  for (int s = 0; s < samples; ++s) {
    for (int n = 0; n < n_sensors; ++n) theta[n] = grid.nodes[rs[n].draw(gen.uniform())];
    const Eigen::VectorXd pmf = dist::poibin_pmf(theta);
    double v = (n_sensors + 1) * pmf[m];
    if (v < kDensityFloor) {
      v = kDensityFloor;
      ++clamps;
    }
    acc += std::log(v);
  }
  if (clamp_count) *clamp_count += clamps;
  return std::exp(acc / samples);
}

double geomean_count_pmf_pinned(int n, double z, const Eigen::VectorXd& qt_row,
                                const ThetaGrid& grid, int slot, int samples, std::uint64_t seed,
                                long* clamp_count) {
  check_slot(grid, slot);
  const int n_sensors = grid.n_sensors;
  if (n < 0 || n >= n_sensors) throw std::invalid_argument("sensor index outside the grid");
  if (qt_row.size() != n_sensors + 1)
    throw std::invalid_argument("count posterior row has the wrong length");
  if (!(z > 0.0) || !(z < 1.0)) throw std::invalid_argument("pinned rate must lie in (0, 1)");
  long clamps = 0;
  if (n_sensors == 1) {
    // No other rates to draw: the count average is exact.
    double acc = 0.0;
    for (int m = 0; m <= 1; ++m) {
      if (qt_row[m] < kCountCut) continue;
      double v = 2.0 * (m == 0 ? 1.0 - z : z);
      if (v < kDensityFloor) {
        v = kDensityFloor;
        ++clamps;
      }
      acc += qt_row[m] * std::log(v);
    }
    if (clamp_count) *clamp_count += clamps;
    return std::exp(acc);
  }
  if (samples < 1) throw std::invalid_argument("need at least one sample");
  rng::SplitMix64 gen(seed);
  std::vector<RowSampler> rs(n_sensors - 1);
  for (int n2 = 0, j = 0; n2 < n_sensors; ++n2)
    if (n2 != n) rs[j++].build(grid, grid.row_of(slot, n2));
  Eigen::VectorXd others(n_sensors - 1);
  double acc = 0.0;
  for (int s = 0; s < samples; ++s) {
    for (int j = 0; j < n_sensors - 1; ++j) others[j] = grid.nodes[rs[j].draw(gen.uniform())];
    // PMF of the count over the unpinned sensors, support 0..N-1; the full
    // count PMF is affine in the pinned rate.
    const Eigen::VectorXd p = dist::poibin_pmf(others);
    double term = 0.0;
    for (int m = 0; m <= n_sensors; ++m) {
      if (qt_row[m] < kCountCut) continue;
      const double a = m <= n_sensors - 1 ? p[m] : 0.0;
      const double b = m >= 1 ? p[m - 1] : 0.0;
      double v = (n_sensors + 1) * ((1.0 - z) * a + z * b);
      if (v < kDensityFloor) {
        v = kDensityFloor;
        ++clamps;
      }
      term += qt_row[m] * std::log(v);
    }
    acc += term;
  }
  if (clamp_count) *clamp_count += clamps;
  return std::exp(acc / samples);
}

Eigen::VectorXd update_count_posterior(const sim::ObservationSet& obs, int slot,
                                       const NoisyParams& params, const ThetaGrid& grid,
                                       const McConfig& mc, long* clamp_count) {
  params.validate();
  check_slot(grid, slot);
  if (slot >= obs.n_slots()) throw std::invalid_argument("slot index outside the observations");
  const int n_sensors = grid.n_sensors;
  if (params.x.size() != n_sensors)
    throw std::invalid_argument("parameter and grid sensor counts differ");
  if (mc.samples < 1) throw std::invalid_argument("need at least one sample");

  // Geometric-mean count factor for every count, one shared draw stream.
  Eigen::VectorXd log_f1 = Eigen::VectorXd::Zero(n_sensors + 1);
  rng::SplitMix64 gen(rng::derive(mc.seed, 1, static_cast<std::uint64_t>(slot)));
  std::vector<RowSampler> rs(n_sensors);
  for (int n = 0; n < n_sensors; ++n) rs[n].build(grid, grid.row_of(slot, n));
  Eigen::VectorXd theta(n_sensors);
  Eigen::VectorXd pmf(n_sensors + 1);
  // Running per-count products over a sample chunk, one log per flush.
  Eigen::VectorXd prod = Eigen::VectorXd::Ones(n_sensors + 1);
  long clamps = 0;
  int in_chunk = 0;
  for (int s = 0; s < mc.samples; ++s) {
    for (int n = 0; n < n_sensors; ++n) theta[n] = grid.nodes[rs[n].draw(gen.uniform())];
    dist::poibin_pmf(theta, pmf);
    bool tiny = false;
    for (int m = 0; m <= n_sensors; ++m) {
      double v = (n_sensors + 1) * pmf[m];
      if (v < kDensityFloor) {
        v = kDensityFloor;
        ++clamps;
      }
      prod[m] *= v;
      if (prod[m] < 1e-250) tiny = true;
    }
    ++in_chunk;
    if (in_chunk == 16 || tiny || s == mc.samples - 1) {
      for (int m = 0; m <= n_sensors; ++m) {
        log_f1[m] += std::log(prod[m]);
        prod[m] = 1.0;
      }
      in_chunk = 0;
    }
  }
  if (clamp_count) *clamp_count += clamps;
  log_f1 /= mc.samples;

  const double y2 = obs.y_norm2[slot];
  const int m_ant = obs.n_antennas();
  Eigen::VectorXd lg(n_sensors + 1);
  for (int m = 0; m <= n_sensors; ++m) {
    const double var = params.sigma_w2 + m * params.sigma_h2;
    const double ld = mc.antenna_exponent_M
                          ? dist::log_obs_cond_density(y2, m, params.sigma_h2, params.sigma_w2,
                                                       m_ant)
                          : -std::log(var) - y2 / (2.0 * var);
    lg[m] = log_f1[m] + ld;
  }
  const double mx = lg.maxCoeff();
  Eigen::VectorXd row = (lg.array() - mx).exp();
  row /= row.sum();
  return row;
}

Eigen::VectorXd rate_posterior_from_factors(const Eigen::VectorXd& factor_values,
                                            const ThetaGrid& grid, int slot, int n, double x_n,
                                            double mu_n, double sigma_n, double delta2) {
  const int kk = grid.k();
  if (factor_values.size() != kk)
    throw std::invalid_argument("factor values and grid node counts differ");
  if (!(delta2 > 0.0)) throw std::invalid_argument("reading-noise variance must be positive");
  Eigen::VectorXd lg(kk);
  for (int k = 0; k < kk; ++k) {
    const double f = factor_values[k];
    const double lf = f > 0.0 ? std::log(f) : kNegInf;
    lg[k] = lf + dist::log_theta_cond_scalar(grid.nodes[k], x_n, mu_n, sigma_n, delta2);
  }
  const double mx = lg.maxCoeff();
  if (!std::isfinite(mx)) {
    std::ostringstream msg;
    msg << "rate posterior underflowed at slot " << slot << ", sensor " << n
        << ": every grid node has zero mass";
    throw std::runtime_error(msg.str());
  }
  Eigen::VectorXd q = (lg.array() - mx).exp();
  const double mass = grid.weights.dot(q);
  if (!(mass > 0.0) || !std::isfinite(mass)) {
    std::ostringstream msg;
    msg << "rate posterior underflowed at slot " << slot << ", sensor " << n
        << ": grid mass vanished";
    throw std::runtime_error(msg.str());
  }
  return q / mass;
}

Eigen::VectorXd update_rate_posterior(int n, int slot, const NoisyParams& params,
                                      const Eigen::VectorXd& qt_row, const ThetaGrid& grid,
                                      const SensingPrior& prior, const McConfig& mc,
                                      long* clamp_count) {
  params.validate();
  check_slot(grid, slot);
  const int n_sensors = grid.n_sensors;
  if (n < 0 || n >= n_sensors) throw std::invalid_argument("sensor index outside the grid");
  if (qt_row.size() != n_sensors + 1)
    throw std::invalid_argument("count posterior row has the wrong length");
  if (prior.size() != n_sensors || params.x.size() != n_sensors)
    throw std::invalid_argument("prior, parameter, and grid sensor counts differ");
  const int kk = grid.k();
  long clamps = 0;
  Eigen::ArrayXd log_f2 = Eigen::ArrayXd::Zero(kk);
  double qt_used = 0.0;

  if (n_sensors == 1) {
    // Exact count average at every node; nothing is sampled.
    for (int m = 0; m <= 1; ++m) {
      if (qt_row[m] < kCountCut) continue;
      qt_used += qt_row[m];
      for (int k = 0; k < kk; ++k) {
        const double z = grid.nodes[k];
        double v = 2.0 * (m == 0 ? 1.0 - z : z);
        if (v < kDensityFloor) {
          v = kDensityFloor;
          ++clamps;
        }
        log_f2[k] += qt_row[m] * std::log(v);
      }
    }
    // the (N+1) scale is already inside the per-node logs
    qt_used = 0.0;
  } else {
    if (mc.samples < 1) throw std::invalid_argument("need at least one sample");
    std::vector<int> active;
    for (int m = 0; m <= n_sensors; ++m)
      if (qt_row[m] >= kCountCut) {
        active.push_back(m);
        qt_used += qt_row[m];
      }
    const Eigen::ArrayXd z = grid.nodes.array();
    const Eigen::ArrayXd omz = 1.0 - z;
    // Smallest mixing weight any node applies to a lone nonzero PMF entry;
    // it turns one scalar per sample into a lower bound on the node sweep.
    const double w_edge = std::min(grid.nodes[0], 1.0 - grid.nodes[kk - 1]);
    // Per-count running products over the sample chunk; one log pass per
    // flush instead of one per sample keeps the node sweep to a single
    // fused multiply in the common case.
    std::vector<Eigen::ArrayXd> prod(active.size(), Eigen::ArrayXd::Ones(kk));
    std::vector<double> bound(active.size(), 1.0);
    Eigen::ArrayXd vals(kk);
    rng::SplitMix64 gen(rng::derive(mc.seed, 2, static_cast<std::uint64_t>(slot),
                                    static_cast<std::uint64_t>(n)));
    std::vector<RowSampler> rs(n_sensors - 1);
    for (int n2 = 0, j = 0; n2 < n_sensors; ++n2)
      if (n2 != n) rs[j++].build(grid, grid.row_of(slot, n2));
    Eigen::VectorXd others(n_sensors - 1);
    Eigen::VectorXd p(n_sensors);
    int in_chunk = 0;
    for (int s = 0; s < mc.samples; ++s) {
      for (int j = 0; j < n_sensors - 1; ++j) others[j] = grid.nodes[rs[j].draw(gen.uniform())];
      dist::poibin_pmf(others, p);
      bool tiny = false;
      for (std::size_t a = 0; a < active.size(); ++a) {
        const int m = active[a];
        const double lo = m <= n_sensors - 1 ? p[m] : 0.0;
        const double hi = m >= 1 ? p[m - 1] : 0.0;
        // Every node value omz*lo + z*hi is at least the smaller nonzero
        // summand, or the lone one scaled by its smallest weight; when that
        // clears the density floor the clamp passes are skipped outright.
        const double least =
            lo == 0.0 ? w_edge * hi : (hi == 0.0 ? w_edge * lo : std::min(lo, hi));
        if (least >= kDensityFloor) {
          prod[a] *= omz * lo + z * hi;
        } else {
          vals = omz * lo + z * hi;
          clamps += (vals < kDensityFloor).count();
          prod[a] *= vals.max(kDensityFloor);
        }
        bound[a] *= std::max(least, kDensityFloor);
        if (bound[a] < 1e-250) tiny = true;
      }
      ++in_chunk;
      if (in_chunk == 16 || tiny || s == mc.samples - 1) {
        for (std::size_t a = 0; a < active.size(); ++a) {
          log_f2 += qt_row[active[a]] * prod[a].log();
          prod[a].setOnes();
          bound[a] = 1.0;
        }
        in_chunk = 0;
      }
    }
    log_f2 /= mc.samples;
  }
  if (clamp_count) *clamp_count += clamps;
  log_f2 += qt_used * std::log(static_cast<double>(n_sensors + 1));

  // Shift before exponentiating: only the factor's shape matters here.
  const double shift = log_f2.maxCoeff();
  const Eigen::VectorXd factor = (log_f2 - shift).exp();
  return rate_posterior_from_factors(factor, grid, slot, n, params.x[n], prior.mu[n],
                                     prior.sigma[n], params.delta2);
}

double evidence_bound(const sim::ObservationSet& obs, const SensingPrior& prior,
                      const NoisyParams& params, const VariationalState& state, int samples,
                      std::uint64_t seed, double* mc_sigma, long* clamp_count) {
  params.validate();
  if (samples < 1) throw std::invalid_argument("need at least one sample");
  const ThetaGrid& grid = state.qTheta;
  const int n_sensors = grid.n_sensors;
  const int n_slots = grid.n_slots();
  const int kk = grid.k();
  if (obs.n_slots() != n_slots || obs.n_sensors != n_sensors)
    throw std::invalid_argument("state and observation shapes differ");
  if (state.qT.rows() != n_slots || state.qT.cols() != n_sensors + 1)
    throw std::invalid_argument("count posterior has the wrong shape");
  const int m_ant = obs.n_antennas();

  // Reading-noise log density at every (sensor, node), current parameters.
  Eigen::MatrixXd ltc(n_sensors, kk);
  for (int n = 0; n < n_sensors; ++n)
    for (int k = 0; k < kk; ++k)
      ltc(n, k) = dist::log_theta_cond_scalar(grid.nodes[k], params.x[n], prior.mu[n],
                                              prior.sigma[n], params.delta2);

  long clamps = 0;
  double elbo = 0.0;
  double var_total = 0.0;
  Eigen::VectorXd theta(n_sensors);
  Eigen::VectorXd pmf(n_sensors + 1);
  for (int i = 0; i < n_slots; ++i) {
    // Observation term and count entropy, both exact under the count row.
    for (int m = 0; m <= n_sensors; ++m) {
      const double q = state.qT(i, m);
      if (q <= 0.0) continue;
      elbo += q * dist::log_obs_cond_density(obs.y_norm2[i], m, params.sigma_h2, params.sigma_w2,
                                             m_ant);
      elbo -= q * std::log(q);
    }
    // Count-model cross term, Monte-Carlo over the rate posteriors with the
    // same stream family as the count-factor updates.
    rng::SplitMix64 gen(rng::derive(seed, 1, static_cast<std::uint64_t>(i)));
    std::vector<RowSampler> rs(n_sensors);
    for (int n = 0; n < n_sensors; ++n) rs[n].build(grid, grid.row_of(i, n));
    double sum_h = 0.0, sum_h2 = 0.0;
    for (int s = 0; s < samples; ++s) {
      for (int n = 0; n < n_sensors; ++n) theta[n] = grid.nodes[rs[n].draw(gen.uniform())];
      dist::poibin_pmf(theta, pmf);
      double h = 0.0;
      for (int m = 0; m <= n_sensors; ++m) {
        const double q = state.qT(i, m);
        if (q < kCountCut) continue;
        double v = pmf[m];
        if (v < kDensityFloor) {
          v = kDensityFloor;
          ++clamps;
        }
        h += q * std::log(v);
      }
      sum_h += h;
      sum_h2 += h * h;
    }
    const double mean_h = sum_h / samples;
    elbo += mean_h;
    if (samples > 1) {
      const double s2 = std::max(0.0, (sum_h2 - samples * mean_h * mean_h) / (samples - 1));
      var_total += s2 / samples;
    }
    // Reading-noise cross term and rate entropies by grid quadrature.
    for (int n = 0; n < n_sensors; ++n) {
      const Eigen::Index r = grid.row_of(i, n);
      for (int k = 0; k < kk; ++k) {
        const double q = grid.values(r, k);
        if (q <= 0.0) continue;
        elbo += grid.weights[k] * q * (ltc(n, k) - std::log(q));
      }
    }
  }
  if (mc_sigma) *mc_sigma = std::sqrt(var_total);
  if (clamp_count) *clamp_count += clamps;
  return elbo;
}

int cycle_posteriors(const sim::ObservationSet& obs, const NoisyParams& params,
                     VariationalState& state, const SensingPrior& prior, const McConfig& mc,
                     double inner_tol, int max_rounds, EmTrace* trace) {
  params.validate();
  if (max_rounds < 1) throw std::invalid_argument("need at least one round");
  const int n_slots = state.qTheta.n_slots();
  const int n_sensors = state.qTheta.n_sensors;
  if (obs.n_slots() != n_slots || obs.n_sensors != n_sensors || prior.size() != n_sensors)
    throw std::invalid_argument("state, prior, and observation shapes differ");
  if (state.qT.rows() != n_slots || state.qT.cols() != n_sensors + 1)
    throw std::invalid_argument("count posterior has the wrong shape");

  long clamps = 0;
  double prev_elbo = 0.0, prev_sigma = 0.0;
  int rounds = 0;
  for (int round = 0; round < max_rounds; ++round) {
    double max_change = 0.0;
    for (int i = 0; i < n_slots; ++i) {
      const Eigen::VectorXd row = update_count_posterior(obs, i, params, state.qTheta, mc,
                                                         &clamps);
      max_change = std::max(
          max_change, (row.transpose() - state.qT.row(i)).cwiseAbs().maxCoeff());
      state.qT.row(i) = row.transpose();
      for (int n = 0; n < n_sensors; ++n) {
        const Eigen::VectorXd q = update_rate_posterior(
            n, i, params, state.qT.row(i).transpose(), state.qTheta, prior, mc, &clamps);
        const Eigen::Index r = state.qTheta.row_of(i, n);
        max_change = std::max(
            max_change, (q.transpose() - state.qTheta.values.row(r)).cwiseAbs().maxCoeff());
        state.qTheta.values.row(r) = q.transpose();
      }
    }
    double sigma = 0.0;
    const double elbo = evidence_bound(obs, prior, params, state, mc.samples, mc.seed, &sigma,
                                       &clamps);
    if (rounds > 0 && trace && elbo < prev_elbo - 3.0 * std::max(sigma, prev_sigma))
      ++trace->monotonicity_violations;
    state.elbo_trace.push_back(elbo);
    prev_elbo = elbo;
    prev_sigma = sigma;
    ++rounds;
    if (max_change < inner_tol) break;
  }
  state.rounds_per_cycle.push_back(rounds);
  if (trace) trace->clamp_count += clamps;
  return rounds;
}

NoisyParams m_step_noisy(const VariationalState& state, const sim::ObservationSet& obs,
                         const SensingPrior& prior) {
  const ThetaGrid& grid = state.qTheta;
  const int n_sensors = grid.n_sensors;
  const int n_slots = grid.n_slots();
  const int kk = grid.k();
  if (prior.size() != n_sensors) throw std::invalid_argument("prior and grid sensor counts differ");
  if (state.qT.rows() != n_slots || state.qT.cols() != n_sensors + 1)
    throw std::invalid_argument("count posterior has the wrong shape");

  // Inverted node values are shared by the mean and variance quadratures.
  Eigen::MatrixXd inv(n_sensors, kk);
  for (int n = 0; n < n_sensors; ++n)
    for (int k = 0; k < kk; ++k)
      inv(n, k) = dist::inverse_map(grid.nodes[k], prior.mu[n], prior.sigma[n]);

  NoisyParams out;
  out.x.resize(n_sensors);
  for (int n = 0; n < n_sensors; ++n) {
    double acc = 0.0;
    for (int i = 0; i < n_slots; ++i) {
      const Eigen::Index r = grid.row_of(i, n);
      double e = 0.0;
      for (int k = 0; k < kk; ++k) e += grid.weights[k] * grid.values(r, k) * inv(n, k);
      acc += e;
    }
    out.x[n] = acc / n_slots;
  }
  double acc2 = 0.0;
  for (int n = 0; n < n_sensors; ++n)
    for (int i = 0; i < n_slots; ++i) {
      const Eigen::Index r = grid.row_of(i, n);
      double e = 0.0;
      for (int k = 0; k < kk; ++k) {
        const double d = inv(n, k) - out.x[n];
        e += grid.weights[k] * grid.values(r, k) * d * d;
      }
      acc2 += e;
    }
  out.delta2 = std::max(acc2 / (static_cast<double>(n_slots) * n_sensors), kDelta2Floor);

  const em::SigmaUpdate su = em::m_step_sigma(state.qT, obs);
  out.sigma_h2 = std::max(su.sigma_h2, 0.0);
  out.sigma_w2 = std::max(su.sigma_w2, kSigmaFloor);
  return out;
}

NoisyParams default_init_noisy(const sim::ObservationSet& obs, const SensingPrior& prior) {
  NoisyParams p;
  p.x = prior.mu;
  p.delta2 = prior.sigma.squaredNorm() / prior.size();
  // Noise floor from the quietest tenth of the slots rather than the single
  // quietest one: with many silent slots the minimum sits far below the true
  // floor, and a fit started there can no longer explain the silent slots as
  // silent and locks onto a collapsed noise floor instead.
  const double scale = 2.0 * obs.n_antennas();
  std::vector<double> energy(obs.y_norm2.data(), obs.y_norm2.data() + obs.y_norm2.size());
  const std::size_t keep = std::max<std::size_t>(1, energy.size() / 10);
  std::nth_element(energy.begin(), energy.begin() + (keep - 1), energy.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) acc += energy[i];
  p.sigma_w2 = std::max(acc / (keep * scale), kSigmaFloor);
  const double mean = obs.y_norm2.mean() / scale;
  p.sigma_h2 = std::max(mean - p.sigma_w2, kSigmaFloor) /
               std::max(obs.n_sensors * 0.5, 1.0);
  return p;
}

ViResult run_vi(const sim::ObservationSet& obs, const SensingPrior& prior,
                const NoisyParams& init, const ViOptions& opts, double tol, int max_iter,
                std::uint64_t seed) {
  init.validate();
  const int n_sensors = prior.size();
  if (obs.n_sensors != n_sensors || init.x.size() != n_sensors)
    throw std::invalid_argument("prior, init, and observation sensor counts differ");
  if (opts.samples < 1 || opts.grid_k < 2 || opts.inner_max_rounds < 1)
    throw std::invalid_argument("options out of range");
  if (max_iter < 1) throw std::invalid_argument("need at least one cycle");
  const int n_slots = obs.n_slots();

  ViResult res;
  res.params = init;
  res.state.qT = Eigen::MatrixXd::Constant(n_slots, n_sensors + 1, 1.0 / (n_sensors + 1));
  res.state.qTheta = make_theta_grid(opts.grid_k, n_slots, n_sensors, opts.grid_eps);
  McConfig mc;
  mc.samples = opts.samples;
  mc.antenna_exponent_M = opts.antenna_exponent_M;
  mc.seed = seed;

  // Observation term of the bound: the only term the channel variances touch,
  // and exact under the count posteriors, so it can referee variance moves.
  const auto obs_term = [&](double h2, double w2) {
    double t = 0.0;
    for (int i = 0; i < n_slots; ++i)
      for (int m = 0; m <= n_sensors; ++m) {
        const double q = res.state.qT(i, m);
        if (q <= 0.0) continue;
        t += q * dist::log_obs_cond_density(obs.y_norm2[i], m, h2, w2, obs.n_antennas());
      }
    return t;
  };

  for (int it = 1; it <= max_iter; ++it) {
    cycle_posteriors(obs, res.params, res.state, prior, mc, opts.inner_tol,
                     opts.inner_max_rounds, &res.trace);
    NoisyParams next = m_step_noisy(res.state, obs, prior);
    // The variance update regresses free per-count variances onto the affine
    // family and can point against the bound once some counts hold almost no
    // posterior mass; keep the largest damped fraction of the move that does
    // not lower the observation term, staying put when none does.
    {
      const double floor = obs_term(res.params.sigma_h2, res.params.sigma_w2);
      double step = 1.0;
      double h2 = next.sigma_h2, w2 = next.sigma_w2;
      for (int halvings = 0; obs_term(h2, w2) < floor && halvings < 12; ++halvings) {
        step *= 0.5;
        h2 = (1.0 - step) * res.params.sigma_h2 + step * next.sigma_h2;
        w2 = (1.0 - step) * res.params.sigma_w2 + step * next.sigma_w2;
      }
      if (obs_term(h2, w2) >= floor) {
        next.sigma_h2 = h2;
        next.sigma_w2 = w2;
      } else {
        next.sigma_h2 = res.params.sigma_h2;
        next.sigma_w2 = res.params.sigma_w2;
      }
    }
    const double drift = relative_drift(res.params, next);
    res.params = next;

    EmIterationRecord rec;
    rec.iteration = it;
    rec.loglik = res.state.elbo_trace.back();
    rec.surrogate = rec.loglik;
    rec.penalized = rec.loglik;
    rec.theta = res.params.x;
    rec.sigma_h2 = res.params.sigma_h2;
    rec.sigma_w2 = res.params.sigma_w2;
    res.trace.records.push_back(std::move(rec));
    res.trace.iterations = it;

    if (drift < tol) {
      res.trace.converged = true;
      res.trace.reason = "parameter drift below tolerance";
      break;
    }
  }
  if (!res.trace.converged) res.trace.reason = "maximum cycles reached";
  return res;
}

NoisyParams run_exact_em(const sim::ObservationSet& obs, const SensingPrior& prior,
                         const NoisyParams& init, double tol, int max_iter) {
  init.validate();
  const int n_sensors = prior.size();
  if (n_sensors > 3)
    throw std::invalid_argument(
        "joint-grid reference fit supports at most three sensors; use the factorized fit");
  if (obs.n_sensors != n_sensors || init.x.size() != n_sensors)
    throw std::invalid_argument("prior, init, and observation sensor counts differ");
  if (max_iter < 1) throw std::invalid_argument("need at least one cycle");
  const int n_slots = obs.n_slots();
  const int m_ant = obs.n_antennas();

  // Node budget shrinks with dimension to keep the joint grid tractable.
  const int kk = n_sensors == 1 ? 64 : (n_sensors == 2 ? 48 : 24);
  const auto rule = quad::gauss_legendre(kk, 1e-6, 1.0 - 1e-6);
  long cells = 1;
  for (int n = 0; n < n_sensors; ++n) cells *= kk;

  // Cell tables fixed across cycles: digit indices, count PMFs, inverted values.
  Eigen::MatrixXi digit(cells, n_sensors);
  for (long j = 0; j < cells; ++j) {
    long rem = j;
    for (int n = 0; n < n_sensors; ++n) {
      digit(j, n) = static_cast<int>(rem % kk);
      rem /= kk;
    }
  }
  Eigen::MatrixXd pmf_tab(cells, n_sensors + 1);
  {
    Eigen::VectorXd theta(n_sensors);
    for (long j = 0; j < cells; ++j) {
      for (int n = 0; n < n_sensors; ++n) theta[n] = rule.nodes[digit(j, n)];
      pmf_tab.row(j) = dist::poibin_pmf(theta).transpose();
    }
  }
  std::vector<Eigen::ArrayXd> inv_cell(n_sensors, Eigen::ArrayXd(cells));
  std::vector<Eigen::ArrayXd> inv2_cell(n_sensors, Eigen::ArrayXd(cells));
  for (int n = 0; n < n_sensors; ++n)
    for (long j = 0; j < cells; ++j) {
      const double v = dist::inverse_map(rule.nodes[digit(j, n)], prior.mu[n], prior.sigma[n]);
      inv_cell[n][j] = v;
      inv2_cell[n][j] = v * v;
    }

  NoisyParams params = init;
  Eigen::MatrixXd qT(n_slots, n_sensors + 1);
  Eigen::MatrixXd ex(n_slots, n_sensors), ex2(n_slots, n_sensors);
  Eigen::ArrayXd cell_log(cells), cell_w(cells), w_sum(cells), wm(cells);
  Eigen::MatrixXd pre(n_sensors, kk);

  // Cell prior mass at given (x, delta2), shifted before exponentiating so
  // concentrated reading noise cannot underflow every cell.
  const auto refresh_cells = [&](const NoisyParams& p) {
    for (int n = 0; n < n_sensors; ++n)
      for (int k = 0; k < kk; ++k)
        pre(n, k) = dist::log_theta_cond_scalar(rule.nodes[k], p.x[n], prior.mu[n],
                                                prior.sigma[n], p.delta2) +
                    std::log(rule.weights[k]);
    for (long j = 0; j < cells; ++j) {
      double acc = 0.0;
      for (int n = 0; n < n_sensors; ++n) acc += pre(n, digit(j, n));
      cell_log[j] = acc;
    }
    cell_w = (cell_log - cell_log.maxCoeff()).exp();
  };

  refresh_cells(params);
  for (int it = 0; it < max_iter; ++it) {
    for (int i = 0; i < n_slots; ++i) {
      Eigen::VectorXd ld(n_sensors + 1);
      for (int m = 0; m <= n_sensors; ++m)
        ld[m] = dist::log_obs_cond_density(obs.y_norm2[i], m, params.sigma_h2, params.sigma_w2,
                                           m_ant);
      const Eigen::VectorXd ny = (ld.array() - ld.maxCoeff()).exp();
      w_sum.setZero();
      double z_total = 0.0;
      for (int m = 0; m <= n_sensors; ++m) {
        wm = cell_w * pmf_tab.col(m).array() * ny[m];
        const double s = wm.sum();
        qT(i, m) = s;
        z_total += s;
        w_sum += wm;
      }
      qT.row(i) /= z_total;
      for (int n = 0; n < n_sensors; ++n) {
        ex(i, n) = (w_sum * inv_cell[n]).sum() / z_total;
        ex2(i, n) = (w_sum * inv2_cell[n]).sum() / z_total;
      }
    }

    NoisyParams next;
    next.x = ex.colwise().mean().transpose();
    double acc2 = 0.0;
    for (int n = 0; n < n_sensors; ++n)
      for (int i = 0; i < n_slots; ++i)
        acc2 += ex2(i, n) - 2.0 * next.x[n] * ex(i, n) + next.x[n] * next.x[n];
    next.delta2 = std::max(acc2 / (static_cast<double>(n_slots) * n_sensors), kDelta2Floor);

    // With the rates integrated out on the grid the model is a count mixture
    // whose mixing law is the grid marginal of the count, so the count-model
    // variance guard applies verbatim: the regression proposal alone can walk
    // the marginal likelihood downhill.
    refresh_cells(next);
    const em::SigmaUpdate su = em::m_step_sigma(qT, obs);
    Eigen::VectorXd pm(n_sensors + 1);
    for (int m = 0; m <= n_sensors; ++m) pm[m] = (cell_w * pmf_tab.col(m).array()).sum();
    pm /= pm.sum();
    Eigen::VectorXd sig_cur(n_sensors + 1);
    for (int m = 0; m <= n_sensors; ++m) sig_cur[m] = params.sigma_w2 + m * params.sigma_h2;
    const em::GuardedSigma gs =
        em::guarded_sigma_step(obs, pm, params.sigma_h2, params.sigma_w2, su.sigma_h2,
                               su.sigma_w2, em::incomplete_loglik_pmf(obs, pm, sig_cur));
    next.sigma_h2 = std::max(gs.sigma_h2, 0.0);
    next.sigma_w2 = std::max(gs.sigma_w2, kSigmaFloor);

    const double drift = relative_drift(params, next);
    params = next;
    if (drift < tol) break;
  }
  return params;
}

}  // namespace backsense::vi
