#include "backsense/vi_noisy.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "backsense/distributions.hpp"
#include "backsense/gem_hetero.hpp"
#include "backsense/math.hpp"
#include "backsense/rng.hpp"
#include "backsense/simulator.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace backsense;

namespace {

sim::ObservationSet noisy_obs(const SensingPrior& prior, double delta2, int l, int m_ant,
                              double snr_db, std::uint64_t seed) {
  const auto field = sim::sample_field(prior, delta2, l, 7000 + seed);
  sim::ChannelConfig cfg;
  cfg.n_antennas = m_ant;
  cfg.n_sensors = prior.size();
  cfg.n_slots = l;
  cfg.tx_scale = sim::snr_to_sigma(snr_db, 1.0);
  return sim::encode_and_transmit(field, cfg, 9000 + seed);
}

// Grid with all density mass on one node: value 1/w at node k, zero
// elsewhere, so the quadrature sum stays one.
void set_degenerate(vi::ThetaGrid& grid, int slot, int n, int node) {
  grid.values.row(grid.row_of(slot, n)).setZero();
  grid.values(grid.row_of(slot, n), node) = 1.0 / grid.weights[node];
}

// Two-node hand grid for expectation oracles.
vi::ThetaGrid two_node_grid(int n_slots, int n_sensors, double z0, double z1, double p0) {
  vi::ThetaGrid g;
  g.nodes.resize(2);
  g.nodes << z0, z1;
  g.weights.resize(2);
  g.weights << 0.5, 0.5;
  g.n_sensors = n_sensors;
  g.values.resize(n_slots * n_sensors, 2);
  for (Eigen::Index r = 0; r < g.values.rows(); ++r) {
    g.values(r, 0) = p0 / 0.5;
    g.values(r, 1) = (1.0 - p0) / 0.5;
  }
  return g;
}

double grid_entropy(const vi::ThetaGrid& g) {
  double h = 0.0;
  for (Eigen::Index r = 0; r < g.values.rows(); ++r)
    for (int k = 0; k < g.k(); ++k) {
      const double v = g.values(r, k);
      if (v > 1e-300) h -= g.weights[k] * v * std::log(v);
    }
  return h / static_cast<double>(g.values.rows());
}

// Entropy of the same posteriors mapped to the reading domain (density of
// the recovered reading rather than of the rate). The rate-domain entropy is
// not a clean spread measure at broad noise because the logistic Jacobian
// spikes the density at the interval ends; dividing the Jacobian out gives
// the spread of what the sensor actually read.
double reading_entropy(const vi::ThetaGrid& g, const SensingPrior& prior) {
  double h = 0.0;
  for (Eigen::Index r = 0; r < g.values.rows(); ++r) {
    const int n = static_cast<int>(r % g.n_sensors);
    for (int k = 0; k < g.k(); ++k) {
      const double v = g.values(r, k);
      if (v <= 1e-300) continue;
      const double z = g.nodes[k];
      const double jac = (z - z * z) / prior.sigma[n];
      h -= g.weights[k] * v * std::log(v * jac);
    }
  }
  return h / static_cast<double>(g.values.rows());
}

double rel_error(const Eigen::VectorXd& x_hat, const Eigen::VectorXd& x) {
  return (x_hat - x).norm() / x.norm();
}

}  // namespace

// ---------------------------------------------------------------------------
// geometric-mean count factor, unpinned

TEST_CASE("count factor at a point-mass rate posterior is the scaled PMF") {
  const auto prior = SensingPrior::homogeneous(3, 25.0, 1.0, 0.0);
  auto grid = vi::make_theta_grid(64, 4, 3);
  // put each sensor's mass on a different node
  const int picks[3] = {10, 31, 52};
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 4; ++i) set_degenerate(grid, i, n, picks[n]);
  Eigen::VectorXd theta0(3);
  for (int n = 0; n < 3; ++n) theta0[n] = grid.nodes[picks[n]];
  const Eigen::VectorXd pmf = dist::poibin_pmf(theta0);
  for (int m = 0; m <= 3; ++m) {
    const double est = vi::geomean_count_pmf(m, grid, 2, 64, 123);
    CHECK(std::abs(est - 4.0 * pmf[m]) < 1e-10 * (1.0 + 4.0 * pmf[m]));
  }
}

TEST_CASE("count factor matches the hand expectation on a two-node grid") {
  // One sensor, rates z0/z1 with probabilities p0/p1; the expectation of
  // log(2 pmf(m)) has two atoms and is summed by hand.
  const double z0 = 0.2, z1 = 0.65, p0 = 0.3;
  const auto grid = two_node_grid(2, 1, z0, z1, p0);
  const int samples = 4096;
  for (int m = 0; m <= 1; ++m) {
    const double f0 = std::log(2.0 * (m == 0 ? 1.0 - z0 : z0));
    const double f1 = std::log(2.0 * (m == 0 ? 1.0 - z1 : z1));
    const double mean = p0 * f0 + (1.0 - p0) * f1;
    const double var = p0 * f0 * f0 + (1.0 - p0) * f1 * f1 - mean * mean;
    const double est = std::log(vi::geomean_count_pmf(m, grid, 1, samples, 99));
    CHECK(std::abs(est - mean) < 3.0 * std::sqrt(var / samples));
  }
}

TEST_CASE("count factor is stable across seeds within its Monte-Carlo error") {
  const double z0 = 0.2, z1 = 0.65, p0 = 0.3;
  const auto grid = two_node_grid(1, 1, z0, z1, p0);
  const int samples = 4096;
  const double f0 = std::log(2.0 * z0), f1 = std::log(2.0 * z1);
  const double mean = p0 * f0 + (1.0 - p0) * f1;
  const double var = p0 * f0 * f0 + (1.0 - p0) * f1 * f1 - mean * mean;
  const double a = std::log(vi::geomean_count_pmf(1, grid, 0, samples, 7));
  const double b = std::log(vi::geomean_count_pmf(1, grid, 0, samples, 8));
  CHECK(std::abs(a - b) < 3.0 * std::sqrt(var / samples));
}

// ---------------------------------------------------------------------------
// geometric-mean count factor with one rate pinned

TEST_CASE("pinned count factor with one sensor averages the count exactly") {
  // N=1: nothing is sampled, so the estimate equals
  // exp(sum_m q(m) log(2 pmf(m; z))) to round-off.
  const auto grid = two_node_grid(1, 1, 0.2, 0.65, 0.3);
  Eigen::VectorXd qt(2);
  qt << 0.35, 0.65;
  for (double z : {0.1, 0.5, 0.93}) {
    const double expect = std::exp(qt[0] * std::log(2.0 * (1.0 - z)) +
                                   qt[1] * std::log(2.0 * z));
    const double est = vi::geomean_count_pmf_pinned(0, z, qt, grid, 0, 128, 5);
    CHECK(std::abs(est - expect) < 1e-12 * (1.0 + expect));
  }
}

TEST_CASE("pinned count factor matches exhaustive enumeration on a two-node grid") {
  // N=2: the other sensor's rate has two atoms; enumerate (count, atom) by
  // hand and bound the Monte-Carlo estimate by 3 sigma.
  const double z0 = 0.3, z1 = 0.7, p0 = 0.4;
  const auto grid = two_node_grid(1, 2, z0, z1, p0);
  Eigen::VectorXd qt(3);
  qt << 0.2, 0.5, 0.3;
  const double pin = 0.55;
  const int samples = 4096;
  const double atoms[2] = {z0, z1};
  const double pa[2] = {p0, 1.0 - p0};
  // per-atom value of sum_m q(m) log(3 pmf(m; (pin, atom)))
  double mean = 0.0, second = 0.0;
  for (int j = 0; j < 2; ++j) {
    Eigen::VectorXd th(2);
    th << pin, atoms[j];
    const Eigen::VectorXd pmf = dist::poibin_pmf(th);
    double val = 0.0;
    for (int m = 0; m <= 2; ++m) val += qt[m] * std::log(3.0 * pmf[m]);
    mean += pa[j] * val;
    second += pa[j] * val * val;
  }
  const double var = second - mean * mean;
  const double est = std::log(vi::geomean_count_pmf_pinned(0, pin, qt, grid, 0, samples, 31));
  CHECK(std::abs(est - mean) < 3.0 * std::sqrt(var / samples));
}

TEST_CASE("pinned count factor with point masses everywhere is a direct PMF value") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.0);
  auto grid = vi::make_theta_grid(64, 1, 2);
  set_degenerate(grid, 0, 0, 20);
  set_degenerate(grid, 0, 1, 44);
  Eigen::VectorXd qt = Eigen::VectorXd::Zero(3);
  qt[1] = 1.0;  // count pinned at one
  const double z = 0.42;
  Eigen::VectorXd th(2);
  th << z, grid.nodes[44];
  const double expect = 3.0 * dist::poibin_pmf(th)[1];
  const double est = vi::geomean_count_pmf_pinned(0, z, qt, grid, 0, 32, 77);
  CHECK(std::abs(est - expect) < 1e-10 * (1.0 + expect));
}

// ---------------------------------------------------------------------------
// count-posterior update

TEST_CASE("count update reduces to the count-model responsibilities at a point mass") {
  const auto prior = SensingPrior::homogeneous(3, 25.0, 1.0, 0.5);
  const auto obs = noisy_obs(prior, 1.0, 12, 4, 10.0, 1);
  auto grid = vi::make_theta_grid(64, 12, 3);
  const int picks[3] = {14, 40, 55};
  Eigen::VectorXd theta0(3);
  for (int n = 0; n < 3; ++n) {
    theta0[n] = grid.nodes[picks[n]];
    for (int i = 0; i < 12; ++i) set_degenerate(grid, i, n, picks[n]);
  }
  vi::NoisyParams p;
  p.x = prior.mu;
  p.delta2 = 1e-12;
  p.sigma_h2 = 9.0;
  p.sigma_w2 = 1.1;
  const auto q_ref = gem::e_step_hetero(obs, {theta0, p.sigma_h2, p.sigma_w2});
  vi::McConfig mc;
  mc.seed = 3;
  for (int i : {0, 5, 11}) {
    const Eigen::VectorXd row = vi::update_count_posterior(obs, i, p, grid, mc);
    CHECK(std::abs(row.sum() - 1.0) < 1e-12);
    for (int m = 0; m <= 3; ++m) CHECK(std::abs(row[m] - q_ref(i, m)) < 1e-10);
  }
}

TEST_CASE("count update with a dead channel is the count factor alone") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 6, 3, 10.0, 2);
  auto grid = vi::make_theta_grid(64, 6, 2);
  vi::NoisyParams p;
  p.x = prior.mu;
  p.delta2 = 1.0;
  p.sigma_h2 = 0.0;
  p.sigma_w2 = 2.3;
  vi::McConfig mc;
  mc.seed = 11;
  const int slot = 4;
  const Eigen::VectorXd row = vi::update_count_posterior(obs, slot, p, grid, mc);
  Eigen::VectorXd f(3);
  for (int m = 0; m <= 2; ++m)
    f[m] = vi::geomean_count_pmf(m, grid, slot, mc.samples,
                                 rng::derive(mc.seed, 1, static_cast<std::uint64_t>(slot)));
  f /= f.sum();
  for (int m = 0; m <= 2; ++m) CHECK(std::abs(row[m] - f[m]) < 1e-9);
}

TEST_CASE("count update matches a hand computation for one sensor") {
  const auto prior = SensingPrior::homogeneous(1, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 5, 3, 10.0, 4);
  auto grid = vi::make_theta_grid(64, 5, 1);
  const int pick = 25;
  for (int i = 0; i < 5; ++i) set_degenerate(grid, i, 0, pick);
  const double z = grid.nodes[pick];
  vi::NoisyParams p;
  p.x = prior.mu;
  p.delta2 = 0.5;
  p.sigma_h2 = 4.0;
  p.sigma_w2 = 1.5;
  vi::McConfig mc;
  mc.seed = 9;
  const int slot = 3;
  const double y2 = obs.y_norm2[slot];
  const int m_ant = obs.n_antennas();
  for (bool model_exponent : {true, false}) {
    mc.antenna_exponent_M = model_exponent;
    const double expo = model_exponent ? static_cast<double>(m_ant) : 1.0;
    double g[2];
    for (int m = 0; m <= 1; ++m) {
      const double sig = p.sigma_w2 + m * p.sigma_h2;
      const double f1 = 2.0 * (m == 0 ? 1.0 - z : z);
      g[m] = f1 * std::pow(sig, -expo) * std::exp(-y2 / (2.0 * sig));
    }
    const Eigen::VectorXd row = vi::update_count_posterior(obs, slot, p, grid, mc);
    CHECK(std::abs(row[0] - g[0] / (g[0] + g[1])) < 1e-10);
    CHECK(std::abs(row[1] - g[1] / (g[0] + g[1])) < 1e-10);
  }
}

// ---------------------------------------------------------------------------
// rate-posterior update

TEST_CASE("rate update with a constant count factor is the reading-noise density") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.5, 0.0);
  const auto grid = vi::make_theta_grid(64, 1, 2);
  const double x_n = 25.8, delta2 = 0.7;
  const Eigen::VectorXd flat = Eigen::VectorXd::Constant(64, 3.7);
  const Eigen::VectorXd q =
      vi::rate_posterior_from_factors(flat, grid, 0, 1, x_n, prior.mu[1], prior.sigma[1], delta2);
  // reference: the conditional rate density given x_n, normalized on the grid
  Eigen::VectorXd ref(64);
  for (int k = 0; k < 64; ++k)
    ref[k] = std::exp(
        dist::log_theta_cond_scalar(grid.nodes[k], x_n, prior.mu[1], prior.sigma[1], delta2));
  const double mass = grid.weights.dot(ref);
  CHECK(std::abs(mass - 1.0) < 1e-4);  // the true density integrates to one
  for (int k = 0; k < 64; ++k) CHECK(std::abs(q[k] - ref[k] / mass) < 1e-8 * (1.0 + ref[k]));
  CHECK(std::abs(grid.weights.dot(q) - 1.0) < 1e-12);
}

TEST_CASE("rate update under huge reading noise is shaped by the count factor") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 4, 4, 10.0, 6);
  auto grid = vi::make_theta_grid(64, 4, 2);
  Eigen::VectorXd qt(3);
  qt << 0.25, 0.5, 0.25;
  vi::NoisyParams p;
  p.x = prior.mu;
  p.delta2 = 1e12;
  p.sigma_h2 = 9.0;
  p.sigma_w2 = 1.0;
  vi::McConfig mc;
  mc.seed = 21;
  const int slot = 1, n = 0;
  const Eigen::VectorXd q = vi::update_rate_posterior(n, slot, p, qt, grid, prior, mc);
  // direct shape: pinned factor over jacobian, same Monte-Carlo stream
  Eigen::VectorXd ref(64);
  for (int k = 0; k < 64; ++k) {
    const double z = grid.nodes[k];
    const double f2 = vi::geomean_count_pmf_pinned(
        n, z, qt, grid, slot, mc.samples,
        rng::derive(mc.seed, 2, static_cast<std::uint64_t>(slot), static_cast<std::uint64_t>(n)));
    ref[k] = f2 / (z * (1.0 - z));
  }
  ref /= grid.weights.dot(ref);
  for (int k = 0; k < 64; ++k) CHECK(std::abs(q[k] - ref[k]) < 2e-3 * (1.0 + ref[k]));
}

TEST_CASE("rate update is normalized on the grid") {
  const auto prior = SensingPrior::homogeneous(3, 25.0, 1.0, 0.5);
  const auto obs = noisy_obs(prior, 2.0, 8, 4, 10.0, 8);
  auto grid = vi::make_theta_grid(64, 8, 3);
  Eigen::VectorXd qt(4);
  qt << 0.1, 0.4, 0.3, 0.2;
  vi::NoisyParams p;
  p.x = prior.mu;
  p.delta2 = 2.0;
  p.sigma_h2 = 8.0;
  p.sigma_w2 = 1.0;
  vi::McConfig mc;
  mc.seed = 13;
  for (int i : {0, 3, 7})
    for (int n = 0; n < 3; ++n) {
      const Eigen::VectorXd q = vi::update_rate_posterior(n, i, p, qt, grid, prior, mc);
      CHECK(std::abs(grid.weights.dot(q) - 1.0) < 1e-6);
      CHECK(q.minCoeff() >= 0.0);
    }
}

TEST_CASE("rate update names the slot and sensor when every node underflows") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 4, 2, 10.0, 10);
  auto grid = vi::make_theta_grid(64, 4, 2);
  Eigen::VectorXd qt(3);
  qt << 0.3, 0.4, 0.3;
  vi::NoisyParams p;
  p.x = Eigen::VectorXd::Constant(2, 1e160);  // squared residual overflows
  p.delta2 = 1e-6;
  p.sigma_h2 = 4.0;
  p.sigma_w2 = 1.0;
  vi::McConfig mc;
  mc.seed = 17;
  try {
    vi::update_rate_posterior(1, 2, p, qt, grid, prior, mc);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("slot 2") != std::string::npos);
    CHECK(msg.find("sensor 1") != std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// parameter refresh

TEST_CASE("parameter refresh inverts point-mass rate posteriors exactly") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.3, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 6, 4, 10.0, 12);
  vi::VariationalState st;
  st.qT = Eigen::MatrixXd::Constant(6, 3, 1.0 / 3.0);
  st.qTheta = vi::make_theta_grid(64, 6, 2);
  const int picks[2] = {18, 47};
  for (int i = 0; i < 6; ++i)
    for (int n = 0; n < 2; ++n) set_degenerate(st.qTheta, i, n, picks[n]);
  const auto p = vi::m_step_noisy(st, obs, prior);
  for (int n = 0; n < 2; ++n) {
    const double expect =
        dist::inverse_map(st.qTheta.nodes[picks[n]], prior.mu[n], prior.sigma[n]);
    CHECK(std::abs(p.x[n] - expect) < 1e-10);
  }
}

TEST_CASE("parameter refresh returns the prior mean for mirror-symmetric rate posteriors") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 5, 4, 10.0, 14);
  vi::VariationalState st;
  st.qT = Eigen::MatrixXd::Constant(5, 3, 1.0 / 3.0);
  st.qTheta = vi::make_theta_grid(64, 5, 2);
  // mirror-symmetric density: value depends only on |z - 1/2|
  const int kk = st.qTheta.k();
  for (Eigen::Index r = 0; r < st.qTheta.values.rows(); ++r) {
    Eigen::VectorXd v(kk);
    for (int k = 0; k < kk; ++k) {
      const double d = st.qTheta.nodes[k] - 0.5;
      v[k] = std::exp(-8.0 * d * d);
    }
    st.qTheta.values.row(r) = (v / st.qTheta.weights.dot(v)).transpose();
  }
  const auto p = vi::m_step_noisy(st, obs, prior);
  for (int n = 0; n < 2; ++n) CHECK(std::abs(p.x[n] - prior.mu[n]) < 1e-9);
}

TEST_CASE("parameter refresh reading-noise variance matches the hand quadrature") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.1, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 4, 4, 10.0, 16);
  vi::VariationalState st;
  st.qT = Eigen::MatrixXd::Constant(4, 3, 1.0 / 3.0);
  st.qTheta = vi::make_theta_grid(64, 4, 2);
  const int picks[4][2] = {{10, 30}, {20, 40}, {30, 50}, {40, 20}};
  for (int i = 0; i < 4; ++i)
    for (int n = 0; n < 2; ++n) set_degenerate(st.qTheta, i, n, picks[i][n]);
  const auto p = vi::m_step_noisy(st, obs, prior);
  CHECK(p.delta2 >= 0.0);
  // hand value: mean squared residual of the inverted node values
  double acc = 0.0;
  for (int n = 0; n < 2; ++n) {
    double xbar = 0.0;
    for (int i = 0; i < 4; ++i)
      xbar += dist::inverse_map(st.qTheta.nodes[picks[i][n]], prior.mu[n], prior.sigma[n]);
    xbar /= 4.0;
    CHECK(std::abs(p.x[n] - xbar) < 1e-10);
    for (int i = 0; i < 4; ++i) {
      const double xi =
          dist::inverse_map(st.qTheta.nodes[picks[i][n]], prior.mu[n], prior.sigma[n]);
      acc += (xi - xbar) * (xi - xbar);
    }
  }
  CHECK(std::abs(p.delta2 - acc / 8.0) < 1e-10);
}

TEST_CASE("parameter refresh variances agree with the count-model regression") {
  const auto prior = SensingPrior::homogeneous(3, 25.0, 1.0, 0.5);
  const auto obs = noisy_obs(prior, 1.0, 30, 4, 10.0, 18);
  vi::VariationalState st;
  st.qTheta = vi::make_theta_grid(64, 30, 3);
  // arbitrary normalized count posteriors
  rng::SplitMix64 gen(4242);
  st.qT.resize(30, 4);
  for (int i = 0; i < 30; ++i) {
    double s = 0.0;
    for (int m = 0; m <= 3; ++m) {
      st.qT(i, m) = std::exp(gen.normal());
      s += st.qT(i, m);
    }
    st.qT.row(i) /= s;
  }
  const auto su = em::m_step_sigma(st.qT, obs);
  const auto p = vi::m_step_noisy(st, obs, prior);
  CHECK(std::abs(p.sigma_h2 - std::max(su.sigma_h2, 0.0)) < 1e-12);
  CHECK(std::abs(p.sigma_w2 - std::max(su.sigma_w2, 1e-8)) < 1e-12);
}

// ---------------------------------------------------------------------------
// inner cycling invariants

TEST_CASE("inner cycling keeps every posterior normalized and the bound stable") {
  const auto prior = SensingPrior::homogeneous(3, 25.0, 1.0, 0.5);
  const auto obs = noisy_obs(prior, 1.0, 25, 4, 10.0, 20);
  vi::VariationalState st;
  st.qT = Eigen::MatrixXd::Constant(25, 4, 0.25);
  st.qTheta = vi::make_theta_grid(64, 25, 3);
  vi::NoisyParams p;
  p.x = prior.mu;
  p.delta2 = 1.0;
  p.sigma_h2 = 10.0;
  p.sigma_w2 = 1.0;
  vi::McConfig mc;
  mc.seed = 42;
  EmTrace trace;
  const int rounds = vi::cycle_posteriors(obs, p, st, prior, mc, 1e-4, 20, &trace);
  CHECK(rounds >= 1);
  CHECK(static_cast<int>(st.elbo_trace.size()) == rounds);
  for (int i = 0; i < 25; ++i) CHECK(std::abs(st.qT.row(i).sum() - 1.0) < 1e-9);
  for (int i = 0; i < 25; ++i)
    for (int n = 0; n < 3; ++n) {
      const double mass = st.qTheta.weights.dot(
          st.qTheta.values.row(st.qTheta.row_of(i, n)).transpose());
      CHECK(std::abs(mass - 1.0) < 1e-6);
    }
  CHECK(st.qTheta.nodes.minCoeff() > 0.0);
  CHECK(st.qTheta.nodes.maxCoeff() < 1.0);
  // evidence bound never falls by more than its Monte-Carlo noise floor
  CHECK(trace.monotonicity_violations == 0);
}

TEST_CASE("rate posteriors concentrate as the reading noise shrinks") {
  const auto prior = SensingPrior::homogeneous(3, 25.0, 1.0, 0.5);
  const auto obs = noisy_obs(prior, 1.0, 30, 4, 10.0, 22);
  vi::NoisyParams p;
  p.x = prior.mu;
  p.sigma_h2 = 10.0;
  p.sigma_w2 = 1.0;
  std::vector<double> h_read, h_rate;
  for (double d2 : {10.0, 1.0, 0.1, 0.01}) {
    vi::VariationalState st;
    st.qT = Eigen::MatrixXd::Constant(30, 4, 0.25);
    st.qTheta = vi::make_theta_grid(64, 30, 3);
    p.delta2 = d2;
    vi::McConfig mc;
    mc.seed = 5;
    vi::cycle_posteriors(obs, p, st, prior, mc, 1e-4, 20);
    h_read.push_back(reading_entropy(st.qTheta, prior));
    h_rate.push_back(grid_entropy(st.qTheta));
  }
  // spread of the recovered reading shrinks with the noise at every step
  for (std::size_t j = 1; j < h_read.size(); ++j) CHECK(h_read[j] < h_read[j - 1]);
  // the rate-domain entropy agrees once the density is unimodal (the broad
  // 10 -> 1 step is dominated by the Jacobian end spikes, not by spread)
  for (std::size_t j = 2; j < h_rate.size(); ++j) CHECK(h_rate[j] < h_rate[j - 1]);
}

// ---------------------------------------------------------------------------
// full fits

TEST_CASE("an infinite tolerance stops the fit after one outer cycle") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 10, 2, 10.0, 24);
  const auto res = vi::run_vi(obs, prior, vi::default_init_noisy(obs, prior), {},
                              std::numeric_limits<double>::infinity(), 50, 1);
  CHECK(res.trace.iterations == 1);
  CHECK(res.trace.converged);
}

TEST_CASE("state snapshots serialize with the grid and one row per posterior") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 6, 2, 10.0, 26);
  const auto res = vi::run_vi(obs, prior, vi::default_init_noisy(obs, prior), {}, 1e-3, 3, 2);
  std::stringstream ss;
  res.state.serialize(ss);
  std::string line;
  std::getline(ss, line);
  CHECK(line.rfind("# grid", 0) == 0);
  int rows = 0;
  while (std::getline(ss, line))
    if (!line.empty() && line[0] != '#') ++rows;
  // nodes + weights + L count rows + L*N rate rows
  CHECK(rows == 2 + 6 + 6 * 2);
}

TEST_CASE("near noise-free fits agree with the count-model rate fit") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.5);
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto obs = noisy_obs(prior, 1e-6, 50, 4, 10.0, 100 + seed);
    const auto res = vi::run_vi(obs, prior, vi::default_init_noisy(obs, prior), {}, 1e-3, 50,
                                300 + seed);
    const auto ref = gem::run_hetero(obs, Criterion::kMl, gem::default_init_hetero(obs), prior,
                                     {}, 1e-6, 500);
    gaps.push_back((res.params.x - ref.x_hat).norm() / ref.x_hat.norm());
  }
  CHECK(oracle::median(gaps) < 0.10);
}

TEST_CASE("strong reading noise still recovers the sensed values at the reference point") {
  const auto prior = SensingPrior::homogeneous(4, 25.0, 1.0, 0.5);
  std::vector<double> errs;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto field = sim::sample_field(prior, 10.0, 100, 17000 + seed);
    sim::ChannelConfig cfg;
    cfg.n_antennas = 4;
    cfg.n_sensors = 4;
    cfg.n_slots = 100;
    cfg.tx_scale = sim::snr_to_sigma(10.0, 1.0);
    const auto obs = sim::encode_and_transmit(field, cfg, 19000 + seed);
    // Six outer cycles: the sensed-value estimate is stationary well before
    // the reading-noise variance finishes its slow crawl along a likelihood
    // direction this configuration barely identifies.
    const auto res = vi::run_vi(obs, prior, vi::default_init_noisy(obs, prior), {}, 1e-3, 6,
                                500 + seed);
    errs.push_back(rel_error(res.params.x, field.x));
  }
  CHECK(oracle::median(errs) < 0.15);
}

// ---------------------------------------------------------------------------
// exact reference fit

TEST_CASE("exact fit rejects more than three sensors") {
  const auto prior = SensingPrior::homogeneous(4, 25.0, 1.0, 0.5);
  const auto obs = noisy_obs(prior, 1.0, 5, 2, 10.0, 28);
  CHECK_THROWS_AS(
      vi::run_exact_em(obs, prior, vi::default_init_noisy(obs, prior)), std::invalid_argument);
}

TEST_CASE("factorized count posteriors track the exact ones for a single sensor") {
  const auto prior = SensingPrior::homogeneous(1, 25.0, 1.0, 0.0);
  const auto obs = noisy_obs(prior, 1.0, 40, 2, 10.0, 30);
  const auto init = vi::default_init_noisy(obs, prior);
  const auto exact = vi::run_exact_em(obs, prior, init, 1e-8, 300);
  const auto res = vi::run_vi(obs, prior, init, {}, 1e-4, 100, 3);
  // exact count posterior at the exact fit, by adaptive quadrature
  double tv_sum = 0.0;
  for (int i = 0; i < 40; ++i) {
    double g[2];
    for (int m = 0; m <= 1; ++m) {
      const double like = dist::obs_cond_density(obs.y_norm2[i], m, exact.sigma_h2,
                                                 exact.sigma_w2, obs.n_antennas());
      const auto integrand = [&](double th) {
        const double pmf = m == 0 ? 1.0 - th : th;
        return pmf * std::exp(dist::log_theta_cond_scalar(th, exact.x[0], prior.mu[0],
                                                          prior.sigma[0], exact.delta2));
      };
      g[m] = like * oracle::adaptive_simpson(integrand, 1e-9, 1.0 - 1e-9, 1e-12);
    }
    const double p1 = g[1] / (g[0] + g[1]);
    tv_sum += std::abs(res.state.qT(i, 1) - p1);
  }
  CHECK(tv_sum / 40.0 < 0.05);
}

TEST_CASE("factorization loses little accuracy across reading-noise levels") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.5);
  for (double d2 : {0.1, 1.0, 10.0}) {
    std::vector<double> err_vi, err_ex;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto field = sim::sample_field(prior, d2, 50, 23000 + seed);
      sim::ChannelConfig cfg;
      cfg.n_antennas = 4;
      cfg.n_sensors = 2;
      cfg.n_slots = 50;
      cfg.tx_scale = sim::snr_to_sigma(10.0, 1.0);
      const auto obs = sim::encode_and_transmit(field, cfg, 29000 + seed);
      const auto init = vi::default_init_noisy(obs, prior);
      // Eight outer cycles: the sensed-value estimate is stationary long
      // before the slowly-identified reading-noise variance settles.
      err_vi.push_back(
          rel_error(vi::run_vi(obs, prior, init, {}, 1e-3, 8, 700 + seed).params.x, field.x));
      err_ex.push_back(rel_error(vi::run_exact_em(obs, prior, init, 1e-6, 200).x, field.x));
    }
    CHECK(std::abs(oracle::median(err_vi) - oracle::median(err_ex)) < 0.05);
  }
}

TEST_CASE("exact fit also reduces to the count-model rates when reading noise vanishes") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.5);
  std::vector<double> gaps;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto obs = noisy_obs(prior, 1e-6, 50, 4, 10.0, 200 + seed);
    const auto init = vi::default_init_noisy(obs, prior);
    const auto exact = vi::run_exact_em(obs, prior, init, 1e-6, 200);
    const auto ref = gem::run_hetero(obs, Criterion::kMl, gem::default_init_hetero(obs), prior,
                                     {}, 1e-6, 500);
    gaps.push_back((exact.x - ref.x_hat).norm() / ref.x_hat.norm());
  }
  CHECK(oracle::median(gaps) < 0.10);
}

// ---------------------------------------------------------------------------
// quadrature resolution

TEST_CASE("doubling the grid resolution leaves the estimate unchanged") {
  const auto prior = SensingPrior::homogeneous(2, 25.0, 1.0, 0.5);
  const auto obs = noisy_obs(prior, 1.0, 30, 4, 10.0, 32);
  const auto init = vi::default_init_noisy(obs, prior);
  vi::ViOptions coarse, fine;
  coarse.grid_k = 64;
  fine.grid_k = 128;
  coarse.samples = fine.samples = 2048;
  const auto a = vi::run_vi(obs, prior, init, coarse, 1e-4, 50, 5);
  const auto b = vi::run_vi(obs, prior, init, fine, 1e-4, 50, 5);
  CHECK((a.params.x - b.params.x).lpNorm<Eigen::Infinity>() < 1e-3);
}
