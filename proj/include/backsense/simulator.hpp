#pragma once

#include <Eigen/Dense>
#include <complex>
#include <cstdint>
#include <iosfwd>

#include "backsense/prior.hpp"

namespace backsense::sim {

struct ChannelConfig {
  int n_antennas = 4;  // M
  int n_sensors = 4;   // N
  int n_slots = 100;   // L
  double sigma_h2 = 1.0;  // per-part fading variance; 0 gives a dead channel
  double sigma_w2 = 1.0;  // per-part noise variance, > 0
  double tx_scale = 1.0;  // sqrt(G * P_t), multiplies the faded symbol
  double rho_bar = 1.0;   // on-symbol amplitude, in (0, 1]
  // When > 0, every channel coefficient equals this real constant instead of
  // being drawn: the simplified single-gain scenario used by the naive
  // baseline.
  double fixed_channel_h = 0.0;

  void validate() const;
};

// One draw of the sensed field: the latent x, the per-slot noisy readings
// x_tilde (row per slot), and the induced activation probabilities theta.
struct FieldRealization {
  Eigen::VectorXd x;
  Eigen::MatrixXd x_tilde;  // L x N
  Eigen::MatrixXd theta;    // L x N
  double delta2 = 0.0;
};

struct ObservationSet {
  Eigen::MatrixXcd y;      // L x M
  Eigen::VectorXd y_norm2; // cached squared row norms
  int n_sensors = 0;
  // Ground-truth diagnostics; empty for observation sets loaded from a dump.
  Eigen::VectorXi true_t;
  Eigen::MatrixXi symbols;  // L x N, 0/1

  int n_slots() const { return static_cast<int>(y.rows()); }
  int n_antennas() const { return static_cast<int>(y.cols()); }
};

// Draws x ~ N(mu, Sigma_x) once, then per-slot readings x + sqrt(delta2) * eps
// and their activation probabilities. Streams are split per (slot, sensor):
// growing L or N leaves existing draws untouched.
FieldRealization sample_field(const SensingPrior& prior, double delta2, int n_slots,
                              std::uint64_t seed);

// Simulates the backscatter uplink for every slot: activation censoring of
// theta, per-slot Rayleigh coefficients, additive noise.
ObservationSet encode_and_transmit(const FieldRealization& field, const ChannelConfig& cfg,
                                   std::uint64_t seed);

// Transmit amplitude realizing a given average SNR (dB) against sigma_w2.
double snr_to_sigma(double snr_db, double sigma_w2);

// Column text dump (slot, antenna, re, im) with an L/M/N header; the loader
// restores y and recomputes the cached norms. Diagnostics are not dumped.
void dump_observations(const ObservationSet& obs, std::ostream& out);
ObservationSet load_observations(std::istream& in);

}  // namespace backsense::sim
