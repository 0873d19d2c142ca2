#include "backsense/simulator.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "backsense/distributions.hpp"
#include "backsense/math.hpp"
#include "backsense/rng.hpp"

namespace backsense::sim {

namespace {

enum StreamTag : std::uint64_t {
  kTagField = 1,
  kTagReading = 2,
  kTagActivation = 3,
  kTagChannel = 4,
  kTagNoise = 5,
};

}  // namespace

void ChannelConfig::validate() const {
  if (n_antennas < 1) throw std::invalid_argument("ChannelConfig: need at least one antenna");
  if (n_sensors < 1) throw std::invalid_argument("ChannelConfig: need at least one sensor");
  if (n_slots < 1) throw std::invalid_argument("ChannelConfig: need at least one slot");
  if (sigma_h2 < 0.0) throw std::invalid_argument("ChannelConfig: sigma_h2 must be >= 0");
  if (sigma_w2 <= 0.0) throw std::invalid_argument("ChannelConfig: sigma_w2 must be > 0");
  if (tx_scale <= 0.0) throw std::invalid_argument("ChannelConfig: tx_scale must be > 0");
  if (rho_bar <= 0.0 || rho_bar > 1.0)
    throw std::invalid_argument("ChannelConfig: rho_bar must lie in (0,1]");
  if (fixed_channel_h < 0.0)
    throw std::invalid_argument("ChannelConfig: fixed_channel_h must be >= 0");
}

FieldRealization sample_field(const SensingPrior& prior, double delta2, int n_slots,
                              std::uint64_t seed) {
  prior.validate();
  if (delta2 < 0.0) throw std::invalid_argument("sample_field: delta2 must be >= 0");
  if (n_slots < 1) throw std::invalid_argument("sample_field: need at least one slot");
  const int n = prior.size();

  Eigen::LLT<Eigen::MatrixXd> llt(prior.Sigma_x);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("sample_field: Sigma_x is not positive definite");

  rng::SplitMix64 field_gen(rng::derive(seed, kTagField));
  Eigen::VectorXd z(n);
  for (int k = 0; k < n; ++k) z[k] = field_gen.normal();

  FieldRealization field;
  field.delta2 = delta2;
  field.x = prior.mu + Eigen::MatrixXd(llt.matrixL()) * z;
  field.x_tilde.resize(n_slots, n);
  field.theta.resize(n_slots, n);
  const double delta = std::sqrt(delta2);
  for (int i = 0; i < n_slots; ++i) {
    for (int k = 0; k < n; ++k) {
      double reading = field.x[k];
      if (delta2 > 0.0) {
        rng::SplitMix64 g(rng::derive(seed, kTagReading, i, k));
        reading += delta * g.normal();
      }
      field.x_tilde(i, k) = reading;
      field.theta(i, k) = dist::sigmoid_map(reading, prior.mu[k], prior.sigma[k]);
    }
  }
  return field;
}

ObservationSet encode_and_transmit(const FieldRealization& field, const ChannelConfig& cfg,
                                   std::uint64_t seed) {
  cfg.validate();
  if (field.theta.rows() != cfg.n_slots || field.theta.cols() != cfg.n_sensors)
    throw std::invalid_argument("encode_and_transmit: field shape does not match config");

  const int m_ant = cfg.n_antennas;
  const int n = cfg.n_sensors;
  const int l = cfg.n_slots;
  const double sigma_h = std::sqrt(cfg.sigma_h2);
  const double sigma_w = std::sqrt(cfg.sigma_w2);

  ObservationSet obs;
  obs.n_sensors = n;
  obs.y.resize(l, m_ant);
  obs.y_norm2.resize(l);
  obs.true_t.resize(l);
  obs.symbols.resize(l, n);

  Eigen::VectorXcd acc(m_ant);
  for (int i = 0; i < l; ++i) {
    acc.setZero();
    int active = 0;
    for (int k = 0; k < n; ++k) {
      rng::SplitMix64 act(rng::derive(seed, kTagActivation, i, k));
      const bool on = act.uniform() < field.theta(i, k);
      obs.symbols(i, k) = on ? 1 : 0;
      if (!on) continue;
      ++active;
      if (cfg.fixed_channel_h > 0.0) {
        for (int a = 0; a < m_ant; ++a) acc[a] += cfg.fixed_channel_h;
      } else {
        rng::SplitMix64 ch(rng::derive(seed, kTagChannel, i, k));
        for (int a = 0; a < m_ant; ++a) {
          const double re = sigma_h * ch.normal();
          const double im = sigma_h * ch.normal();
          acc[a] += std::complex<double>(re, im);
        }
      }
    }
    obs.true_t[i] = active;
    double norm2 = 0.0;
    for (int a = 0; a < m_ant; ++a) {
      rng::SplitMix64 nz(rng::derive(seed, kTagNoise, i, a));
      const std::complex<double> w(sigma_w * nz.normal(), sigma_w * nz.normal());
      const std::complex<double> v = cfg.tx_scale * cfg.rho_bar * acc[a] + w;
      obs.y(i, a) = v;
      norm2 += std::norm(v);
    }
    obs.y_norm2[i] = norm2;
  }
  return obs;
}

double snr_to_sigma(double snr_db, double sigma_w2) {
  if (sigma_w2 <= 0.0) throw std::invalid_argument("snr_to_sigma: sigma_w2 must be > 0");
  return std::sqrt(std::pow(10.0, snr_db / 10.0) * sigma_w2);
}

void dump_observations(const ObservationSet& obs, std::ostream& out) {
  out << "# observations v1\n";
  out << "# L=" << obs.n_slots() << " M=" << obs.n_antennas() << " N=" << obs.n_sensors << "\n";
  out << "# slot antenna re im\n";
  char buf[96];
  for (int i = 0; i < obs.n_slots(); ++i) {
    for (int a = 0; a < obs.n_antennas(); ++a) {
      std::snprintf(buf, sizeof(buf), "%d %d %.17g %.17g\n", i, a, obs.y(i, a).real(),
                    obs.y(i, a).imag());
      out << buf;
    }
  }
}

ObservationSet load_observations(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# observations v1", 0) != 0)
    throw std::runtime_error("load_observations: missing header line");
  int l = 0, m = 0, n = 0;
  if (!std::getline(in, line) || std::sscanf(line.c_str(), "# L=%d M=%d N=%d", &l, &m, &n) != 3)
    throw std::runtime_error("load_observations: malformed dimension line");
  if (l < 1 || m < 1 || n < 1) throw std::runtime_error("load_observations: bad dimensions");
  std::getline(in, line);  // column comment

  ObservationSet obs;
  obs.n_sensors = n;
  obs.y.resize(l, m);
  obs.y_norm2.resize(l);
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    int slot = 0, ant = 0;
    double re = 0.0, im = 0.0;
    if (std::sscanf(line.c_str(), "%d %d %lg %lg", &slot, &ant, &re, &im) != 4)
      throw std::runtime_error("load_observations: malformed sample line");
    if (slot < 0 || slot >= l || ant < 0 || ant >= m)
      throw std::runtime_error("load_observations: sample index out of range");
    obs.y(slot, ant) = std::complex<double>(re, im);
    ++rows;
  }
  if (rows != l * m) throw std::runtime_error("load_observations: sample count mismatch");
  for (int i = 0; i < l; ++i) obs.y_norm2[i] = obs.y.row(i).squaredNorm();
  return obs;
}

}  // namespace backsense::sim
