#include "backsense/em_uniform.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

#include "backsense/distributions.hpp"
#include "backsense/math.hpp"
#include "backsense/optimize.hpp"

namespace backsense::em {

namespace {

constexpr double kWeightFloor = 1e-8;

struct RateAggregate {
  double s = 0.0;   // sum_i sum_m q(i,m) m
  double ln = 0.0;  // L * N
};

RateAggregate aggregate(const PosteriorT& q) {
  RateAggregate agg;
  const int n = static_cast<int>(q.cols()) - 1;
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (int m = 1; m <= n; ++m) agg.s += q(i, m) * m;
  agg.ln = static_cast<double>(q.rows()) * n;
  return agg;
}

double rate_objective_ml(const RateAggregate& agg, double theta) {
  const double t = clamp_theta(theta);
  return agg.s * std::log(t) + (agg.ln - agg.s) * std::log1p(-t);
}

double rate_objective_map(const RateAggregate& agg, double theta) {
  return rate_objective_ml(agg, theta) + dist::log_theta_prior_uniform(theta);
}

double maximize_map(const RateAggregate& agg) {
  const double lo = kThetaEps, hi = 1.0 - kThetaEps;
  const int kGrid = 512;
  int best = 0;
  double fbest = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= kGrid; ++i) {
    const double t = lo + (hi - lo) * i / kGrid;
    const double f = rate_objective_map(agg, t);
    if (f > fbest) {
      fbest = f;
      best = i;
    }
  }
  const double cell = (hi - lo) / kGrid;
  const double a = std::max(lo, lo + best * cell - cell);
  const double b = std::min(hi, lo + best * cell + cell);
  return opt::golden_section_max([&](double t) { return rate_objective_map(agg, t); }, a, b,
                                 1e-8);
}

Eigen::VectorXd affine_sigma(double sigma_h2, double sigma_w2, int n) {
  Eigen::VectorXd v(n + 1);
  for (int m = 0; m <= n; ++m) v[m] = sigma_h2 * m + sigma_w2;
  return v;
}

}  // namespace

PosteriorT e_step_pmf(const sim::ObservationSet& obs, const Eigen::VectorXd& pmf,
                      double sigma_h2, double sigma_w2) {
  const int n = obs.n_sensors;
  const int l = obs.n_slots();
  if (n < 1) throw std::invalid_argument("e_step: observation set lacks a sensor count");
  if (pmf.size() != n + 1) throw std::invalid_argument("e_step: count pmf has the wrong length");

  Eigen::VectorXd log_pmf(n + 1);
  for (int m = 0; m <= n; ++m) log_pmf[m] = log_floored(pmf[m]);

  PosteriorT q(l, n + 1);
  Eigen::VectorXd row(n + 1);
  for (int i = 0; i < l; ++i) {
    for (int m = 0; m <= n; ++m)
      row[m] = dist::log_obs_cond_density(obs.y_norm2[i], m, sigma_h2, sigma_w2,
                                          obs.n_antennas()) +
               log_pmf[m];
    const double lse = log_sum_exp(row);
    if (!std::isfinite(lse))
      throw std::runtime_error("e_step: posterior underflow in slot " + std::to_string(i));
    for (int m = 0; m <= n; ++m) q(i, m) = std::exp(row[m] - lse);
  }
  return q;
}

PosteriorT e_step(const sim::ObservationSet& obs, const UniformParams& params) {
  return e_step_pmf(obs, dist::binomial_pmf(std::clamp(params.theta, 0.0, 1.0), obs.n_sensors),
                    params.sigma_h2, params.sigma_w2);
}

double theta_objective_ml(const PosteriorT& q, double theta) {
  return rate_objective_ml(aggregate(q), theta);
}

double theta_objective_map(const PosteriorT& q, double theta) {
  return rate_objective_map(aggregate(q), theta);
}

double m_step_theta_ml(const PosteriorT& q) {
  const RateAggregate agg = aggregate(q);
  return clamp_theta(agg.s / agg.ln);
}

double m_step_theta_map(const PosteriorT& q) { return clamp_theta(maximize_map(aggregate(q))); }

double map_stationarity_root(const PosteriorT& q) {
  const RateAggregate agg = aggregate(q);
  // (LN - 2) t + 1 - s - log(1/t - 1) = 0; strictly increasing in t.
  const auto g = [&](double t) {
    return (agg.ln - 2.0) * t + 1.0 - agg.s - std::log(1.0 / t - 1.0);
  };
  return opt::bisect_root(g, kThetaEps, 1.0 - kThetaEps, 1e-12);
}

SigmaUpdate m_step_sigma(const PosteriorT& q, const sim::ObservationSet& obs) {
  const int n = static_cast<int>(q.cols()) - 1;
  const int m_ant = obs.n_antennas();
  if (q.rows() != obs.n_slots()) throw std::invalid_argument("m_step_sigma: q/obs mismatch");

  SigmaUpdate upd;
  upd.Sigma = Eigen::VectorXd::Constant(n + 1, std::nan(""));
  upd.weight = Eigen::VectorXd::Zero(n + 1);
  Eigen::VectorXd num = Eigen::VectorXd::Zero(n + 1);
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (int m = 0; m <= n; ++m) {
      upd.weight[m] += q(i, m);
      num[m] += q(i, m) * obs.y_norm2[i];
    }

  int included = 0;
  double sw = 0.0, sm = 0.0, ss = 0.0, smm = 0.0, sms = 0.0;
  for (int m = 0; m <= n; ++m) {
    if (upd.weight[m] < kWeightFloor) continue;
    upd.Sigma[m] = num[m] / (2.0 * m_ant * upd.weight[m]);
    ++included;
    sw += 1.0;
    sm += m;
    ss += upd.Sigma[m];
    smm += static_cast<double>(m) * m;
    sms += m * upd.Sigma[m];
  }
  if (included < 2)
    throw std::runtime_error(
        "m_step_sigma: posterior mass concentrated on a single count; variance regression is "
        "degenerate");

  const double mbar = sm / sw, sbar = ss / sw;
  const double denom = smm - sw * mbar * mbar;
  upd.sigma_h2 = std::max((sms - sw * mbar * sbar) / denom, 0.0);
  upd.sigma_w2 = std::max(sbar - mbar * upd.sigma_h2, kSigmaFloor);
  return upd;
}

double incomplete_loglik_pmf(const sim::ObservationSet& obs, const Eigen::VectorXd& pmf,
                             const Eigen::VectorXd& Sigma) {
  const int n = static_cast<int>(pmf.size()) - 1;
  if (Sigma.size() != pmf.size())
    throw std::invalid_argument("incomplete_loglik_pmf: pmf/Sigma size mismatch");
  Eigen::VectorXd log_pmf(n + 1);
  for (int m = 0; m <= n; ++m) log_pmf[m] = log_floored(pmf[m]);

  double ll = 0.0;
  Eigen::VectorXd row(n + 1);
  const int m_ant = obs.n_antennas();
  for (int i = 0; i < obs.n_slots(); ++i) {
    for (int m = 0; m <= n; ++m) {
      if (!(Sigma[m] > 0.0))
        throw std::invalid_argument("incomplete_loglik_pmf: non-positive slot variance");
      row[m] = log_pmf[m] - m_ant * std::log(kTwoPi * Sigma[m]) - obs.y_norm2[i] / (2.0 * Sigma[m]);
    }
    ll += log_sum_exp(row);
  }
  return ll;
}

double incomplete_loglik(const sim::ObservationSet& obs, const UniformParams& params) {
  const int n = obs.n_sensors;
  return incomplete_loglik_pmf(obs, dist::binomial_pmf(std::clamp(params.theta, 0.0, 1.0), n),
                               affine_sigma(params.sigma_h2, params.sigma_w2, n));
}

GuardedSigma guarded_sigma_step(const sim::ObservationSet& obs, const Eigen::VectorXd& pmf,
                                double cur_h2, double cur_w2, double prop_h2, double prop_w2,
                                double ll_floor) {
  const int n = static_cast<int>(pmf.size()) - 1;
  const auto ll_of = [&](double h2, double w2) {
    return incomplete_loglik_pmf(obs, pmf, affine_sigma(h2, w2, n));
  };

  GuardedSigma out;
  out.sigma_h2 = prop_h2;
  out.sigma_w2 = prop_w2;
  out.loglik = ll_of(prop_h2, prop_w2);
  out.step = 1.0;
  for (int halvings = 0; !(out.loglik >= ll_floor) && halvings < 12; ++halvings) {
    out.step *= 0.5;
    out.sigma_h2 = (1.0 - out.step) * cur_h2 + out.step * prop_h2;
    out.sigma_w2 = (1.0 - out.step) * cur_w2 + out.step * prop_w2;
    out.loglik = ll_of(out.sigma_h2, out.sigma_w2);
  }
  if (out.loglik >= ll_floor && out.step == 1.0) return out;

  // The full proposal failed the ascent floor, so the regression direction is
  // suspect here: when some counts have lost most of their posterior mass it
  // points downhill outright, and near a curved ridge it oscillates against
  // the likelihood. A damped fraction that still makes clear progress is kept
  // as-is; otherwise finish with a direct coordinate search and keep the best
  // candidate seen, so cycles cannot crawl along a bad direction. Coarse
  // log-spaced scan per coordinate, golden refinement inside the winning
  // cell, two sweeps; an explicit zero probe covers the dead-channel edge of
  // sigma_h2.
  GuardedSigma best;
  best.sigma_h2 = cur_h2;
  best.sigma_w2 = cur_w2;
  best.loglik = ll_of(cur_h2, cur_w2);
  best.step = 0.0;
  constexpr double kSearchGate = 0.1;  // nats gained that justify skipping the search
  if (out.loglik >= ll_floor && out.loglik >= best.loglik + kSearchGate) return out;
  if (out.loglik >= ll_floor && out.loglik > best.loglik) best = out;

  const double scale = 2.0 * obs.n_antennas();
  const double energy_mean =
      obs.y_norm2.size() > 0 ? std::max(obs.y_norm2.mean() / scale, kSigmaFloor) : 1.0;

  const auto refine = [&](double lo, double hi, const std::function<double(double)>& f) {
    constexpr int kGrid = 17;
    const double la = std::log(lo), lb = std::log(hi);
    double best_x = la, best_f = f(la);
    int best_i = 0;
    for (int i = 1; i < kGrid; ++i) {
      const double x = la + (lb - la) * i / (kGrid - 1.0);
      const double fx = f(x);
      if (fx > best_f) {
        best_f = fx;
        best_x = x;
        best_i = i;
      }
    }
    const double a = la + (lb - la) * std::max(0, best_i - 1) / (kGrid - 1.0);
    const double b = la + (lb - la) * std::min(kGrid - 1, best_i + 1) / (kGrid - 1.0);
    const double x = opt::golden_section_max(f, a, b, 1e-6);
    return f(x) > best_f ? x : best_x;
  };

  double h2 = best.sigma_h2, w2 = best.sigma_w2;
  const double hi_w = 4.0 * std::max({w2, energy_mean, 10.0 * kSigmaFloor});
  const double hi_h = 4.0 * std::max({h2, energy_mean, 10.0 * kSigmaFloor});
  for (int sweep = 0; sweep < 2; ++sweep) {
    w2 = std::exp(refine(kSigmaFloor, hi_w, [&](double lw) { return ll_of(h2, std::exp(lw)); }));
    double cand_h = std::exp(refine(1e-12, hi_h, [&](double lh) { return ll_of(std::exp(lh), w2); }));
    if (ll_of(0.0, w2) > ll_of(cand_h, w2)) cand_h = 0.0;
    h2 = cand_h;
  }
  const double ll_hw = ll_of(h2, w2);
  if (ll_hw > best.loglik) {
    best.sigma_h2 = h2;
    best.sigma_w2 = w2;
    best.loglik = ll_hw;
    best.step = 0.0;
  }
  return best;
}

UniformParams default_init(const sim::ObservationSet& obs) {
  UniformParams p;
  p.theta = 0.5;
  const double scale = 2.0 * obs.n_antennas();
  p.sigma_w2 = std::max(obs.y_norm2.minCoeff() / scale, kSigmaFloor);
  const double mean = obs.y_norm2.mean() / scale;
  p.sigma_h2 = std::max(mean - p.sigma_w2, kSigmaFloor) /
               std::max(obs.n_sensors * p.theta, 1.0);
  return p;
}

EmResult run(const sim::ObservationSet& obs, const RunOptions& opts,
             const UniformParams& init) {
  if (opts.max_iter < 1) throw std::invalid_argument("run: max_iter must be positive");
  const int n = obs.n_sensors;
  const int l = obs.n_slots();
  const bool map = opts.criterion == Criterion::kMap;

  EmResult res;
  res.params = init;
  res.params.theta = clamp_theta(init.theta);
  res.params.sigma_w2 = std::max(init.sigma_w2, kSigmaFloor);
  res.params.sigma_h2 = std::max(init.sigma_h2, 0.0);

  const auto objective_of = [&](double ll, double theta) {
    return map ? ll + dist::log_theta_prior_uniform(theta) : ll;
  };

  double prev_obj = objective_of(incomplete_loglik(obs, res.params), res.params.theta);
  int small_gain_streak = 0;

  for (int it = 1; it <= opts.max_iter; ++it) {
    res.q = e_step(obs, res.params);
    const double theta_new = map ? m_step_theta_map(res.q) : m_step_theta_ml(res.q);
    const SigmaUpdate su = m_step_sigma(res.q, obs);

    // free per-count variances; skipped counts keep the current line value
    Eigen::VectorXd sigma_free = affine_sigma(res.params.sigma_h2, res.params.sigma_w2, n);
    for (int m = 0; m <= n; ++m)
      if (std::isfinite(su.Sigma[m])) sigma_free[m] = su.Sigma[m];

    const Eigen::VectorXd pmf_new = dist::binomial_pmf(theta_new, n);
    const double ll_pre = incomplete_loglik_pmf(obs, pmf_new, sigma_free);
    const double obj_pre = objective_of(ll_pre, theta_new);
    if (obj_pre < prev_obj - 1e-7 * (1.0 + std::abs(prev_obj)))
      ++res.trace.monotonicity_violations;

    // Ascent guard on the variance step: the regression fit can overshoot on
    // noisy per-count variance estimates (bad steps can even start a collapse
    // of sigma_w2 toward its floor that starves the low counts of posterior
    // mass for good), so damp the move toward the previous variances until
    // the objective stops falling below the previous cycle's value, and
    // search the variances directly when the whole move points downhill.
    const double ascent_floor = prev_obj - 1e-9 * (1.0 + std::abs(prev_obj));
    const double theta_pen = map ? dist::log_theta_prior_uniform(theta_new) : 0.0;
    const GuardedSigma gs =
        guarded_sigma_step(obs, pmf_new, res.params.sigma_h2, res.params.sigma_w2, su.sigma_h2,
                           su.sigma_w2, ascent_floor - theta_pen);
    const UniformParams next{theta_new, gs.sigma_h2, gs.sigma_w2};
    const double beta = gs.step;
    const double ll_post = gs.loglik;
    const double obj_post = ll_post + theta_pen;
    if (!std::isfinite(ll_post))
      throw std::runtime_error("run: non-finite log-likelihood at iteration " +
                               std::to_string(it));
    const double drop = ll_pre - ll_post;
    // Even after guarding, a decrease beyond the slack budget is a health
    // violation worth surfacing.
    if (obj_post < prev_obj - opts.proj_slack * l) ++res.trace.projection_violations;

    // expected complete-data objective under the refreshed parameters
    double surrogate = 0.0;
    {
      Eigen::VectorXd log_pmf(n + 1);
      for (int m = 0; m <= n; ++m) log_pmf[m] = log_floored(pmf_new[m]);
      Eigen::VectorXd col = Eigen::VectorXd::Zero(n + 1);
      Eigen::VectorXd colw = Eigen::VectorXd::Zero(n + 1);
      for (int i = 0; i < l; ++i)
        for (int m = 0; m <= n; ++m) {
          col[m] += res.q(i, m) * obs.y_norm2[i];
          colw[m] += res.q(i, m);
        }
      for (int m = 0; m <= n; ++m)
        surrogate += colw[m] * (log_pmf[m] - obs.n_antennas() * std::log(kTwoPi * sigma_free[m])) -
                     col[m] / (2.0 * sigma_free[m]);
      if (map) surrogate += dist::log_theta_prior_uniform(theta_new);
    }

    EmIterationRecord rec;
    rec.iteration = it;
    rec.loglik = ll_post;
    rec.surrogate = surrogate;
    rec.theta = Eigen::VectorXd::Constant(1, theta_new);
    rec.sigma_h2 = next.sigma_h2;
    rec.sigma_w2 = next.sigma_w2;
    rec.penalized = obj_post;
    rec.pre_projection = ll_pre;
    rec.proj_drop = drop;
    rec.proj_step = beta;
    rec.stationarity_root = map ? map_stationarity_root(res.q) : std::nan("");
    res.trace.records.push_back(rec);
    res.trace.iterations = it;

    // Sustained-change test: along a curved ridge the per-cycle gain can dip
    // under tol while the parameters are still drifting steadily, so require
    // both a small gain and settled parameters for three cycles in a row.
    // Gains two orders under tol mean a genuinely flat objective — drifting
    // there only slides along a level set, so it counts as settled too. An
    // infinite tolerance keeps its single-cycle contract.
    const double drift =
        std::max({std::abs(next.theta - res.params.theta),
                  std::abs(next.sigma_h2 - res.params.sigma_h2) / (1.0 + std::abs(next.sigma_h2)),
                  std::abs(next.sigma_w2 - res.params.sigma_w2) / (1.0 + std::abs(next.sigma_w2))});
    res.params = next;
    const double gain_scale = std::max(1.0, std::abs(obj_post));
    const bool gain_small = std::abs(obj_post - prev_obj) < opts.tol * gain_scale;
    const bool gain_flat = std::abs(obj_post - prev_obj) < 0.01 * opts.tol * gain_scale;
    const bool settled = gain_small && (drift < 100.0 * opts.tol || gain_flat);
    small_gain_streak = settled ? small_gain_streak + 1 : 0;
    if (small_gain_streak >= 3 || (gain_small && !std::isfinite(opts.tol))) {
      res.trace.converged = true;
      res.trace.reason = "objective change below tolerance";
      prev_obj = obj_post;
      break;
    }
    prev_obj = obj_post;
  }
  if (!res.trace.converged) res.trace.reason = "iteration limit reached";
  return res;
}

EmResult run(const sim::ObservationSet& obs, const RunOptions& opts) {
  return run(obs, opts, default_init(obs));
}

}  // namespace backsense::em
