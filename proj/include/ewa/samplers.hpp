#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ewa/data.hpp"
#include "ewa/errors.hpp"
#include "ewa/nets.hpp"
#include "ewa/rng.hpp"

namespace ewa {

struct SamplerOptions {
  long steps = 100000;
  long burn_in = 10000;
  int thin = 100;
  std::vector<int> track_points;  // indices into the test split
  double loss_ceiling = 1e12;
};

// Observable-level record of one chain: losses and a configured subset of
// test predictors, never full parameter trajectories.
struct ChainRecord {
  std::string sampler;
  double step_size = 0.0;  // eta (LMC/MALA) or phi (pCN)
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  long steps = 0;
  long burn_in = 0;
  int thin = 1;
  std::vector<int> track_points;
  Eigen::VectorXd train_loss;  // per-pattern MSE series
  Eigen::VectorXd test_loss;
  Eigen::MatrixXd tracked;     // n_records x n_track test outputs
  double acceptance = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double data_mse(const ParamVector& theta, const Eigen::MatrixXd& x,
                       const Eigen::VectorXd& y, const NetworkSpec& spec) {
  const Eigen::VectorXd f = net_forward(theta, x, spec).outputs;
  return (f - y).squaredNorm() / static_cast<double>(y.size());
}

struct Recorder {
  const DatasetSplit& data;
  const NetworkSpec& spec;
  const SamplerOptions& opts;
  ChainRecord& rec;
  long n_records = 0;

  Recorder(const DatasetSplit& d, const NetworkSpec& s, const SamplerOptions& o, ChainRecord& r)
      : data(d), spec(s), opts(o), rec(r) {
    const long total = opts.steps > opts.burn_in ? (opts.steps - opts.burn_in) / opts.thin : 0;
    rec.train_loss.resize(total);
    rec.test_loss.resize(total);
    rec.tracked.resize(total, static_cast<Eigen::Index>(opts.track_points.size()));
  }

  void maybe_record(long step, const ParamVector& theta, double train_mse) {
    if (step <= opts.burn_in || (step - opts.burn_in) % opts.thin != 0) return;
    if (n_records >= rec.train_loss.size()) return;
    const Eigen::VectorXd f_test = net_forward(theta, data.x_test, spec).outputs;
    rec.train_loss[n_records] = train_mse;
    rec.test_loss[n_records] =
        (f_test - data.y_test).squaredNorm() / static_cast<double>(data.y_test.size());
    for (std::size_t k = 0; k < opts.track_points.size(); ++k)
      rec.tracked(n_records, static_cast<Eigen::Index>(k)) = f_test[opts.track_points[k]];
    ++n_records;
  }

  void trim() {
    rec.train_loss.conservativeResize(n_records);
    rec.test_loss.conservativeResize(n_records);
    rec.tracked.conservativeResize(n_records, Eigen::NoChange);
  }
};

inline void check_divergence(double loss, double ceiling, const char* who) {
  if (!std::isfinite(loss) || loss > ceiling)
    throw DivergenceError(std::string(who) + ": loss " + std::to_string(loss) +
                          " exceeded the ceiling; reduce the step size");
}

// Log proposal density ratio of the Langevin kernel,
// log q(prop -> cur) - log q(cur -> prop), for the MALA correction.
inline double langevin_log_q_ratio(const Eigen::VectorXd& cur, const Eigen::VectorXd& cur_grad,
                                   const Eigen::VectorXd& prop, const Eigen::VectorXd& prop_grad,
                                   double eta, double temperature) {
  const double denom = 4.0 * eta * temperature;
  const double fwd = (prop - cur + eta * cur_grad).squaredNorm();
  const double bwd = (cur - prop + eta * prop_grad).squaredNorm();
  return (fwd - bwd) / denom;
}

}  // namespace detail

// Discretized Langevin dynamics theta' = theta - eta grad L_reg + sqrt(2 T eta) xi.
// Burn-in is discarded; observables are recorded every `thin` steps. The
// record is a pure function of (spec, data, eta, opts, seed/stream).
inline ChainRecord lmc_run(const NetworkSpec& spec, const DatasetSplit& data, double eta,
                           const SamplerOptions& opts, RandomSource rng) {
  spec.validate();
  if (!(eta > 0.0)) throw DomainError("lmc_run: eta must be positive");
  ChainRecord rec;
  rec.sampler = "lmc";
  rec.step_size = eta;
  rec.seed = rng.seed();
  rec.stream = rng.stream();
  rec.steps = opts.steps;
  rec.burn_in = opts.burn_in;
  rec.thin = opts.thin;
  rec.track_points = opts.track_points;
  detail::Recorder recorder(data, spec, opts, rec);

  ParamVector theta = init_from_prior(spec, rng);
  const double noise = std::sqrt(2.0 * spec.temperature * eta);
  for (long t = 1; t <= opts.steps; ++t) {
    const LossGrad lg = loss_and_grad(theta, data.x_train, data.y_train, spec);
    detail::check_divergence(lg.loss_reg, opts.loss_ceiling, "lmc_run");
    for (Eigen::Index i = 0; i < theta.size(); ++i)
      theta.flat()[i] += -eta * lg.grad[i] + noise * rng.normal();
    recorder.maybe_record(t, theta,
                          2.0 * lg.data_loss / static_cast<double>(data.y_train.size()));
  }
  recorder.trim();
  return rec;
}

// Metropolis-adjusted Langevin: the same proposal corrected by the asymmetric
// acceptance ratio, so the chain is exact at any step size. Acceptance rate
// is recorded over the whole run.
inline ChainRecord mala_run(const NetworkSpec& spec, const DatasetSplit& data, double eta,
                            const SamplerOptions& opts, RandomSource rng) {
  spec.validate();
  if (!(eta > 0.0)) throw DomainError("mala_run: eta must be positive");
  ChainRecord rec;
  rec.sampler = "mala";
  rec.step_size = eta;
  rec.seed = rng.seed();
  rec.stream = rng.stream();
  rec.steps = opts.steps;
  rec.burn_in = opts.burn_in;
  rec.thin = opts.thin;
  rec.track_points = opts.track_points;
  detail::Recorder recorder(data, spec, opts, rec);

  ParamVector theta = init_from_prior(spec, rng);
  LossGrad lg = loss_and_grad(theta, data.x_train, data.y_train, spec);
  const double beta = 1.0 / spec.temperature;
  const double noise = std::sqrt(2.0 * spec.temperature * eta);
  long accepted = 0;
  ParamVector prop(spec);
  for (long t = 1; t <= opts.steps; ++t) {
    detail::check_divergence(lg.loss_reg, opts.loss_ceiling, "mala_run");
    for (Eigen::Index i = 0; i < theta.size(); ++i)
      prop.flat()[i] = theta.flat()[i] - eta * lg.grad[i] + noise * rng.normal();
    const LossGrad lgp = loss_and_grad(prop, data.x_train, data.y_train, spec);
    const double log_acc =
        -beta * (lgp.loss_reg - lg.loss_reg) +
        detail::langevin_log_q_ratio(theta.flat(), lg.grad, prop.flat(), lgp.grad, eta,
                                     spec.temperature);
    if (std::log(rng.uniform_pos()) < log_acc) {
      theta.flat().swap(prop.flat());
      lg = lgp;
      ++accepted;
    }
    recorder.maybe_record(t, theta,
                          2.0 * lg.data_loss / static_cast<double>(data.y_train.size()));
  }
  recorder.trim();
  rec.acceptance = static_cast<double>(accepted) / static_cast<double>(opts.steps);
  return rec;
}

// Preconditioned Crank-Nicolson: prior-preserving proposal
// theta' = sqrt(1-phi^2) theta + phi xi/sqrt(lambda_l) per weight layer,
// accepted on the likelihood alone, so beta = 0 reduces to prior sampling.
inline ChainRecord pcn_run(const NetworkSpec& spec, const DatasetSplit& data, double phi,
                           const SamplerOptions& opts, RandomSource rng) {
  spec.validate();
  if (!(phi > 0.0) || phi > 1.0) throw DomainError("pcn_run: phi must be in (0, 1]");
  ChainRecord rec;
  rec.sampler = "pcn";
  rec.step_size = phi;
  rec.seed = rng.seed();
  rec.stream = rng.stream();
  rec.steps = opts.steps;
  rec.burn_in = opts.burn_in;
  rec.thin = opts.thin;
  rec.track_points = opts.track_points;
  detail::Recorder recorder(data, spec, opts, rec);

  ParamVector theta = init_from_prior(spec, rng);
  const double beta = 1.0 / spec.temperature;
  double data_loss = 0.5 * detail::data_mse(theta, data.x_train, data.y_train, spec) *
                     static_cast<double>(data.y_train.size());
  const double keep = std::sqrt(1.0 - phi * phi);
  long accepted = 0;
  ParamVector prop(spec);
  for (long t = 1; t <= opts.steps; ++t) {
    detail::check_divergence(data_loss, opts.loss_ceiling, "pcn_run");
    for (int l = 1; l <= theta.n_layers(); ++l) {
      const double sd = 1.0 / std::sqrt(spec.lambdas.values()[static_cast<std::size_t>(l - 1)]);
      auto src = theta.layer(l);
      auto dst = prop.layer(l);
      for (Eigen::Index i = 0; i < src.size(); ++i)
        dst[i] = keep * src[i] + phi * sd * rng.normal();
    }
    const double prop_loss = 0.5 * detail::data_mse(prop, data.x_train, data.y_train, spec) *
                             static_cast<double>(data.y_train.size());
    if (std::log(rng.uniform_pos()) < -beta * (prop_loss - data_loss)) {
      theta.flat().swap(prop.flat());
      data_loss = prop_loss;
      ++accepted;
    }
    recorder.maybe_record(t, theta,
                          2.0 * data_loss / static_cast<double>(data.y_train.size()));
  }
  recorder.trim();
  rec.acceptance = static_cast<double>(accepted) / static_cast<double>(opts.steps);
  return rec;
}

// ---------------------------------------------------------------------------
// Diagnostics.

// Blocking analysis: error of the mean at doubling block sizes; the plateau
// value delta gives tau_int through delta^2 = sigma0^2 * 2 tau_int / N.
struct BlockingReport {
  std::vector<long> block_sizes;
  std::vector<double> errors;  // error of the mean per block size
  double mean = 0.0;
  double delta = 0.0;      // plateau estimate (largest-block value if absent)
  double tau_int = 0.5;
  double n_eff = 0.0;
  bool plateau_found = false;
  long plateau_block = 0;
};

inline BlockingReport blocking_error(const Eigen::VectorXd& series) {
  const long n = series.size();
  if (n < 128) throw TooShortError("blocking_error: need at least 128 samples");
  BlockingReport rep;
  rep.mean = series.mean();
  const double var0 = (series.array() - rep.mean).square().sum() / static_cast<double>(n - 1);

  for (long b = 1; n / b >= 32; b *= 2) {
    const long nb = n / b;
    double s = 0.0, s2 = 0.0;
    for (long k = 0; k < nb; ++k) {
      const double bm = series.segment(k * b, b).mean();
      s += bm;
      s2 += bm * bm;
    }
    const double mean_b = s / nb;
    const double var_b = (s2 / nb - mean_b * mean_b) * nb / (nb - 1.0);
    rep.block_sizes.push_back(b);
    rep.errors.push_back(std::sqrt(std::max(0.0, var_b) / nb));
  }
  // Plateau: first block size where successive estimates differ by < 5%.
  for (std::size_t i = 0; i + 1 < rep.errors.size(); ++i) {
    const double a = rep.errors[i], bnext = rep.errors[i + 1];
    if (a > 0.0 && std::abs(bnext - a) < 0.05 * a) {
      rep.plateau_found = true;
      rep.plateau_block = rep.block_sizes[i];
      rep.delta = bnext;
      break;
    }
  }
  if (!rep.plateau_found) rep.delta = rep.errors.back();
  rep.tau_int = var0 > 0.0 ? rep.delta * rep.delta * n / (2.0 * var0) : 0.5;
  rep.n_eff = n / (2.0 * rep.tau_int);
  return rep;
}

// Between/within-chain convergence statistic. R_hat = sqrt((W + B/n)/W): one
// exactly for identical chains, inflating with the between-chain spread.
struct GelmanRubin {
  Eigen::VectorXd r_hat;  // per observable
  double mean_r_hat = 0.0;
};

inline GelmanRubin gelman_rubin(const std::vector<Eigen::MatrixXd>& chains) {
  if (chains.size() < 2) throw TooFewChainsError("gelman_rubin: need at least 2 chains");
  const Eigen::Index n = chains.front().rows();
  const Eigen::Index k = chains.front().cols();
  for (const auto& c : chains)
    if (c.rows() != n || c.cols() != k) throw ShapeError("gelman_rubin: ragged chains");
  if (n < 2) throw TooShortError("gelman_rubin: chains too short");
  const double m = static_cast<double>(chains.size());
  GelmanRubin out;
  out.r_hat.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    double w = 0.0, grand = 0.0;
    std::vector<double> means;
    for (const auto& c : chains) {
      const double mu = c.col(j).mean();
      means.push_back(mu);
      grand += mu / m;
      w += (c.col(j).array() - mu).square().sum() / static_cast<double>(n - 1) / m;
    }
    double b_over_n = 0.0;
    for (const double mu : means) b_over_n += (mu - grand) * (mu - grand) / (m - 1.0);
    out.r_hat[j] = w > 0.0 ? std::sqrt((w + b_over_n) / w) : 1.0;
  }
  out.mean_r_hat = out.r_hat.mean();
  return out;
}

// Change-point segmentation on the running mean (binary segmentation): a
// split is accepted when the two segment means differ by more than
// `threshold` pooled standard errors, with autocorrelation folded in through
// the full-series blocking error. Each accepted window gets its own blocking
// analysis, enabling transient-vs-equilibrium averages.
struct PhaseWindow {
  long start = 0;  // [start, end)
  long end = 0;
  double mean = 0.0;
  double error = 0.0;
};

struct PhaseDetectorConfig {
  double threshold = 4.0;
  long min_segment = 128;
};

inline std::vector<PhaseWindow> phase_windows(const Eigen::VectorXd& series,
                                              const PhaseDetectorConfig& cfg = {}) {
  const long n = series.size();
  std::vector<long> cuts{0, n};
  if (n >= 2 * cfg.min_segment) {
    // Effective per-sample deviation including autocorrelation.
    double sigma_eff;
    try {
      const BlockingReport rep = blocking_error(series);
      sigma_eff = rep.delta * std::sqrt(static_cast<double>(n));
    } catch (const TooShortError&) {
      sigma_eff = std::sqrt((series.array() - series.mean()).square().sum() /
                            std::max<long>(1, n - 1));
    }
    if (sigma_eff <= 0.0) sigma_eff = 1e-300;

    Eigen::VectorXd prefix(n + 1);
    prefix[0] = 0.0;
    for (long i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + series[i];

    const std::function<void(long, long)> segment = [&](long lo, long hi) {
      if (hi - lo < 2 * cfg.min_segment) return;
      double best_z = 0.0;
      long best_k = -1;
      for (long k = lo + cfg.min_segment; k <= hi - cfg.min_segment; ++k) {
        const double ml = (prefix[k] - prefix[lo]) / static_cast<double>(k - lo);
        const double mr = (prefix[hi] - prefix[k]) / static_cast<double>(hi - k);
        const double se = sigma_eff * std::sqrt(1.0 / static_cast<double>(k - lo) +
                                                1.0 / static_cast<double>(hi - k));
        const double z = std::abs(ml - mr) / se;
        if (z > best_z) {
          best_z = z;
          best_k = k;
        }
      }
      if (best_k >= 0 && best_z > cfg.threshold) {
        cuts.push_back(best_k);
        segment(lo, best_k);
        segment(best_k, hi);
      }
    };
    segment(0, n);
  }
  std::sort(cuts.begin(), cuts.end());
  std::vector<PhaseWindow> out;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    PhaseWindow w;
    w.start = cuts[i];
    w.end = cuts[i + 1];
    const Eigen::VectorXd seg = series.segment(w.start, w.end - w.start);
    if (seg.size() >= 128) {
      const BlockingReport rep = blocking_error(seg);
      w.mean = rep.mean;
      w.error = rep.delta;
    } else {
      w.mean = seg.mean();
      w.error = seg.size() > 1 ? std::sqrt((seg.array() - w.mean).square().sum() /
                                           static_cast<double>(seg.size() - 1) /
                                           static_cast<double>(seg.size()))
                               : 0.0;
    }
    out.push_back(w);
  }
  return out;
}

}  // namespace ewa
