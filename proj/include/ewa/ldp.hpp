#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ewa/core.hpp"
#include "ewa/errors.hpp"
#include "ewa/nngp.hpp"
#include "ewa/parallel.hpp"
#include "ewa/rng.hpp"
#include "ewa/theory.hpp"

namespace ewa {

// Central rate function of a normalized chi-squared order parameter,
// I_q(x) = (x - 1 - ln x)/2; the same at every layer.
inline double rate_central(double x) {
  if (!(x > 0.0)) throw DomainError("rate_central: x must be positive");
  return 0.5 * (x - 1.0 - std::log(x));
}

// Contraction principle for the product of L i.i.d. factors:
// I_Q(y) = L * I_q(y^{1/L}).
inline double rate_product(double y, int L) {
  if (L < 1) throw DomainError("rate_product: L must be >= 1");
  if (!(y > 0.0)) throw DomainError("rate_product: y must be positive");
  return L * rate_central(std::pow(y, 1.0 / L));
}

// Legendre-Fenchel rate of the normalized non-central chi-squared variable:
// I(x) = sup_{t < (1+l)/2} [ t x - l t/(1+l-2t) + (1/2) ln(1 - 2t/(1+l)) ].
// The cumulant derivative is monotone, so the sup is a bracketed root;
// l = 0 reduces to rate_central.
inline double rate_noncentral(double x, double lambda_nc) {
  if (!(x > 0.0)) throw DomainError("rate_noncentral: x must be positive");
  if (lambda_nc < 0.0) throw DomainError("rate_noncentral: negative noncentrality");
  const double c = 1.0 + lambda_nc;
  const auto cumulant = [&](double t) {
    return lambda_nc * t / (c - 2.0 * t) - 0.5 * std::log(1.0 - 2.0 * t / c);
  };
  const auto dcumulant = [&](double t) {
    const double d = c - 2.0 * t;
    return lambda_nc * c / (d * d) + 1.0 / d;
  };
  // Solve dcumulant(t) = x. dcumulant is increasing with range (0, inf).
  double hi = c / 2.0 - 1e-12 * c;
  double lo = hi - c;
  while (dcumulant(lo) > x) lo -= 2.0 * (hi - lo);
  const double t = detail::brent_root([&](double tt) { return dcumulant(tt) - x; }, lo, hi,
                                      1e-15 * std::max(1.0, std::abs(hi)));
  return t * x - cumulant(t);
}

// Quadratic-expansion product rate for layer factors with quenched prefactors
// a_l around the homogeneous value 1: the disorder enters only through the
// harmonic mean. Base rate I_q(x) ~ (x-1)^2/4 near the minimum.
inline double toy_disorder_rate(double y, const std::vector<double>& a) {
  if (a.empty()) throw DomainError("toy_disorder_rate: empty prefactors");
  double inv_sum = 0.0;
  for (double v : a) {
    if (!(v > 0.0)) throw DomainError("toy_disorder_rate: prefactors must be positive");
    inv_sum += 1.0 / v;
  }
  const double l = static_cast<double>(a.size());
  const double prefactor = l / inv_sum;             // inverse harmonic mean of 1/a
  const double homogeneous = (y - 1.0) * (y - 1.0) / (4.0 * l);
  return prefactor * homogeneous;
}

// ---------------------------------------------------------------------------
// Empirical rates.

struct RateCurve {
  Eigen::VectorXd x;        // bin centers
  Eigen::VectorXd rate;     // min-shifted -ln(density)/a_N
  Eigen::VectorXd ci_low;   // bootstrap band (same shift convention)
  Eigen::VectorXd ci_high;
  double a_n = 1.0;         // LDP speed used for the scaling
  int n_samples = 0;
  std::string meta;
};

// Histogram rate on equal-probability bins: stable tails, no empty interior
// bins. Bins left with fewer than 5 counts (possible after merging tied
// quantile edges) are dropped; the unknown O(ln N/N) normalization offset is
// removed by shifting the minimum to zero.
inline RateCurve empirical_rate(const Eigen::VectorXd& samples, double n_scale, int n_bins = 40,
                                int n_boot = 100, std::uint64_t boot_seed = 9001) {
  if (samples.size() < 1000) throw TooFewSamplesError("empirical_rate: need at least 1000 samples");
  if (n_bins < 2) throw DomainError("empirical_rate: need at least 2 bins");
  std::vector<double> sorted(samples.data(), samples.data() + samples.size());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();

  // Degenerate case: all samples identical.
  if (sorted.front() == sorted.back()) {
    RateCurve out;
    out.x = Eigen::VectorXd::Constant(1, sorted.front());
    out.rate = Eigen::VectorXd::Zero(1);
    out.ci_low = Eigen::VectorXd::Zero(1);
    out.ci_high = Eigen::VectorXd::Zero(1);
    out.a_n = n_scale;
    out.n_samples = static_cast<int>(n);
    return out;
  }

  std::vector<double> edges;
  edges.push_back(sorted.front());
  for (int b = 1; b < n_bins; ++b) {
    const double e = sorted[(n * static_cast<std::size_t>(b)) / static_cast<std::size_t>(n_bins)];
    if (e > edges.back()) edges.push_back(e);
  }
  const double last = sorted.back() * (1.0 + 1e-12) + 1e-300;
  if (last > edges.back()) edges.push_back(last);
  const std::size_t nb = edges.size() - 1;

  const auto histogram = [&](const std::vector<double>& data) {
    std::vector<double> counts(nb, 0.0);
    for (double v : data) {
      const auto it = std::upper_bound(edges.begin(), edges.end(), v);
      std::size_t k = static_cast<std::size_t>(std::distance(edges.begin(), it));
      if (k == 0) k = 1;
      if (k > nb) k = nb;
      counts[k - 1] += 1.0;
    }
    return counts;
  };
  const auto to_rate = [&](const std::vector<double>& counts, std::vector<double>& rate,
                           std::vector<bool>& keep) {
    rate.assign(nb, 0.0);
    keep.assign(nb, false);
    double shift = 1e300;
    for (std::size_t b = 0; b < nb; ++b) {
      if (counts[b] < 5.0) continue;
      const double width = edges[b + 1] - edges[b];
      const double dens = counts[b] / (static_cast<double>(n) * width);
      rate[b] = -std::log(dens) / n_scale;
      keep[b] = true;
      shift = std::min(shift, rate[b]);
    }
    for (std::size_t b = 0; b < nb; ++b)
      if (keep[b]) rate[b] -= shift;
  };

  std::vector<double> base_rate;
  std::vector<bool> keep;
  to_rate(histogram(sorted), base_rate, keep);

  // Percentile bootstrap on the fixed bin edges.
  std::vector<std::vector<double>> boots(static_cast<std::size_t>(std::max(0, n_boot)));
  RandomSource brng(boot_seed);
  for (int rep = 0; rep < n_boot; ++rep) {
    std::vector<double> resampled(n);
    for (std::size_t i = 0; i < n; ++i)
      resampled[i] = sorted[static_cast<std::size_t>(brng.uniform() * n) % n];
    std::vector<double> r;
    std::vector<bool> k;
    to_rate(histogram(resampled), r, k);
    for (std::size_t b = 0; b < nb; ++b)
      if (!k[b]) r[b] = std::numeric_limits<double>::quiet_NaN();
    boots[static_cast<std::size_t>(rep)] = std::move(r);
  }

  RateCurve out;
  std::vector<double> xs, rs, lo, hi;
  for (std::size_t b = 0; b < nb; ++b) {
    if (!keep[b]) continue;
    xs.push_back(0.5 * (edges[b] + edges[b + 1]));
    rs.push_back(base_rate[b]);
    std::vector<double> column;
    for (const auto& r : boots)
      if (!std::isnan(r[b])) column.push_back(r[b]);
    if (column.size() >= 10) {
      std::sort(column.begin(), column.end());
      lo.push_back(column[static_cast<std::size_t>(0.025 * (column.size() - 1))]);
      hi.push_back(column[static_cast<std::size_t>(0.975 * (column.size() - 1))]);
    } else {
      lo.push_back(rs.back());
      hi.push_back(rs.back());
    }
  }
  out.x = Eigen::Map<Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  out.rate = Eigen::Map<Eigen::VectorXd>(rs.data(), static_cast<Eigen::Index>(rs.size()));
  out.ci_low = Eigen::Map<Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
  out.ci_high = Eigen::Map<Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  out.a_n = n_scale;
  out.n_samples = static_cast<int>(n);
  return out;
}

inline void write_rate_curve_csv(const std::string& path, const RateCurve& curve,
                                 const std::function<double(double)>& theory) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw Error("write_rate_curve_csv: cannot open " + path);
  std::fprintf(f, "# a_N=%.17g n_samples=%d %s\n", curve.a_n, curve.n_samples,
               curve.meta.c_str());
  std::fprintf(f, "x,I_emp,CI_low,CI_high,I_theory\n");
  for (Eigen::Index i = 0; i < curve.x.size(); ++i)
    std::fprintf(f, "%.17g,%.17g,%.17g,%.17g,%.17g\n", curve.x[i], curve.rate[i], curve.ci_low[i],
                 curve.ci_high[i], theory ? theory(curve.x[i]) : 0.0);
  std::fclose(f);
}

// ---------------------------------------------------------------------------
// Prior sampling of the order parameters.

// One batch of layer variables q_l^(m) produced against a fixed dual vector
// fbar; products ready for the product-rate analysis. lambda_nc is filled by
// the conditional procedure (zero in joint mode).
struct QSampleBatch {
  Eigen::MatrixXd q;          // M x L
  Eigen::VectorXd product;    // M
  Eigen::VectorXd fbar;       // fixed across the batch
  Eigen::VectorXd lambda_nc;  // per layer (conditional mode)
};

namespace detail {

inline double contract(const Eigen::VectorXd& f, const KernelMatrix& k) {
  return f.dot(k.mat() * f);
}

inline Eigen::VectorXd unit_sphere(Eigen::Index n, RandomSource& rng) {
  Eigen::VectorXd v = rng.normal_vector(n);
  return v / v.norm();
}

}  // namespace detail

// Joint sampling: each sample draws the full chain of empirical kernels
// layer by layer (Gaussian pre-activation columns on the previous kernel),
// composes the remaining kernel maps, and contracts with the shared fbar.
// q_l = t_l / t_{l-1} with t_l = fbar' Theta^{L-l}(K_l) fbar telescopes the
// denominators. Sample m consumes RNG stream rng.stream() + 1 + m; fbar is
// drawn from the master stream (its normalization is irrelevant).
inline QSampleBatch sample_q_batch(const KernelMatrix& c, int L, Activation act,
                                   const LayerPrecisions& lams, int n_dof, int m_samples,
                                   RandomSource rng) {
  if (L < 1) throw ConfigError("sample_q_batch: L must be >= 1");
  if (n_dof < 1 || m_samples < 1) throw DomainError("sample_q_batch: bad sizes");
  if (lams.depth() < L) throw ShapeError("sample_q_batch: precisions shorter than depth");

  QSampleBatch out;
  out.fbar = detail::unit_sphere(c.dim(), rng);
  out.lambda_nc = Eigen::VectorXd::Zero(L);
  out.q.resize(m_samples, L);
  out.product.resize(m_samples);

  KernelMatrix theta_full = c;
  for (int l = 1; l <= L; ++l) theta_full = nngp_step(theta_full, act, lams.step(l));
  const double t0 = detail::contract(out.fbar, theta_full);

  parallel_for(static_cast<std::size_t>(m_samples), [&](std::size_t m) {
    RandomSource sr = rng.fork(rng.stream() + 1 + m);
    KernelMatrix k = c;
    double t_prev = t0;
    for (int l = 1; l <= L; ++l) {
      const Eigen::MatrixXd h = sample_gaussian_columns(k, n_dof, sr);
      k = empirical_kernel(h, act, lams.step(l), n_dof);
      KernelMatrix composed = k;
      for (int j = l + 1; j <= L; ++j) composed = nngp_step(composed, act, lams.step(j));
      const double t = detail::contract(out.fbar, composed);
      out.q(static_cast<Eigen::Index>(m), l - 1) = t / t_prev;
      t_prev = t;
    }
    out.product[static_cast<Eigen::Index>(m)] = t_prev / t0;
  });
  return out;
}

// Conditional sampling: one reference kernel chain K*_0..K*_L; per layer the
// denominator contraction is held fixed while M fresh draws K_l | K*_{l-1}
// produce q_l^(m). fbar is built with the prescribed overlap with the
// last-layer activation mean m_L; for zero-mean activations only overlap = 0
// is meaningful. The per-layer noncentrality lambda_nc = (f'm)^2 / (f'Sigma f)
// is recorded for the theory curves.
inline QSampleBatch conditional_sample_q(const KernelMatrix& c, int L, Activation act,
                                         const LayerPrecisions& lams, int n_dof, int m_samples,
                                         RandomSource rng, double overlap) {
  if (L < 1) throw ConfigError("conditional_sample_q: L must be >= 1");
  if (overlap < 0.0 || overlap > 1.0)
    throw DomainError("conditional_sample_q: overlap must be in [0, 1]");

  // Reference chain.
  std::vector<KernelMatrix> ref{c};
  for (int l = 1; l <= L; ++l) {
    const Eigen::MatrixXd h = sample_gaussian_columns(ref.back(), n_dof, rng);
    ref.push_back(empirical_kernel(h, act, lams.step(l), n_dof));
  }

  // fbar with the prescribed overlap against m_L = m(K*_{L-1}).
  const Eigen::VectorXd m_last = activation_mean(ref[static_cast<std::size_t>(L - 1)], act);
  Eigen::VectorXd fbar;
  if (m_last.norm() < 1e-12) {
    if (overlap != 0.0)
      throw DomainError("conditional_sample_q: nonzero overlap with a zero-mean activation");
    fbar = detail::unit_sphere(c.dim(), rng);
  } else {
    const Eigen::VectorXd u = m_last / m_last.norm();
    Eigen::VectorXd v = rng.normal_vector(c.dim());
    v -= v.dot(u) * u;
    v /= v.norm();
    fbar = overlap * u + std::sqrt(1.0 - overlap * overlap) * v;
  }

  QSampleBatch out;
  out.fbar = fbar;
  out.q.resize(m_samples, L);
  out.product.resize(m_samples);
  out.lambda_nc.resize(L);

  for (int l = 1; l <= L; ++l) {
    // V_l = Theta^{L-l}(K*_{l-1}) via steps l..L-1; one more step (lambda_L)
    // gives the fixed denominator kernel.
    KernelMatrix v = ref[static_cast<std::size_t>(l - 1)];
    for (int j = l; j <= L - 1; ++j) v = nngp_step(v, act, lams.step(j));
    const KernelMatrix denom_kernel = nngp_step(v, act, lams.step(L));
    const double denom = detail::contract(fbar, denom_kernel);
    const Eigen::VectorXd ml = activation_mean(v, act);
    const Eigen::MatrixXd sigma =
        lams.step(L) * denom_kernel.mat() - ml * ml.transpose();
    const double fsf = fbar.dot(sigma * fbar);
    out.lambda_nc[l - 1] = fsf > 0.0 ? (fbar.dot(ml) * fbar.dot(ml)) / fsf : 0.0;

    const CholeskyPsd chol = cholesky_psd(ref[static_cast<std::size_t>(l - 1)]);
    parallel_for(static_cast<std::size_t>(m_samples), [&](std::size_t m) {
      RandomSource sr = rng.fork(rng.stream() + 1 + static_cast<std::uint64_t>(l) * 1000003u +
                                 static_cast<std::uint64_t>(m));
      Eigen::MatrixXd h(c.dim(), n_dof);
      for (int col = 0; col < n_dof; ++col)
        h.col(col) = chol.factor.triangularView<Eigen::Lower>() * sr.normal_vector(c.dim());
      KernelMatrix k = empirical_kernel(h, act, lams.step(l), n_dof);
      for (int j = l + 1; j <= L; ++j) k = nngp_step(k, act, lams.step(j));
      out.q(static_cast<Eigen::Index>(m), l - 1) = detail::contract(fbar, k) / denom;
    });
  }
  for (Eigen::Index m = 0; m < m_samples; ++m) {
    double prod = 1.0;
    for (int l = 0; l < L; ++l) prod *= out.q(m, l);
    out.product[m] = prod;
  }
  return out;
}

}  // namespace ewa
