#pragma once

#include <cmath>
#include <string>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "ewa/errors.hpp"
#include "ewa/rng.hpp"

namespace ewa {

// Symmetric PSD-up-to-jitter covariance-like matrix. Construction rejects
// matrices whose asymmetry exceeds 1e-12 relative and stores the exactly
// symmetrized part; positive semidefiniteness is enforced lazily by the
// jittered Cholesky whenever a factorization is needed.
class KernelMatrix {
 public:
  explicit KernelMatrix(Eigen::MatrixXd m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols()) throw ShapeError("KernelMatrix: matrix is not square");
    const double scale = std::max(1e-300, m_.cwiseAbs().maxCoeff());
    const double asym = (m_ - m_.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * std::max(1.0, scale))
      throw ShapeError("KernelMatrix: asymmetry " + std::to_string(asym / scale) +
                       " exceeds 1e-12 relative");
    m_ = ((m_ + m_.transpose()) * 0.5).eval();
  }

  static KernelMatrix identity(Eigen::Index dim) {
    return KernelMatrix(Eigen::MatrixXd::Identity(dim, dim));
  }
  static KernelMatrix zero(Eigen::Index dim) {
    return KernelMatrix(Eigen::MatrixXd::Zero(dim, dim));
  }

  Eigen::Index dim() const { return m_.rows(); }
  const Eigen::MatrixXd& mat() const { return m_; }

 private:
  Eigen::MatrixXd m_;
};

// Jitter escalation ladder: the requested value first, then 1e-12 -> 1e-6 in
// decade steps. Deep kernels at criticality sit close to rank deficiency, so
// a failed factorization is retried rather than fatal until the cap.
inline constexpr double kJitterFloor = 1e-12;
inline constexpr double kJitterCap = 1e-6;

struct CholeskyPsd {
  Eigen::MatrixXd factor;  // lower triangular, factor * factor^T = K + jitter*I
  double jitter = 0.0;     // the jitter actually used
};

inline CholeskyPsd cholesky_psd(const KernelMatrix& K, double jitter = 0.0) {
  if (jitter < 0.0) throw DomainError("cholesky_psd: negative jitter");
  const Eigen::Index n = K.dim();
  double j = jitter;
  while (true) {
    Eigen::MatrixXd a = K.mat();
    if (j > 0.0) a.diagonal().array() += j;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() == Eigen::Success) return {Eigen::MatrixXd(llt.matrixL()), j};
    if (j >= kJitterCap)
      throw NotPsdError("cholesky_psd: factorization failed at jitter cap " +
                        std::to_string(kJitterCap) + " (dim " + std::to_string(n) + ")");
    j = (j < kJitterFloor) ? kJitterFloor : j * 10.0;
    if (j > kJitterCap) j = kJitterCap;
  }
}

inline Eigen::MatrixXd solve_psd(const KernelMatrix& K, const Eigen::MatrixXd& b,
                                 double jitter = 0.0) {
  if (b.rows() != K.dim()) throw ShapeError("solve_psd: row count mismatch");
  const CholeskyPsd c = cholesky_psd(K, jitter);
  Eigen::MatrixXd x = c.factor.triangularView<Eigen::Lower>().solve(b);
  c.factor.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

inline double logdet_psd(const KernelMatrix& K, double jitter = 0.0) {
  const CholeskyPsd c = cholesky_psd(K, jitter);
  return 2.0 * c.factor.diagonal().array().log().sum();
}

// Columns i.i.d. N(0, K), generated as L*z with z standard normal filled
// column-major. An exactly-zero kernel short-circuits to zero columns so the
// jitter ladder does not manufacture noise out of a degenerate covariance.
inline Eigen::MatrixXd sample_gaussian_columns(const KernelMatrix& K, Eigen::Index n_cols,
                                               RandomSource& rng, double jitter = 0.0) {
  if (K.mat().isZero(0.0)) return Eigen::MatrixXd::Zero(K.dim(), n_cols);
  const CholeskyPsd c = cholesky_psd(K, jitter);
  Eigen::MatrixXd g(K.dim(), n_cols);
  for (Eigen::Index j = 0; j < n_cols; ++j) {
    Eigen::VectorXd z = rng.normal_vector(K.dim());
    g.col(j).noalias() = c.factor.triangularView<Eigen::Lower>() * z;
  }
  return g;
}

struct WishartSpec {
  KernelMatrix scale;  // V
  int dof;             // N >= 1

  WishartSpec(KernelMatrix v, int n) : scale(std::move(v)), dof(n) {
    if (dof < 1) throw DomainError("WishartSpec: dof must be >= 1");
  }
};

// R = G G^T with G columns i.i.d. N(0, V); E[R] = N*V.
inline KernelMatrix sample_wishart(const WishartSpec& spec, RandomSource& rng) {
  const Eigen::MatrixXd g = sample_gaussian_columns(spec.scale, spec.dof, rng);
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(spec.scale.dim(), spec.scale.dim());
  r.selfadjointView<Eigen::Lower>().rankUpdate(g);
  r.triangularView<Eigen::StrictlyUpper>() = r.transpose();
  return KernelMatrix(std::move(r));
}

// s'Rs / s'Vs; chi-squared with N dof when R ~ W_P(V, N). Callers apply the
// q = Q/N normalization themselves.
inline double chi2_contraction(const KernelMatrix& R, const KernelMatrix& V,
                               const Eigen::VectorXd& s, double tol = 1e-12) {
  if (s.size() != R.dim() || s.size() != V.dim())
    throw ShapeError("chi2_contraction: direction length mismatch");
  const double den = s.dot(V.mat() * s);
  if (!(den > tol))
    throw DegenerateDirectionError("chi2_contraction: s'Vs = " + std::to_string(den) +
                                   " not above tolerance");
  return s.dot(R.mat() * s) / den;
}

}  // namespace ewa
