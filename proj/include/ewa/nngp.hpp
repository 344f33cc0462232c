#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ewa/core.hpp"
#include "ewa/errors.hpp"

namespace ewa {

enum class Activation { Identity, Erf, Relu };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Erf: return "erf";
    case Activation::Relu: return "relu";
  }
  return "?";
}

inline double activation_apply(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return x;
    case Activation::Erf: return std::erf(x);
    case Activation::Relu: return x > 0.0 ? x : 0.0;
  }
  return x;
}

inline double activation_deriv(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return 1.0;
    case Activation::Erf: return 1.1283791670955126 * std::exp(-x * x);  // 2/sqrt(pi)
    case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

// Per-weight-layer prior precisions for a depth-L network: entry 0 normalizes
// the input Gram (first-layer weights), entry l drives the l-th kernel map,
// entry L is the readout. mu-P rescales the readout entry.
class LayerPrecisions {
 public:
  explicit LayerPrecisions(std::vector<double> v) : v_(std::move(v)) {
    if (v_.empty()) throw DomainError("LayerPrecisions: empty");
    for (double x : v_)
      if (!(x > 0.0)) throw DomainError("LayerPrecisions: all entries must be positive");
  }

  static LayerPrecisions uniform(int depth, double lambda) {
    return LayerPrecisions(std::vector<double>(static_cast<std::size_t>(depth) + 1, lambda));
  }

  int depth() const { return static_cast<int>(v_.size()) - 1; }
  double input() const { return v_.front(); }
  double step(int l) const { return v_.at(static_cast<std::size_t>(l)); }  // l = 1..depth
  double readout() const { return v_.back(); }
  double& readout() { return v_.back(); }
  const std::vector<double>& values() const { return v_; }

 private:
  std::vector<double> v_;
};

// C = X X^T / (lambda0 * N0), the data Gram in covariance units.
inline KernelMatrix gram_matrix(const Eigen::MatrixXd& x, double lambda0) {
  if (x.cols() < 1) throw ShapeError("gram_matrix: empty input dimension");
  if (!(lambda0 > 0.0)) throw DomainError("gram_matrix: lambda0 must be positive");
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(x.rows(), x.rows());
  c.selfadjointView<Eigen::Lower>().rankUpdate(x, 1.0 / (lambda0 * static_cast<double>(x.cols())));
  c.triangularView<Eigen::StrictlyUpper>() = c.transpose();
  return KernelMatrix(std::move(c));
}

namespace detail {
// Duplicate inputs produce correlation 1 up to floating error; clamping keeps
// asin/acos inside their domain (acos(1) = 0 exactly, so coincident points
// stay exact).
inline double clamp_corr(double r) { return r < -1.0 ? -1.0 : (r > 1.0 ? 1.0 : r); }
}  // namespace detail

// One entry of the one-layer kernel map: (1/lambda) E[sigma(h1) sigma(h2)]
// under the bivariate Gaussian with variances k11, k22 and covariance k12.
// Closed forms (arcsine kernel for Erf, arc-cosine for ReLU) are gated by the
// Monte-Carlo oracle in the test suite.
inline double nngp_entry(Activation act, double k11, double k22, double k12, double lambda) {
  switch (act) {
    case Activation::Identity:
      return k12 / lambda;
    case Activation::Erf: {
      if (k11 <= 0.0 || k22 <= 0.0)
        throw NonpositiveDiagonalError("nngp_entry: Erf needs positive self-variances");
      const double r = detail::clamp_corr(2.0 * k12 / std::sqrt((1.0 + 2.0 * k11) * (1.0 + 2.0 * k22)));
      return 2.0 / (M_PI * lambda) * std::asin(r);
    }
    case Activation::Relu: {
      if (k11 <= 0.0 || k22 <= 0.0)
        throw NonpositiveDiagonalError("nngp_entry: ReLU needs positive self-variances");
      const double s = std::sqrt(k11 * k22);
      const double theta = std::acos(detail::clamp_corr(k12 / s));
      return s / (2.0 * M_PI * lambda) * (std::sin(theta) + (M_PI - theta) * std::cos(theta));
    }
  }
  return 0.0;
}

inline KernelMatrix nngp_step(const KernelMatrix& K, Activation act, double lambda) {
  if (!(lambda > 0.0)) throw DomainError("nngp_step: lambda must be positive");
  const Eigen::Index p = K.dim();
  const Eigen::MatrixXd& k = K.mat();
  Eigen::MatrixXd out(p, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = nngp_entry(act, k(i, i), k(j, j), k(i, j), lambda);
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return KernelMatrix(std::move(out));
}

// Theta^L(C) = Theta_{lambda_L} o ... o Theta_{lambda_1}(C); L = 0 returns C.
inline KernelMatrix nngp_compose(KernelMatrix C, int L, Activation act,
                                 const LayerPrecisions& lams) {
  if (L < 0) throw DomainError("nngp_compose: negative depth");
  if (lams.depth() < L) throw ShapeError("nngp_compose: precisions shorter than depth");
  for (int l = 1; l <= L; ++l) {
    try {
      C = nngp_step(C, act, lams.step(l));
    } catch (const Error& e) {
      throw NonpositiveDiagonalError("nngp_compose: step " + std::to_string(l) + ": " + e.what());
    }
  }
  return C;
}

// Train/cross/self blocks of Theta^L over the joined train+test inputs.
// Composing once on the joined Gram guarantees the cross kernels are
// consistent with the train kernel, so the assembled matrix stays PSD.
struct JointKernel {
  KernelMatrix train;        // P x P
  Eigen::MatrixXd cross;     // P x P_t
  Eigen::VectorXd test_self;  // P_t
};

inline JointKernel joint_kernel(const Eigen::MatrixXd& x_train, const Eigen::MatrixXd& x_test,
                                int L, Activation act, const LayerPrecisions& lams) {
  if (x_train.cols() != x_test.cols()) throw ShapeError("joint_kernel: input dimension mismatch");
  const Eigen::Index p = x_train.rows(), pt = x_test.rows();
  Eigen::MatrixXd joined(p + pt, x_train.cols());
  joined.topRows(p) = x_train;
  joined.bottomRows(pt) = x_test;
  const KernelMatrix full = nngp_compose(gram_matrix(joined, lams.input()), L, act, lams);
  return JointKernel{KernelMatrix(full.mat().topLeftCorner(p, p)),
                     full.mat().topRightCorner(p, pt),
                     full.mat().bottomRightCorner(pt, pt).diagonal()};
}

// Mean vector and covariance of the post-activations under N(0, K):
// lambda * Theta(K) = Sigma + m m^T holds identically.
struct ActivationMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline Eigen::VectorXd activation_mean(const KernelMatrix& K, Activation act) {
  const Eigen::Index p = K.dim();
  Eigen::VectorXd m(p);
  switch (act) {
    case Activation::Identity:
    case Activation::Erf:
      m.setZero();
      break;
    case Activation::Relu:
      for (Eigen::Index i = 0; i < p; ++i) {
        const double v = K.mat()(i, i);
        if (v <= 0.0) throw NonpositiveDiagonalError("activation_mean: ReLU self-variance <= 0");
        m[i] = std::sqrt(v / (2.0 * M_PI));
      }
      break;
  }
  return m;
}

inline ActivationMoments activation_mean_cov(const KernelMatrix& K, Activation act,
                                             double lambda) {
  ActivationMoments out;
  out.mean = activation_mean(K, act);
  out.cov = lambda * nngp_step(K, act, lambda).mat() - out.mean * out.mean.transpose();
  return out;
}

}  // namespace ewa
