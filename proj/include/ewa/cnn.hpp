#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ewa/core.hpp"
#include "ewa/errors.hpp"
#include "ewa/nets.hpp"
#include "ewa/nngp.hpp"
#include "ewa/theory.hpp"

namespace ewa {

// Patch-indexed covariance for 1D convolutional architectures: an
// N_p x N_p grid of P x P blocks stored as one symmetric matrix, row index
// i*P + mu (patch-major). Global symmetry gives the block symmetry
// G_ij = G_ji^T for free.
class StackedKernel {
 public:
  StackedKernel(int n_patches, Eigen::MatrixXd m) : np_(n_patches), m_(std::move(m)) {
    if (np_ < 1) throw DomainError("StackedKernel: need at least one patch");
    if (m_.rows() != m_.cols() || m_.rows() % np_ != 0)
      throw ShapeError("StackedKernel: matrix not a square patch grid");
    const double scale = std::max(1e-300, m_.cwiseAbs().maxCoeff());
    if ((m_ - m_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, scale))
      throw ShapeError("StackedKernel: not symmetric");
    m_ = ((m_ + m_.transpose()) * 0.5).eval();
  }

  int n_patches() const { return np_; }
  Eigen::Index p() const { return m_.rows() / np_; }
  const Eigen::MatrixXd& mat() const { return m_; }

  Eigen::Block<const Eigen::MatrixXd> block(int i, int j) const {
    return m_.block(static_cast<Eigen::Index>(i) * p(), static_cast<Eigen::Index>(j) * p(), p(),
                    p());
  }

 private:
  int np_;
  Eigen::MatrixXd m_;
};

// First-layer patch Gram: [G_ii']^{mu nu} = (1/(lambda0 M A0)) sum_{a0,m}
// x^mu_{iS+m,a0} x^nu_{i'S+m,a0}. Window of patch i starts at position i*S
// (0-based) and spans M taps, zero-padded outside the signal, so M = S tiles
// exactly and one patch with M = S = N0 reduces to the FC Gram X X^T/(lambda0 N0).
// This equals omega applied to the channel-averaged translational Gram.
inline StackedKernel patch_gram(const Eigen::MatrixXd& x, const ConvSpec& conv, double lambda0) {
  const auto np = conv.patch_counts();
  const int n_p = np.front();
  const int stride = conv.strides.front();
  const int a0 = conv.in_channels;
  const int mask = conv.mask;
  const Eigen::Index p = x.rows();
  if (x.cols() != static_cast<Eigen::Index>(conv.input_len) * a0)
    throw ShapeError("patch_gram: input layout mismatch (want P x N0*A0, position-major)");
  if (!(lambda0 > 0.0)) throw DomainError("patch_gram: lambda0 must be positive");

  std::vector<Eigen::MatrixXd> patches(static_cast<std::size_t>(n_p));
  Eigen::MatrixXd buf(p, static_cast<Eigen::Index>(mask) * a0);
  for (int i = 0; i < n_p; ++i) {
    detail::fill_patch(x, conv.input_len, a0, i, stride, mask, buf);
    patches[static_cast<std::size_t>(i)] = buf;
  }
  const double norm = 1.0 / (lambda0 * mask * a0);
  Eigen::MatrixXd g(static_cast<Eigen::Index>(n_p) * p, static_cast<Eigen::Index>(n_p) * p);
  for (int i = 0; i < n_p; ++i)
    for (int j = 0; j <= i; ++j) {
      const Eigen::MatrixXd b =
          patches[static_cast<std::size_t>(i)] * patches[static_cast<std::size_t>(j)].transpose() *
          norm;
      g.block(static_cast<Eigen::Index>(i) * p, static_cast<Eigen::Index>(j) * p, p, p) = b;
      if (i != j)
        g.block(static_cast<Eigen::Index>(j) * p, static_cast<Eigen::Index>(i) * p, p, p) =
            b.transpose();
    }
  return StackedKernel(n_p, std::move(g));
}

// Cross-covariance map: [omega(K)]_{i,i'} = (1/M) sum_m K_{iS+m, i'S+m},
// linear, patch count shrinks by the stride, PSD preserved (it is an average
// of principal compressions).
inline StackedKernel omega_map(const StackedKernel& k, int stride, int mask) {
  if (stride < 1 || mask < 1) throw DomainError("omega_map: bad stride/mask");
  const int np_in = k.n_patches();
  const int np_out = np_in / stride;
  if (np_out < 1) throw PatchUnderflowError("omega_map: stride exhausts patches");
  const Eigen::Index p = k.p();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(np_out) * p,
                                              static_cast<Eigen::Index>(np_out) * p);
  for (int i = 0; i < np_out; ++i)
    for (int j = 0; j <= i; ++j) {
      Eigen::MatrixXd b = Eigen::MatrixXd::Zero(p, p);
      for (int m = 0; m < mask; ++m) {
        const int pi = i * stride + m;
        const int pj = j * stride + m;
        if (pi >= np_in || pj >= np_in) continue;  // zero padding
        b += k.block(pi, pj);
      }
      b /= static_cast<double>(mask);
      out.block(static_cast<Eigen::Index>(i) * p, static_cast<Eigen::Index>(j) * p, p, p) = b;
      if (i != j)
        out.block(static_cast<Eigen::Index>(j) * p, static_cast<Eigen::Index>(i) * p, p, p) =
            b.transpose();
    }
  return StackedKernel(np_out, std::move(out));
}

// Entrywise kernel map on the stacked grid; entry ((i,mu),(j,nu)) uses the
// self-variances G^{mumu}_{ii} and G^{nunu}_{jj}.
inline StackedKernel stacked_nngp_step(const StackedKernel& g, Activation act, double lambda) {
  const Eigen::Index n = g.mat().rows();
  const Eigen::MatrixXd& m = g.mat();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b <= a; ++b) {
      const double v = nngp_entry(act, m(a, a), m(b, b), m(a, b), lambda);
      out(a, b) = v;
      out(b, a) = v;
    }
  return StackedKernel(g.n_patches(), std::move(out));
}

// (Theta o omega)^L applied to the position-level stacked input; records the
// patch-count trajectory. Layer l applies omega with stride S_l then the
// kernel map with lambda_l.
struct CnnComposeResult {
  StackedKernel kernel;
  std::vector<int> patch_counts;
};

inline CnnComposeResult cnn_compose(const StackedKernel& input_level, const ConvSpec& conv, int L,
                                    Activation act, const LayerPrecisions& lams) {
  if (L < 1) throw DomainError("cnn_compose: L must be >= 1");
  if (static_cast<int>(conv.strides.size()) < L) throw ShapeError("cnn_compose: strides short");
  if (lams.depth() < L) throw ShapeError("cnn_compose: precisions short");
  StackedKernel k = input_level;
  std::vector<int> counts;
  for (int l = 1; l <= L; ++l) {
    k = omega_map(k, conv.strides[static_cast<std::size_t>(l - 1)], conv.mask);
    k = stacked_nngp_step(k, act, lams.step(l));
    counts.push_back(k.n_patches());
  }
  return {std::move(k), std::move(counts)};
}

// Position-level stacked kernel of the raw inputs (the channel-averaged
// translational Gram): [C_{pq}]^{mu nu} = (1/(lambda0 A0)) sum_a x^mu_{p,a} x^nu_{q,a}.
// patch_gram(x) equals omega applied to this object with the first-layer
// stride; materializing it is only sensible for small N0.
inline StackedKernel input_level_gram(const Eigen::MatrixXd& x, const ConvSpec& conv,
                                      double lambda0) {
  const int n0 = conv.input_len, a0 = conv.in_channels;
  const Eigen::Index p = x.rows();
  Eigen::MatrixXd c(static_cast<Eigen::Index>(n0) * p, static_cast<Eigen::Index>(n0) * p);
  for (int i = 0; i < n0; ++i)
    for (int j = 0; j <= i; ++j) {
      Eigen::MatrixXd b = Eigen::MatrixXd::Zero(p, p);
      for (int a = 0; a < a0; ++a)
        b += x.col(static_cast<Eigen::Index>(i) * a0 + a) *
             x.col(static_cast<Eigen::Index>(j) * a0 + a).transpose();
      b /= lambda0 * a0;
      c.block(static_cast<Eigen::Index>(i) * p, static_cast<Eigen::Index>(j) * p, p, p) = b;
      if (i != j)
        c.block(static_cast<Eigen::Index>(j) * p, static_cast<Eigen::Index>(i) * p, p, p) =
            b.transpose();
    }
  return StackedKernel(n0, std::move(c));
}

// Composed CNN kernel built from data without materializing the huge
// position-level object: patch_gram gives omega_1(C), then Theta, then
// (omega o Theta) for the remaining layers.
inline CnnComposeResult cnn_kernel_from_data(const Eigen::MatrixXd& x, const ConvSpec& conv, int L,
                                             Activation act, const LayerPrecisions& lams) {
  if (L < 1) throw DomainError("cnn_kernel_from_data: L must be >= 1");
  StackedKernel k = stacked_nngp_step(patch_gram(x, conv, lams.input()), act, lams.step(1));
  std::vector<int> counts{k.n_patches()};
  for (int l = 2; l <= L; ++l) {
    k = omega_map(k, conv.strides[static_cast<std::size_t>(l - 1)], conv.mask);
    k = stacked_nngp_step(k, act, lams.step(l));
    counts.push_back(k.n_patches());
  }
  return {std::move(k), std::move(counts)};
}

// Locally renormalized kernel: K^R = (1/N_p) sum_ij Q_ij [Theta-stack]_{ji},
// a weighted contraction of the patch grid down to a P x P kernel.
inline KernelMatrix renorm_kernel_cnn(const StackedKernel& theta, const Eigen::MatrixXd& q) {
  const int n_p = theta.n_patches();
  if (q.rows() != n_p || q.cols() != n_p) throw ShapeError("renorm_kernel_cnn: Q dimension");
  const Eigen::Index p = theta.p();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(p, p);
  for (int i = 0; i < n_p; ++i)
    for (int j = 0; j < n_p; ++j) out += q(i, j) * theta.block(j, i);
  out /= static_cast<double>(n_p);
  return KernelMatrix(((out + out.transpose()) * 0.5).eval());
}

// Effective action over the N_p x N_p matrix order parameter of a CNN;
// alpha = P/A (patterns per channel). The entropic part for L layers is the
// matrix contraction-principle term.
inline std::function<double(const Eigen::MatrixXd&)> cnn_effective_action(
    const StackedKernel& theta, const Eigen::VectorXd& y, double beta, double alpha, int layers) {
  if (y.size() != theta.p()) throw ShapeError("cnn_effective_action: label length");
  return [theta, y, beta, alpha, layers](const Eigen::MatrixXd& q) {
    const KernelMatrix kr = renorm_kernel_cnn(theta, q);
    Eigen::MatrixXd a = beta * kr.mat();
    a.diagonal().array() += 1.0;
    const Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
      throw NotPsdError("cnn_effective_action: renormalized kernel not PSD");
    const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    // y'(I/beta + K)^{-1} y = beta * y'(I + beta K)^{-1} y.
    const double quad = beta * y.dot(llt.solve(y));
    return matrix_entropy(q, layers) +
           alpha * (logdet + quad) / static_cast<double>(theta.p());
  };
}

}  // namespace ewa
