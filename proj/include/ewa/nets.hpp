#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ewa/core.hpp"
#include "ewa/errors.hpp"
#include "ewa/nngp.hpp"
#include "ewa/rng.hpp"

namespace ewa {

enum class Parametrization { Standard, MuP };

// 1D convolution geometry. Patch i (0-based) of a length-N signal reads taps
// at positions i*S + j, j = 0..M-1, zero-padded outside [0, N-1]; windows are
// left-aligned with centers spaced S apart, so M = S tiles the signal exactly
// and a single patch with M = S = N collapses to the fully-connected case.
struct ConvSpec {
  int mask = 1;  // M, odd
  int in_channels = 1;
  int input_len = 0;
  std::vector<int> strides;   // S_l, l = 1..L
  std::vector<int> channels;  // A_l, l = 1..L

  int depth() const { return static_cast<int>(strides.size()); }

  std::vector<int> patch_counts() const {
    if (mask < 1 || mask % 2 == 0) throw DomainError("ConvSpec: mask must be odd and positive");
    if (strides.size() != channels.size()) throw ShapeError("ConvSpec: strides/channels mismatch");
    std::vector<int> np;
    int n = input_len;
    for (std::size_t l = 0; l < strides.size(); ++l) {
      if (strides[l] < 1 || channels[l] < 1) throw DomainError("ConvSpec: nonpositive layer size");
      n = n / strides[l];
      if (n < 1)
        throw PatchUnderflowError("ConvSpec: patch count reaches zero at layer " +
                                  std::to_string(l + 1));
      np.push_back(n);
    }
    return np;
  }
};

// Architecture description shared by theory and sampling code. Precisions are
// indexed per weight layer (see LayerPrecisions); depth 0 means a readout
// acting directly on the inputs.
struct NetworkSpec {
  enum class Kind { Mlp, Cnn1d };

  Kind kind = Kind::Mlp;
  int depth = 1;
  int input_dim = 1;          // N0 (MLP)
  std::vector<int> widths;    // N_1..N_L (MLP)
  ConvSpec conv;              // CNN only
  Activation activation = Activation::Erf;
  LayerPrecisions lambdas = LayerPrecisions::uniform(1, 1.0);
  double temperature = 0.1;
  Parametrization param = Parametrization::Standard;
  double gamma0 = 1.0;
  int output_dim = 1;

  static NetworkSpec mlp(int depth, int width, int input_dim, Activation act, double lambda,
                         double temperature) {
    NetworkSpec s;
    s.kind = Kind::Mlp;
    s.depth = depth;
    s.input_dim = input_dim;
    s.widths.assign(static_cast<std::size_t>(depth), width);
    s.activation = act;
    s.lambdas = LayerPrecisions::uniform(depth, lambda);
    s.temperature = temperature;
    return s;
  }

  static NetworkSpec cnn1d(ConvSpec conv, Activation act, double lambda, double temperature) {
    NetworkSpec s;
    s.kind = Kind::Cnn1d;
    s.conv = std::move(conv);
    s.depth = s.conv.depth();
    s.input_dim = s.conv.input_len * s.conv.in_channels;
    s.activation = act;
    s.lambdas = LayerPrecisions::uniform(s.depth, lambda);
    s.temperature = temperature;
    return s;
  }

  void validate() const {
    if (output_dim != 1) throw DomainError("NetworkSpec: finite-network code is single-output");
    if (lambdas.depth() != depth) throw ShapeError("NetworkSpec: precisions/depth mismatch");
    if (kind == Kind::Mlp) {
      if (static_cast<int>(widths.size()) != depth) throw ShapeError("NetworkSpec: widths/depth");
      if (input_dim < 1) throw DomainError("NetworkSpec: input_dim must be positive");
      for (int w : widths)
        if (w < 1) throw DomainError("NetworkSpec: zero width layer");
    } else {
      (void)conv.patch_counts();
      if (conv.input_len < 1 || conv.in_channels < 1)
        throw DomainError("NetworkSpec: bad conv input");
    }
    if (!(temperature > 0.0)) throw DomainError("NetworkSpec: temperature must be positive");
    if (!(gamma0 > 0.0)) throw DomainError("NetworkSpec: gamma0 must be positive");
  }

  // Fan-in of the readout layer.
  int readout_width() const {
    if (depth == 0) return kind == Kind::Mlp ? input_dim : conv.input_len * conv.in_channels;
    if (kind == Kind::Mlp) return widths.back();
    const auto np = conv.patch_counts();
    return conv.channels.back() * np.back();
  }

  // gamma = gamma0 * sqrt(N) with N the readout fan-in.
  double gamma() const { return gamma0 * std::sqrt(static_cast<double>(readout_width())); }
};

// Theory-side mu-P bookkeeping: reducing the output scale by gamma equals
// stiffening the readout prior by gamma^2, and the temperature scales down by
// the same factor so the likelihood keeps its weight. The returned spec is in
// standard parametrization; theory and samplers consume the same transform.
inline NetworkSpec mu_p_transform(const NetworkSpec& spec, double gamma0) {
  if (!(gamma0 > 0.0)) throw DomainError("mu_p_transform: gamma0 must be positive");
  NetworkSpec out = spec;
  out.gamma0 = gamma0;
  const double g = out.gamma();
  std::vector<double> lams = spec.lambdas.values();
  lams.back() *= g * g;
  out.lambdas = LayerPrecisions(lams);
  out.temperature = spec.temperature / (g * g);
  out.param = Parametrization::Standard;
  out.gamma0 = 1.0;
  return out;
}

namespace detail {

// Flat parameter layout, layer-major. MLP: W^(l) is N_l x N_{l-1} row-major
// (row = output unit), then the readout vector of length N_L. CNN: W^(l) is
// indexed ((a_out * A_in + a_in) * M + m), then the readout indexed
// i * A_L + a (position-major, matching activation column order).
inline std::vector<std::ptrdiff_t> layer_offsets(const NetworkSpec& spec) {
  std::vector<std::ptrdiff_t> off{0};
  if (spec.kind == NetworkSpec::Kind::Mlp) {
    int prev = spec.input_dim;
    for (int l = 0; l < spec.depth; ++l) {
      off.push_back(off.back() + static_cast<std::ptrdiff_t>(spec.widths[l]) * prev);
      prev = spec.widths[l];
    }
    off.push_back(off.back() + prev);
  } else {
    const auto np = spec.conv.patch_counts();
    int prev_ch = spec.conv.in_channels;
    for (int l = 0; l < spec.depth; ++l) {
      off.push_back(off.back() +
                    static_cast<std::ptrdiff_t>(spec.conv.channels[l]) * prev_ch * spec.conv.mask);
      prev_ch = spec.conv.channels[l];
    }
    off.push_back(off.back() + static_cast<std::ptrdiff_t>(prev_ch) * np.back());
  }
  return off;
}

}  // namespace detail

// Flat parameter storage with per-layer views; the layout above is normative
// so checkpoints are portable across runs.
class ParamVector {
 public:
  explicit ParamVector(const NetworkSpec& spec)
      : offsets_(detail::layer_offsets(spec)), flat_(Eigen::VectorXd::Zero(offsets_.back())) {}

  Eigen::VectorXd& flat() { return flat_; }
  const Eigen::VectorXd& flat() const { return flat_; }
  Eigen::Index size() const { return flat_.size(); }

  // Weight layer l = 1..L+1 as a flat segment (L+1 is the readout).
  Eigen::VectorBlock<Eigen::VectorXd> layer(int l) {
    return flat_.segment(offsets_[l - 1], offsets_[l] - offsets_[l - 1]);
  }
  Eigen::VectorBlock<const Eigen::VectorXd> layer(int l) const {
    return flat_.segment(offsets_[l - 1], offsets_[l] - offsets_[l - 1]);
  }
  int n_layers() const { return static_cast<int>(offsets_.size()) - 1; }

 private:
  std::vector<std::ptrdiff_t> offsets_;
  Eigen::VectorXd flat_;
};

// W^(l) entries i.i.d. N(0, 1/lambda_(l)); fill order is the flat layout.
inline ParamVector init_from_prior(const NetworkSpec& spec, RandomSource& rng) {
  spec.validate();
  ParamVector p(spec);
  for (int l = 1; l <= p.n_layers(); ++l) {
    const double sd = 1.0 / std::sqrt(spec.lambdas.values()[static_cast<std::size_t>(l - 1)]);
    auto seg = p.layer(l);
    for (Eigen::Index i = 0; i < seg.size(); ++i) seg[i] = sd * rng.normal();
  }
  return p;
}

struct ForwardResult {
  Eigen::VectorXd outputs;                 // f, length P
  std::vector<Eigen::MatrixXd> preacts;    // H^(l), P x N_l (MLP) or P x (Np_l*A_l) (CNN)
};

namespace detail {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                    Eigen::RowMajor>>;

inline RowMajorMap weight_matrix(const ParamVector& p, int l, int rows, int cols) {
  const auto seg = p.layer(l);
  return RowMajorMap(seg.data(), rows, cols);
}

}  // namespace detail

inline ForwardResult mlp_forward(const ParamVector& params, const Eigen::MatrixXd& x,
                                 const NetworkSpec& spec) {
  if (x.cols() != spec.input_dim) throw ShapeError("mlp_forward: input dimension mismatch");
  ForwardResult out;
  Eigen::MatrixXd act = x;
  int prev = spec.input_dim;
  for (int l = 1; l <= spec.depth; ++l) {
    const int n = spec.widths[static_cast<std::size_t>(l - 1)];
    const auto w = detail::weight_matrix(params, l, n, prev);
    Eigen::MatrixXd h = act * w.transpose() / std::sqrt(static_cast<double>(prev));
    out.preacts.push_back(h);
    act = h.unaryExpr([&](double v) { return activation_apply(spec.activation, v); });
    prev = n;
  }
  const auto w_out = params.layer(spec.depth + 1);
  out.outputs = act * w_out / std::sqrt(static_cast<double>(prev));
  if (spec.param == Parametrization::MuP) out.outputs /= spec.gamma();
  return out;
}

namespace detail {

// im2col for one output patch: columns ordered m * A_in + a_in, zero-padded
// taps left at zero.
inline void fill_patch(const Eigen::MatrixXd& act, int np_in, int a_in, int patch, int stride,
                       int mask, Eigen::MatrixXd& buf) {
  buf.setZero();
  for (int m = 0; m < mask; ++m) {
    const int pos = patch * stride + m;
    if (pos < 0 || pos >= np_in) continue;
    buf.middleCols(static_cast<Eigen::Index>(m) * a_in, a_in) =
        act.middleCols(static_cast<Eigen::Index>(pos) * a_in, a_in);
  }
}

// Weight layer l of a CNN reshaped to (A_out x M*A_in) with column m*A_in+a'.
inline Eigen::MatrixXd conv_weight_matrix(const ParamVector& p, int l, int a_out, int a_in,
                                          int mask) {
  const auto seg = p.layer(l);
  Eigen::MatrixXd w(a_out, static_cast<Eigen::Index>(mask) * a_in);
  for (int a = 0; a < a_out; ++a)
    for (int ap = 0; ap < a_in; ++ap)
      for (int m = 0; m < mask; ++m)
        w(a, static_cast<Eigen::Index>(m) * a_in + ap) =
            seg[(static_cast<Eigen::Index>(a) * a_in + ap) * mask + m];
  return w;
}

inline void scatter_conv_weight_grad(const Eigen::MatrixXd& wgrad_mat, int l, int a_out, int a_in,
                                     int mask, ParamVector& grad) {
  auto seg = grad.layer(l);
  for (int a = 0; a < a_out; ++a)
    for (int ap = 0; ap < a_in; ++ap)
      for (int m = 0; m < mask; ++m)
        seg[(static_cast<Eigen::Index>(a) * a_in + ap) * mask + m] +=
            wgrad_mat(a, static_cast<Eigen::Index>(m) * a_in + ap);
}

}  // namespace detail

inline ForwardResult cnn_forward(const ParamVector& params, const Eigen::MatrixXd& x,
                                 const NetworkSpec& spec) {
  const auto np = spec.conv.patch_counts();
  const int p_rows = static_cast<int>(x.rows());
  if (x.cols() != static_cast<Eigen::Index>(spec.conv.input_len) * spec.conv.in_channels)
    throw ShapeError("cnn_forward: input layout mismatch (want P x N0*A0, position-major)");
  ForwardResult out;
  Eigen::MatrixXd act = x;
  int np_in = spec.conv.input_len;
  int a_in = spec.conv.in_channels;
  for (int l = 1; l <= spec.depth; ++l) {
    const int a_out = spec.conv.channels[static_cast<std::size_t>(l - 1)];
    const int stride = spec.conv.strides[static_cast<std::size_t>(l - 1)];
    const int mask = spec.conv.mask;
    const Eigen::MatrixXd w = detail::conv_weight_matrix(params, l, a_out, a_in, mask);
    const double norm = 1.0 / std::sqrt(static_cast<double>(mask) * a_in);
    Eigen::MatrixXd h(p_rows, static_cast<Eigen::Index>(np[l - 1]) * a_out);
    Eigen::MatrixXd buf(p_rows, static_cast<Eigen::Index>(mask) * a_in);
    for (int i = 0; i < np[l - 1]; ++i) {
      detail::fill_patch(act, np_in, a_in, i, stride, mask, buf);
      h.middleCols(static_cast<Eigen::Index>(i) * a_out, a_out).noalias() =
          buf * w.transpose() * norm;
    }
    out.preacts.push_back(h);
    act = h.unaryExpr([&](double v) { return activation_apply(spec.activation, v); });
    np_in = np[l - 1];
    a_in = a_out;
  }
  const auto w_out = params.layer(spec.depth + 1);
  out.outputs = act * w_out / std::sqrt(static_cast<double>(a_in) * np_in);
  if (spec.param == Parametrization::MuP) out.outputs /= spec.gamma();
  return out;
}

inline ForwardResult net_forward(const ParamVector& params, const Eigen::MatrixXd& x,
                                 const NetworkSpec& spec) {
  return spec.kind == NetworkSpec::Kind::Mlp ? mlp_forward(params, x, spec)
                                             : cnn_forward(params, x, spec);
}

struct LossGrad {
  double loss_reg = 0.0;       // (1/2) sum (y-f)^2 + (T/2) sum_l lambda_l |W_l|^2
  double data_loss = 0.0;      // (1/2) sum (y-f)^2
  Eigen::VectorXd grad;        // d loss_reg / d theta
};

// Reverse-mode gradient of the regularized loss. beta = 1/T scales the prior
// term as L_reg = L - (1/beta) log rho(theta).
inline LossGrad loss_and_grad(const ParamVector& params, const Eigen::MatrixXd& x,
                              const Eigen::VectorXd& y, const NetworkSpec& spec) {
  if (y.size() != x.rows()) throw ShapeError("loss_and_grad: label count mismatch");
  const ForwardResult fwd = net_forward(params, x, spec);
  LossGrad out;
  out.grad = Eigen::VectorXd::Zero(params.size());
  ParamVector grad(spec);

  const Eigen::VectorXd resid = fwd.outputs - y;
  out.data_loss = 0.5 * resid.squaredNorm();

  const double mup_scale = spec.param == Parametrization::MuP ? 1.0 / spec.gamma() : 1.0;

  if (spec.kind == NetworkSpec::Kind::Mlp) {
    const int L = spec.depth;
    const int last = L == 0 ? spec.input_dim : spec.widths.back();
    Eigen::MatrixXd act_last =
        L == 0 ? x
               : fwd.preacts.back().unaryExpr(
                     [&](double v) { return activation_apply(spec.activation, v); });
    const double rnorm = mup_scale / std::sqrt(static_cast<double>(last));
    grad.layer(L + 1) = act_last.transpose() * resid * rnorm;

    if (L > 0) {
      const auto w_out = params.layer(L + 1);
      Eigen::MatrixXd delta =
          (resid * w_out.transpose() * rnorm)
              .cwiseProduct(fwd.preacts.back().unaryExpr(
                  [&](double v) { return activation_deriv(spec.activation, v); }));
      for (int l = L; l >= 1; --l) {
        const int prev = l == 1 ? spec.input_dim : spec.widths[static_cast<std::size_t>(l - 2)];
        const int n = spec.widths[static_cast<std::size_t>(l - 1)];
        const Eigen::MatrixXd& act_prev =
            l == 1 ? x
                   : Eigen::MatrixXd(fwd.preacts[static_cast<std::size_t>(l - 2)].unaryExpr(
                         [&](double v) { return activation_apply(spec.activation, v); }));
        const double lnorm = 1.0 / std::sqrt(static_cast<double>(prev));
        // Row-major W^(l): gradient (N_l x prev) flattened row-major.
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wg =
            delta.transpose() * act_prev * lnorm;
        grad.layer(l) = Eigen::Map<Eigen::VectorXd>(wg.data(), wg.size());
        if (l > 1) {
          const auto w = detail::weight_matrix(params, l, n, prev);
          delta = (delta * w * lnorm)
                      .cwiseProduct(fwd.preacts[static_cast<std::size_t>(l - 2)].unaryExpr(
                          [&](double v) { return activation_deriv(spec.activation, v); }));
        }
      }
    }
  } else {
    const auto np = spec.conv.patch_counts();
    const int L = spec.depth;
    const int a_last = spec.conv.channels.back();
    const int np_last = np.back();
    Eigen::MatrixXd act_last = fwd.preacts.back().unaryExpr(
        [&](double v) { return activation_apply(spec.activation, v); });
    const double rnorm = mup_scale / std::sqrt(static_cast<double>(a_last) * np_last);
    grad.layer(L + 1) = act_last.transpose() * resid * rnorm;

    const auto w_out = params.layer(L + 1);
    Eigen::MatrixXd delta =
        (resid * w_out.transpose() * rnorm)
            .cwiseProduct(fwd.preacts.back().unaryExpr(
                [&](double v) { return activation_deriv(spec.activation, v); }));
    for (int l = L; l >= 1; --l) {
      const int a_out = spec.conv.channels[static_cast<std::size_t>(l - 1)];
      const int a_in = l == 1 ? spec.conv.in_channels
                              : spec.conv.channels[static_cast<std::size_t>(l - 2)];
      const int np_in = l == 1 ? spec.conv.input_len : np[static_cast<std::size_t>(l - 2)];
      const int stride = spec.conv.strides[static_cast<std::size_t>(l - 1)];
      const int mask = spec.conv.mask;
      const double norm = 1.0 / std::sqrt(static_cast<double>(mask) * a_in);
      const Eigen::MatrixXd act_prev =
          l == 1 ? x
                 : Eigen::MatrixXd(fwd.preacts[static_cast<std::size_t>(l - 2)].unaryExpr(
                       [&](double v) { return activation_apply(spec.activation, v); }));
      const Eigen::MatrixXd w = detail::conv_weight_matrix(params, l, a_out, a_in, mask);
      Eigen::MatrixXd wgrad = Eigen::MatrixXd::Zero(a_out, static_cast<Eigen::Index>(mask) * a_in);
      Eigen::MatrixXd delta_prev =
          Eigen::MatrixXd::Zero(x.rows(), static_cast<Eigen::Index>(np_in) * a_in);
      Eigen::MatrixXd buf(x.rows(), static_cast<Eigen::Index>(mask) * a_in);
      for (int i = 0; i < np[static_cast<std::size_t>(l - 1)]; ++i) {
        detail::fill_patch(act_prev, np_in, a_in, i, stride, mask, buf);
        const auto d_i = delta.middleCols(static_cast<Eigen::Index>(i) * a_out, a_out);
        wgrad.noalias() += d_i.transpose() * buf * norm;
        const Eigen::MatrixXd back = d_i * w * norm;  // P x (mask*a_in)
        for (int m = 0; m < mask; ++m) {
          const int pos = i * stride + m;
          if (pos < 0 || pos >= np_in) continue;
          delta_prev.middleCols(static_cast<Eigen::Index>(pos) * a_in, a_in) +=
              back.middleCols(static_cast<Eigen::Index>(m) * a_in, a_in);
        }
      }
      detail::scatter_conv_weight_grad(wgrad, l, a_out, a_in, mask, grad);
      if (l > 1) {
        delta = delta_prev.cwiseProduct(fwd.preacts[static_cast<std::size_t>(l - 2)].unaryExpr(
            [&](double v) { return activation_deriv(spec.activation, v); }));
      }
    }
  }

  // Prior term: (T/2) lambda_l |W_l|^2 per weight layer.
  double prior = 0.0;
  for (int l = 1; l <= grad.n_layers(); ++l) {
    const double lam = spec.lambdas.values()[static_cast<std::size_t>(l - 1)];
    prior += 0.5 * spec.temperature * lam * params.layer(l).squaredNorm();
    grad.layer(l) += spec.temperature * lam * params.layer(l);
  }
  out.loss_reg = out.data_loss + prior;
  out.grad = grad.flat();
  return out;
}

// K_E = sigma(H) sigma(H)^T / (lambda N); rank at most N.
inline KernelMatrix empirical_kernel(const Eigen::MatrixXd& preact, Activation act, double lambda,
                                     int n_units) {
  if (n_units < 1) throw DomainError("empirical_kernel: n_units must be positive");
  const Eigen::MatrixXd s =
      preact.unaryExpr([&](double v) { return activation_apply(act, v); });
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(s.rows(), s.rows());
  k.selfadjointView<Eigen::Lower>().rankUpdate(s, 1.0 / (lambda * n_units));
  k.triangularView<Eigen::StrictlyUpper>() = k.transpose();
  return KernelMatrix(std::move(k));
}

}  // namespace ewa
