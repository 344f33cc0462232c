#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ewa/core.hpp"
#include "ewa/errors.hpp"
#include "ewa/nets.hpp"
#include "ewa/nngp.hpp"

namespace ewa {

namespace detail {

// Brent root finder; requires a sign change over [a, b].
template <typename F>
double brent_root(F f, double a, double b, double xtol = 1e-14, int max_iter = 200) {
  double fa = f(a), fb = f(b);
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if (fa * fb > 0.0) throw BracketFailureError("brent_root: no sign change over bracket");
  double c = a, fc = fa, d = b - a, e = d;
  for (int it = 0; it < max_iter; ++it) {
    if (std::abs(fc) < std::abs(fb)) {
      a = b; b = c; c = a;
      fa = fb; fb = fc; fc = fa;
    }
    const double tol = 2.0 * std::numeric_limits<double>::epsilon() * std::abs(b) + 0.5 * xtol;
    const double m = 0.5 * (c - b);
    if (std::abs(m) <= tol || fb == 0.0) return b;
    if (std::abs(e) < tol || std::abs(fa) <= std::abs(fb)) {
      d = m; e = m;
    } else {
      double p, q, r;
      const double s = fb / fa;
      if (a == c) {
        p = 2.0 * m * s;
        q = 1.0 - s;
      } else {
        q = fa / fc;
        r = fb / fc;
        p = s * (2.0 * m * q * (q - r) - (b - a) * (r - 1.0));
        q = (q - 1.0) * (r - 1.0) * (s - 1.0);
      }
      if (p > 0.0) q = -q;
      p = std::abs(p);
      if (2.0 * p < std::min(3.0 * m * q - std::abs(tol * q), std::abs(e * q))) {
        e = d; d = p / q;
      } else {
        d = m; e = m;
      }
    }
    a = b; fa = fb;
    b += std::abs(d) > tol ? d : (m > 0.0 ? tol : -tol);
    fb = f(b);
    if ((fb > 0.0) == (fc > 0.0)) {
      c = a; fc = fa; d = b - a; e = d;
    }
  }
  return b;
}

}  // namespace detail

// Evaluates the data part of the effective action through one eigendecomposition
// of Theta^L(C): D(Q) = (1/P)[logdet(I + beta Q Theta) + y'(I/beta + Q Theta)^{-1} y].
// Every later evaluation is O(P), which keeps the saddle solvers cheap.
class ActionWorkspace {
 public:
  ActionWorkspace(const KernelMatrix& theta, const Eigen::VectorXd& y, double beta)
      : beta_(beta), p_(static_cast<int>(theta.dim())) {
    if (y.size() != theta.dim()) throw ShapeError("ActionWorkspace: label length mismatch");
    if (!(beta > 0.0)) throw DomainError("ActionWorkspace: beta must be positive");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(theta.mat());
    evals_ = es.eigenvalues();
    const double top = std::max(evals_.maxCoeff(), 0.0);
    if (evals_.minCoeff() < -1e-8 * std::max(top, 1.0))
      throw NotPsdError("ActionWorkspace: kernel has a significantly negative eigenvalue");
    evals_ = evals_.cwiseMax(0.0);
    y_hat2_ = (es.eigenvectors().transpose() * y).array().square();
  }

  int p() const { return p_; }
  double beta() const { return beta_; }

  double data_term(double q_prod) const {
    const Eigen::ArrayXd lam = evals_.array();
    const double logdet = (1.0 + beta_ * q_prod * lam).log().sum();
    const double quad = (y_hat2_ / (1.0 / beta_ + q_prod * lam)).sum();
    return (logdet + quad) / p_;
  }

  double d_data_term(double q_prod) const {
    const Eigen::ArrayXd lam = evals_.array();
    const double dl = (beta_ * lam / (1.0 + beta_ * q_prod * lam)).sum();
    const double dq = (y_hat2_ * lam / (1.0 / beta_ + q_prod * lam).square()).sum();
    return (dl - dq) / p_;
  }

  double dd_data_term(double q_prod) const {
    const Eigen::ArrayXd lam = evals_.array();
    const double dl = ((beta_ * lam / (1.0 + beta_ * q_prod * lam)).square()).sum();
    const double dq = (y_hat2_ * lam.square() / (1.0 / beta_ + q_prod * lam).cube()).sum();
    return (-dl + 2.0 * dq) / p_;
  }

 private:
  double beta_;
  int p_;
  Eigen::VectorXd evals_;
  Eigen::ArrayXd y_hat2_;
};

// S(q) = sum_l w_l (q_l - log q_l) + alpha * D(prod q). Weights w_l = N_l/N_ref
// generalize the equal-width action; alpha = P/N_ref. Additive constants are
// dropped, only the location of the minimum and the predictor statistics
// matter.
inline double effective_action(const Eigen::VectorXd& q, const ActionWorkspace& ws, double alpha,
                               const Eigen::VectorXd& weights) {
  if (q.size() != weights.size()) throw ShapeError("effective_action: q/weights mismatch");
  double s = 0.0, prod = 1.0;
  for (Eigen::Index l = 0; l < q.size(); ++l) {
    if (!(q[l] > 0.0)) throw DomainError("effective_action: order parameters must be positive");
    s += weights[l] * (q[l] - std::log(q[l]));
    prod *= q[l];
  }
  return s + alpha * ws.data_term(prod);
}

inline Eigen::VectorXd effective_action_grad(const Eigen::VectorXd& q, const ActionWorkspace& ws,
                                             double alpha, const Eigen::VectorXd& weights) {
  double prod = 1.0;
  for (Eigen::Index l = 0; l < q.size(); ++l) prod *= q[l];
  const double dd = alpha * ws.d_data_term(prod);
  Eigen::VectorXd g(q.size());
  for (Eigen::Index l = 0; l < q.size(); ++l)
    g[l] = weights[l] * (1.0 - 1.0 / q[l]) + dd * prod / q[l];
  return g;
}

inline double effective_action(const Eigen::VectorXd& q, const KernelMatrix& thetaL,
                               const Eigen::VectorXd& y, double beta, double alpha,
                               const std::vector<int>& widths = {}) {
  Eigen::VectorXd w = Eigen::VectorXd::Ones(q.size());
  if (!widths.empty()) {
    if (static_cast<Eigen::Index>(widths.size()) != q.size())
      throw ShapeError("effective_action: widths length mismatch");
    for (Eigen::Index l = 0; l < q.size(); ++l)
      w[l] = static_cast<double>(widths[static_cast<std::size_t>(l)]) / widths[0];
  }
  return effective_action(q, ActionWorkspace(thetaL, y, beta), alpha, w);
}

struct SaddleResult {
  Eigen::VectorXd q;
  double action = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;

  double q_product() const {
    double p = 1.0;
    for (Eigen::Index i = 0; i < q.size(); ++i) p *= q[i];
    return p;
  }
};

// Seed-independent JSON-style record of a saddle solve.
inline std::string to_json(const SaddleResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "{\"q\":[";
  for (Eigen::Index i = 0; i < r.q.size(); ++i) os << (i ? "," : "") << r.q[i];
  os << "],\"action\":" << r.action << ",\"grad_norm\":" << r.grad_norm
     << ",\"iterations\":" << r.iterations << ",\"converged\":" << (r.converged ? "true" : "false")
     << "}";
  return os.str();
}

// M_yy = y' Theta^{-1} y / P, the scalar overlap steering the zero-temperature
// saddle; exposed for the kernel at any depth.
inline double task_overlap_myy(const KernelMatrix& thetaL, const Eigen::VectorXd& y,
                               double jitter = 0.0) {
  if (y.size() != thetaL.dim()) throw ShapeError("task_overlap_myy: length mismatch");
  const Eigen::VectorXd x = solve_psd(thetaL, y, jitter);
  return y.dot(x) / static_cast<double>(y.size());
}

// Explicit zero-temperature 1HL saddle, positive branch of the quadratic.
inline double zero_temp_saddle_1hl(double alpha, double myy) {
  if (alpha < 0.0 || myy < 0.0) throw DomainError("zero_temp_saddle_1hl: negative argument");
  const double half = 0.5 * (alpha - 1.0);
  return -half + std::sqrt(half * half + alpha * myy);
}

// Unique positive root of (q*)^L (q* + alpha - 1) = alpha * M_yy. The equation
// is monotone on q > max(0, 1-alpha), so a bracketed root is exact business.
inline double zero_temp_state_eq(double alpha, double myy, int L) {
  if (L < 1) throw DomainError("zero_temp_state_eq: L must be >= 1");
  if (alpha < 0.0 || myy < 0.0) throw DomainError("zero_temp_state_eq: negative argument");
  if (alpha == 0.0) return 1.0;
  if (myy == 0.0) return std::max(0.0, 1.0 - alpha);
  const double target = alpha * myy;
  const auto f = [&](double q) { return std::pow(q, L) * (q + alpha - 1.0) - target; };
  double lo = std::max(0.0, 1.0 - alpha) + 1e-300;
  double hi = std::max({1.0, std::pow(myy, 1.0 / L), std::pow(target, 1.0 / (L + 1))}) + 1.0;
  while (f(hi) < 0.0) hi *= 2.0;
  // Expand lo upward until f(lo) < 0 if the tiny offset already overshot.
  if (f(lo) > 0.0) lo = 1e-300;
  return detail::brent_root(f, lo, hi, 1e-15 * hi);
}

// One-dimensional solve for equal widths: root of dS/d(log q) over
// log q in [log bracket.first, log bracket.second]. beta = inf switches to the
// explicit zero-temperature path via M_yy, avoiding the conditioning loss of a
// huge-beta workspace.
inline SaddleResult minimize_action_symmetric(const KernelMatrix& thetaL, const Eigen::VectorXd& y,
                                              double beta, double alpha, int L,
                                              std::pair<double, double> bracket = {1e-2, 1e3}) {
  if (L < 1) throw DomainError("minimize_action_symmetric: L must be >= 1");
  SaddleResult res;
  if (std::isinf(beta)) {
    const double myy = task_overlap_myy(thetaL, y);
    const double q = zero_temp_state_eq(alpha, myy, L);
    res.q = Eigen::VectorXd::Constant(L, q);
    res.action = std::numeric_limits<double>::quiet_NaN();
    res.grad_norm = 0.0;
    res.iterations = 1;
    res.converged = true;
    return res;
  }
  const ActionWorkspace ws(thetaL, y, beta);
  int evals = 0;
  const auto dS_dlogq = [&](double u) {
    const double q = std::exp(u);
    const double prod = std::pow(q, L);
    ++evals;
    // q * dS/dq with S = L(q - log q) + alpha D(q^L).
    return L * (q - 1.0) + alpha * ws.d_data_term(prod) * prod * L;
  };
  const double u = detail::brent_root(dS_dlogq, std::log(bracket.first),
                                      std::log(bracket.second), 1e-15);
  const double q = std::exp(u);
  res.q = Eigen::VectorXd::Constant(L, q);
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(L);
  res.action = effective_action(res.q, ws, alpha, w);
  res.grad_norm = effective_action_grad(res.q, ws, alpha, w).norm();
  res.iterations = evals;
  const double scale = std::max(1.0, std::abs(res.action));
  res.converged = res.grad_norm < 1e-10 * scale * L;
  return res;
}

// General unequal-width minimization: damped Newton in log coordinates with
// the exact rank-one-plus-diagonal Hessian. alpha is P/N_ref with N_ref the
// reference width (widths[0]); entropic weights are N_l/N_ref.
inline SaddleResult minimize_action_general(const KernelMatrix& thetaL, const Eigen::VectorXd& y,
                                            double beta, double alpha,
                                            const std::vector<int>& widths,
                                            Eigen::VectorXd init = Eigen::VectorXd()) {
  const int L = static_cast<int>(widths.size());
  if (L < 1) throw DomainError("minimize_action_general: empty widths");
  Eigen::VectorXd w(L);
  for (int l = 0; l < L; ++l) {
    if (widths[static_cast<std::size_t>(l)] < 1)
      throw DomainError("minimize_action_general: nonpositive width");
    w[l] = static_cast<double>(widths[static_cast<std::size_t>(l)]) / widths[0];
  }
  const ActionWorkspace ws(thetaL, y, beta);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(L);
  if (init.size() == L)
    for (int l = 0; l < L; ++l) u[l] = std::log(init[l]);

  const auto action_u = [&](const Eigen::VectorXd& uu) {
    return effective_action(uu.array().exp().matrix(), ws, alpha, w);
  };
  const auto grad_u = [&](const Eigen::VectorXd& uu, double& prod_out) {
    const Eigen::VectorXd q = uu.array().exp().matrix();
    double prod = 1.0;
    for (int l = 0; l < L; ++l) prod *= q[l];
    prod_out = prod;
    const double dd = alpha * ws.d_data_term(prod) * prod;
    Eigen::VectorXd g(L);
    for (int l = 0; l < L; ++l) g[l] = w[l] * (q[l] - 1.0) + dd;
    return g;
  };

  SaddleResult res;
  double s = action_u(u);
  const int max_iter = 200;
  int it = 0;
  const double tol = 1e-11 * std::max(1.0, std::abs(s));
  for (; it < max_iter; ++it) {
    double prod;
    const Eigen::VectorXd g = grad_u(u, prod);
    if (g.norm() < tol) break;
    // Hessian in u: diag(w_l q_l) + c * ones, c = alpha (D'' Q^2 + D' Q).
    const Eigen::VectorXd q = u.array().exp().matrix();
    const double c =
        alpha * (ws.dd_data_term(prod) * prod * prod + ws.d_data_term(prod) * prod);
    Eigen::MatrixXd h = (w.array() * q.array()).matrix().asDiagonal();
    h.array() += c;
    Eigen::VectorXd step;
    const Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() == Eigen::Success)
      step = -llt.solve(g);
    else
      step = -g;  // fall back to steepest descent when the Hessian dips
    double t = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      const Eigen::VectorXd cand = u + t * step;
      const double sc = action_u(cand);
      if (sc < s - 1e-4 * t * std::abs(g.dot(step))) {
        u = cand;
        s = sc;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
  }
  const Eigen::VectorXd q = u.array().exp().matrix();
  res.q = q;
  res.action = s;
  res.grad_norm = effective_action_grad(q, ws, alpha, w).norm();
  res.iterations = it;
  res.converged = res.grad_norm < 1e-8 * std::max(1.0, std::abs(s));
  return res;
}

// Task-dependent overlaps of the 1HL non-central theory; defined with respect
// to Theta(C) (the mean kernel), P carried along for the 1/P bookkeeping.
struct TaskOverlaps {
  double myy = 0.0;     // y' Theta^{-1} y / P
  double my = 0.0;      // m' Theta^{-1} y / sqrt(P)
  double mm = 0.0;      // m' Theta^{-1} m
  double gamma_k = 0.0; // logdet(Theta) / P
  int p = 0;
};

inline TaskOverlaps noncentral_overlaps(const KernelMatrix& theta, const Eigen::VectorXd& m,
                                        const Eigen::VectorXd& y, double jitter = 0.0) {
  if (m.size() != theta.dim() || y.size() != theta.dim())
    throw ShapeError("noncentral_overlaps: length mismatch");
  const double p = static_cast<double>(theta.dim());
  Eigen::MatrixXd rhs(theta.dim(), 2);
  rhs.col(0) = y;
  rhs.col(1) = m;
  const Eigen::MatrixXd sol = solve_psd(theta, rhs, jitter);
  TaskOverlaps o;
  o.myy = y.dot(sol.col(0)) / p;
  o.my = m.dot(sol.col(0)) / std::sqrt(p);
  o.mm = m.dot(sol.col(1));
  o.gamma_k = logdet_psd(theta, jitter) / p;
  o.p = static_cast<int>(p);
  return o;
}

struct NoncentralState {
  double q = 1.0;     // Q
  double qbar = 0.0;  // conjugate parameter
  double delta() const { return q - 1.0 / (1.0 + qbar); }
};

// Zero-temperature 1HL action of the non-central theory, written with
// Theta-based overlaps so that Delta_Q = 0 reduces it to the central action
// for any lambda1. The conjugate direction makes stationary points saddles,
// not minima.
inline double noncentral_action_1hl(const NoncentralState& st, const TaskOverlaps& o, double alpha,
                                    double lambda1) {
  if (!(st.q > 0.0) || !(1.0 + st.qbar > 0.0))
    throw DomainError("noncentral_action_1hl: state outside domain");
  const double d = st.delta();
  const double g = 1.0 - d * o.mm / (lambda1 * st.q);
  if (!(g > 0.0)) throw DomainError("noncentral_action_1hl: log argument not positive");
  const double den = st.q * (lambda1 * st.q - d * o.mm);
  return -st.q * st.qbar + std::log(1.0 + st.qbar) + alpha * std::log(st.q) + alpha * o.gamma_k +
         alpha * o.myy / st.q + alpha / o.p * std::log(g) + alpha * d * o.my * o.my / den;
}

struct NoncentralSaddle {
  NoncentralState state;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

// 2-D stationary-point solve: Newton on the analytic gradient with step
// halving to stay inside the domain. Initialization at the infinite-width
// values (Q, Qbar) = (1, 0).
inline NoncentralSaddle noncentral_saddle_1hl(const TaskOverlaps& o, double alpha, double lambda1,
                                              NoncentralState init = {1.0, 0.0}) {
  const auto grad = [&](const NoncentralState& st) {
    const double q = st.q, qb = st.qbar;
    const double d = st.delta();
    const double dd_dqb = 1.0 / ((1.0 + qb) * (1.0 + qb));
    const double g = 1.0 - d * o.mm / (lambda1 * q);
    const double w = q * (lambda1 * q - d * o.mm);
    const double dw_dq = 2.0 * lambda1 * q - (d + q) * o.mm;
    const double dw_dqb = -q * o.mm * dd_dqb;
    const double dg_dq = -(o.mm / lambda1) * (q - d) / (q * q);
    const double dg_dqb = -(o.mm / (lambda1 * q)) * dd_dqb;
    Eigen::Vector2d gr;
    gr[0] = -qb + alpha / q - alpha * o.myy / (q * q) + alpha / o.p * dg_dq / g +
            alpha * o.my * o.my * (w - d * dw_dq) / (w * w);
    gr[1] = -q + 1.0 / (1.0 + qb) + alpha / o.p * dg_dqb / g +
            alpha * o.my * o.my * (dd_dqb * w - d * dw_dqb) / (w * w);
    return gr;
  };
  const auto in_domain = [&](const NoncentralState& st) {
    if (!(st.q > 0.0) || !(1.0 + st.qbar > 0.0)) return false;
    return 1.0 - st.delta() * o.mm / (lambda1 * st.q) > 0.0 &&
           st.q * (lambda1 * st.q - st.delta() * o.mm) != 0.0;
  };

  NoncentralSaddle out;
  NoncentralState st = init;
  Eigen::Vector2d g = grad(st);
  const int max_iter = 200;
  int it = 0;
  for (; it < max_iter && g.norm() >= 1e-12; ++it) {
    // Jacobian by central differences of the analytic gradient.
    Eigen::Matrix2d j;
    const double hq = 1e-7 * std::max(1.0, std::abs(st.q));
    const double hb = 1e-7 * std::max(1.0, std::abs(st.qbar));
    j.col(0) = (grad({st.q + hq, st.qbar}) - grad({st.q - hq, st.qbar})) / (2.0 * hq);
    j.col(1) = (grad({st.q, st.qbar + hb}) - grad({st.q, st.qbar - hb})) / (2.0 * hb);
    Eigen::Vector2d step = j.fullPivLu().solve(-g);
    double t = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      NoncentralState cand{st.q + t * step[0], st.qbar + t * step[1]};
      if (in_domain(cand)) {
        const Eigen::Vector2d gc = grad(cand);
        if (gc.norm() < g.norm() || t < 1e-6) {
          st = cand;
          g = gc;
          moved = true;
          break;
        }
      }
      t *= 0.5;
    }
    if (!moved) break;
  }
  out.state = st;
  out.grad_norm = g.norm();
  out.iterations = it;
  out.converged = out.grad_norm < 1e-9;
  return out;
}

// Effective dimension t = Tr[Sigma (I/beta + Q (Sigma + m m'))^{-1}]; the
// diagnostic behind the central/non-central equivalence (self-averaging needs
// t = O(P)).
inline double effective_dimension(const KernelMatrix& sigma, const Eigen::VectorXd& m, double q,
                                  double beta) {
  if (!(beta > 0.0)) throw DomainError("effective_dimension: beta must be positive");
  if (q < 0.0) throw DomainError("effective_dimension: negative Q");
  if (m.size() != sigma.dim()) throw ShapeError("effective_dimension: mean length mismatch");
  const Eigen::Index p = sigma.dim();
  Eigen::MatrixXd a = q * (sigma.mat() + m * m.transpose());
  a.diagonal().array() += 1.0 / beta;
  const Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw NotPsdError("effective_dimension: resolvent not PD");
  return llt.solve(sigma.mat()).trace();
}

// Renormalized kernels: global rescaling for the scalar theory, Kronecker
// assembly (output index major, pattern index minor) for D > 1.
inline KernelMatrix renorm_kernel(const KernelMatrix& thetaL, double q_product) {
  if (q_product < 0.0) throw DomainError("renorm_kernel: negative factor");
  return KernelMatrix(q_product * thetaL.mat());
}

inline KernelMatrix renorm_kernel(const KernelMatrix& thetaL, const Eigen::MatrixXd& q_matrix) {
  if (q_matrix.rows() != q_matrix.cols()) throw ShapeError("renorm_kernel: Q not square");
  const Eigen::Index d = q_matrix.rows(), p = thetaL.dim();
  Eigen::MatrixXd k(d * p, d * p);
  for (Eigen::Index a = 0; a < d; ++a)
    for (Eigen::Index b = 0; b < d; ++b)
      k.block(a * p, b * p, p, p) = q_matrix(a, b) * thetaL.mat();
  return KernelMatrix(std::move(k));
}

struct MatrixSaddleResult {
  Eigen::MatrixXd q;
  double action = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Gradient descent over symmetric positive-definite matrices in the free
// upper-triangular parametrization; the entropic part of the action keeps
// iterates away from the cone boundary, and any step that would leave the
// cone is halved. Defaults follow the converged settings used for the CNN
// saddles (rate 5e-4, tolerance 1e-6, 1000 epochs).
inline MatrixSaddleResult matrix_saddle(const std::function<double(const Eigen::MatrixXd&)>& action,
                                        int dim, double step = 5e-4, double tol = 1e-6,
                                        int max_epochs = 1000) {
  if (dim < 1) throw DomainError("matrix_saddle: dim must be positive");
  Eigen::MatrixXd q = Eigen::MatrixXd::Identity(dim, dim);
  const auto is_pd = [](const Eigen::MatrixXd& m) {
    return Eigen::LLT<Eigen::MatrixXd>(m).info() == Eigen::Success;
  };
  const auto num_grad = [&](const Eigen::MatrixXd& m) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(dim, dim);
    for (int i = 0; i < dim; ++i)
      for (int j = i; j < dim; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(m(i, j)));
        Eigen::MatrixXd mp = m, mm = m;
        mp(i, j) += h;
        mm(i, j) -= h;
        if (i != j) {
          mp(j, i) += h;
          mm(j, i) -= h;
        }
        const double d = (action(mp) - action(mm)) / (2.0 * h);
        g(i, j) = d;
        g(j, i) = d;
      }
    return g;
  };

  MatrixSaddleResult res;
  double s = action(q);
  int epoch = 0;
  double gnorm = 0.0;
  double t = step;
  int quiet = 0;  // consecutive epochs with loss change below tolerance
  bool stalled = false;
  for (; epoch < max_epochs; ++epoch) {
    const Eigen::MatrixXd g = num_grad(q);
    gnorm = g.norm();
    Eigen::MatrixXd cand;
    double sc = s;
    bool ok = false;
    for (int halvings = 0; halvings < 60; ++halvings) {
      cand = q - t * g;
      if (is_pd(cand)) {  // otherwise the step left the PD cone: halve
        sc = action(cand);
        if (sc < s) {
          ok = true;
          break;
        }
      }
      t *= 0.5;
    }
    if (!ok) {
      stalled = true;
      break;
    }
    q = cand;
    const double change = s - sc;
    s = sc;
    t *= 2.0;  // re-grow after successful steps
    quiet = change < tol ? quiet + 1 : 0;
    if (quiet >= 5) {
      ++epoch;
      break;
    }
  }
  res.q = q;
  res.action = s;
  res.grad_norm = gnorm;
  res.iterations = epoch;
  res.converged = (quiet >= 5) || (stalled && gnorm < std::sqrt(tol));
  return res;
}

// Entropic part of the matrix order-parameter action for L layers of equal
// Wishart dof with a fixed product: the contraction principle gives
// L*Tr(Q^{1/L}) - logdet Q (a reconstruction; the printed theory only states
// the L = 1 case Tr Q - logdet Q).
inline double matrix_entropy(const Eigen::MatrixXd& q, int layers) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q);
  if (es.eigenvalues().minCoeff() <= 0.0) throw DomainError("matrix_entropy: Q not PD");
  const Eigen::ArrayXd ev = es.eigenvalues().array();
  return layers * ev.pow(1.0 / layers).sum() - ev.log().sum();
}

// Data term of the multi-output action over the DP x DP Kronecker kernel,
// evaluated in the joint eigenbasis. labels: P x D.
inline double multi_output_data_term(const Eigen::MatrixXd& q_matrix, const KernelMatrix& thetaL,
                                     const Eigen::MatrixXd& labels, double beta) {
  const Eigen::Index d = q_matrix.rows(), p = thetaL.dim();
  if (labels.rows() != p || labels.cols() != d)
    throw ShapeError("multi_output_data_term: label shape");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eq(q_matrix);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> et(thetaL.mat());
  const Eigen::MatrixXd yt = et.eigenvectors().transpose() * labels * eq.eigenvectors();
  double logdet = 0.0, quad = 0.0;
  for (Eigen::Index a = 0; a < d; ++a)
    for (Eigen::Index i = 0; i < p; ++i) {
      const double lam = std::max(0.0, et.eigenvalues()[i]) * eq.eigenvalues()[a];
      logdet += std::log(1.0 + beta * lam);
      quad += yt(i, a) * yt(i, a) / (1.0 / beta + lam);
    }
  return (logdet + quad) / static_cast<double>(p);
}

// Full multi-output action S(Q) for L layers; alpha = P/N.
inline std::function<double(const Eigen::MatrixXd&)> multi_output_action(
    const KernelMatrix& thetaL, const Eigen::MatrixXd& labels, double beta, double alpha,
    int layers) {
  return [thetaL, labels, beta, alpha, layers](const Eigen::MatrixXd& q) {
    return matrix_entropy(q, layers) + alpha * multi_output_data_term(q, thetaL, labels, beta);
  };
}

}  // namespace ewa
