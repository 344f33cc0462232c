#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ewa/core.hpp"
#include "ewa/data.hpp"
#include "ewa/errors.hpp"
#include "ewa/nets.hpp"
#include "ewa/nngp.hpp"
#include "ewa/theory.hpp"

namespace ewa {

// Per-point posterior predictor moments under a (renormalized) kernel.
struct GpPointStats {
  Eigen::VectorXd mean;  // Gamma(x)
  Eigen::VectorXd var;   // sigma^2(x), clipped at zero
};

// Gamma(x) = k_x' [I/beta + K]^{-1} y, sigma^2(x) = k_xx - k_x' [I/beta + K]^{-1} k_x.
// beta = inf runs the zero-temperature mode on the bare kernel (jittered).
// The subtraction can go slightly negative numerically; values below -1e-10
// are reported on stderr before clipping.
inline GpPointStats gp_predict(const KernelMatrix& k_train, const Eigen::MatrixXd& k_cross,
                               const Eigen::VectorXd& k_self, const Eigen::VectorXd& y,
                               double beta) {
  const Eigen::Index p = k_train.dim(), m = k_cross.cols();
  if (k_cross.rows() != p || y.size() != p || k_self.size() != m)
    throw ShapeError("gp_predict: dimension mismatch");
  Eigen::MatrixXd a = k_train.mat();
  if (!std::isinf(beta)) {
    if (!(beta > 0.0)) throw DomainError("gp_predict: beta must be positive");
    a.diagonal().array() += 1.0 / beta;
  }
  const CholeskyPsd chol = cholesky_psd(KernelMatrix(std::move(a)));
  const auto solve = [&](const Eigen::MatrixXd& b) {
    Eigen::MatrixXd x = chol.factor.triangularView<Eigen::Lower>().solve(b);
    chol.factor.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  };
  GpPointStats out;
  out.mean = k_cross.transpose() * solve(y);
  const Eigen::MatrixXd v = solve(k_cross);
  out.var = k_self - (k_cross.cwiseProduct(v)).colwise().sum().transpose();
  int warned = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (out.var[i] < -1e-10 && warned++ == 0)
      std::fprintf(stderr, "gp_predict: predictor variance %.3e at point %ld clipped to zero\n",
                   out.var[i], static_cast<long>(i));
    if (out.var[i] < 0.0) out.var[i] = 0.0;
  }
  return out;
}

// Per-point bias-variance error epsilon = (y - Gamma)^2 + sigma^2, averaged.
inline double avg_epsilon(const GpPointStats& stats, const Eigen::VectorXd& labels) {
  if (labels.size() != stats.mean.size()) throw ShapeError("avg_epsilon: label count mismatch");
  return ((labels - stats.mean).array().square() + stats.var.array()).mean();
}

struct PredictorStats {
  GpPointStats train;
  GpPointStats test;
};

struct Losses {
  double train = 0.0;
  double test = 0.0;
};

inline Losses losses(const PredictorStats& stats, const Eigen::VectorXd& y_train,
                     const Eigen::VectorXd& y_test) {
  return {avg_epsilon(stats.train, y_train), avg_epsilon(stats.test, y_test)};
}

// Predictor statistics under the renormalized kernel q_scale * Theta^L built
// from one joint composition, evaluated at both the training and test points.
inline PredictorStats predictor_stats(const JointKernel& jk, const Eigen::VectorXd& y,
                                      double q_scale, double beta) {
  const KernelMatrix kr = renorm_kernel(jk.train, q_scale);
  PredictorStats out;
  out.train = gp_predict(kr, kr.mat(), kr.mat().diagonal(), y, beta);
  out.test = gp_predict(kr, q_scale * jk.cross, q_scale * jk.test_self, y, beta);
  return out;
}

// ---------------------------------------------------------------------------
// Learning-curve tables.

enum class TheoryMode { Nngp, Ewa };
enum class GridOver { Depth, Width };

struct LearningCurveRow {
  int depth = 0;
  int width = 0;
  int p = 0;
  double alpha = 0.0;
  double q_star = 1.0;   // per-layer order parameter (equal widths)
  double q_product = 1.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  double action = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool converged = true;
  std::string error;
};

// Theory learning curves over a depth or width grid. Solver failures are
// recorded per row; the grid never aborts.
inline std::vector<LearningCurveRow> learning_curve(const DatasetSplit& data,
                                                    const NetworkSpec& base,
                                                    const std::vector<int>& grid, GridOver over,
                                                    TheoryMode mode) {
  std::vector<LearningCurveRow> rows;
  for (const int g : grid) {
    NetworkSpec spec = base;
    if (over == GridOver::Depth) {
      spec.depth = g;
      const int w = base.widths.empty() ? 100 : base.widths.front();
      spec.widths.assign(static_cast<std::size_t>(g), w);
      spec.lambdas = LayerPrecisions::uniform(
          g, base.lambdas.values().front());
      // Preserve a distinct input precision when the base carries one.
      if (base.lambdas.depth() >= 1) {
        std::vector<double> lams(static_cast<std::size_t>(g) + 1,
                                 base.lambdas.values().back());
        lams[0] = base.lambdas.input();
        spec.lambdas = LayerPrecisions(lams);
      }
    } else {
      spec.widths.assign(static_cast<std::size_t>(base.depth), g);
    }
    if (spec.param == Parametrization::MuP) spec = mu_p_transform(spec, spec.gamma0);

    LearningCurveRow row;
    row.depth = spec.depth;
    row.width = spec.widths.empty() ? 0 : spec.widths.front();
    row.p = data.p();
    row.alpha = row.width > 0 ? static_cast<double>(row.p) / row.width : 0.0;
    try {
      const JointKernel jk =
          joint_kernel(data.x_train, data.x_test, spec.depth, spec.activation, spec.lambdas);
      const double beta = 1.0 / spec.temperature;
      double q_prod = 1.0;
      if (mode == TheoryMode::Ewa && spec.depth >= 1) {
        const SaddleResult res = minimize_action_symmetric(jk.train, data.y_train, beta,
                                                           row.alpha, spec.depth);
        row.q_star = res.q[0];
        q_prod = res.q_product();
        row.action = res.action;
        row.grad_norm = res.grad_norm;
        row.iterations = res.iterations;
        row.converged = res.converged;
      }
      row.q_product = q_prod;
      const PredictorStats st = predictor_stats(jk, data.y_train, q_prod, beta);
      const Losses l = losses(st, data.y_train, data.y_test);
      row.train_loss = l.train;
      row.test_loss = l.test;
    } catch (const Error& e) {
      row.error = e.what();
      row.converged = false;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_learning_curve_csv(const std::string& path,
                                     const std::vector<LearningCurveRow>& rows,
                                     const std::string& spec_hash, const std::string& mode) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw Error("write_learning_curve_csv: cannot open " + path);
  std::fprintf(f, "# spec_hash=%s mode=%s\n", spec_hash.c_str(), mode.c_str());
  std::fprintf(f,
               "depth,width,p,alpha,q_star,q_product,train_loss,test_loss,action,grad_norm,"
               "iterations,converged,error\n");
  for (const auto& r : rows)
    std::fprintf(f, "%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%s\n", r.depth,
                 r.width, r.p, r.alpha, r.q_star, r.q_product, r.train_loss, r.test_loss, r.action,
                 r.grad_norm, r.iterations, r.converged ? 1 : 0, r.error.c_str());
  std::fclose(f);
}

}  // namespace ewa
