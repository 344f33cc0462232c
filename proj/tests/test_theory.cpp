#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "ewa/theory.hpp"
#include "oracles.hpp"

using namespace ewa;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Instance {
  KernelMatrix theta;
  VectorXd y;
};

Instance random_instance(int p, RandomSource& rng, Activation act = Activation::Erf) {
  const MatrixXd x = rng.normal_matrix(p, 2 * p);
  Instance inst{nngp_step(gram_matrix(x, 1.0), act, 1.0), rng.normal_vector(p)};
  return inst;
}

}  // namespace

TEST_CASE("effective_action at the prior mode") {
  RandomSource rng(1);
  const auto inst = random_instance(12, rng);
  const int L = 3;
  const VectorXd q = VectorXd::Ones(L);
  const double beta = 10.0, alpha = 0.5;
  const ActionWorkspace ws(inst.theta, inst.y, beta);
  const VectorXd w = VectorXd::Ones(L);
  // Entropic term is exactly L at q = 1; the rest is the NNGP marginal
  // likelihood terms.
  const double s = effective_action(q, ws, alpha, w);
  REQUIRE(s == Catch::Approx(L + alpha * ws.data_term(1.0)).epsilon(1e-14));

  // At alpha = 0 the gradient vanishes only at q = 1.
  const VectorXd g1 = effective_action_grad(q, ws, 0.0, w);
  REQUIRE(g1.cwiseAbs().maxCoeff() == 0.0);
  const VectorXd g2 = effective_action_grad(1.3 * q, ws, 0.0, w);
  REQUIRE(g2.cwiseAbs().minCoeff() > 0.0);
}

TEST_CASE("effective_action analytic gradient matches finite differences") {
  RandomSource rng(2);
  for (int t = 0; t < 5; ++t) {
    const auto inst = random_instance(10, rng);
    const int L = 2 + t % 3;
    const double beta = 5.0 + 3.0 * rng.uniform();
    const double alpha = 0.2 + rng.uniform();
    VectorXd w(L);
    for (int l = 0; l < L; ++l) w[l] = 0.5 + rng.uniform();
    const ActionWorkspace ws(inst.theta, inst.y, beta);
    VectorXd q(L);
    for (int l = 0; l < L; ++l) q[l] = 0.5 + rng.uniform();
    const VectorXd g = effective_action_grad(q, ws, alpha, w);
    const VectorXd fd = oracles::fd_gradient(
        [&](const VectorXd& qq) { return effective_action(qq, ws, alpha, w); }, q, 1e-6);
    REQUIRE((g - fd).norm() / std::max(1.0, g.norm()) < 1e-6);
  }
}

TEST_CASE("symmetric solver: infinite-width limit and bracket invariance") {
  RandomSource rng(3);
  const auto inst = random_instance(16, rng);
  const auto res = minimize_action_symmetric(inst.theta, inst.y, 10.0, 1e-6, 3);
  REQUIRE(res.converged);
  REQUIRE(std::abs(res.q[0] - 1.0) < 1e-4);

  // Uniqueness: disjoint valid brackets give the same root.
  for (int t = 0; t < 20; ++t) {
    const auto i2 = random_instance(12, rng);
    const double alpha = 0.3 + 2.0 * rng.uniform();
    const auto a = minimize_action_symmetric(i2.theta, i2.y, 10.0, alpha, 2, {1e-2, 1e3});
    const auto b = minimize_action_symmetric(i2.theta, i2.y, 10.0, alpha, 2, {5e-2, 4e2});
    REQUIRE(std::abs(a.q[0] - b.q[0]) < 1e-9);
  }
}

TEST_CASE("symmetric solver matches zero-temperature analytics at large beta") {
  RandomSource rng(4);
  const auto inst = random_instance(14, rng);
  const double alpha = 1.4;
  const auto res = minimize_action_symmetric(inst.theta, inst.y, 1e8, alpha, 1);
  const double myy = task_overlap_myy(inst.theta, inst.y);
  REQUIRE(std::abs(res.q[0] - zero_temp_saddle_1hl(alpha, myy)) < 1e-6);
}

TEST_CASE("general solver agrees with the symmetric one on equal widths") {
  RandomSource rng(5);
  for (int L : {1, 3}) {
    const auto inst = random_instance(12, rng);
    const double alpha = 0.8;
    const auto sym = minimize_action_symmetric(inst.theta, inst.y, 8.0, alpha, L);
    const auto gen =
        minimize_action_general(inst.theta, inst.y, 8.0, alpha, std::vector<int>(L, 128));
    REQUIRE(gen.converged);
    for (int l = 0; l < L; ++l) REQUIRE(std::abs(gen.q[l] - sym.q[l]) < 1e-8);
  }
}

TEST_CASE("general solver handles unequal widths and decreases the action") {
  RandomSource rng(6);
  const MatrixXd x = rng.normal_matrix(40, 60);
  const KernelMatrix theta = nngp_compose(gram_matrix(x, 1.0), 2, Activation::Erf,
                                          LayerPrecisions::uniform(2, 1.0));
  const VectorXd y = rng.normal_vector(40);
  const std::vector<int> widths{100, 400};
  const double alpha = 40.0 / 100.0;
  const auto res = minimize_action_general(theta, y, 10.0, alpha, widths);
  REQUIRE(res.converged);
  REQUIRE(res.grad_norm < 1e-8);
  // Wider layer stays closer to the prior value 1.
  REQUIRE(std::abs(res.q[1] - 1.0) < std::abs(res.q[0] - 1.0));
  // Monotone decrease of the action along a rerun with intercepted iterates is
  // implied by the backtracking construction; check endpoints instead.
  const ActionWorkspace ws(theta, y, 10.0);
  VectorXd w(2);
  w << 1.0, 4.0;
  REQUIRE(res.action <= effective_action(VectorXd::Ones(2), ws, alpha, w) + 1e-12);
}

TEST_CASE("task overlap M_yy basics") {
  REQUIRE(task_overlap_myy(KernelMatrix::identity(4), VectorXd::Zero(4)) == 0.0);
  VectorXd y(4);
  y << 1, -1, 1, 1;  // |y|^2 = P
  REQUIRE(task_overlap_myy(KernelMatrix::identity(4), y) == Catch::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("zero-temperature 1HL saddle closed form") {
  REQUIRE(zero_temp_saddle_1hl(0.0, 3.7) == Catch::Approx(1.0).epsilon(1e-14));
  REQUIRE(zero_temp_saddle_1hl(2.3, 1.0) == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(zero_temp_saddle_1hl(2.0, 4.0) == Catch::Approx(-0.5 + std::sqrt(8.25)).epsilon(1e-14));

  // Numeric minimization of the printed zero-temperature action confirms.
  const double alpha = 2.0, myy = 4.0;
  const auto action = [&](double q) { return q + (alpha - 1.0) * std::log(q) + alpha * myy / q; };
  double best = 1.0, bs = action(1.0);
  for (double q = 0.05; q < 20.0; q += 1e-4) {
    const double s = action(q);
    if (s < bs) {
      bs = s;
      best = q;
    }
  }
  REQUIRE(std::abs(best - zero_temp_saddle_1hl(alpha, myy)) < 1e-3);
}

TEST_CASE("zero-temperature equation of state") {
  REQUIRE(zero_temp_state_eq(1.0, 2.5, 4) == Catch::Approx(std::pow(2.5, 0.2)).epsilon(1e-12));
  REQUIRE(zero_temp_state_eq(1e8, 2.5, 3) == Catch::Approx(std::pow(2.5, 1.0 / 3)).epsilon(1e-6));
  for (double alpha : {0.3, 1.7}) {
    for (double myy : {0.2, 5.0}) {
      REQUIRE(std::abs(zero_temp_state_eq(alpha, myy, 1) - zero_temp_saddle_1hl(alpha, myy)) <
              1e-12);
    }
  }
}

TEST_CASE("zero-temperature saddle is monotone in alpha") {
  for (const double myy : {5.0, 0.2}) {
    double prev = zero_temp_state_eq(1e-6, myy, 3);
    bool increasing = myy > 1.0;
    for (double alpha = 0.1; alpha < 30.0; alpha *= 1.7) {
      const double q = zero_temp_state_eq(alpha, myy, 3);
      if (increasing)
        REQUIRE(q >= prev - 1e-12);
      else
        REQUIRE(q <= prev + 1e-12);
      prev = q;
    }
  }
}

TEST_CASE("noncentral overlaps: orthogonality and Cauchy-Schwarz") {
  RandomSource rng(7);
  const auto inst = random_instance(10, rng, Activation::Relu);
  const VectorXd m = activation_mean(inst.theta, Activation::Relu);
  const VectorXd y = rng.normal_vector(10);
  const auto o = noncentral_overlaps(inst.theta, m, y);
  REQUIRE(o.myy >= 0.0);
  REQUIRE(o.mm >= 0.0);
  REQUIRE(o.my * o.my <= o.mm * o.myy * (1.0 + 1e-12));

  // m orthogonal to Theta^{-1} y makes M_my vanish.
  const VectorXd ty = solve_psd(inst.theta, y);
  VectorXd m_perp = rng.normal_vector(10);
  m_perp -= m_perp.dot(ty) / ty.squaredNorm() * ty;
  const auto o2 = noncentral_overlaps(inst.theta, m_perp, y);
  REQUIRE(std::abs(o2.my) < 1e-10 * std::max(1.0, m_perp.norm() * y.norm()));
}

TEST_CASE("noncentral action reduces to the central one on the Delta_Q = 0 line") {
  RandomSource rng(8);
  const auto inst = random_instance(12, rng, Activation::Relu);
  const VectorXd m = activation_mean(inst.theta, Activation::Relu);
  const auto o = noncentral_overlaps(inst.theta, m, inst.y);
  const double lambda1 = 0.5, alpha = 1.2;
  for (double q : {0.6, 1.0, 2.3}) {
    const NoncentralState st{q, 1.0 / q - 1.0};  // Delta_Q = 0
    const double s = noncentral_action_1hl(st, o, alpha, lambda1);
    // Central zero-temperature action up to the same constants:
    // -QQbar + log(1+Qbar) = q - 1 - log q.
    const double central = (q - 1.0 - std::log(q)) + alpha * std::log(q) + alpha * o.gamma_k +
                           alpha * o.myy / q;
    REQUIRE(s == Catch::Approx(central).margin(1e-12));
  }
}

TEST_CASE("noncentral saddle: trivial cases and central consistency at m = 0") {
  RandomSource rng(9);
  const auto inst = random_instance(12, rng, Activation::Erf);
  // alpha = 0: the stationary point is exactly (1, 0).
  TaskOverlaps o0;
  o0.myy = 1.3; o0.my = 0.2; o0.mm = 0.4; o0.gamma_k = 0.0; o0.p = 12;
  const auto s0 = noncentral_saddle_1hl(o0, 0.0, 1.0);
  REQUIRE(s0.converged);
  REQUIRE(s0.state.q == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(s0.state.qbar == Catch::Approx(0.0).margin(1e-9));

  // Zero mean (Erf): saddle equals the central theory for lambda1 != 1 too.
  const VectorXd m = VectorXd::Zero(12);
  const auto o = noncentral_overlaps(inst.theta, m, inst.y);
  const double alpha = 1.7, lambda1 = 0.5;
  const auto s = noncentral_saddle_1hl(o, alpha, lambda1);
  REQUIRE(s.converged);
  const double q_central = zero_temp_saddle_1hl(alpha, o.myy);
  REQUIRE(s.state.q == Catch::Approx(q_central).margin(1e-9));
  REQUIRE(s.state.qbar == Catch::Approx(1.0 / q_central - 1.0).margin(1e-9));
  REQUIRE(std::abs(s.state.delta()) < 1e-9);
}

TEST_CASE("noncentral saddle: generic ReLU instance converges tightly") {
  RandomSource rng(10);
  const MatrixXd x = rng.normal_matrix(60, 30);
  const KernelMatrix theta = nngp_step(gram_matrix(x, 0.5), Activation::Relu, 0.5);
  const VectorXd m = activation_mean(theta, Activation::Relu);
  const VectorXd y = rng.normal_vector(60);
  const auto o = noncentral_overlaps(theta, m, y, 1e-10);
  const auto s = noncentral_saddle_1hl(o, 2.0, 0.5);
  REQUIRE(s.converged);
  REQUIRE(s.grad_norm < 1e-9);
  // The M-zero variant pins Delta_Q at zero exactly.
  TaskOverlaps oz = o;
  oz.my = 0.0;
  oz.mm = 0.0;
  const auto sz = noncentral_saddle_1hl(oz, 2.0, 0.5);
  REQUIRE(std::abs(sz.state.delta()) < 1e-10);
}

TEST_CASE("effective dimension limits") {
  RandomSource rng(11);
  const int p = 30;
  // Sigma = I, m = 0, 1/beta << Q: t ~ P/Q.
  const double t1 = effective_dimension(KernelMatrix::identity(p), VectorXd::Zero(p), 2.0, 1e9);
  REQUIRE(t1 == Catch::Approx(p / 2.0).epsilon(1e-6));
  // Q = 0: t = beta Tr Sigma.
  const double t2 = effective_dimension(KernelMatrix::identity(p), VectorXd::Zero(p), 0.0, 0.37);
  REQUIRE(t2 == Catch::Approx(0.37 * p).epsilon(1e-12));
  // Monotone growth toward the extensive regime as beta increases.
  const MatrixXd x = rng.normal_matrix(p, p);
  const KernelMatrix theta = nngp_step(gram_matrix(x, 0.5), Activation::Relu, 0.5);
  const auto mo = activation_mean_cov(gram_matrix(x, 0.5), Activation::Relu, 0.5);
  double prev = 0.0;
  for (double beta : {1.0, 10.0, 100.0}) {
    const double t = effective_dimension(KernelMatrix(mo.cov), mo.mean, 1.0, beta);
    REQUIRE(t > prev);
    REQUIRE(t / p <= 1.0 * 0.5 * beta + p);  // finite
    prev = t;
  }
}

TEST_CASE("renorm_kernel scalar and Kronecker") {
  RandomSource rng(12);
  const auto inst = random_instance(4, rng);
  REQUIRE((renorm_kernel(inst.theta, 1.0).mat() - inst.theta.mat()).cwiseAbs().maxCoeff() == 0.0);

  const MatrixXd id1 = MatrixXd::Identity(1, 1);
  REQUIRE((renorm_kernel(inst.theta, id1).mat() - inst.theta.mat()).cwiseAbs().maxCoeff() == 0.0);

  // Kronecker spectrum = all products of spectra.
  MatrixXd qm = rng.normal_matrix(3, 3);
  qm = (qm * qm.transpose() / 3.0 + MatrixXd::Identity(3, 3)).eval();
  const KernelMatrix kron = renorm_kernel(inst.theta, qm);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eq(qm), et(inst.theta.mat()), ek(kron.mat());
  std::vector<double> products;
  for (int a = 0; a < 3; ++a)
    for (int i = 0; i < 4; ++i) products.push_back(eq.eigenvalues()[a] * et.eigenvalues()[i]);
  std::sort(products.begin(), products.end());
  for (int i = 0; i < 12; ++i)
    REQUIRE(ek.eigenvalues()[i] == Catch::Approx(products[i]).margin(1e-10));
}

TEST_CASE("matrix_saddle entropic minimum and scalar reduction") {
  // No data term: minimum of L*Tr(Q^{1/L}) - logdet Q is the identity.
  const auto entropy_only = [](const MatrixXd& q) { return matrix_entropy(q, 1); };
  const auto res = matrix_saddle(entropy_only, 3, 5e-3, 1e-10, 2000);
  REQUIRE((res.q - MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-4);

  // dim 1 agrees with the scalar symmetric solver (1HL).
  RandomSource rng(13);
  const auto inst = random_instance(10, rng);
  const double beta = 10.0, alpha = 1.5;
  MatrixXd labels(10, 1);
  labels.col(0) = inst.y;
  const auto action = multi_output_action(inst.theta, labels, beta, alpha, 1);
  const auto mres = matrix_saddle(action, 1, 5e-3, 1e-12, 5000);
  const auto sres = minimize_action_symmetric(inst.theta, inst.y, beta, alpha, 1);
  REQUIRE(mres.q(0, 0) == Catch::Approx(sres.q[0]).margin(5e-4));
}

TEST_CASE("mu_p_transform bookkeeping") {
  NetworkSpec spec = NetworkSpec::mlp(2, 2500, 300, Activation::Relu, 0.5, 0.1);
  // gamma0 = 1, width 1 -> identity transform.
  NetworkSpec tiny = NetworkSpec::mlp(1, 1, 4, Activation::Erf, 1.0, 0.1);
  const NetworkSpec t1 = mu_p_transform(tiny, 1.0);
  REQUIRE(t1.temperature == Catch::Approx(tiny.temperature).epsilon(1e-14));
  REQUIRE(t1.lambdas.readout() == Catch::Approx(tiny.lambdas.readout()).epsilon(1e-14));

  const NetworkSpec t2 = mu_p_transform(spec, 1.0);
  REQUIRE(t2.temperature == Catch::Approx(4e-5).epsilon(1e-12));
  REQUIRE(t2.lambdas.readout() == Catch::Approx(0.5 * 2500).epsilon(1e-12));
  REQUIRE(t2.lambdas.input() == Catch::Approx(0.5).epsilon(1e-14));
}
