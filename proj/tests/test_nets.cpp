#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "ewa/nets.hpp"
#include "oracles.hpp"

using namespace ewa;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("init_from_prior moments, determinism, and config boundary") {
  NetworkSpec spec = NetworkSpec::mlp(1, 1000, 1000, Activation::Erf, 4.0, 0.1);
  RandomSource rng(1);
  const ParamVector p = init_from_prior(spec, rng);
  const auto w1 = p.layer(1);
  const double var = w1.squaredNorm() / static_cast<double>(w1.size());
  const double se = 0.25 * std::sqrt(2.0 / static_cast<double>(w1.size()));
  REQUIRE(std::abs(var - 0.25) < 3.0 * se);

  RandomSource r1(9), r2(9);
  const ParamVector a = init_from_prior(spec, r1);
  const ParamVector b = init_from_prior(spec, r2);
  REQUIRE((a.flat() - b.flat()).cwiseAbs().maxCoeff() == 0.0);

  NetworkSpec bad = NetworkSpec::mlp(1, 0, 10, Activation::Erf, 1.0, 0.1);
  REQUIRE_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("mlp_forward identity activation checkable by hand") {
  NetworkSpec spec = NetworkSpec::mlp(1, 2, 2, Activation::Identity, 1.0, 0.1);
  ParamVector p(spec);
  p.layer(1) << 1, 0, 0, 1;  // row-major identity
  p.layer(2) << 1, 1;
  MatrixXd x(1, 2);
  x << 3.0, 4.0;
  const auto fwd = mlp_forward(p, x, spec);
  // f = (x1 + x2)/sqrt(2)/sqrt(2) = 7/2.
  REQUIRE(fwd.outputs(0) == Catch::Approx(3.5).epsilon(1e-14));
}

TEST_CASE("mu-P output is exactly SP output over gamma") {
  NetworkSpec sp = NetworkSpec::mlp(2, 100, 30, Activation::Erf, 1.0, 0.1);
  NetworkSpec mup = sp;
  mup.param = Parametrization::MuP;
  mup.gamma0 = 1.0;
  RandomSource rng(3);
  const ParamVector p = init_from_prior(sp, rng);
  const MatrixXd x = rng.normal_matrix(7, 30);
  const VectorXd f_sp = mlp_forward(p, x, sp).outputs;
  const VectorXd f_mup = mlp_forward(p, x, mup).outputs;
  // gamma = sqrt(100) = 10; the identity holds bitwise in this direction.
  REQUIRE((f_mup - f_sp / 10.0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("wide MLP prior output covariance matches the composed kernel") {
  const int width = 4000, draws = 800, p_rows = 5, n0 = 20;
  NetworkSpec spec = NetworkSpec::mlp(1, width, n0, Activation::Erf, 1.0, 0.1);
  RandomSource rng(11);
  const MatrixXd x = rng.normal_matrix(p_rows, n0);
  MatrixXd cov = MatrixXd::Zero(p_rows, p_rows);
  for (int t = 0; t < draws; ++t) {
    RandomSource r = rng.fork(100 + t);
    const ParamVector p = init_from_prior(spec, r);
    const VectorXd f = mlp_forward(p, x, spec).outputs;
    cov += f * f.transpose();
  }
  cov /= draws;
  const KernelMatrix theta =
      nngp_compose(gram_matrix(x, 1.0), 1, Activation::Erf, spec.lambdas);
  for (int i = 0; i < p_rows; ++i)
    for (int j = 0; j <= i; ++j) {
      const double se = std::sqrt((theta.mat()(i, i) * theta.mat()(j, j) +
                                   theta.mat()(i, j) * theta.mat()(i, j)) /
                                  draws);
      REQUIRE(std::abs(cov(i, j) - theta.mat()(i, j)) < 4.0 * se);
    }
}

TEST_CASE("loss_and_grad prior-only gradient direction") {
  NetworkSpec spec = NetworkSpec::mlp(1, 4, 3, Activation::Erf, 2.0, 0.25);
  RandomSource rng(5);
  ParamVector p = init_from_prior(spec, rng);
  const MatrixXd x(0, 3);
  const VectorXd y(0);
  const auto lg = loss_and_grad(p, x, y, spec);
  ParamVector e(spec);
  for (int l = 1; l <= p.n_layers(); ++l)
    e.layer(l) = 0.25 * spec.lambdas.values()[l - 1] * p.layer(l);
  REQUIRE((lg.grad - e.flat()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("loss_and_grad matches central finite differences on every architecture") {
  RandomSource rng(7);
  std::vector<NetworkSpec> specs;
  for (const Activation act : {Activation::Identity, Activation::Erf, Activation::Relu}) {
    NetworkSpec readout = NetworkSpec::mlp(0, 0, 6, act, 1.3, 0.2);
    readout.widths.clear();
    readout.lambdas = LayerPrecisions::uniform(0, 1.3);
    specs.push_back(readout);
    specs.push_back(NetworkSpec::mlp(2, 5, 6, act, 0.7, 0.2));
    ConvSpec conv;
    conv.mask = 3;
    conv.in_channels = 2;
    conv.input_len = 8;
    conv.strides = {2, 2};
    conv.channels = {3, 4};
    specs.push_back(NetworkSpec::cnn1d(conv, act, 0.9, 0.15));
  }
  NetworkSpec mup = NetworkSpec::mlp(2, 5, 6, Activation::Erf, 1.0, 0.2);
  mup.param = Parametrization::MuP;
  specs.push_back(mup);

  int idx = 0;
  for (auto& spec : specs) {
    spec.validate();
    RandomSource r = rng.fork(100 + idx++);
    ParamVector p = init_from_prior(spec, r);
    const int n_inputs = spec.kind == NetworkSpec::Kind::Mlp
                             ? spec.input_dim
                             : spec.conv.input_len * spec.conv.in_channels;
    const MatrixXd x = r.normal_matrix(4, n_inputs);
    const VectorXd y = r.normal_vector(4);
    const auto lg = loss_and_grad(p, x, y, spec);
    const auto f = [&](const VectorXd& th) {
      ParamVector q(spec);
      q.flat() = th;
      return loss_and_grad(q, x, y, spec).loss_reg;
    };
    const VectorXd fd = oracles::fd_gradient(f, p.flat(), 1e-5);
    const double denom = std::max(1.0, lg.grad.norm());
    REQUIRE((lg.grad - fd).norm() / denom < 1e-5);
  }
}

TEST_CASE("perfect-fit parameters have zero data-term gradient") {
  NetworkSpec spec = NetworkSpec::mlp(1, 4, 3, Activation::Erf, 1.0, 0.5);
  RandomSource rng(15);
  ParamVector p = init_from_prior(spec, rng);
  const MatrixXd x = rng.normal_matrix(5, 3);
  const VectorXd y = mlp_forward(p, x, spec).outputs;
  const auto lg = loss_and_grad(p, x, y, spec);
  REQUIRE(lg.data_loss == Catch::Approx(0.0).margin(1e-20));
  ParamVector e(spec);
  for (int l = 1; l <= p.n_layers(); ++l)
    e.layer(l) = spec.temperature * spec.lambdas.values()[l - 1] * p.layer(l);
  REQUIRE((lg.grad - e.flat()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cnn_forward single patch reduces to a 1HL MLP") {
  ConvSpec conv;
  conv.mask = 9;
  conv.in_channels = 1;
  conv.input_len = 9;
  conv.strides = {9};
  conv.channels = {5};
  NetworkSpec cnn = NetworkSpec::cnn1d(conv, Activation::Erf, 1.0, 0.1);
  NetworkSpec mlp = NetworkSpec::mlp(1, 5, 9, Activation::Erf, 1.0, 0.1);

  RandomSource rng(19);
  ParamVector pc(cnn);
  for (Eigen::Index i = 0; i < pc.size(); ++i) pc.flat()[i] = rng.normal();
  ParamVector pm(mlp);
  pm.flat() = pc.flat();
  const MatrixXd x = rng.normal_matrix(6, 9);
  const VectorXd fc = cnn_forward(pc, x, cnn).outputs;
  const VectorXd fm = mlp_forward(pm, x, mlp).outputs;
  REQUIRE((fc - fm).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("cnn_forward zero input gives zero output") {
  ConvSpec conv;
  conv.mask = 3;
  conv.in_channels = 2;
  conv.input_len = 6;
  conv.strides = {3};
  conv.channels = {4};
  for (const Activation act : {Activation::Identity, Activation::Erf, Activation::Relu}) {
    NetworkSpec spec = NetworkSpec::cnn1d(conv, act, 1.0, 0.1);
    RandomSource rng(23);
    const ParamVector p = init_from_prior(spec, rng);
    const MatrixXd x = MatrixXd::Zero(3, 12);
    REQUIRE(cnn_forward(p, x, spec).outputs.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("empirical kernel basics and prior mean identity") {
  const MatrixXd h0 = MatrixXd::Zero(3, 4);
  REQUIRE(empirical_kernel(h0, Activation::Relu, 1.0, 4).mat().cwiseAbs().maxCoeff() == 0.0);

  RandomSource rng(29);
  const MatrixXd h = rng.normal_matrix(3, 4);
  const KernelMatrix ke = empirical_kernel(h, Activation::Identity, 2.0, 4);
  REQUIRE((ke.mat() - h * h.transpose() / 8.0).cwiseAbs().maxCoeff() < 1e-14);

  // Average of K_E^(1) over prior draws approaches Theta(C).
  const int n0 = 10, width = 50, draws = 4000, p_rows = 4;
  NetworkSpec spec = NetworkSpec::mlp(1, width, n0, Activation::Erf, 1.0, 0.1);
  const MatrixXd x = rng.normal_matrix(p_rows, n0);
  MatrixXd avg = MatrixXd::Zero(p_rows, p_rows);
  for (int t = 0; t < draws; ++t) {
    RandomSource r = rng.fork(500 + t);
    const ParamVector p = init_from_prior(spec, r);
    const auto fwd = mlp_forward(p, x, spec);
    avg += empirical_kernel(fwd.preacts[0], Activation::Erf, 1.0, width).mat();
  }
  avg /= draws;
  const KernelMatrix theta = nngp_step(gram_matrix(x, 1.0), Activation::Erf, 1.0);
  REQUIRE((avg - theta.mat()).cwiseAbs().maxCoeff() < 5e-3);
}
