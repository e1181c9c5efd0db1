#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "support/oracles.hpp"
#include "tmix/toeplitz.hpp"

using namespace tmix;
using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;
using toeplitz::MixPath;

namespace {

toeplitz::ToeplitzCoeffsd random_layer(Eigen::Index n_ctx, std::mt19937_64& rng) {
  return {oracles::random_vector(n_ctx, rng), oracles::random_vector(n_ctx, rng)};
}

}  // namespace

TEST_CASE("materialize_causal unrolls the definition") {
  VectorXd identity(3);
  identity << 1, 0, 0;
  CHECK(toeplitz::materialize_causal<double>(identity, 3).isIdentity(0.0));

  VectorXd shift(3);
  shift << 0, 1, 0;
  MatrixXd m = toeplitz::materialize_causal<double>(shift, 3);
  MatrixXd want = MatrixXd::Zero(3, 3);
  want(0, 1) = want(1, 2) = 1.0;  // ones one index above the main diagonal
  CHECK(m == want);

  VectorXd abc(3);
  abc << 5, 7, 11;
  m = toeplitz::materialize_causal<double>(abc, 3);
  CHECK(m(0, 0) == 5);
  CHECK(m(0, 1) == 7);
  CHECK(m(0, 2) == 11);
  CHECK(m(1, 0) == 0);
  CHECK(m(1, 1) == 5);
  CHECK(m(1, 2) == 7);
  CHECK(m(2, 2) == 5);

  CHECK_THROWS_AS(toeplitz::materialize_causal<double>(abc, 4), std::invalid_argument);
}

TEST_CASE("identity kernel and one-token shift") {
  std::mt19937_64 rng(3);
  const MatrixXd x = oracles::random_matrix(4, 3, rng);
  VectorXd coeffs = VectorXd::Zero(8);
  VectorXd zero_bias = VectorXd::Zero(8);

  coeffs[0] = 1.0;
  MatrixXd y = toeplitz::mix_forward_fft<double>(x, coeffs, zero_bias);
  CHECK((y - x).cwiseAbs().maxCoeff() < 1e-13);

  coeffs.setZero();
  coeffs[1] = 1.0;
  y = toeplitz::mix_forward_fft<double>(x, coeffs, zero_bias);
  CHECK(y.col(0).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((y.col(1) - x.col(0)).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((y.col(2) - x.col(1)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("fft path equals the materialized matmul oracle") {
  std::mt19937_64 rng(5);
  const auto t = random_layer(8, rng);
  const MatrixXd x = oracles::random_matrix(4, 8, rng);
  const MatrixXd want =
      (x * toeplitz::materialize_causal(t, 8)).rowwise() + t.bias.transpose();
  const MatrixXd got = toeplitz::mix_forward_fft<double>(x, t.coeffs, t.bias);
  CHECK(oracles::max_rel_error(got, want) <= 1e-10);
}

TEST_CASE("matmul path trivial cases") {
  VectorXd coeffs = VectorXd::Zero(4);
  VectorXd bias(4);
  bias << 1, 2, 3, 4;
  const MatrixXd x = MatrixXd::Random(3, 4);
  MatrixXd y = toeplitz::mix_forward_matmul<double>(x, coeffs, bias);
  for (Eigen::Index j = 0; j < 4; ++j) {
    CHECK((y.col(j).array() - bias[j]).abs().maxCoeff() < 1e-15);
  }

  VectorXd ones = VectorXd::Ones(4);
  MatrixXd row = MatrixXd::Ones(1, 4);
  y = toeplitz::mix_forward_matmul<double>(row, ones, VectorXd::Zero(4));
  VectorXd prefix(4);
  prefix << 1, 2, 3, 4;
  CHECK((y.transpose() - prefix).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("path equivalence across sequence lengths, double and float") {
  std::mt19937_64 rng(9);
  for (Eigen::Index n : {1, 2, 3, 7, 8, 64, 512, 1023, 1024}) {
    const auto t = random_layer(n, rng);
    const MatrixXd x = oracles::random_matrix(3, n, rng);
    const MatrixXd a = toeplitz::mix_forward_fft<double>(x, t.coeffs, t.bias);
    const MatrixXd b = toeplitz::mix_forward_matmul<double>(x, t.coeffs, t.bias);
    CHECK(oracles::max_rel_error(a, b) <= 1e-10);

    const MatrixXf xf = x.cast<float>();
    const Eigen::VectorXf cf = t.coeffs.cast<float>();
    const Eigen::VectorXf bf = t.bias.cast<float>();
    const MatrixXf af = toeplitz::mix_forward_fft<float>(xf, cf, bf);
    const MatrixXf bfm = toeplitz::mix_forward_matmul<float>(xf, cf, bf);
    const float scale = std::max(bfm.cwiseAbs().maxCoeff(), 1e-30f);
    CHECK((af - bfm).cwiseAbs().maxCoeff() / scale <= 1e-4f);
  }
}

TEST_CASE("causality: later columns never reach earlier outputs") {
  std::mt19937_64 rng(21);
  const Eigen::Index n = 10;
  const auto t = random_layer(n, rng);
  MatrixXd x = oracles::random_matrix(4, n, rng);
  const Eigen::Index j = 5;
  const MatrixXd base = toeplitz::mix_forward_matmul<double>(x, t.coeffs, t.bias);
  x.col(7).array() += 13.0;  // perturb a position after j
  const MatrixXd pert = toeplitz::mix_forward_matmul<double>(x, t.coeffs, t.bias);
  CHECK(base.leftCols(j + 1) == pert.leftCols(j + 1));

  const MatrixXd base_fft = toeplitz::mix_forward_fft<double>(x, t.coeffs, t.bias);
  MatrixXd x2 = x;
  x2.col(9).array() -= 4.0;
  const MatrixXd pert_fft = toeplitz::mix_forward_fft<double>(x2, t.coeffs, t.bias);
  CHECK((base_fft.leftCols(9) - pert_fft.leftCols(9)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("linearity in the activations when bias is zero") {
  std::mt19937_64 rng(23);
  const Eigen::Index n = 16;
  const VectorXd coeffs = oracles::random_vector(n, rng);
  const VectorXd zero_bias = VectorXd::Zero(n);
  const MatrixXd x1 = oracles::random_matrix(5, n, rng);
  const MatrixXd x2 = oracles::random_matrix(5, n, rng);
  const double a = 0.3, b = -1.7;
  const MatrixXd lhs =
      toeplitz::mix_forward_fft<double>((a * x1 + b * x2).eval(), coeffs, zero_bias);
  const MatrixXd rhs = a * toeplitz::mix_forward_fft<double>(x1, coeffs, zero_bias) +
                       b * toeplitz::mix_forward_fft<double>(x2, coeffs, zero_bias);
  CHECK(oracles::max_rel_error(lhs, rhs) <= 1e-10);
}

TEST_CASE("errors: oversize sequence and non-finite input") {
  std::mt19937_64 rng(27);
  const auto t = random_layer(4, rng);
  const MatrixXd x = oracles::random_matrix(2, 6, rng);
  CHECK_THROWS_AS(toeplitz::mix_forward_fft<double>(x, t.coeffs, t.bias),
                  std::invalid_argument);
  MatrixXd bad = oracles::random_matrix(2, 4, rng);
  bad(1, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(toeplitz::mix_forward_fft<double>(bad, t.coeffs, t.bias),
                  std::invalid_argument);
  CHECK_THROWS_AS(toeplitz::mix_forward_matmul<double>(bad, t.coeffs, t.bias),
                  std::invalid_argument);
}

TEST_CASE("backward: identity kernel and zero upstream gradient") {
  std::mt19937_64 rng(31);
  const Eigen::Index n = 6;
  VectorXd coeffs = VectorXd::Zero(n);
  coeffs[0] = 1.0;
  const VectorXd bias = VectorXd::Zero(n);
  const MatrixXd x = oracles::random_matrix(3, n, rng);
  const MatrixXd gy = oracles::random_matrix(3, n, rng);
  auto g = toeplitz::mix_backward<double>(x, coeffs, bias, gy, MixPath::kMatmul);
  CHECK((g.x - gy).cwiseAbs().maxCoeff() < 1e-14);

  auto gz = toeplitz::mix_backward<double>(x, coeffs, bias,
                                           MatrixXd::Zero(3, n), MixPath::kFft);
  CHECK(gz.x.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gz.coeffs.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gz.bias.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward matches central finite differences") {
  std::mt19937_64 rng(37);
  const Eigen::Index d = 3, n = 5;
  auto t = random_layer(n, rng);
  MatrixXd x = oracles::random_matrix(d, n, rng);
  const MatrixXd gy = oracles::random_matrix(d, n, rng);

  // Scalar objective sum(grad_y .* forward(x)) so its adjoint is exactly gy.
  auto objective = [&](const MatrixXd& xx, const VectorXd& cc, const VectorXd& bb) {
    return (gy.array() * toeplitz::mix_forward_matmul<double>(xx, cc, bb).array())
        .sum();
  };

  for (MixPath path : {MixPath::kMatmul, MixPath::kFft}) {
    const auto g = toeplitz::mix_backward<double>(x, t.coeffs, t.bias, gy, path);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        MatrixXd xp = x, xm = x;
        xp(i, j) += h;
        xm(i, j) -= h;
        const double fd =
            (objective(xp, t.coeffs, t.bias) - objective(xm, t.coeffs, t.bias)) /
            (2 * h);
        CHECK(std::abs(g.x(i, j) - fd) <=
              1e-6 * std::max({std::abs(fd), std::abs(g.x(i, j)), 1.0}));
      }
    }
    for (Eigen::Index k = 0; k < n; ++k) {
      VectorXd cp = t.coeffs, cm = t.coeffs;
      cp[k] += h;
      cm[k] -= h;
      const double fd = (objective(x, cp, t.bias) - objective(x, cm, t.bias)) / (2 * h);
      CHECK(std::abs(g.coeffs[k] - fd) <=
            1e-6 * std::max({std::abs(fd), std::abs(g.coeffs[k]), 1.0}));

      VectorXd bp = t.bias, bm = t.bias;
      bp[k] += h;
      bm[k] -= h;
      const double fdb =
          (objective(x, t.coeffs, bp) - objective(x, t.coeffs, bm)) / (2 * h);
      CHECK(std::abs(g.bias[k] - fdb) <=
            1e-6 * std::max({std::abs(fdb), std::abs(g.bias[k]), 1.0}));
    }
  }
}

TEST_CASE("decode_step reproduces the block forward") {
  std::mt19937_64 rng(41);
  const Eigen::Index d = 4, n = 12;
  const auto t = random_layer(n, rng);
  const MatrixXd x = oracles::random_matrix(d, n, rng);
  const MatrixXd want = toeplitz::mix_forward_fft<double>(x, t.coeffs, t.bias);

  MatrixXd history(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const VectorXd y =
        toeplitz::decode_step<double>(history.leftCols(j), t, x.col(j), j);
    CHECK((y - want.col(j)).cwiseAbs().maxCoeff() <= 1e-6);
    history.col(j) = x.col(j);
  }
}

TEST_CASE("decode_step trivial cases and context exhaustion") {
  std::mt19937_64 rng(43);
  const auto t = random_layer(4, rng);
  const VectorXd x0 = oracles::random_vector(3, rng);
  const MatrixXd empty(3, 0);
  const VectorXd y0 = toeplitz::decode_step<double>(empty, t, x0, 0);
  const VectorXd want0 = (t.coeffs[0] * x0).array() + t.bias[0];
  CHECK((y0 - want0).cwiseAbs().maxCoeff() <= 1e-14);

  toeplitz::ToeplitzCoeffsd id{VectorXd::Zero(4), VectorXd::Zero(4)};
  id.coeffs[0] = 1.0;
  MatrixXd history(3, 4);
  for (Eigen::Index j = 0; j < 4; ++j) {
    const VectorXd xj = oracles::random_vector(3, rng);
    const VectorXd y = toeplitz::decode_step<double>(history.leftCols(j), id, xj, j);
    CHECK(y == xj);
    history.col(j) = xj;
  }
  CHECK_THROWS_AS(
      toeplitz::decode_step<double>(history, t, x0, 4), std::out_of_range);
}
