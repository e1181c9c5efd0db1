#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"
#include "tmix/autodiff.hpp"

using namespace tmix;
using namespace tmix::autodiff;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Rebuilds the graph from perturbed leaf values and checks every leaf
// gradient against central differences (step 1e-5).
void check_gradients(const std::vector<MatrixXd>& leaf_values,
                     const std::function<double(Tape&, std::vector<Var>&)>& graph,
                     double tol = 1e-6) {
  auto eval = [&](const std::vector<MatrixXd>& vals) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(vals.size());
    for (const auto& v : vals) leaves.push_back(tape.leaf(v, true));
    return graph(tape, leaves);
  };

  // graph() runs backward() itself, so the leaf grads are populated here.
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& v : leaf_values) leaves.push_back(tape.leaf(v, true));
  graph(tape, leaves);

  const double h = 1e-5;
  for (std::size_t l = 0; l < leaf_values.size(); ++l) {
    const MatrixXd& g = leaves[l].grad();
    REQUIRE(g.rows() == leaf_values[l].rows());
    for (Eigen::Index i = 0; i < leaf_values[l].rows(); ++i) {
      for (Eigen::Index j = 0; j < leaf_values[l].cols(); ++j) {
        std::vector<MatrixXd> vp = leaf_values, vm = leaf_values;
        vp[l](i, j) += h;
        vm[l](i, j) -= h;
        const double fd = (eval(vp) - eval(vm)) / (2 * h);
        const double ad = g(i, j);
        const bool ok = std::abs(ad - fd) <= tol * std::max({std::abs(ad), std::abs(fd), 1.0});
        if (!ok) {
          CAPTURE(l);
          CAPTURE(i);
          CAPTURE(j);
          CAPTURE(ad);
          CAPTURE(fd);
        }
        CHECK(ok);
      }
    }
  }
}

}  // namespace

TEST_CASE("gelu and layer_norm fixed points") {
  Tape tape;
  Var z = tape.leaf(MatrixXd::Zero(1, 1));
  CHECK(gelu(z).value()(0, 0) == 0.0);

  Var c = tape.leaf(MatrixXd::Constant(5, 3, 2.5));
  Var gain = tape.leaf(MatrixXd::Ones(5, 1));
  Var shift = tape.leaf(MatrixXd::Zero(5, 1));
  CHECK(layer_norm(c, gain, shift).value().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("matmul identity passthrough") {
  std::mt19937_64 rng(1);
  Tape tape;
  Var i = tape.leaf(MatrixXd::Identity(4, 4));
  Var b = tape.leaf(oracles::random_matrix(4, 3, rng));
  CHECK(matmul(i, b).value() == b.value());
}

TEST_CASE("sum and square roots give the textbook gradients") {
  std::mt19937_64 rng(2);
  Tape tape;
  Var x = tape.leaf(oracles::random_matrix(3, 2, rng), true);
  Var s = sum(x);
  tape.backward(s);
  CHECK(x.grad() == MatrixXd::Ones(3, 2));

  Tape tape2;
  MatrixXd xv(1, 1);
  xv(0, 0) = 1.75;
  Var y = tape2.leaf(xv, true);
  Var sq = elementwise_mul(y, y);
  tape2.backward(sum(sq));
  CHECK(y.grad()(0, 0) == doctest::Approx(2 * 1.75));
}

TEST_CASE("a leaf used twice accumulates both path gradients") {
  Tape tape;
  MatrixXd v(1, 1);
  v(0, 0) = 3.0;
  Var x = tape.leaf(v, true);
  Var y = add(x, x);  // y = 2x
  tape.backward(sum(y));
  CHECK(x.grad()(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar roots") {
  Tape tape;
  Var x = tape.leaf(MatrixXd::Zero(2, 2), true);
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("shape mismatches name the operation") {
  Tape tape;
  Var a = tape.leaf(MatrixXd::Zero(2, 3));
  Var b = tape.leaf(MatrixXd::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.leaf(MatrixXd::Zero(3, 3))), std::invalid_argument);
  CHECK_THROWS_AS(concat_rows(a, tape.leaf(MatrixXd::Zero(2, 4))),
                  std::invalid_argument);
  CHECK_THROWS_AS(slice_rows(a, 1, 5), std::invalid_argument);
}

TEST_CASE("finite-difference agreement for every primitive") {
  std::mt19937_64 rng(7);

  SUBCASE("matmul, add, scale, elementwise_mul") {
    std::vector<MatrixXd> vals = {oracles::random_matrix(2, 3, rng),
                                  oracles::random_matrix(3, 2, rng),
                                  oracles::random_matrix(2, 2, rng)};
    check_gradients(vals, [](Tape& t, std::vector<Var>& l) {
      Var m = matmul(l[0], l[1]);
      Var a = add(m, l[2]);
      Var e = elementwise_mul(a, scale(l[2], -0.7));
      Var root = sum(e);
      t.backward(root);
      return root.value()(0, 0);
    });
  }

  SUBCASE("gelu") {
    std::vector<MatrixXd> vals = {oracles::random_matrix(2, 4, rng)};
    check_gradients(vals, [](Tape& t, std::vector<Var>& l) {
      Var root = sum(gelu(l[0]));
      t.backward(root);
      return root.value()(0, 0);
    });
  }

  SUBCASE("layer_norm") {
    std::vector<MatrixXd> vals = {oracles::random_matrix(4, 2, rng),
                                  oracles::random_matrix(4, 1, rng),
                                  oracles::random_matrix(4, 1, rng),
                                  oracles::random_matrix(4, 2, rng)};
    check_gradients(vals, [](Tape& t, std::vector<Var>& l) {
      Var y = layer_norm(l[0], l[1], l[2]);
      Var root = sum(elementwise_mul(y, l[3]));
      t.backward(root);
      return root.value()(0, 0);
    });
  }

  SUBCASE("embedding_gather") {
    std::vector<MatrixXd> vals = {oracles::random_matrix(3, 5, rng),
                                  oracles::random_matrix(3, 4, rng)};
    const std::vector<std::int32_t> ids = {2, 0, 4, 2};
    check_gradients(vals, [ids](Tape& t, std::vector<Var>& l) {
      Var g = embedding_gather(l[0], ids);
      Var root = sum(elementwise_mul(g, l[1]));
      t.backward(root);
      return root.value()(0, 0);
    });
  }

  SUBCASE("concat_rows and slice_rows") {
    std::vector<MatrixXd> vals = {oracles::random_matrix(2, 3, rng),
                                  oracles::random_matrix(2, 3, rng)};
    check_gradients(vals, [](Tape& t, std::vector<Var>& l) {
      Var c = concat_rows(l[0], l[1]);
      Var s = slice_rows(c, 1, 2);
      Var root = sum(elementwise_mul(s, s));
      t.backward(root);
      return root.value()(0, 0);
    });
  }

  SUBCASE("causal_toeplitz_mix with batch of 2") {
    std::vector<MatrixXd> vals = {oracles::random_matrix(2, 8, rng),
                                  oracles::random_matrix(4, 1, rng),
                                  oracles::random_matrix(4, 1, rng)};
    for (toeplitz::MixPath path :
         {toeplitz::MixPath::kMatmul, toeplitz::MixPath::kFft}) {
      check_gradients(vals, [path](Tape& t, std::vector<Var>& l) {
        Var y = causal_toeplitz_mix(l[0], l[1], l[2], 2, path);
        Var root = sum(elementwise_mul(y, y));
        t.backward(root);
        return root.value()(0, 0);
      });
    }
  }

  SUBCASE("cross_entropy") {
    std::vector<MatrixXd> vals = {oracles::random_matrix(5, 6, rng)};
    const std::vector<std::int32_t> targets = {0, 3, 4, 1, 2, 0};
    const std::vector<double> mask = {1, 1, 0, 1, 1, 0};
    check_gradients(vals, [targets, mask](Tape& t, std::vector<Var>& l) {
      Var root = cross_entropy(l[0], targets, mask);
      t.backward(root);
      return root.value()(0, 0);
    });
  }
}

TEST_CASE("cross_entropy values") {
  SUBCASE("uniform logits give ln V") {
    Tape tape;
    Var z = tape.leaf(MatrixXd::Zero(4, 3));
    Var loss = cross_entropy(z, {1, 2, 0}, {1, 1, 1});
    CHECK(loss.value()(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("confident correct logits drive the loss to zero") {
    Tape tape;
    MatrixXd z = MatrixXd::Zero(4, 1);
    z(2, 0) = 50.0;
    Var loss = cross_entropy(tape.leaf(z), {2}, {1});
    CHECK(loss.value()(0, 0) < 1e-15);
  }
  SUBCASE("matches a per-position log-sum-exp oracle") {
    std::mt19937_64 rng(11);
    // B=2, N=3 prediction sites flattened to 6 columns, V=5.
    const MatrixXd z = oracles::random_matrix(5, 6, rng);
    const std::vector<std::int32_t> targets = {4, 0, 1, 3, 2, 2};
    const std::vector<double> mask = {1, 0, 1, 1, 1, 0};
    double want = 0.0, wsum = 0.0;
    for (Eigen::Index c = 0; c < 6; ++c) {
      double lse = 0.0;
      const double m = z.col(c).maxCoeff();
      for (Eigen::Index v = 0; v < 5; ++v) lse += std::exp(z(v, c) - m);
      lse = m + std::log(lse);
      want += mask[static_cast<std::size_t>(c)] *
              (lse - z(targets[static_cast<std::size_t>(c)], c));
      wsum += mask[static_cast<std::size_t>(c)];
    }
    want /= wsum;
    Tape tape;
    Var loss = cross_entropy(tape.leaf(z), targets, mask);
    CHECK(std::abs(loss.value()(0, 0) - want) <= 1e-10);
  }
  SUBCASE("errors") {
    Tape tape;
    Var z = tape.leaf(MatrixXd::Zero(4, 2));
    CHECK_THROWS_AS(cross_entropy(z, {1, 2}, {0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy(z, {1, 7}, {1, 1}), std::invalid_argument);
  }
}

TEST_CASE("finiteness guard fires when enabled") {
  Tape tape;
  tape.set_check_finite(true);
  MatrixXd v(1, 2);
  v << 1e308, 1e308;
  Var x = tape.leaf(v);
  CHECK_THROWS_AS(elementwise_mul(x, x), std::runtime_error);
}

TEST_CASE("identical seeds give bit-identical forwards and gradients") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tape tape;
    Var x = tape.leaf(oracles::random_matrix(4, 4, rng), true);
    Var w = tape.leaf(oracles::random_matrix(4, 4, rng), true);
    Var root = sum(gelu(matmul(w, x)));
    tape.backward(root);
    return std::make_pair(root.value()(0, 0), MatrixXd(w.grad()));
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
