#pragma once

// Brute-force reference implementations kept deliberately independent of the
// library code paths they check.

#include <Eigen/Core>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <random>

namespace oracles {

// Direct O(n^2) DFT summation.
inline Eigen::VectorXcd naive_dft(const Eigen::VectorXcd& x, bool inverse = false) {
  const Eigen::Index n = x.size();
  const double sign = inverse ? 1.0 : -1.0;
  Eigen::VectorXcd out(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    std::complex<double> acc{0.0, 0.0};
    for (Eigen::Index j = 0; j < n; ++j) {
      const double a = sign * 2.0 * std::numbers::pi * static_cast<double>(k * j) /
                       static_cast<double>(n);
      acc += x[j] * std::complex<double>(std::cos(a), std::sin(a));
    }
    out[k] = inverse ? acc / static_cast<double>(n) : acc;
  }
  return out;
}

// Double-loop cyclic convolution.
inline Eigen::VectorXd naive_cyclic_convolution(const Eigen::VectorXd& a,
                                                const Eigen::VectorXd& b) {
  const Eigen::Index n = a.size();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      out[(i + j) % n] += a[i] * b[j];
    }
  }
  return out;
}

// Triple-loop causal mix: y[d][j] = sum_{k<=j} c[k] x[d][j-k] + bias[j].
inline Eigen::MatrixXd naive_causal_mix(const Eigen::MatrixXd& x,
                                        const Eigen::VectorXd& coeffs,
                                        const Eigen::VectorXd& bias) {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (Eigen::Index d = 0; d < x.rows(); ++d) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double acc = bias.size() ? bias[j] : 0.0;
      for (Eigen::Index k = 0; k <= j; ++k) acc += coeffs[k] * x(d, j - k);
      y(d, j) = acc;
    }
  }
  return y;
}

// Central finite difference of a scalar function at x, step h.
inline double central_difference(const std::function<double(double)>& f, double x,
                                 double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// Per-point symbol evaluation sigma(z) = sum_k c[k] z^{-k} by repeated complex
// multiplication (no powers, no Horner shortcuts shared with the library).
inline std::complex<double> symbol_at(const Eigen::VectorXd& coeffs,
                                      std::complex<double> z) {
  const std::complex<double> zinv = 1.0 / z;
  std::complex<double> zk{1.0, 0.0};
  std::complex<double> acc{0.0, 0.0};
  for (Eigen::Index k = 0; k < coeffs.size(); ++k) {
    acc += coeffs[k] * zk;
    zk *= zinv;
  }
  return acc;
}

inline double max_rel_error(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  const double scale = std::max(want.cwiseAbs().maxCoeff(), 1e-300);
  return (got - want).cwiseAbs().maxCoeff() / scale;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols,
                                     std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return m;
}

inline Eigen::VectorXd random_vector(Eigen::Index n, std::mt19937_64& rng) {
  return random_matrix(n, 1, rng);
}

}  // namespace oracles
