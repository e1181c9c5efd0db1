#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

#include "tmix/fft.hpp"

namespace tmix::toeplitz {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// One causal token-mixing layer in compressed form. coeffs[k] is the weight
// of the token k positions before the current one (coeffs[0] = current
// token); bias[j] is added to every channel of output position j. Both
// vectors have length N_ctx and a sequence of N <= N_ctx positions uses the
// length-N prefix of each.
template <typename Scalar>
struct ToeplitzCoeffs {
  VectorX<Scalar> coeffs;
  VectorX<Scalar> bias;

  Eigen::Index context() const { return coeffs.size(); }
};

using ToeplitzCoeffsd = ToeplitzCoeffs<double>;
using ToeplitzCoeffsf = ToeplitzCoeffs<float>;

// Which implementation of the mixing product to run. kAuto materializes for
// short sequences and switches to the circulant FFT embedding beyond the
// cutoff, where the O(n log n) path wins on CPU.
enum class MixPath { kAuto, kFft, kMatmul };

inline constexpr Eigen::Index kMatmulCutoff = 256;

inline bool use_fft(MixPath path, Eigen::Index n) {
  switch (path) {
    case MixPath::kFft: return true;
    case MixPath::kMatmul: return false;
    case MixPath::kAuto: return n > kMatmulCutoff;
  }
  return true;
}

namespace detail {

template <typename Scalar>
void check_mix_args(const Eigen::Ref<const MatrixX<Scalar>>& x,
                    const Eigen::Ref<const VectorX<Scalar>>& coeffs,
                    const Eigen::Ref<const VectorX<Scalar>>& bias,
                    const char* op) {
  if (x.cols() > coeffs.size()) {
    throw std::invalid_argument(std::string(op) + ": sequence length " +
                                std::to_string(x.cols()) +
                                " exceeds context length " +
                                std::to_string(coeffs.size()));
  }
  if (bias.size() != 0 && bias.size() != coeffs.size()) {
    throw std::invalid_argument(std::string(op) + ": bias length " +
                                std::to_string(bias.size()) +
                                " does not match context length " +
                                std::to_string(coeffs.size()));
  }
  if (!x.allFinite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

// Materialized masked matrix for right-multiplication Y = X * M: M[i][j] =
// coeffs[j - i] for j >= i and 0 below the diagonal, so output position j
// sees only input positions <= j.
template <typename Scalar>
MatrixX<Scalar> materialize_causal(const Eigen::Ref<const VectorX<Scalar>>& coeffs,
                                   Eigen::Index n) {
  if (n > coeffs.size()) {
    throw std::invalid_argument("materialize_causal: n " + std::to_string(n) +
                                " exceeds context length " +
                                std::to_string(coeffs.size()));
  }
  MatrixX<Scalar> m = MatrixX<Scalar>::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) m(i, j) = coeffs[j - i];
  }
  return m;
}

template <typename Scalar>
MatrixX<Scalar> materialize_causal(const ToeplitzCoeffs<Scalar>& t, Eigen::Index n) {
  return materialize_causal<Scalar>(t.coeffs, n);
}

// Y[:,j] = sum_{k<=j} coeffs[k] * X[:,j-k] + bias[j], by materialized right
// multiplication. An empty bias is treated as zero.
template <typename Scalar>
MatrixX<Scalar> mix_forward_matmul(const Eigen::Ref<const MatrixX<Scalar>>& x,
                                   const Eigen::Ref<const VectorX<Scalar>>& coeffs,
                                   const Eigen::Ref<const VectorX<Scalar>>& bias) {
  detail::check_mix_args<Scalar>(x, coeffs, bias, "mix_forward_matmul");
  const Eigen::Index n = x.cols();
  MatrixX<Scalar> y(x.rows(), n);
  y.noalias() = x * materialize_causal<Scalar>(coeffs, n);
  if (bias.size() != 0) y.rowwise() += bias.head(n).transpose();
  return y;
}

// Same contract as mix_forward_matmul, computed per channel through the
// length-next_fft_length(N) circulant embedding. The transform runs in double
// regardless of Scalar; single-precision activations widen at the boundary.
template <typename Scalar>
MatrixX<Scalar> mix_forward_fft(const Eigen::Ref<const MatrixX<Scalar>>& x,
                                const Eigen::Ref<const VectorX<Scalar>>& coeffs,
                                const Eigen::Ref<const VectorX<Scalar>>& bias) {
  detail::check_mix_args<Scalar>(x, coeffs, bias, "mix_forward_fft");
  const Eigen::Index n = x.cols();
  const Eigen::Index d = x.rows();
  if (n == 0) return MatrixX<Scalar>(d, 0);
  const Eigen::Index len = fft::next_fft_length(n);

  fft::ComplexVector kernel = fft::ComplexVector::Zero(len);
  for (Eigen::Index k = 0; k < n; ++k) {
    kernel[k] = std::complex<double>(static_cast<double>(coeffs[k]), 0.0);
  }
  const fft::ComplexVector kernel_hat = fft::fft(kernel);

  MatrixX<Scalar> y(d, n);
  fft::ComplexVector buf(len);
  for (Eigen::Index r = 0; r < d; ++r) {
    buf.setZero();
    for (Eigen::Index j = 0; j < n; ++j) {
      buf[j] = std::complex<double>(static_cast<double>(x(r, j)), 0.0);
    }
    fft::ComplexVector hat = fft::fft(buf);
    hat.array() *= kernel_hat.array();
    const fft::ComplexVector conv = fft::fft(hat, true);
    for (Eigen::Index j = 0; j < n; ++j) {
      y(r, j) = static_cast<Scalar>(conv[j].real());
    }
  }
  if (bias.size() != 0) y.rowwise() += bias.head(n).transpose();
  return y;
}

template <typename Scalar>
MatrixX<Scalar> mix_forward(const Eigen::Ref<const MatrixX<Scalar>>& x,
                            const Eigen::Ref<const VectorX<Scalar>>& coeffs,
                            const Eigen::Ref<const VectorX<Scalar>>& bias,
                            MixPath path) {
  return use_fft(path, x.cols())
             ? mix_forward_fft<Scalar>(x, coeffs, bias)
             : mix_forward_matmul<Scalar>(x, coeffs, bias);
}

template <typename Scalar>
MatrixX<Scalar> mix_forward_fft(const Eigen::Ref<const MatrixX<Scalar>>& x,
                                const ToeplitzCoeffs<Scalar>& t) {
  return mix_forward_fft<Scalar>(x, t.coeffs, t.bias);
}

template <typename Scalar>
MatrixX<Scalar> mix_forward_matmul(const Eigen::Ref<const MatrixX<Scalar>>& x,
                                   const ToeplitzCoeffs<Scalar>& t) {
  return mix_forward_matmul<Scalar>(x, t.coeffs, t.bias);
}

template <typename Scalar>
struct MixGrads {
  MatrixX<Scalar> x;        // same shape as the forward input
  VectorX<Scalar> coeffs;   // length = context length, zero beyond position N-1
  VectorX<Scalar> bias;     // empty when the forward bias was empty
};

// Adjoint of the forward mix:
//   grad_x[:,i]    = sum_k coeffs[k] * grad_y[:,i+k]         (anti-causal)
//   grad_coeffs[k] = sum_d sum_{j>=k} X[d][j-k] * grad_y[d][j]
//   grad_bias[j]   = sum_d grad_y[d][j]
// The correlation sums run through the FFT path when `path` selects it.
template <typename Scalar>
MixGrads<Scalar> mix_backward(const Eigen::Ref<const MatrixX<Scalar>>& x,
                              const Eigen::Ref<const VectorX<Scalar>>& coeffs,
                              const Eigen::Ref<const VectorX<Scalar>>& bias,
                              const Eigen::Ref<const MatrixX<Scalar>>& grad_y,
                              MixPath path = MixPath::kAuto) {
  detail::check_mix_args<Scalar>(x, coeffs, bias, "mix_backward");
  if (grad_y.rows() != x.rows() || grad_y.cols() != x.cols()) {
    throw std::invalid_argument("mix_backward: grad shape mismatch");
  }
  const Eigen::Index n = x.cols();
  const Eigen::Index d = x.rows();
  MixGrads<Scalar> g;
  g.coeffs = VectorX<Scalar>::Zero(coeffs.size());
  if (bias.size() != 0) {
    g.bias = VectorX<Scalar>::Zero(bias.size());
    g.bias.head(n) = grad_y.colwise().sum();
  }
  if (n == 0) {
    g.x.resize(d, 0);
    return g;
  }

  if (!use_fft(path, n)) {
    const MatrixX<Scalar> m = materialize_causal<Scalar>(coeffs, n);
    g.x.noalias() = grad_y * m.transpose();
    // grad_coeffs[k] is the k-th superdiagonal sum of X^T * grad_y.
    MatrixX<Scalar> p(n, n);
    p.noalias() = x.transpose() * grad_y;
    for (Eigen::Index k = 0; k < n; ++k) {
      Scalar acc = Scalar(0);
      for (Eigen::Index j = k; j < n; ++j) acc += p(j - k, j);
      g.coeffs[k] = acc;
    }
    return g;
  }

  // FFT route: both sums are cyclic correlations, realized as convolutions
  // with a time-reversed kernel. len >= 2n keeps wrap-around out of the
  // first n samples.
  const Eigen::Index len = fft::next_fft_length(n);
  fft::ComplexVector buf = fft::ComplexVector::Zero(len);
  for (Eigen::Index k = 0; k < n; ++k) {
    buf[(len - k) % len] = std::complex<double>(static_cast<double>(coeffs[k]), 0.0);
  }
  const fft::ComplexVector rev_kernel_hat = fft::fft(buf);

  g.x.resize(d, n);
  VectorX<double> coeff_acc = VectorX<double>::Zero(n);
  for (Eigen::Index r = 0; r < d; ++r) {
    buf.setZero();
    for (Eigen::Index j = 0; j < n; ++j) {
      buf[j] = std::complex<double>(static_cast<double>(grad_y(r, j)), 0.0);
    }
    const fft::ComplexVector gy_hat = fft::fft(buf);

    fft::ComplexVector prod = gy_hat;
    prod.array() *= rev_kernel_hat.array();
    const fft::ComplexVector gx = fft::fft(prod, true);
    for (Eigen::Index i = 0; i < n; ++i) {
      g.x(r, i) = static_cast<Scalar>(gx[i].real());
    }

    buf.setZero();
    for (Eigen::Index j = 0; j < n; ++j) {
      buf[(len - j) % len] = std::complex<double>(static_cast<double>(x(r, j)), 0.0);
    }
    prod = fft::fft(buf);
    prod.array() *= gy_hat.array();
    const fft::ComplexVector gc = fft::fft(prod, true);
    for (Eigen::Index k = 0; k < n; ++k) coeff_acc[k] += gc[k].real();
  }
  for (Eigen::Index k = 0; k < n; ++k) g.coeffs[k] = static_cast<Scalar>(coeff_acc[k]);
  return g;
}

template <typename Scalar>
MixGrads<Scalar> mix_backward(const Eigen::Ref<const MatrixX<Scalar>>& x,
                              const ToeplitzCoeffs<Scalar>& t,
                              const Eigen::Ref<const MatrixX<Scalar>>& grad_y,
                              MixPath path = MixPath::kAuto) {
  return mix_backward<Scalar>(x, t.coeffs, t.bias, grad_y, path);
}

// One incremental position of the mix: y_j = sum_{k<=j} coeffs[k] * x_{j-k}
// + bias[j]. `history` holds columns 0..j-1 of the input seen so far; the
// caller appends x_j afterwards. O(D*j) work.
template <typename Scalar>
VectorX<Scalar> decode_step(const Eigen::Ref<const MatrixX<Scalar>>& history,
                            const Eigen::Ref<const VectorX<Scalar>>& coeffs,
                            const Eigen::Ref<const VectorX<Scalar>>& bias,
                            const Eigen::Ref<const VectorX<Scalar>>& x_j,
                            Eigen::Index j) {
  if (j >= coeffs.size()) {
    throw std::out_of_range("decode_step: position " + std::to_string(j) +
                            " exhausts the context of length " +
                            std::to_string(coeffs.size()));
  }
  if (history.cols() != j || history.rows() != x_j.size()) {
    throw std::invalid_argument("decode_step: history shape mismatch");
  }
  VectorX<Scalar> y = coeffs[0] * x_j;
  if (j > 0) {
    // sum_{k=1..j} coeffs[k] * history[:, j-k]
    y.noalias() += history * coeffs.segment(1, j).reverse();
  }
  if (bias.size() != 0) y.array() += bias[j];
  return y;
}

template <typename Scalar>
VectorX<Scalar> decode_step(const Eigen::Ref<const MatrixX<Scalar>>& history,
                            const ToeplitzCoeffs<Scalar>& t,
                            const Eigen::Ref<const VectorX<Scalar>>& x_j,
                            Eigen::Index j) {
  return decode_step<Scalar>(history, t.coeffs, t.bias, x_j, j);
}

}  // namespace tmix::toeplitz
