#pragma once

#include <Eigen/Core>
#include <complex>

namespace tmix::fft {

// Complex sample vector used by the transform entry points. Lengths passed to
// fft() must be powers of two.
using ComplexVector = Eigen::VectorXcd;

bool is_power_of_two(Eigen::Index n);

// Smallest power of two >= 2n, the padded length used for circulant-embedded
// Toeplitz products. n must be >= 1.
Eigen::Index next_fft_length(Eigen::Index n);

// Forward transform is the unnormalized DFT; the inverse carries the 1/n
// factor so that fft(fft(x), true) == x. Throws on non-power-of-two input.
ComplexVector fft(const ComplexVector& x, bool inverse = false);

// Cyclic convolution of two equal-length power-of-two vectors, computed as
// IFFT(FFT(a) .* FFT(b)) with the imaginary residue discarded.
Eigen::VectorXd circular_convolve(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace tmix::fft
