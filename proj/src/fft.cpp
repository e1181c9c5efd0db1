#include "tmix/fft.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace tmix::fft {

namespace {

// Per-length twiddle factors w[k] = exp(-2*pi*i*k/n), k < n/2. Tables are
// immutable once built and shared across threads.
struct TwiddleTable {
  std::vector<std::complex<double>> w;
};

const TwiddleTable& table_for(Eigen::Index n) {
  static std::mutex mu;
  static std::map<Eigen::Index, std::unique_ptr<TwiddleTable>> cache;
  std::scoped_lock lock(mu);
  auto& slot = cache[n];
  if (!slot) {
    slot = std::make_unique<TwiddleTable>();
    slot->w.resize(static_cast<std::size_t>(n / 2));
    const double step = -2.0 * std::numbers::pi / static_cast<double>(n);
    for (Eigen::Index k = 0; k < n / 2; ++k) {
      const double a = step * static_cast<double>(k);
      slot->w[static_cast<std::size_t>(k)] = {std::cos(a), std::sin(a)};
    }
  }
  return *slot;
}

}  // namespace

bool is_power_of_two(Eigen::Index n) { return n > 0 && (n & (n - 1)) == 0; }

Eigen::Index next_fft_length(Eigen::Index n) {
  if (n < 1) throw std::invalid_argument("next_fft_length: n must be >= 1");
  Eigen::Index len = 1;
  while (len < 2 * n) len *= 2;
  return len;
}

ComplexVector fft(const ComplexVector& x, bool inverse) {
  const Eigen::Index n = x.size();
  if (!is_power_of_two(n)) {
    throw std::invalid_argument("fft: length " + std::to_string(n) +
                                " is not a power of two");
  }
  ComplexVector out(n);
  // Bit-reversal reordering.
  out[0] = x[0];
  for (Eigen::Index i = 1, rev = 0; i < n; ++i) {
    Eigen::Index bit = n >> 1;
    for (; rev & bit; bit >>= 1) rev ^= bit;
    rev |= bit;
    out[i] = x[rev];
  }
  const TwiddleTable& tw = table_for(n);
  for (Eigen::Index len = 2; len <= n; len <<= 1) {
    const Eigen::Index half = len >> 1;
    const Eigen::Index stride = n / len;
    for (Eigen::Index start = 0; start < n; start += len) {
      for (Eigen::Index k = 0; k < half; ++k) {
        std::complex<double> w = tw.w[static_cast<std::size_t>(k * stride)];
        if (inverse) w = std::conj(w);
        const std::complex<double> odd = out[start + half + k] * w;
        const std::complex<double> even = out[start + k];
        out[start + k] = even + odd;
        out[start + half + k] = even - odd;
      }
    }
  }
  if (inverse) out /= static_cast<double>(n);
  return out;
}

Eigen::VectorXd circular_convolve(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("circular_convolve: length mismatch " +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  const Eigen::Index n = a.size();
  if (!is_power_of_two(n)) {
    throw std::invalid_argument("circular_convolve: length must be a power of two");
  }
  ComplexVector ca = a.cast<std::complex<double>>();
  ComplexVector cb = b.cast<std::complex<double>>();
  ComplexVector fa = fft(ca);
  ComplexVector fb = fft(cb);
  fa.array() *= fb.array();
  return fft(fa, true).real();
}

}  // namespace tmix::fft
