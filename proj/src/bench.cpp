#include "tmix/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "tmix/toeplitz.hpp"

namespace tmix::bench {

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double time_once(const F& f) {
  const auto t0 = Clock::now();
  f();
  const auto t1 = Clock::now();
  return std::chrono::duration<double>(t1 - t0).count();
}

// Median per-call seconds; each sample loops the call often enough to span
// ~10 ms so the clock resolution stays negligible.
template <typename F>
double median_seconds(const F& f, int repeats) {
  f();  // warmup
  double est = time_once(f);
  const int iters = est >= 0.01 ? 1 : static_cast<int>(std::ceil(0.01 / std::max(est, 1e-9)));
  std::vector<double> samples(static_cast<std::size_t>(repeats));
  for (auto& s : samples) {
    const auto t0 = Clock::now();
    for (int i = 0; i < iters; ++i) f();
    const auto t1 = Clock::now();
    s = std::chrono::duration<double>(t1 - t0).count() / iters;
  }
  std::nth_element(samples.begin(), samples.begin() + repeats / 2, samples.end());
  return samples[static_cast<std::size_t>(repeats / 2)];
}

double loglog_slope(const std::vector<double>& n, const std::vector<double>& t) {
  const auto count = static_cast<double>(n.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    const double x = std::log(n[i]);
    const double y = std::log(t[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (count * sxy - sx * sy) / (count * sxx - sx * sx);
}

template <typename Scalar>
BenchResult run(const std::vector<int>& dims, const std::vector<Eigen::Index>& lens,
                int repeats, std::uint64_t seed) {
  using Matrix = toeplitz::MatrixX<Scalar>;
  using Vector = toeplitz::VectorX<Scalar>;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);

  BenchResult result;
  result.single_precision = std::is_same_v<Scalar, float>;
  for (int d : dims) {
    std::vector<double> ns, matmul_t, fft_t;
    for (Eigen::Index n : lens) {
      Matrix x(d, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i < d; ++i) x(i, j) = static_cast<Scalar>(dist(rng));
      }
      Vector coeffs(n), bias(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        coeffs[i] = static_cast<Scalar>(dist(rng) / std::sqrt(static_cast<double>(n)));
        bias[i] = static_cast<Scalar>(dist(rng));
      }

      // Both paths must agree on this cell before their timing means anything.
      const Matrix a = toeplitz::mix_forward_matmul<Scalar>(x, coeffs, bias);
      const Matrix b = toeplitz::mix_forward_fft<Scalar>(x, coeffs, bias);
      const double rel = static_cast<double>((a - b).cwiseAbs().maxCoeff()) /
                         std::max(static_cast<double>(a.cwiseAbs().maxCoeff()), 1e-30);
      const double gate = result.single_precision ? 1e-3 : 1e-8;
      if (rel > gate) {
        throw std::runtime_error("bench_mix: path disagreement " + std::to_string(rel) +
                                 " at d=" + std::to_string(d) +
                                 " n=" + std::to_string(n));
      }

      BenchRow row;
      row.d = d;
      row.n = n;
      row.matmul_seconds = median_seconds(
          [&] {
            volatile Scalar sink =
                toeplitz::mix_forward_matmul<Scalar>(x, coeffs, bias)(0, 0);
            (void)sink;
          },
          repeats);
      row.fft_seconds = median_seconds(
          [&] {
            volatile Scalar sink =
                toeplitz::mix_forward_fft<Scalar>(x, coeffs, bias)(0, 0);
            (void)sink;
          },
          repeats);
      ns.push_back(static_cast<double>(n));
      matmul_t.push_back(row.matmul_seconds);
      fft_t.push_back(row.fft_seconds);
      result.rows.push_back(row);
    }
    if (ns.size() >= 2) {
      ExponentFit fit;
      fit.d = d;
      fit.matmul_exponent = loglog_slope(ns, matmul_t);
      fit.fft_exponent = loglog_slope(ns, fft_t);
      result.fits.push_back(fit);
    }
  }
  return result;
}

}  // namespace

BenchResult bench_mix(const std::vector<int>& dims,
                      const std::vector<Eigen::Index>& lens, int repeats,
                      bool single_precision, std::uint64_t seed) {
  if (repeats < 5) throw std::invalid_argument("bench_mix: repeats must be >= 5");
  if (dims.empty() || lens.empty()) {
    throw std::invalid_argument("bench_mix: need at least one d and one n");
  }
  return single_precision ? run<float>(dims, lens, repeats, seed)
                          : run<double>(dims, lens, repeats, seed);
}

void write_bench_csv(const std::string& path, const BenchResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "precision,d,n,path,median_seconds\n";
  const char* prec = result.single_precision ? "f32" : "f64";
  out.precision(12);
  for (const auto& row : result.rows) {
    out << prec << ',' << row.d << ',' << row.n << ",matmul," << row.matmul_seconds
        << '\n';
    out << prec << ',' << row.d << ',' << row.n << ",fft," << row.fft_seconds << '\n';
  }
}

}  // namespace tmix::bench
