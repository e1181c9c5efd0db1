#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace tmix::bench {

struct BenchRow {
  int d = 0;
  Eigen::Index n = 0;
  double matmul_seconds = 0.0;  // median wall time per call
  double fft_seconds = 0.0;
};

struct ExponentFit {
  int d = 0;
  double matmul_exponent = 0.0;  // log-log slope of time against n
  double fft_exponent = 0.0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::vector<ExponentFit> fits;  // one per hidden dimension
  bool single_precision = false;
};

// Times the materialized and FFT mixing paths on random data. Each (d, n)
// cell verifies the two paths agree numerically before timing; short calls
// are batched so every sample spans at least a few milliseconds and the
// median of `repeats` samples is reported. repeats must be >= 5.
BenchResult bench_mix(const std::vector<int>& dims,
                      const std::vector<Eigen::Index>& lens, int repeats,
                      bool single_precision = false, std::uint64_t seed = 0);

void write_bench_csv(const std::string& path, const BenchResult& result);

}  // namespace tmix::bench
