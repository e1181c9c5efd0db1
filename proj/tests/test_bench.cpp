#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tmix/bench.hpp"

using namespace tmix;

TEST_CASE("bench rows, fits, and csv") {
  const auto result = bench::bench_mix({8}, {32, 64, 128}, 5, false, 3);
  REQUIRE(result.rows.size() == 3);
  for (const auto& row : result.rows) {
    CHECK(row.matmul_seconds > 0.0);
    CHECK(row.fft_seconds > 0.0);
  }
  REQUIRE(result.fits.size() == 1);
  CHECK(result.fits[0].d == 8);

  const auto path =
      (std::filesystem::temp_directory_path() / "tmix_bench_test.csv").string();
  bench::write_bench_csv(path, result);
  std::ifstream in(path);
  std::string header;
  REQUIRE(std::getline(in, header));
  CHECK(header == "precision,d,n,path,median_seconds");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 6);  // two paths per (d, n)
}

TEST_CASE("bench input validation") {
  CHECK_THROWS_AS(bench::bench_mix({8}, {32}, 4), std::invalid_argument);
  CHECK_THROWS_AS(bench::bench_mix({}, {32}, 5), std::invalid_argument);
}

TEST_CASE("single-precision cells pass the equivalence gate") {
  const auto result = bench::bench_mix({4}, {64}, 5, true, 7);
  CHECK(result.single_precision);
  CHECK(result.rows.size() == 1);
}
