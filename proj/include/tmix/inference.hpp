#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tmix/model.hpp"

namespace tmix::inference {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using model::MixPath;

struct SamplerSpec {
  enum class Mode { kGreedy, kTemperature, kTopK };
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;
  int top_k = 1;
  std::uint64_t seed = 0;
};

// Raised when a decode step would move past the per-position bias table,
// which fixes the maximum context length.
class ContextExhaustedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Per-layer history of token-mix input columns. Each slot matrix is
// preallocated to n_ctx columns; the first `position` columns are filled at
// every layer. One cache belongs to one generation session.
struct DecodeCache {
  std::vector<std::vector<MatrixXd>> history;  // [layer][slot]
  Eigen::Index position = 0;
};

// Runs the block forward once over the prompt (FFT path by default),
// capturing the per-layer mix inputs, and returns the last-position logits.
std::pair<VectorXd, DecodeCache> prefill(const model::TMModel& m,
                                         const std::vector<std::int32_t>& prompt,
                                         MixPath path = MixPath::kFft);

// Advances one position with O(d*j) work per Toeplitz slot and returns the
// next-token logits.
VectorXd decode(const model::TMModel& m, DecodeCache& cache, std::int32_t token);

std::int32_t sample_logits(const VectorXd& logits, const SamplerSpec& sampler,
                           std::mt19937_64& rng);

// prefill + iterated decode + sampling. Generation stops at the context
// limit, so the result holds prompt.size() + min(max_new, n_ctx - prompt
// length) ids.
std::vector<std::int32_t> generate(const model::TMModel& m,
                                   const std::vector<std::int32_t>& prompt,
                                   Eigen::Index max_new, const SamplerSpec& sampler,
                                   MixPath prefill_path = MixPath::kFft);

}  // namespace tmix::inference
