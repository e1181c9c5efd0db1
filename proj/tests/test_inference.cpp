#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <numeric>

#include "support/model_helpers.hpp"
#include "tmix/inference.hpp"

using namespace tmix;
using namespace tmix::inference;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

model::TMModel make_model(model::MixMode mode, std::int64_t n_ctx = 24,
                          std::uint64_t seed = 9) {
  model::ModelConfig c;
  c.vocab_size = 29;
  c.d_model = 12;
  c.n_layers = 2;
  c.mode = mode;
  c.heads = 3;
  c.kernel = 2;
  c.n_ctx = n_ctx;
  c.seed = 1;
  model::TMModel m = model::TMModel::build(c);
  model_helpers::randomize_params(m, seed);
  return m;
}

}  // namespace

TEST_CASE("prefill logits equal the full forward at the last position") {
  for (auto mode :
       {model::MixMode::kSingle, model::MixMode::kHeads, model::MixMode::kKernel}) {
    const model::TMModel m = make_model(mode);
    const auto prompt = model_helpers::random_tokens(10, 29, 3);
    const auto [logits, cache] = prefill(m, prompt);
    const MatrixXd full = m.forward(prompt, 1, model::MixPath::kFft);
    CHECK((logits - full.col(9)).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(cache.position == 10);
    for (const auto& layer : cache.history) {
      for (const auto& slot : layer) CHECK(slot.cols() == m.config().n_ctx);
    }
  }
}

TEST_CASE("length-1 prompt fills one cache column everywhere") {
  const model::TMModel m = make_model(model::MixMode::kHeads);
  const auto [logits, cache] = prefill(m, {5});
  CHECK(cache.position == 1);
  CHECK(cache.history.size() == 2);
  CHECK(cache.history[0].size() == 3);  // one slot per head
}

TEST_CASE("greedy cached rollout matches the full-recompute rollout") {
  for (auto mode :
       {model::MixMode::kSingle, model::MixMode::kHeads, model::MixMode::kKernel}) {
    CAPTURE(static_cast<int>(mode));
    const model::TMModel m = make_model(mode);
    auto prompt = model_helpers::random_tokens(4, 29, 11);

    // Cached path.
    SamplerSpec greedy;
    greedy.mode = SamplerSpec::Mode::kGreedy;
    const auto cached = generate(m, prompt, 16, greedy);

    // Recompute path: full forward over the growing sequence each step,
    // tracking the worst logit deviation against the cached decode.
    auto [logits, cache] = prefill(m, prompt);
    std::vector<std::int32_t> recomputed = prompt;
    double worst = 0.0;
    VectorXd cached_logits = logits;
    for (int step = 0; step < 16; ++step) {
      const MatrixXd full = m.forward(recomputed, 1, model::MixPath::kFft);
      const VectorXd ref = full.col(full.cols() - 1);
      worst = std::max(worst, (cached_logits - ref).cwiseAbs().maxCoeff());
      Eigen::Index argmax = 0;
      ref.maxCoeff(&argmax);
      recomputed.push_back(static_cast<std::int32_t>(argmax));
      if (step + 1 < 16) {
        cached_logits = decode(m, cache, recomputed.back());
      }
    }
    CHECK(worst <= 1e-6);
    CHECK(cached == recomputed);
  }
}

TEST_CASE("decoding past the context raises the context-exhausted error") {
  const model::TMModel m = make_model(model::MixMode::kSingle, 8);
  const auto prompt = model_helpers::random_tokens(8, 29, 2);
  auto [logits, cache] = prefill(m, prompt);
  CHECK_THROWS_AS(decode(m, cache, 3), ContextExhaustedError);
}

TEST_CASE("sampling is reproducible and degenerates to greedy") {
  const model::TMModel m = make_model(model::MixMode::kSingle);
  const auto prompt = model_helpers::random_tokens(3, 29, 5);

  SamplerSpec temp;
  temp.mode = SamplerSpec::Mode::kTemperature;
  temp.temperature = 0.8;
  temp.seed = 42;
  CHECK(generate(m, prompt, 12, temp) == generate(m, prompt, 12, temp));

  SamplerSpec cold = temp;
  cold.temperature = 1e-9;
  SamplerSpec greedy;
  CHECK(generate(m, prompt, 12, cold) == generate(m, prompt, 12, greedy));

  SamplerSpec topk;
  topk.mode = SamplerSpec::Mode::kTopK;
  topk.top_k = 1;
  topk.temperature = 1.0;
  CHECK(generate(m, prompt, 12, topk) == generate(m, prompt, 12, greedy));
}

TEST_CASE("generation length accounting") {
  const model::TMModel m = make_model(model::MixMode::kSingle, 16);
  const auto prompt = model_helpers::random_tokens(6, 29, 8);
  SamplerSpec greedy;
  CHECK(generate(m, prompt, 0, greedy) == prompt);
  CHECK(generate(m, prompt, 4, greedy).size() == 10);
  CHECK(generate(m, prompt, 100, greedy).size() == 16);  // capped at n_ctx

  const auto full = model_helpers::random_tokens(16, 29, 9);
  CHECK(generate(m, full, 5, greedy) == full);  // no room left
}

TEST_CASE("sampler validation") {
  std::mt19937_64 rng(1);
  VectorXd logits(3);
  logits << 0.0, 2.0, -1.0;
  SamplerSpec bad;
  bad.mode = SamplerSpec::Mode::kTemperature;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(sample_logits(logits, bad, rng), std::invalid_argument);
  bad.mode = SamplerSpec::Mode::kTopK;
  bad.temperature = 1.0;
  bad.top_k = 0;
  CHECK_THROWS_AS(sample_logits(logits, bad, rng), std::invalid_argument);
}

TEST_CASE("per-step decode work grows with the position") {
  model::ModelConfig c;
  c.vocab_size = 17;
  c.d_model = 256;
  c.n_layers = 1;
  c.mlp_expansion = 1;  // keeps the O(d*j) mix term dominant
  c.mode = model::MixMode::kSingle;
  c.n_ctx = 1024;
  c.seed = 4;
  model::TMModel m = model::TMModel::build(c);
  model_helpers::randomize_params(m, 12, 0.02);

  // Per-position times averaged over independent rollouts to tame timer and
  // scheduler noise; the first rollout is an untimed warmup so cold caches
  // and page faults do not inflate the early positions.
  std::vector<double> step_seconds(1023, 0.0);
  for (int rollout = 0; rollout < 4; ++rollout) {
    auto [logits, cache] = prefill(m, {1});
    std::int32_t token = 2;
    for (Eigen::Index j = 1; j < 1024; ++j) {
      const auto t0 = std::chrono::steady_clock::now();
      const VectorXd out = decode(m, cache, token);
      const auto t1 = std::chrono::steady_clock::now();
      if (rollout > 0) {
        step_seconds[static_cast<std::size_t>(j - 1)] +=
            std::chrono::duration<double>(t1 - t0).count() / 3.0;
      }
      Eigen::Index argmax = 0;
      out.maxCoeff(&argmax);
      token = static_cast<std::int32_t>(argmax);
    }
  }
  // O(d*j) per step: the fitted slope of time against position is
  // nonnegative. Warmup steps and the top percentile of timer outliers are
  // dropped before the fit.
  std::vector<std::pair<double, double>> points;
  for (std::size_t i = 32; i < step_seconds.size(); ++i) {
    points.emplace_back(static_cast<double>(i), step_seconds[i]);
  }
  std::vector<double> sorted;
  for (const auto& p : points) sorted.push_back(p.second);
  std::sort(sorted.begin(), sorted.end());
  const double cutoff = sorted[sorted.size() * 99 / 100];
  double sx = 0, sy = 0, sxx = 0, sxy = 0, count = 0;
  for (const auto& [xj, yj] : points) {
    if (yj > cutoff) continue;
    sx += xj;
    sy += yj;
    sxx += xj * xj;
    sxy += xj * yj;
    count += 1;
  }
  const double slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
  CHECK(slope >= 0.0);
}
