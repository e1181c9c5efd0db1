#include "tmix/inference.hpp"

#include <algorithm>
#include <cmath>

#include "tmix/toeplitz.hpp"

namespace tmix::inference {

namespace {

using model::BlockParams;
using model::MixMode;
using model::TMModel;

Eigen::Index slots_per_layer(const model::ModelConfig& c) {
  return c.mode == MixMode::kHeads ? c.heads : 1;
}

Eigen::Index slot_rows(const model::ModelConfig& c) {
  switch (c.mode) {
    case MixMode::kSingle: return c.d_model;
    case MixMode::kHeads: return c.head_dim();
    case MixMode::kKernel: return c.d_model + c.kernel;
  }
  return c.d_model;
}

}  // namespace

std::pair<VectorXd, DecodeCache> prefill(const TMModel& m,
                                         const std::vector<std::int32_t>& prompt,
                                         MixPath path) {
  if (prompt.empty()) {
    throw std::invalid_argument("prefill: prompt must hold at least one token");
  }
  const auto& c = m.config();
  if (static_cast<Eigen::Index>(prompt.size()) > c.n_ctx) {
    throw std::invalid_argument("prefill: prompt length " +
                                std::to_string(prompt.size()) + " exceeds n_ctx " +
                                std::to_string(c.n_ctx));
  }
  model::MixCapture capture;
  const MatrixXd hidden = m.hidden_states(prompt, 1, path, &capture);
  const VectorXd logits =
      m.params()[m.head_index()].value * hidden.col(hidden.cols() - 1);

  DecodeCache cache;
  cache.position = static_cast<Eigen::Index>(prompt.size());
  cache.history.resize(capture.per_block.size());
  for (std::size_t layer = 0; layer < capture.per_block.size(); ++layer) {
    auto& slots = capture.per_block[layer];
    if (static_cast<Eigen::Index>(slots.size()) != slots_per_layer(c)) {
      throw std::logic_error("prefill: unexpected mix capture layout");
    }
    cache.history[layer].reserve(slots.size());
    for (auto& s : slots) {
      if (s.cols() != cache.position || s.rows() != slot_rows(c)) {
        throw std::logic_error("prefill: capture shape mismatch");
      }
      MatrixXd h(s.rows(), c.n_ctx);
      h.leftCols(cache.position) = s;
      cache.history[layer].push_back(std::move(h));
    }
  }
  return {logits, std::move(cache)};
}

VectorXd decode(const TMModel& m, DecodeCache& cache, std::int32_t token) {
  const auto& c = m.config();
  const Eigen::Index j = cache.position;
  if (j >= c.n_ctx) {
    throw ContextExhaustedError(
        "decode: position " + std::to_string(j) + " exhausts the context length " +
        std::to_string(c.n_ctx) + " fixed by the per-position bias");
  }
  if (token < 0 || token >= c.vocab_size) {
    throw std::invalid_argument("decode: token id out of range");
  }
  if (cache.history.size() != m.blocks().size()) {
    throw std::invalid_argument("decode: cache does not match the model");
  }
  const auto& params = m.params();

  VectorXd x = params[m.embed_index()].value.col(token);
  for (std::size_t layer = 0; layer < m.blocks().size(); ++layer) {
    const BlockParams& bp = m.blocks()[layer];
    const VectorXd xn = model::detail::layer_norm_plain(
        x, params[bp.ln1_gain].value.col(0), params[bp.ln1_shift].value.col(0));
    VectorXd mixed;
    switch (c.mode) {
      case MixMode::kSingle: {
        MatrixXd& hist = cache.history[layer][0];
        mixed = toeplitz::decode_step<double>(
            hist.leftCols(j), params[bp.coeffs[0]].value.col(0),
            params[bp.bias[0]].value.col(0), xn, j);
        hist.col(j) = xn;
        break;
      }
      case MixMode::kHeads: {
        const Eigen::Index dh = c.head_dim();
        const VectorXd s = params[bp.in_proj].value * xn;
        VectorXd stacked(c.d_model);
        for (std::int64_t h = 0; h < c.heads; ++h) {
          MatrixXd& hist = cache.history[layer][static_cast<std::size_t>(h)];
          const VectorXd sh = s.segment(h * dh, dh);
          stacked.segment(h * dh, dh) = toeplitz::decode_step<double>(
              hist.leftCols(j),
              params[bp.coeffs[static_cast<std::size_t>(h)]].value.col(0),
              params[bp.bias[static_cast<std::size_t>(h)]].value.col(0), sh, j);
          hist.col(j) = sh;
        }
        mixed = params[bp.out_proj].value * stacked;
        break;
      }
      case MixMode::kKernel: {
        static const Eigen::VectorXd kNoBias;
        MatrixXd& hist = cache.history[layer][0];
        VectorXd padded = VectorXd::Zero(c.d_model + c.kernel);
        padded.head(c.d_model) = xn;
        mixed = VectorXd::Zero(c.d_model);
        for (Eigen::Index s = 0; s <= c.kernel; ++s) {
          mixed += toeplitz::decode_step<double>(
              hist.middleRows(s, c.d_model).leftCols(j),
              params[bp.coeffs[static_cast<std::size_t>(s)]].value.col(0),
              s == 0 ? Eigen::Ref<const VectorXd>(params[bp.bias[0]].value.col(0))
                     : Eigen::Ref<const VectorXd>(kNoBias),
              padded.segment(s, c.d_model), j);
        }
        hist.col(j) = padded;
        break;
      }
    }
    x += mixed;
    const VectorXd un = model::detail::layer_norm_plain(
        x, params[bp.ln2_gain].value.col(0), params[bp.ln2_shift].value.col(0));
    x.noalias() += params[bp.w2].value *
                   model::detail::gelu_plain(params[bp.w1].value * un);
  }
  const VectorXd hidden = model::detail::layer_norm_plain(
      x, params[m.final_gain_index()].value.col(0),
      params[m.final_shift_index()].value.col(0));
  cache.position = j + 1;
  return params[m.head_index()].value * hidden;
}

std::int32_t sample_logits(const VectorXd& logits, const SamplerSpec& sampler,
                           std::mt19937_64& rng) {
  if (sampler.mode == SamplerSpec::Mode::kGreedy) {
    Eigen::Index argmax = 0;
    logits.maxCoeff(&argmax);
    return static_cast<std::int32_t>(argmax);
  }
  if (!(sampler.temperature > 0.0)) {
    throw std::invalid_argument("sampler: temperature must be > 0");
  }
  std::vector<Eigen::Index> candidates;
  if (sampler.mode == SamplerSpec::Mode::kTopK) {
    if (sampler.top_k < 1) throw std::invalid_argument("sampler: top_k must be >= 1");
    candidates.resize(static_cast<std::size_t>(logits.size()));
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      candidates[static_cast<std::size_t>(i)] = i;
    }
    const std::size_t k = std::min<std::size_t>(candidates.size(),
                                                static_cast<std::size_t>(sampler.top_k));
    std::partial_sort(candidates.begin(),
                      candidates.begin() + static_cast<std::ptrdiff_t>(k),
                      candidates.end(), [&](Eigen::Index a, Eigen::Index b) {
                        if (logits[a] != logits[b]) return logits[a] > logits[b];
                        return a < b;
                      });
    candidates.resize(k);
  } else {
    candidates.resize(static_cast<std::size_t>(logits.size()));
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      candidates[static_cast<std::size_t>(i)] = i;
    }
  }

  double zmax = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i : candidates) {
    zmax = std::max(zmax, logits[i] / sampler.temperature);
  }
  std::vector<double> probs(candidates.size());
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    probs[i] = std::exp(logits[candidates[i]] / sampler.temperature - zmax);
    total += probs[i];
  }
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double u = uniform(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    acc += probs[i];
    if (u <= acc) return static_cast<std::int32_t>(candidates[i]);
  }
  return static_cast<std::int32_t>(candidates.back());
}

std::vector<std::int32_t> generate(const TMModel& m,
                                   const std::vector<std::int32_t>& prompt,
                                   Eigen::Index max_new, const SamplerSpec& sampler,
                                   MixPath prefill_path) {
  std::vector<std::int32_t> out = prompt;
  const Eigen::Index room =
      m.config().n_ctx - static_cast<Eigen::Index>(prompt.size());
  const Eigen::Index count = std::min(max_new, room);
  if (count <= 0) return out;

  std::mt19937_64 rng(sampler.seed);
  auto [logits, cache] = prefill(m, prompt, prefill_path);
  std::int32_t next = sample_logits(logits, sampler, rng);
  out.push_back(next);
  for (Eigen::Index i = 1; i < count; ++i) {
    const VectorXd step_logits = decode(m, cache, next);
    next = sample_logits(step_logits, sampler, rng);
    out.push_back(next);
  }
  return out;
}

}  // namespace tmix::inference
