#include "tmix/model.hpp"

#include <cmath>

#include "tmix/elementwise.hpp"

#include <random>
#include <stdexcept>

namespace tmix::model {

using autodiff::Tape;
using autodiff::Var;

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_ctx < 1 ||
      mlp_expansion < 1) {
    throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
  }
  if (mode == MixMode::kHeads) {
    if (heads < 1) throw std::invalid_argument("ModelConfig: heads must be >= 1");
    if (d_model % heads != 0) {
      throw std::invalid_argument("ModelConfig: heads " + std::to_string(heads) +
                                  " must divide d_model " + std::to_string(d_model));
    }
  }
  if (mode == MixMode::kKernel && kernel < 0) {
    throw std::invalid_argument("ModelConfig: kernel must be >= 0");
  }
}

const char* mix_mode_name(MixMode m) {
  switch (m) {
    case MixMode::kSingle: return "single";
    case MixMode::kHeads: return "heads";
    case MixMode::kKernel: return "kernel";
  }
  return "single";
}

MixMode mix_mode_from_name(const std::string& name) {
  if (name == "single") return MixMode::kSingle;
  if (name == "heads") return MixMode::kHeads;
  if (name == "kernel") return MixMode::kKernel;
  throw std::invalid_argument("unknown mixing mode: " + name);
}

namespace detail {

MatrixXd layer_norm_plain(const MatrixXd& x, const VectorXd& gain,
                          const VectorXd& shift) {
  return elementwise::layer_norm(x, gain, shift, 1e-5);
}

MatrixXd gelu_plain(const MatrixXd& x) { return elementwise::gelu(x); }

}  // namespace detail

namespace {

struct Initializer {
  std::mt19937_64 rng;
  std::normal_distribution<double> normal{0.0, 1.0};

  MatrixXd draw(Eigen::Index rows, Eigen::Index cols, double fan_in) {
    const double std = std::sqrt(2.0 / fan_in);
    MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = std * normal(rng);
    }
    return m;
  }
};

}  // namespace

TMModel TMModel::build(const ModelConfig& config) {
  config.validate();
  TMModel m;
  m.config_ = config;
  Initializer init{std::mt19937_64(config.seed)};

  const Eigen::Index d = config.d_model;
  const Eigen::Index v = config.vocab_size;
  const Eigen::Index ctx = config.n_ctx;
  const Eigen::Index hidden = config.mlp_expansion * d;
  auto& params = m.params_;
  auto push = [&params](std::string name, MatrixXd value, bool trainable = true) {
    params.push_back({std::move(name), std::move(value), trainable});
  };

  push("embed.table", init.draw(d, v, static_cast<double>(v)));
  for (std::int64_t b = 0; b < config.n_layers; ++b) {
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    const bool mix_trainable = !config.freeze_toeplitz;
    switch (config.mode) {
      case MixMode::kSingle:
        push(prefix + "mix.coeffs", init.draw(ctx, 1, static_cast<double>(ctx)),
             mix_trainable);
        push(prefix + "mix.bias", MatrixXd::Zero(ctx, 1), mix_trainable);
        break;
      case MixMode::kHeads:
        push(prefix + "mix.in_proj", init.draw(d, d, static_cast<double>(d)));
        for (std::int64_t h = 0; h < config.heads; ++h) {
          const std::string hp = prefix + "mix.head" + std::to_string(h) + ".";
          push(hp + "coeffs", init.draw(ctx, 1, static_cast<double>(ctx)),
               mix_trainable);
          push(hp + "bias", MatrixXd::Zero(ctx, 1), mix_trainable);
        }
        push(prefix + "mix.out_proj", init.draw(d, d, static_cast<double>(d)));
        break;
      case MixMode::kKernel:
        for (std::int64_t s = 0; s <= config.kernel; ++s) {
          push(prefix + "mix.slot" + std::to_string(s) + ".coeffs",
               init.draw(ctx, 1, static_cast<double>(ctx)), mix_trainable);
        }
        push(prefix + "mix.bias", MatrixXd::Zero(ctx, 1), mix_trainable);
        break;
    }
    push(prefix + "ln1.gain", MatrixXd::Ones(d, 1));
    push(prefix + "ln1.shift", MatrixXd::Zero(d, 1));
    push(prefix + "ln2.gain", MatrixXd::Ones(d, 1));
    push(prefix + "ln2.shift", MatrixXd::Zero(d, 1));
    push(prefix + "mlp.w1", init.draw(hidden, d, static_cast<double>(d)));
    push(prefix + "mlp.w2", init.draw(d, hidden, static_cast<double>(hidden)));
  }
  push("final.gain", MatrixXd::Ones(d, 1));
  push("final.shift", MatrixXd::Zero(d, 1));
  // Zero head keeps the initial predictive distribution exactly uniform.
  push("head.weight", MatrixXd::Zero(v, d));

  m.index_blocks();
  return m;
}

TMModel TMModel::from_parts(ModelConfig config, std::vector<Parameter> params) {
  config.validate();
  TMModel m;
  m.config_ = std::move(config);
  m.params_ = std::move(params);
  m.index_blocks();
  return m;
}

void TMModel::index_blocks() {
  // Parameter order is fixed by build(); reconstruct the index table from
  // the same layout and verify names as we go.
  std::size_t i = 0;
  auto take = [&](const std::string& want) {
    if (i >= params_.size() || params_[i].name != want) {
      throw std::invalid_argument("parameter table mismatch: expected '" + want +
                                  "', found '" +
                                  (i < params_.size() ? params_[i].name : "<end>") +
                                  "'");
    }
    return static_cast<Eigen::Index>(i++);
  };

  blocks_.clear();
  embed_ = take("embed.table");
  for (std::int64_t b = 0; b < config_.n_layers; ++b) {
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    BlockParams bp;
    switch (config_.mode) {
      case MixMode::kSingle:
        bp.coeffs.push_back(take(prefix + "mix.coeffs"));
        bp.bias.push_back(take(prefix + "mix.bias"));
        break;
      case MixMode::kHeads:
        bp.in_proj = take(prefix + "mix.in_proj");
        for (std::int64_t h = 0; h < config_.heads; ++h) {
          const std::string hp = prefix + "mix.head" + std::to_string(h) + ".";
          bp.coeffs.push_back(take(hp + "coeffs"));
          bp.bias.push_back(take(hp + "bias"));
        }
        bp.out_proj = take(prefix + "mix.out_proj");
        break;
      case MixMode::kKernel:
        for (std::int64_t s = 0; s <= config_.kernel; ++s) {
          bp.coeffs.push_back(take(prefix + "mix.slot" + std::to_string(s) + ".coeffs"));
        }
        bp.bias.push_back(take(prefix + "mix.bias"));
        break;
    }
    bp.ln1_gain = take(prefix + "ln1.gain");
    bp.ln1_shift = take(prefix + "ln1.shift");
    bp.ln2_gain = take(prefix + "ln2.gain");
    bp.ln2_shift = take(prefix + "ln2.shift");
    bp.w1 = take(prefix + "mlp.w1");
    bp.w2 = take(prefix + "mlp.w2");
    blocks_.push_back(std::move(bp));
  }
  final_gain_ = take("final.gain");
  final_shift_ = take("final.shift");
  head_ = take("head.weight");
  if (i != params_.size()) {
    throw std::invalid_argument("parameter table mismatch: trailing parameters");
  }
}

std::int64_t TMModel::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params_) total += p.value.size();
  return total;
}

std::int64_t TMModel::trainable_parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params_) {
    if (p.trainable) total += p.value.size();
  }
  return total;
}

void TMModel::check_tokens(const std::vector<std::int32_t>& tokens, Eigen::Index batch,
                           Eigen::Index* n_out) const {
  if (batch < 1 || tokens.empty() ||
      static_cast<Eigen::Index>(tokens.size()) % batch != 0) {
    throw std::invalid_argument("forward: token count " +
                                std::to_string(tokens.size()) +
                                " does not split into " + std::to_string(batch) +
                                " sequences");
  }
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size()) / batch;
  if (n > config_.n_ctx) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(n) +
                                " exceeds n_ctx " + std::to_string(config_.n_ctx));
  }
  for (std::int32_t id : tokens) {
    if (id < 0 || id >= config_.vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                  " out of range for vocab " +
                                  std::to_string(config_.vocab_size));
    }
  }
  *n_out = n;
}

MatrixXd TMModel::token_mix(const MatrixXd& xn, const BlockParams& bp,
                            Eigen::Index batch, MixPath path,
                            std::vector<MatrixXd>* capture) const {
  const Eigen::Index cols = xn.cols();
  const Eigen::Index n = cols / batch;
  auto mix_segments = [&](const MatrixXd& input, const VectorXd& coeffs,
                          const Eigen::Ref<const VectorXd>& bias) {
    MatrixXd out(input.rows(), cols);
    for (Eigen::Index b = 0; b < batch; ++b) {
      out.middleCols(b * n, n) = toeplitz::mix_forward<double>(
          input.middleCols(b * n, n), coeffs, bias, path);
    }
    return out;
  };
  static const VectorXd kNoBias;

  switch (config_.mode) {
    case MixMode::kSingle: {
      if (capture) capture->push_back(xn);
      return mix_segments(xn, params_[bp.coeffs[0]].value.col(0),
                          params_[bp.bias[0]].value.col(0));
    }
    case MixMode::kHeads: {
      const Eigen::Index dh = config_.head_dim();
      MatrixXd s = params_[bp.in_proj].value * xn;
      MatrixXd mixed(config_.d_model, cols);
      for (std::int64_t h = 0; h < config_.heads; ++h) {
        const MatrixXd sh = s.middleRows(h * dh, dh);
        if (capture) capture->push_back(sh);
        mixed.middleRows(h * dh, dh) =
            mix_segments(sh, params_[bp.coeffs[static_cast<std::size_t>(h)]].value.col(0),
                         params_[bp.bias[static_cast<std::size_t>(h)]].value.col(0));
      }
      return params_[bp.out_proj].value * mixed;
    }
    case MixMode::kKernel: {
      const Eigen::Index k = config_.kernel;
      MatrixXd padded(config_.d_model + k, cols);
      padded.topRows(config_.d_model) = xn;
      padded.bottomRows(k).setZero();
      if (capture) capture->push_back(padded);
      MatrixXd y = MatrixXd::Zero(config_.d_model, cols);
      for (Eigen::Index s = 0; s <= k; ++s) {
        const MatrixXd slice = padded.middleRows(s, config_.d_model);
        y += mix_segments(slice, params_[bp.coeffs[static_cast<std::size_t>(s)]].value.col(0),
                          s == 0 ? Eigen::Ref<const VectorXd>(
                                       params_[bp.bias[0]].value.col(0))
                                 : Eigen::Ref<const VectorXd>(kNoBias));
      }
      return y;
    }
  }
  throw std::logic_error("unreachable mixing mode");
}

MatrixXd TMModel::blocks_forward(const MatrixXd& x_in, Eigen::Index batch,
                                 MixPath path, MixCapture* capture) const {
  if (x_in.rows() != config_.d_model || batch < 1 || x_in.cols() % batch != 0) {
    throw std::invalid_argument("blocks_forward: activation shape mismatch");
  }
  MatrixXd x = x_in;
  if (capture) capture->per_block.assign(static_cast<std::size_t>(config_.n_layers), {});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const BlockParams& bp = blocks_[b];
    const MatrixXd xn = detail::layer_norm_plain(x, params_[bp.ln1_gain].value.col(0),
                                                 params_[bp.ln1_shift].value.col(0));
    x += token_mix(xn, bp, batch, path,
                   capture ? &capture->per_block[b] : nullptr);
    const MatrixXd un = detail::layer_norm_plain(x, params_[bp.ln2_gain].value.col(0),
                                                 params_[bp.ln2_shift].value.col(0));
    x.noalias() += params_[bp.w2].value *
                   detail::gelu_plain(params_[bp.w1].value * un);
  }
  return detail::layer_norm_plain(x, params_[final_gain_].value.col(0),
                                  params_[final_shift_].value.col(0));
}

MatrixXd TMModel::hidden_states(const std::vector<std::int32_t>& tokens,
                                Eigen::Index batch, MixPath path,
                                MixCapture* capture) const {
  Eigen::Index n = 0;
  check_tokens(tokens, batch, &n);
  const MatrixXd& table = params_[embed_].value;
  MatrixXd x(config_.d_model, static_cast<Eigen::Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    x.col(static_cast<Eigen::Index>(i)) = table.col(tokens[i]);
  }
  return blocks_forward(x, batch, path, capture);
}

MatrixXd TMModel::forward(const std::vector<std::int32_t>& tokens, Eigen::Index batch,
                          MixPath path) const {
  return params_[head_].value * hidden_states(tokens, batch, path);
}

TapeBinding TMModel::bind(Tape& tape, bool frozen) const {
  TapeBinding bound;
  bound.leaves.reserve(params_.size());
  for (const auto& p : params_) {
    bound.leaves.push_back(tape.leaf(p.value, p.trainable && !frozen));
  }
  return bound;
}

Var TMModel::token_mix_on_tape(Tape& tape, const TapeBinding& bound, Var xn,
                               const BlockParams& bp, Eigen::Index batch,
                               MixPath path) const {
  using namespace autodiff;
  switch (config_.mode) {
    case MixMode::kSingle:
      return causal_toeplitz_mix(xn, bound.leaves[bp.coeffs[0]],
                                 bound.leaves[bp.bias[0]], batch, path);
    case MixMode::kHeads: {
      const Eigen::Index dh = config_.head_dim();
      Var s = matmul(bound.leaves[bp.in_proj], xn);
      Var stacked;
      for (std::int64_t h = 0; h < config_.heads; ++h) {
        Var sh = slice_rows(s, h * dh, dh);
        Var mixed = causal_toeplitz_mix(
            sh, bound.leaves[bp.coeffs[static_cast<std::size_t>(h)]],
            bound.leaves[bp.bias[static_cast<std::size_t>(h)]], batch, path);
        stacked = (h == 0) ? mixed : concat_rows(stacked, mixed);
      }
      return matmul(bound.leaves[bp.out_proj], stacked);
    }
    case MixMode::kKernel: {
      const Eigen::Index k = config_.kernel;
      Var padded = xn;
      if (k > 0) {
        Var zeros = tape.leaf(MatrixXd::Zero(k, xn.cols()), false);
        padded = concat_rows(xn, zeros);
      }
      Var y;
      for (Eigen::Index s = 0; s <= k; ++s) {
        Var slice = slice_rows(padded, s, config_.d_model);
        Var mixed = causal_toeplitz_mix(
            slice, bound.leaves[bp.coeffs[static_cast<std::size_t>(s)]],
            s == 0 ? bound.leaves[bp.bias[0]] : Var{}, batch, path);
        y = (s == 0) ? mixed : add(y, mixed);
      }
      return y;
    }
  }
  throw std::logic_error("unreachable mixing mode");
}

Var TMModel::blocks_on_tape(Tape& tape, const TapeBinding& bound, Var x,
                            Eigen::Index batch, MixPath path) const {
  using namespace autodiff;
  for (const BlockParams& bp : blocks_) {
    Var xn = layer_norm(x, bound.leaves[bp.ln1_gain], bound.leaves[bp.ln1_shift]);
    x = add(x, token_mix_on_tape(tape, bound, xn, bp, batch, path));
    Var un = layer_norm(x, bound.leaves[bp.ln2_gain], bound.leaves[bp.ln2_shift]);
    Var h = matmul(bound.leaves[bp.w2], gelu(matmul(bound.leaves[bp.w1], un)));
    x = add(x, h);
  }
  return layer_norm(x, bound.leaves[final_gain_], bound.leaves[final_shift_]);
}

Var TMModel::hidden_on_tape(Tape& tape, const TapeBinding& bound,
                            const std::vector<std::int32_t>& tokens,
                            Eigen::Index batch, MixPath path) const {
  Eigen::Index n = 0;
  check_tokens(tokens, batch, &n);
  autodiff::Var x = autodiff::embedding_gather(bound.leaves[embed_], tokens);
  return blocks_on_tape(tape, bound, x, batch, path);
}

Var TMModel::logits_on_tape(Tape& tape, const TapeBinding& bound,
                            const std::vector<std::int32_t>& tokens,
                            Eigen::Index batch, MixPath path) const {
  return autodiff::matmul(bound.leaves[head_],
                          hidden_on_tape(tape, bound, tokens, batch, path));
}

}  // namespace tmix::model
