#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tmix/autodiff.hpp"
#include "tmix/toeplitz.hpp"

namespace tmix::model {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using toeplitz::MixPath;

// How a block mixes tokens: one Toeplitz layer, h independently projected
// heads, or k+1 hidden-shifted Toeplitz layers sharing one position bias.
enum class MixMode { kSingle, kHeads, kKernel };

struct ModelConfig {
  std::int64_t vocab_size = 256;
  std::int64_t d_model = 512;
  std::int64_t n_layers = 16;
  MixMode mode = MixMode::kSingle;
  std::int64_t heads = 4;    // heads mode
  std::int64_t kernel = 2;   // kernel mode: pad amount; kernel+1 Toeplitz layers
  std::int64_t n_ctx = 512;
  std::int64_t mlp_expansion = 4;
  bool freeze_toeplitz = false;
  std::uint64_t seed = 0;

  std::int64_t head_dim() const { return d_model / heads; }
  void validate() const;
};

struct Parameter {
  std::string name;
  MatrixXd value;
  bool trainable = true;
};

// Parameter indices for one mixer block; -1 marks fields the mode lacks.
struct BlockParams {
  Eigen::Index ln1_gain = -1, ln1_shift = -1;
  Eigen::Index ln2_gain = -1, ln2_shift = -1;
  Eigen::Index in_proj = -1, out_proj = -1;     // heads mode, stacked over heads
  std::vector<Eigen::Index> coeffs;             // 1 | heads | kernel+1 entries
  std::vector<Eigen::Index> bias;               // parallel to coeffs; kernel: size 1
  Eigen::Index w1 = -1, w2 = -1;
};

// Captured token-mix inputs from a prefill pass, one matrix per block per
// mix slot (slot = the whole layer, one head, or the padded kernel stack).
struct MixCapture {
  std::vector<std::vector<MatrixXd>> per_block;
};

// Leaves pushed onto a tape, aligned one-to-one with TMModel::params().
struct TapeBinding {
  std::vector<autodiff::Var> leaves;
};

class TMModel {
 public:
  // Kaiming-normal initialization, std sqrt(2/fan_in) per weight matrix
  // (Toeplitz coefficient vectors use fan_in = n_ctx, the embedding table
  // fan_in = vocab). Biases, norm shifts and the output head start at zero,
  // norm gains at one. Deterministic in config.seed.
  static TMModel build(const ModelConfig& config);
  static TMModel from_parts(ModelConfig config, std::vector<Parameter> params);

  const ModelConfig& config() const { return config_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  Eigen::Index embed_index() const { return embed_; }
  Eigen::Index head_index() const { return head_; }
  Eigen::Index final_gain_index() const { return final_gain_; }
  Eigen::Index final_shift_index() const { return final_shift_; }

  std::int64_t parameter_count() const;
  std::int64_t trainable_parameter_count() const;

  // Plain forward passes (no gradient record). tokens holds `batch`
  // sequences of equal length back to back; column b*n+j of the result
  // belongs to sequence b, position j.
  MatrixXd forward(const std::vector<std::int32_t>& tokens, Eigen::Index batch,
                   MixPath path = MixPath::kAuto) const;          // V x (batch*n)
  MatrixXd hidden_states(const std::vector<std::int32_t>& tokens, Eigen::Index batch,
                         MixPath path = MixPath::kAuto,
                         MixCapture* capture = nullptr) const;    // d x (batch*n)
  // Blocks plus final norm applied to pre-built activations.
  MatrixXd blocks_forward(const MatrixXd& x, Eigen::Index batch,
                          MixPath path = MixPath::kAuto,
                          MixCapture* capture = nullptr) const;

  // Tape forward passes for training. `frozen` pushes every parameter as a
  // constant regardless of its trainable flag.
  TapeBinding bind(autodiff::Tape& tape, bool frozen = false) const;
  autodiff::Var hidden_on_tape(autodiff::Tape& tape, const TapeBinding& bound,
                               const std::vector<std::int32_t>& tokens,
                               Eigen::Index batch, MixPath path) const;
  autodiff::Var blocks_on_tape(autodiff::Tape& tape, const TapeBinding& bound,
                               autodiff::Var x, Eigen::Index batch,
                               MixPath path) const;               // blocks + final norm
  autodiff::Var logits_on_tape(autodiff::Tape& tape, const TapeBinding& bound,
                               const std::vector<std::int32_t>& tokens,
                               Eigen::Index batch, MixPath path) const;

  // Token mixing of one block applied to a normalized input, in the mode the
  // model was configured with. `capture`, when given, receives the per-slot
  // mix inputs (used to seed a decode cache).
  MatrixXd token_mix(const MatrixXd& xn, const BlockParams& bp, Eigen::Index batch,
                     MixPath path, std::vector<MatrixXd>* capture = nullptr) const;
  autodiff::Var token_mix_on_tape(autodiff::Tape& tape, const TapeBinding& bound,
                                  autodiff::Var xn, const BlockParams& bp,
                                  Eigen::Index batch, MixPath path) const;

 private:
  TMModel() = default;
  void index_blocks();
  void check_tokens(const std::vector<std::int32_t>& tokens, Eigen::Index batch,
                    Eigen::Index* n_out) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<BlockParams> blocks_;
  Eigen::Index embed_ = -1, head_ = -1, final_gain_ = -1, final_shift_ = -1;
};

namespace detail {
// Per-column layer norm and exact-erf GELU shared by the no-tape paths.
MatrixXd layer_norm_plain(const MatrixXd& x, const VectorXd& gain, const VectorXd& shift);
MatrixXd gelu_plain(const MatrixXd& x);
}  // namespace detail

const char* mix_mode_name(MixMode m);
MixMode mix_mode_from_name(const std::string& name);

}  // namespace tmix::model
