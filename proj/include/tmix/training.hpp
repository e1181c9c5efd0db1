#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tmix/io.hpp"
#include "tmix/model.hpp"

namespace tmix::training {

using Eigen::MatrixXd;
using model::MixPath;

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear ramp 0 -> peak over warmup_steps, then
// linear decay to 0 at total_steps.

struct Schedule {
  double peak_lr = 5e-4;
  std::int64_t warmup_steps = 500;
  std::int64_t total_steps = 0;
};

double lr_at(std::int64_t step, const Schedule& schedule);

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay. Moments align one-to-one with the
// parameter list given at construction; non-trainable parameters are skipped
// entirely (no update, no decay).

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(const std::vector<model::Parameter*>& params, AdamWConfig config = {});

  // grads[i] may be empty to mean an all-zero gradient.
  void step(const std::vector<model::Parameter*>& params,
            const std::vector<MatrixXd>& grads, double lr);

  const io::OptimizerState& state() const { return state_; }
  io::OptimizerState& state() { return state_; }

 private:
  io::OptimizerState state_;
};

std::vector<model::Parameter*> param_ptrs(model::TMModel& m);

// Scales grads in place so their global L2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_global_norm(std::vector<MatrixXd>& grads, double max_norm);

// Reads per-leaf gradients off a tape binding, aligned with the parameters.
std::vector<MatrixXd> collect_grads(const model::TapeBinding& bound);

// Cross entropy of already-computed logits (no tape), same contract as the
// tape op.
double cross_entropy_plain(const MatrixXd& logits,
                           const std::vector<std::int32_t>& targets,
                           const std::vector<double>& mask);

// Entropy in nats of the corpus unigram distribution.
double unigram_entropy(const std::vector<std::int32_t>& tokens);

// ---------------------------------------------------------------------------
// Causal language-model training over fixed windows.

struct ClmRunConfig {
  std::int64_t steps = 2000;
  Eigen::Index batch = 16;
  MixPath path = MixPath::kAuto;
  std::int64_t eval_every = 200;
  Eigen::Index eval_batches = 8;     // held-out batches per evaluation
  std::int64_t checkpoint_every = 0; // 0 = only on request via checkpoint_path
  std::string checkpoint_path;
  std::uint64_t seed = 0;
  double clip = 1.0;
  io::MetricsWriter* metrics = nullptr;
};

struct ClmResult {
  double final_train_loss = 0.0;
  double final_eval_loss = 0.0;
  std::vector<double> loss_history;
};

ClmResult train_clm(model::TMModel& m, const io::WindowDataset& data,
                    const Schedule& schedule, const ClmRunConfig& run);

double eval_clm_loss(const model::TMModel& m, const io::WindowDataset& data,
                     Eigen::Index batch, Eigen::Index max_batches, MixPath path);

// ---------------------------------------------------------------------------
// Copy task: a length-L segment duplicated with no delimiter; the loss is
// masked to the positions whose targets lie in the second copy unless
// `unmasked` asks for full next-token loss.

struct CopyBatch {
  std::vector<std::int32_t> tokens;   // batch rows of length 2L, back to back
  std::vector<std::int32_t> targets;  // next-token targets, 0 past the end
  std::vector<double> mask;
  Eigen::Index batch = 0;
  Eigen::Index copy_len = 0;
};

CopyBatch make_copy_batch(const std::vector<std::int32_t>& corpus, Eigen::Index L,
                          Eigen::Index B, std::mt19937_64& rng, bool unmasked = false);

struct CopyEvalResult {
  double exact_accuracy = 0.0;   // all L second-copy tokens correct
  double token_accuracy = 0.0;
};

using LogitsFn =
    std::function<MatrixXd(const std::vector<std::int32_t>&, Eigen::Index)>;

CopyEvalResult copy_eval(const LogitsFn& logits_fn,
                         const std::vector<CopyBatch>& batches);
CopyEvalResult copy_eval(const model::TMModel& m, const std::vector<CopyBatch>& batches,
                         MixPath path = MixPath::kAuto);

struct CopyRunConfig {
  std::int64_t steps = 5000;
  Eigen::Index batch = 32;
  Eigen::Index copy_len = 32;
  MixPath path = MixPath::kAuto;
  std::int64_t eval_every = 250;
  Eigen::Index eval_batches = 8;       // quick cadence evaluations
  Eigen::Index final_eval_batches = 0; // 0: same as eval_batches
  double stop_exact = 0.0;  // > 0: stop once the full evaluation reaches it
  bool unmasked = false;
  std::uint64_t seed = 0;
  double clip = 1.0;
  io::MetricsWriter* metrics = nullptr;
};

struct CopyResult {
  std::int64_t steps_run = 0;
  CopyEvalResult final_eval;
};

CopyResult train_copy(model::TMModel& m, const std::vector<std::int32_t>& train_corpus,
                      const std::vector<std::int32_t>& eval_corpus,
                      const Schedule& schedule, const CopyRunConfig& run);

// ---------------------------------------------------------------------------
// Simplified retention probe: the encoder's last-position final-layer state
// is broadcast to every decoder position, a trained per-position vector is
// added, and the decoder is trained to reconstruct the input. Capacity mode
// trains the encoder too; retention mode freezes it.

enum class RetentionMode { kCapacity, kRetention };

struct RetentionOptions {
  RetentionMode mode = RetentionMode::kCapacity;
  std::int64_t steps = 3000;
  Eigen::Index batch = 16;
  Eigen::Index seq_len = 16;
  Schedule schedule;
  MixPath path = MixPath::kAuto;
  std::uint64_t seed = 0;
  double clip = 1.0;
  std::int64_t eval_every = 0;
  Eigen::Index eval_batches = 16;
  io::MetricsWriter* metrics = nullptr;
};

struct RetentionResult {
  double token_accuracy = 0.0;  // held-out reconstruction accuracy
  double final_loss = 0.0;
};

RetentionResult train_retention(model::TMModel& encoder, model::TMModel& decoder,
                                const std::vector<std::int32_t>& corpus,
                                const RetentionOptions& options);

}  // namespace tmix::training
