#include "tmix/training.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <map>
#include <stdexcept>

namespace tmix::training {

using autodiff::Tape;
using autodiff::Var;
using model::TapeBinding;
using model::TMModel;

double lr_at(std::int64_t step, const Schedule& schedule) {
  if (schedule.warmup_steps < 1 || schedule.warmup_steps > schedule.total_steps) {
    throw std::invalid_argument("schedule: need 0 < warmup_steps <= total_steps");
  }
  if (step < 0 || step > schedule.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) +
                            " outside [0, " + std::to_string(schedule.total_steps) + "]");
  }
  if (step <= schedule.warmup_steps) {
    return schedule.peak_lr * static_cast<double>(step) /
           static_cast<double>(schedule.warmup_steps);
  }
  return schedule.peak_lr *
         static_cast<double>(schedule.total_steps - step) /
         static_cast<double>(schedule.total_steps - schedule.warmup_steps);
}

AdamW::AdamW(const std::vector<model::Parameter*>& params, AdamWConfig config) {
  state_.beta1 = config.beta1;
  state_.beta2 = config.beta2;
  state_.eps = config.eps;
  state_.weight_decay = config.weight_decay;
  state_.step = 0;
  state_.m.reserve(params.size());
  state_.v.reserve(params.size());
  for (const auto* p : params) {
    state_.m.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
    state_.v.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step(const std::vector<model::Parameter*>& params,
                 const std::vector<MatrixXd>& grads, double lr) {
  if (params.size() != state_.m.size() || grads.size() != params.size()) {
    throw std::invalid_argument("adamw_step: parameter/gradient count mismatch");
  }
  ++state_.step;
  const double bc1 = 1.0 - std::pow(state_.beta1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(state_.beta2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    model::Parameter& p = *params[i];
    if (!p.trainable) continue;
    MatrixXd& m = state_.m[i];
    MatrixXd& v = state_.v[i];
    if (grads[i].size() != 0) {
      if (grads[i].rows() != p.value.rows() || grads[i].cols() != p.value.cols()) {
        throw std::invalid_argument("adamw_step: gradient shape mismatch for " + p.name);
      }
      m = state_.beta1 * m + (1.0 - state_.beta1) * grads[i];
      v = state_.beta2 * v + (1.0 - state_.beta2) * grads[i].cwiseProduct(grads[i]);
    } else {
      m *= state_.beta1;
      v *= state_.beta2;
    }
    p.value *= (1.0 - lr * state_.weight_decay);
    p.value.array() -=
        lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state_.eps);
  }
}

std::vector<model::Parameter*> param_ptrs(TMModel& m) {
  std::vector<model::Parameter*> out;
  out.reserve(m.params().size());
  for (auto& p : m.params()) out.push_back(&p);
  return out;
}

double clip_global_norm(std::vector<MatrixXd>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

std::vector<MatrixXd> collect_grads(const TapeBinding& bound) {
  std::vector<MatrixXd> grads;
  grads.reserve(bound.leaves.size());
  for (const Var& leaf : bound.leaves) grads.push_back(leaf.grad());
  return grads;
}

double cross_entropy_plain(const MatrixXd& logits,
                           const std::vector<std::int32_t>& targets,
                           const std::vector<double>& mask) {
  const Eigen::Index cols = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != cols ||
      static_cast<Eigen::Index>(mask.size()) != cols) {
    throw std::invalid_argument("cross_entropy_plain: length mismatch");
  }
  double wsum = 0.0, loss = 0.0;
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double w = mask[static_cast<std::size_t>(c)];
    if (w == 0.0) continue;
    const std::int32_t y = targets[static_cast<std::size_t>(c)];
    if (y < 0 || y >= logits.rows()) {
      throw std::invalid_argument("cross_entropy_plain: target out of range");
    }
    const double zmax = logits.col(c).maxCoeff();
    const double lse =
        zmax + std::log((logits.col(c).array() - zmax).exp().sum());
    loss += w * (lse - logits(y, c));
    wsum += w;
  }
  if (wsum <= 0.0) throw std::invalid_argument("cross_entropy_plain: mask all zero");
  return loss / wsum;
}

double unigram_entropy(const std::vector<std::int32_t>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("unigram_entropy: empty corpus");
  std::map<std::int32_t, double> counts;
  for (std::int32_t t : tokens) counts[t] += 1.0;
  const double total = static_cast<double>(tokens.size());
  double h = 0.0;
  for (const auto& [t, c] : counts) {
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h;
}

namespace {

// Shifted next-token targets within each window; the final position of each
// window carries no target.
void clm_targets(const std::vector<std::int32_t>& tokens, Eigen::Index batch,
                 std::vector<std::int32_t>* targets, std::vector<double>* mask) {
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size()) / batch;
  targets->assign(tokens.size(), 0);
  mask->assign(tokens.size(), 1.0);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index j = 0; j + 1 < n; ++j) {
      (*targets)[static_cast<std::size_t>(b * n + j)] =
          tokens[static_cast<std::size_t>(b * n + j + 1)];
    }
    (*mask)[static_cast<std::size_t>(b * n + n - 1)] = 0.0;
  }
}

struct StepOutcome {
  double loss = 0.0;
  double grad_norm = 0.0;
};

StepOutcome optimize_step(TMModel& m, AdamW& opt,
                          const std::vector<model::Parameter*>& params,
                          const std::vector<std::int32_t>& tokens,
                          const std::vector<std::int32_t>& targets,
                          const std::vector<double>& mask, Eigen::Index batch,
                          double lr, MixPath path, double clip) {
  Tape tape;
  const TapeBinding bound = m.bind(tape);
  Var loss = autodiff::cross_entropy(
      m.logits_on_tape(tape, bound, tokens, batch, path), targets, mask);
  tape.backward(loss);
  std::vector<MatrixXd> grads = collect_grads(bound);
  StepOutcome out;
  out.loss = loss.value()(0, 0);
  out.grad_norm = clip_global_norm(grads, clip);
  opt.step(params, grads, lr);
  return out;
}

}  // namespace

double eval_clm_loss(const TMModel& m, const io::WindowDataset& data,
                     Eigen::Index batch, Eigen::Index max_batches, MixPath path) {
  if (data.heldout_starts.empty()) {
    throw std::invalid_argument("eval_clm_loss: no held-out windows");
  }
  double total = 0.0;
  Eigen::Index batches = 0;
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < data.heldout_starts.size(); i += batch) {
    starts.clear();
    for (std::size_t j = i; j < std::min(i + static_cast<std::size_t>(batch),
                                         data.heldout_starts.size());
         ++j) {
      starts.push_back(data.heldout_starts[j]);
    }
    const auto tokens = data.gather(starts);
    std::vector<std::int32_t> targets;
    std::vector<double> mask;
    clm_targets(tokens, static_cast<Eigen::Index>(starts.size()), &targets, &mask);
    total += cross_entropy_plain(
        m.forward(tokens, static_cast<Eigen::Index>(starts.size()), path), targets,
        mask);
    if (++batches >= max_batches) break;
  }
  return total / static_cast<double>(batches);
}

ClmResult train_clm(TMModel& m, const io::WindowDataset& data,
                    const Schedule& schedule, const ClmRunConfig& run) {
  if (data.train_starts.empty()) {
    throw std::invalid_argument("train_clm: empty dataset");
  }
  auto params = param_ptrs(m);
  AdamW opt(params);
  std::mt19937_64 rng(run.seed);
  std::vector<std::size_t> order = data.train_starts;
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  ClmResult result;
  std::vector<std::size_t> starts(static_cast<std::size_t>(run.batch));
  for (std::int64_t step = 0; step < run.steps; ++step) {
    for (auto& s : starts) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      s = order[cursor++];
    }
    const auto tokens = data.gather(starts);
    std::vector<std::int32_t> targets;
    std::vector<double> mask;
    clm_targets(tokens, run.batch, &targets, &mask);
    const double lr = lr_at(step, schedule);
    const StepOutcome out =
        optimize_step(m, opt, params, tokens, targets, mask, run.batch, lr, run.path,
                      run.clip);
    result.final_train_loss = out.loss;
    result.loss_history.push_back(out.loss);

    nlohmann::json rec{{"step", step}, {"lr", lr}, {"loss", out.loss}};
    const bool eval_now = run.eval_every > 0 && (step + 1) % run.eval_every == 0;
    if ((eval_now || step + 1 == run.steps) && !data.heldout_starts.empty()) {
      result.final_eval_loss =
          eval_clm_loss(m, data, run.batch, run.eval_batches, run.path);
      rec["eval_loss"] = result.final_eval_loss;
    }
    if (run.metrics) run.metrics->write(rec);
    if (!run.checkpoint_path.empty() && run.checkpoint_every > 0 &&
        (step + 1) % run.checkpoint_every == 0) {
      io::save_checkpoint(run.checkpoint_path, m, &opt.state());
    }
  }
  if (!run.checkpoint_path.empty()) {
    io::save_checkpoint(run.checkpoint_path, m, &opt.state());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Copy task

CopyBatch make_copy_batch(const std::vector<std::int32_t>& corpus, Eigen::Index L,
                          Eigen::Index B, std::mt19937_64& rng, bool unmasked) {
  if (static_cast<Eigen::Index>(corpus.size()) < L) {
    throw std::invalid_argument("make_copy_batch: corpus shorter than copy length");
  }
  std::uniform_int_distribution<std::size_t> offset(
      0, corpus.size() - static_cast<std::size_t>(L));
  CopyBatch out;
  out.batch = B;
  out.copy_len = L;
  const Eigen::Index row = 2 * L;
  out.tokens.resize(static_cast<std::size_t>(B * row));
  out.targets.assign(static_cast<std::size_t>(B * row), 0);
  out.mask.assign(static_cast<std::size_t>(B * row), 0.0);
  for (Eigen::Index b = 0; b < B; ++b) {
    const std::size_t at = offset(rng);
    auto* dst = out.tokens.data() + b * row;
    std::copy_n(corpus.data() + at, L, dst);
    std::copy_n(corpus.data() + at, L, dst + L);
    for (Eigen::Index j = 0; j + 1 < row; ++j) {
      out.targets[static_cast<std::size_t>(b * row + j)] = dst[j + 1];
      const bool second_copy_target = (j + 1) >= L;
      out.mask[static_cast<std::size_t>(b * row + j)] =
          (unmasked || second_copy_target) ? 1.0 : 0.0;
    }
  }
#ifndef NDEBUG
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index j = 0; j < L; ++j) {
      assert(out.tokens[static_cast<std::size_t>(b * row + j)] ==
             out.tokens[static_cast<std::size_t>(b * row + j + L)]);
    }
  }
#endif
  return out;
}

CopyEvalResult copy_eval(const LogitsFn& logits_fn,
                         const std::vector<CopyBatch>& batches) {
  std::int64_t rows = 0, exact_rows = 0, tokens = 0, correct = 0;
  for (const CopyBatch& cb : batches) {
    const Eigen::Index row = 2 * cb.copy_len;
    const MatrixXd logits = logits_fn(cb.tokens, cb.batch);
    for (Eigen::Index b = 0; b < cb.batch; ++b) {
      bool all_ok = true;
      for (Eigen::Index j = cb.copy_len - 1; j + 1 < row; ++j) {
        Eigen::Index argmax = 0;
        logits.col(b * row + j).maxCoeff(&argmax);
        const bool ok = argmax == static_cast<Eigen::Index>(
                                      cb.targets[static_cast<std::size_t>(b * row + j)]);
        all_ok = all_ok && ok;
        correct += ok ? 1 : 0;
        ++tokens;
      }
      exact_rows += all_ok ? 1 : 0;
      ++rows;
    }
  }
  CopyEvalResult out;
  out.exact_accuracy = static_cast<double>(exact_rows) / static_cast<double>(rows);
  out.token_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
  return out;
}

CopyEvalResult copy_eval(const TMModel& m, const std::vector<CopyBatch>& batches,
                         MixPath path) {
  return copy_eval(
      [&m, path](const std::vector<std::int32_t>& tokens, Eigen::Index batch) {
        return m.forward(tokens, batch, path);
      },
      batches);
}

CopyResult train_copy(TMModel& m, const std::vector<std::int32_t>& train_corpus,
                      const std::vector<std::int32_t>& eval_corpus,
                      const Schedule& schedule, const CopyRunConfig& run) {
  auto params = param_ptrs(m);
  AdamW opt(params);
  std::mt19937_64 rng(run.seed);
  const std::mt19937_64 eval_rng(run.seed + 0x9E3779B97F4A7C15ull);

  // Same evaluation batches at every call of a given size.
  auto eval_now = [&](Eigen::Index batches) {
    std::mt19937_64 r = eval_rng;
    std::vector<CopyBatch> all;
    for (Eigen::Index i = 0; i < batches; ++i) {
      all.push_back(make_copy_batch(eval_corpus, run.copy_len, run.batch, r));
    }
    return copy_eval(m, all, run.path);
  };
  const Eigen::Index final_batches =
      run.final_eval_batches > 0 ? run.final_eval_batches : run.eval_batches;

  CopyResult result;
  bool stopped = false;
  for (std::int64_t step = 0; step < run.steps && !stopped; ++step) {
    const CopyBatch cb =
        make_copy_batch(train_corpus, run.copy_len, run.batch, rng, run.unmasked);
    const double lr = lr_at(step, schedule);
    const StepOutcome out = optimize_step(m, opt, params, cb.tokens, cb.targets,
                                          cb.mask, run.batch, lr, run.path, run.clip);
    result.steps_run = step + 1;

    nlohmann::json rec{{"step", step}, {"lr", lr}, {"loss", out.loss}};
    const bool do_eval = run.eval_every > 0 && (step + 1) % run.eval_every == 0;
    if (do_eval) {
      const CopyEvalResult quick = eval_now(run.eval_batches);
      rec["exact_copy_acc"] = quick.exact_accuracy;
      rec["token_copy_acc"] = quick.token_accuracy;
      // The stop decision rests on the full held-out evaluation.
      if (run.stop_exact > 0.0 && quick.exact_accuracy >= run.stop_exact) {
        result.final_eval = eval_now(final_batches);
        rec["full_exact_copy_acc"] = result.final_eval.exact_accuracy;
        stopped = result.final_eval.exact_accuracy >= run.stop_exact;
      }
    }
    if (run.metrics) run.metrics->write(rec);
  }
  if (!stopped) result.final_eval = eval_now(final_batches);
  return result;
}

// ---------------------------------------------------------------------------
// Retention probe

namespace {

std::vector<std::int32_t> sample_sequences(const std::vector<std::int32_t>& corpus,
                                           Eigen::Index n, Eigen::Index batch,
                                           std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> offset(
      0, corpus.size() - static_cast<std::size_t>(n));
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(n * batch));
  for (Eigen::Index b = 0; b < batch; ++b) {
    const std::size_t at = offset(rng);
    out.insert(out.end(), corpus.begin() + static_cast<std::ptrdiff_t>(at),
               corpus.begin() + static_cast<std::ptrdiff_t>(at) +
                   static_cast<std::ptrdiff_t>(n));
  }
  return out;
}

// Column-selection matrices used to wire the bottleneck: `last_selector`
// picks each sequence's final position, `spread` repeats one bottleneck
// column across that sequence's positions, `tile` repeats the per-position
// table across the batch.
MatrixXd last_selector(Eigen::Index n, Eigen::Index batch) {
  MatrixXd s = MatrixXd::Zero(batch * n, batch);
  for (Eigen::Index b = 0; b < batch; ++b) s(b * n + n - 1, b) = 1.0;
  return s;
}

MatrixXd spread_matrix(Eigen::Index n, Eigen::Index batch) {
  MatrixXd s = MatrixXd::Zero(batch, batch * n);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index j = 0; j < n; ++j) s(b, b * n + j) = 1.0;
  }
  return s;
}

MatrixXd tile_matrix(Eigen::Index n, Eigen::Index batch) {
  MatrixXd s = MatrixXd::Zero(n, batch * n);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index j = 0; j < n; ++j) s(j, b * n + j) = 1.0;
  }
  return s;
}

}  // namespace

RetentionResult train_retention(TMModel& encoder, TMModel& decoder,
                                const std::vector<std::int32_t>& corpus,
                                const RetentionOptions& options) {
  if (encoder.config().n_ctx < options.seq_len ||
      decoder.config().n_ctx < options.seq_len) {
    throw std::invalid_argument("train_retention: seq_len exceeds a model context");
  }
  if (encoder.config().d_model != decoder.config().d_model) {
    throw std::invalid_argument("train_retention: encoder/decoder width mismatch");
  }
  const Eigen::Index n = options.seq_len;
  const Eigen::Index d = decoder.config().d_model;
  const bool freeze_encoder = options.mode == RetentionMode::kRetention;

  // Trained per-position input vectors for the decoder.
  std::mt19937_64 init_rng(options.seed ^ 0xA5A5A5A5ull);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(d)));
  model::Parameter pos_table{"probe.pos_table", MatrixXd(d, n), true};
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) pos_table.value(i, j) = normal(init_rng);
  }

  std::vector<model::Parameter*> params;
  if (!freeze_encoder) {
    for (auto& p : encoder.params()) params.push_back(&p);
  }
  for (auto& p : decoder.params()) params.push_back(&p);
  params.push_back(&pos_table);
  AdamW opt(params);

  std::mt19937_64 rng(options.seed);

  auto plain_accuracy = [&](std::mt19937_64 eval_rng) {
    std::int64_t correct = 0, total = 0;
    for (Eigen::Index e = 0; e < options.eval_batches; ++e) {
      const auto tokens = sample_sequences(corpus, n, options.batch, eval_rng);
      const MatrixXd hidden = encoder.hidden_states(tokens, options.batch, options.path);
      const MatrixXd bottleneck = hidden * last_selector(n, options.batch);
      MatrixXd x = bottleneck * spread_matrix(n, options.batch) +
                   pos_table.value * tile_matrix(n, options.batch);
      const MatrixXd dec_hidden = decoder.blocks_forward(x, options.batch, options.path);
      const MatrixXd logits =
          decoder.params()[decoder.head_index()].value * dec_hidden;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        Eigen::Index argmax = 0;
        logits.col(c).maxCoeff(&argmax);
        correct += (argmax == tokens[static_cast<std::size_t>(c)]) ? 1 : 0;
        ++total;
      }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
  };
  const std::mt19937_64 eval_rng(options.seed + 0x51ED270B0ull);

  RetentionResult result;
  const std::vector<double> full_mask(static_cast<std::size_t>(options.batch * n), 1.0);
  for (std::int64_t step = 0; step < options.steps; ++step) {
    const auto tokens = sample_sequences(corpus, n, options.batch, rng);

    Tape tape;
    const TapeBinding enc_bound = encoder.bind(tape, freeze_encoder);
    const TapeBinding dec_bound = decoder.bind(tape);
    const Var pos_leaf = tape.leaf(pos_table.value, true);
    const Var sel = tape.leaf(last_selector(n, options.batch), false);
    const Var spread = tape.leaf(spread_matrix(n, options.batch), false);
    const Var tile = tape.leaf(tile_matrix(n, options.batch), false);

    Var enc_hidden =
        encoder.hidden_on_tape(tape, enc_bound, tokens, options.batch, options.path);
    Var bottleneck = autodiff::matmul(enc_hidden, sel);
    Var x = autodiff::add(autodiff::matmul(bottleneck, spread),
                          autodiff::matmul(pos_leaf, tile));
    Var dec_hidden = decoder.blocks_on_tape(tape, dec_bound, x, options.batch,
                                            options.path);
    Var logits = autodiff::matmul(dec_bound.leaves[decoder.head_index()], dec_hidden);
    Var loss = autodiff::cross_entropy(logits, tokens, full_mask);
    tape.backward(loss);

    std::vector<MatrixXd> grads;
    if (!freeze_encoder) {
      for (const Var& leaf : enc_bound.leaves) grads.push_back(leaf.grad());
    }
    for (const Var& leaf : dec_bound.leaves) grads.push_back(leaf.grad());
    grads.push_back(pos_leaf.grad());
    clip_global_norm(grads, options.clip);
    const double lr = lr_at(step, options.schedule);
    opt.step(params, grads, lr);

    result.final_loss = loss.value()(0, 0);
    if (options.metrics &&
        (options.eval_every > 0 && (step + 1) % options.eval_every == 0)) {
      const double acc = plain_accuracy(eval_rng);
      options.metrics->write({{"probe", "simplified-retention"},
                              {"step", step},
                              {"loss", result.final_loss},
                              {"token_acc", acc}});
    }
  }
  result.token_accuracy = plain_accuracy(eval_rng);
  return result;
}

}  // namespace tmix::training
