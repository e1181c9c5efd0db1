// tmix: train, probe, and analyze causal Toeplitz token-mixing models.
//
// Option precedence: command-line flags win over --config JSON values, which
// win over built-in defaults.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "tmix/analysis.hpp"
#include "tmix/bench.hpp"
#include "tmix/inference.hpp"
#include "tmix/io.hpp"
#include "tmix/model.hpp"
#include "tmix/training.hpp"

namespace {

using nlohmann::json;
using namespace tmix;

struct Opts {
  std::string config_path;
  std::uint64_t seed = 0;
  std::int64_t dm = 256;
  std::int64_t layers = 16;
  std::int64_t heads = 0;    // > 0 selects heads mode
  std::int64_t kernel = -1;  // >= 0 selects kernel mode
  std::int64_t ctx = 512;
  std::int64_t vocab = 256;
  std::int64_t steps = 2000;
  double peak_lr = 5e-4;
  std::int64_t warmup = 500;
  std::int64_t batch = 16;
  bool freeze_toeplitz = false;
  std::string mix_path = "auto";
  std::string precision = "f64";
  std::string log_path;
  std::string checkpoint;
  std::int64_t eval_every = 200;
};

json load_config_json(int argc, char** argv) {
  std::string path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) {
      path = argv[i + 1];
    } else if (arg.rfind("--config=", 0) == 0) {
      path = arg.substr(9);
    }
  }
  if (path.empty()) return json::object();
  return json::parse(io::read_file(path));
}

template <typename T>
void config_default(const json& cfg, const char* key, T& target) {
  if (cfg.contains(key)) target = cfg.at(key).get<T>();
}

void apply_config(const json& cfg, Opts& o) {
  config_default(cfg, "seed", o.seed);
  config_default(cfg, "dm", o.dm);
  config_default(cfg, "layers", o.layers);
  config_default(cfg, "heads", o.heads);
  config_default(cfg, "kernel", o.kernel);
  config_default(cfg, "ctx", o.ctx);
  config_default(cfg, "vocab", o.vocab);
  config_default(cfg, "steps", o.steps);
  config_default(cfg, "peak_lr", o.peak_lr);
  config_default(cfg, "warmup", o.warmup);
  config_default(cfg, "batch", o.batch);
  config_default(cfg, "freeze_toeplitz", o.freeze_toeplitz);
  config_default(cfg, "mix_path", o.mix_path);
  config_default(cfg, "precision", o.precision);
  config_default(cfg, "log", o.log_path);
  config_default(cfg, "checkpoint", o.checkpoint);
  config_default(cfg, "eval_every", o.eval_every);
}

void add_shared_flags(CLI::App* cmd, Opts& o) {
  cmd->add_option("--config", o.config_path,
                  "JSON config file; explicit flags override its values");
  cmd->add_option("--seed", o.seed, "RNG seed");
  cmd->add_option("--dm", o.dm, "hidden width d_m");
  cmd->add_option("--layers", o.layers, "mixer block count");
  cmd->add_option("--heads", o.heads, "head count; > 0 selects multi-head mixing");
  cmd->add_option("--kernel", o.kernel, "kernel size; >= 0 selects multi-kernel mixing");
  cmd->add_option("--ctx", o.ctx, "context length N_ctx");
  cmd->add_option("--vocab", o.vocab, "vocabulary size");
  cmd->add_option("--steps", o.steps, "optimizer steps");
  cmd->add_option("--peak-lr", o.peak_lr, "peak learning rate");
  cmd->add_option("--warmup", o.warmup, "linear warmup steps");
  cmd->add_option("--batch", o.batch, "sequences per step");
  cmd->add_flag("--freeze-toeplitz", o.freeze_toeplitz,
                "freeze Toeplitz coefficients and biases");
  cmd->add_option("--mix-path", o.mix_path, "fft|matmul|auto")
      ->check(CLI::IsMember({"fft", "matmul", "auto"}));
  cmd->add_option("--precision", o.precision, "f64|f32 (bench only)")
      ->check(CLI::IsMember({"f64", "f32"}));
  cmd->add_option("--log", o.log_path, "metrics JSONL path (default: stdout)");
  cmd->add_option("--checkpoint", o.checkpoint, "checkpoint path");
  cmd->add_option("--eval-every", o.eval_every, "steps between held-out evaluations");
}

model::MixPath parse_path(const std::string& s) {
  if (s == "fft") return model::MixPath::kFft;
  if (s == "matmul") return model::MixPath::kMatmul;
  return model::MixPath::kAuto;
}

model::ModelConfig model_config_from(const Opts& o, std::int64_t vocab) {
  model::ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = o.dm;
  c.n_layers = o.layers;
  c.n_ctx = o.ctx;
  c.freeze_toeplitz = o.freeze_toeplitz;
  c.seed = o.seed;
  if (o.heads > 0 && o.kernel >= 0) {
    throw CLI::ValidationError("--heads and --kernel select different mixing modes");
  }
  if (o.heads > 0) {
    c.mode = model::MixMode::kHeads;
    c.heads = o.heads;
  } else if (o.kernel >= 0) {
    c.mode = model::MixMode::kKernel;
    c.kernel = o.kernel;
  } else {
    c.mode = model::MixMode::kSingle;
  }
  return c;
}

std::unique_ptr<io::MetricsWriter> make_metrics(const Opts& o) {
  if (o.log_path.empty()) return std::make_unique<io::MetricsWriter>();
  return std::make_unique<io::MetricsWriter>(o.log_path);
}

// ---------------------------------------------------------------------------

int cmd_tokenize(const std::vector<std::string>& inputs, const std::string& output,
                 const std::string& scheme) {
  std::string text;
  for (const auto& path : inputs) text += io::read_file(path);
  if (scheme == "byte") {
    const auto tokens = io::tokenize_bytes(text);
    io::write_token_file(output, 256, tokens);
    std::cout << json{{"tokens", tokens.size()}, {"vocab", 256}, {"scheme", "byte"}}
              << "\n";
  } else {
    const auto tok = io::tokenize_words(text);
    io::write_token_file(output, static_cast<std::uint32_t>(tok.vocab.size()),
                         tok.tokens);
    io::write_vocab_file(output + ".vocab", tok.vocab);
    std::cout << json{{"tokens", tok.tokens.size()},
                      {"vocab", tok.vocab.size()},
                      {"scheme", "word"}}
              << "\n";
  }
  return 0;
}

int cmd_train(const Opts& o, const std::string& tokens_path, std::int64_t stride,
              double heldout) {
  const io::TokenFile tf = io::read_token_file(tokens_path);
  const auto data = io::WindowDataset::make(tf.tokens, o.ctx, stride, heldout);
  model::TMModel m = model::TMModel::build(model_config_from(o, tf.vocab_size));

  auto metrics = make_metrics(o);
  training::Schedule schedule{o.peak_lr, o.warmup, o.steps};
  training::ClmRunConfig run;
  run.steps = o.steps;
  run.batch = o.batch;
  run.path = parse_path(o.mix_path);
  run.eval_every = o.eval_every;
  run.seed = o.seed;
  run.metrics = metrics.get();
  run.checkpoint_path = o.checkpoint;
  const auto result = training::train_clm(m, data, schedule, run);

  std::cerr << json{{"final_train_loss", result.final_train_loss},
                    {"final_eval_loss", result.final_eval_loss},
                    {"unigram_entropy", training::unigram_entropy(tf.tokens)},
                    {"parameters", m.parameter_count()}}
            << "\n";
  return 0;
}

int cmd_copy(const Opts& o, const std::string& tokens_path, std::int64_t copy_len,
             bool unmasked, double stop_exact, std::int64_t eval_batches) {
  const io::TokenFile tf = io::read_token_file(tokens_path);
  if (2 * copy_len > o.ctx) {
    throw CLI::ValidationError("--copy-len needs 2L <= --ctx");
  }
  const auto cut = static_cast<std::ptrdiff_t>(tf.tokens.size() * 9 / 10);
  const std::vector<std::int32_t> train_corpus(tf.tokens.begin(),
                                               tf.tokens.begin() + cut);
  const std::vector<std::int32_t> eval_corpus(tf.tokens.begin() + cut,
                                              tf.tokens.end());

  model::TMModel m = model::TMModel::build(model_config_from(o, tf.vocab_size));
  auto metrics = make_metrics(o);
  training::Schedule schedule{o.peak_lr, o.warmup, o.steps};
  training::CopyRunConfig run;
  run.steps = o.steps;
  run.batch = o.batch;
  run.copy_len = copy_len;
  run.path = parse_path(o.mix_path);
  run.eval_every = o.eval_every;
  run.eval_batches = eval_batches;
  run.stop_exact = stop_exact;
  run.unmasked = unmasked;
  run.seed = o.seed;
  run.metrics = metrics.get();
  const auto result = training::train_copy(m, train_corpus, eval_corpus, schedule, run);
  if (!o.checkpoint.empty()) io::save_checkpoint(o.checkpoint, m);

  std::cerr << json{{"steps_run", result.steps_run},
                    {"exact_copy_acc", result.final_eval.exact_accuracy},
                    {"token_copy_acc", result.final_eval.token_accuracy}}
            << "\n";
  return 0;
}

int cmd_retention(const Opts& o, const std::string& tokens_path,
                  const std::string& probe_mode, const std::string& encoder_path,
                  std::int64_t seq_len) {
  const io::TokenFile tf = io::read_token_file(tokens_path);
  model::TMModel encoder =
      encoder_path.empty()
          ? model::TMModel::build(model_config_from(o, tf.vocab_size))
          : io::load_model(encoder_path);
  Opts dec_opts = o;
  dec_opts.seed = o.seed + 1;
  model::TMModel decoder =
      model::TMModel::build(model_config_from(dec_opts, tf.vocab_size));

  auto metrics = make_metrics(o);
  training::RetentionOptions ropt;
  ropt.mode = probe_mode == "capacity" ? training::RetentionMode::kCapacity
                                       : training::RetentionMode::kRetention;
  ropt.steps = o.steps;
  ropt.batch = o.batch;
  ropt.seq_len = seq_len;
  ropt.schedule = training::Schedule{o.peak_lr, o.warmup, o.steps};
  ropt.path = parse_path(o.mix_path);
  ropt.seed = o.seed;
  ropt.eval_every = o.eval_every;
  ropt.metrics = metrics.get();
  const auto result = training::train_retention(encoder, decoder, tf.tokens, ropt);

  std::cerr << json{{"probe", "simplified-retention"},
                    {"mode", probe_mode},
                    {"token_accuracy", result.token_accuracy},
                    {"final_loss", result.final_loss}}
            << "\n";
  return 0;
}

int cmd_generate(const Opts& o, const std::string& prompt_text, std::int64_t max_new,
                 const std::string& sampler_name, double temperature, int top_k) {
  if (o.checkpoint.empty()) throw CLI::ValidationError("generate needs --checkpoint");
  const model::TMModel m = io::load_model(o.checkpoint);
  if (m.config().vocab_size > 256) {
    throw CLI::ValidationError(
        "generate streams byte-level output; checkpoint has a larger vocab");
  }
  const auto prompt = io::tokenize_bytes(prompt_text);
  if (prompt.empty()) throw CLI::ValidationError("--prompt must not be empty");

  inference::SamplerSpec sampler;
  sampler.seed = o.seed;
  sampler.temperature = temperature;
  sampler.top_k = top_k;
  if (sampler_name == "greedy") {
    sampler.mode = inference::SamplerSpec::Mode::kGreedy;
  } else if (sampler_name == "temperature") {
    sampler.mode = inference::SamplerSpec::Mode::kTemperature;
  } else {
    sampler.mode = inference::SamplerSpec::Mode::kTopK;
  }

  // Stream tokens as they decode.
  std::mt19937_64 rng(sampler.seed);
  const Eigen::Index room =
      m.config().n_ctx - static_cast<Eigen::Index>(prompt.size());
  const Eigen::Index count = std::min<Eigen::Index>(max_new, room);
  std::fputs(prompt_text.c_str(), stdout);
  if (count > 0) {
    auto [logits, cache] = inference::prefill(m, prompt, parse_path(o.mix_path));
    std::int32_t next = inference::sample_logits(logits, sampler, rng);
    std::fputc(next, stdout);
    std::fflush(stdout);
    for (Eigen::Index i = 1; i < count; ++i) {
      next = inference::sample_logits(inference::decode(m, cache, next), sampler, rng);
      std::fputc(next, stdout);
      std::fflush(stdout);
    }
  }
  std::fputc('\n', stdout);
  return 0;
}

int cmd_analyze(const Opts& o, const std::string& out_dir,
                const std::vector<int>& layers, const std::string& label) {
  if (o.checkpoint.empty()) throw CLI::ValidationError("analyze needs --checkpoint");
  const model::TMModel m = io::load_model(o.checkpoint);
  std::filesystem::create_directories(out_dir);

  const analysis::IndexReport report = analysis::model_index_report(m);
  const std::string tsv = out_dir + "/index_report.tsv";
  const std::string row_label =
      label.empty() ? std::filesystem::path(o.checkpoint).stem().string() : label;
  analysis::write_index_tsv(tsv, row_label, report);
  analysis::export_weights(m, layers, out_dir);

  for (const auto& e : report.entries) {
    json rec{{"layer", e.layer},
             {"min_abs_symbol", e.min_abs_symbol},
             {"rank", e.rank},
             {"n", e.n}};
    if (!e.label.empty()) rec["slot"] = e.label;
    if (e.index.has_value()) {
      rec["index"] = *e.index;
      rec["winding"] = *e.winding;
    } else {
      rec["index"] = nullptr;
    }
    std::cout << rec << "\n";
  }
  std::cerr << json{{"report", tsv}, {"exports", out_dir}} << "\n";
  return 0;
}

int cmd_bench(const Opts& o, const std::vector<int>& dims,
              const std::vector<std::int64_t>& lens, int repeats,
              const std::string& out_csv) {
  std::vector<Eigen::Index> ns(lens.begin(), lens.end());
  const auto result = bench::bench_mix(dims, ns, repeats, o.precision == "f32", o.seed);
  bench::write_bench_csv(out_csv, result);
  for (const auto& fit : result.fits) {
    std::cout << json{{"d", fit.d},
                      {"matmul_exponent", fit.matmul_exponent},
                      {"fft_exponent", fit.fft_exponent}}
              << "\n";
  }
  std::cerr << json{{"csv", out_csv}} << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activation and gradient blocks churn through the allocator every step;
  // keep them on the reusable heap instead of mmap/munmap cycles.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"causal Toeplitz token-mixing models: training, inference, analysis"};
  app.require_subcommand(1);

  Opts opts;
  try {
    apply_config(load_config_json(argc, argv), opts);
  } catch (const std::exception& e) {
    std::cerr << "error reading --config: " << e.what() << "\n";
    return 1;
  }

  auto* tok = app.add_subcommand("tokenize", "corpus files -> token file");
  std::vector<std::string> tok_inputs;
  std::string tok_output, tok_scheme = "byte";
  tok->add_option("--input", tok_inputs, "input text files")->required();
  tok->add_option("--output", tok_output, "output .tmtk path")->required();
  tok->add_option("--scheme", tok_scheme, "byte|word")
      ->check(CLI::IsMember({"byte", "word"}));

  auto* train = app.add_subcommand("train", "causal language-model training");
  std::string train_tokens;
  std::int64_t train_stride = 0;
  double train_heldout = 0.1;
  train->add_option("--tokens", train_tokens, "token file")->required();
  train->add_option("--stride", train_stride, "window stride (default: --ctx)");
  train->add_option("--heldout", train_heldout, "tail fraction held out");
  add_shared_flags(train, opts);

  auto* copy = app.add_subcommand("copy", "duplicated-segment copy training");
  std::string copy_tokens;
  std::int64_t copy_len = 32, copy_eval_batches = 8;
  double copy_stop_exact = 0.0;
  bool copy_unmasked = false;
  copy->add_option("--tokens", copy_tokens, "token file")->required();
  copy->add_option("--copy-len", copy_len, "copied segment length L");
  copy->add_option("--eval-batches", copy_eval_batches, "held-out batches per eval");
  copy->add_option("--stop-exact", copy_stop_exact,
                   "stop once eval exact accuracy reaches this");
  copy->add_flag("--unmasked", copy_unmasked, "include first-copy loss too");
  add_shared_flags(copy, opts);

  auto* ret = app.add_subcommand("retention", "simplified retention probe");
  std::string ret_tokens, ret_mode = "capacity", ret_encoder;
  std::int64_t ret_seq_len = 16;
  ret->add_option("--tokens", ret_tokens, "token file")->required();
  ret->add_option("--probe-mode", ret_mode, "capacity|retention")
      ->check(CLI::IsMember({"capacity", "retention"}));
  ret->add_option("--encoder", ret_encoder, "frozen encoder checkpoint (retention mode)");
  ret->add_option("--seq-len", ret_seq_len, "sequence length to reconstruct");
  add_shared_flags(ret, opts);

  auto* gen = app.add_subcommand("generate", "sample a continuation");
  std::string gen_prompt, gen_sampler = "greedy";
  std::int64_t gen_max_new = 128;
  double gen_temperature = 1.0;
  int gen_top_k = 40;
  gen->add_option("--prompt", gen_prompt, "prompt text")->required();
  gen->add_option("--max-new", gen_max_new, "tokens to generate");
  gen->add_option("--sampler", gen_sampler, "greedy|temperature|topk")
      ->check(CLI::IsMember({"greedy", "temperature", "topk"}));
  gen->add_option("--temperature", gen_temperature, "sampling temperature");
  gen->add_option("--top-k", gen_top_k, "top-k cutoff");
  add_shared_flags(gen, opts);

  auto* ana = app.add_subcommand("analyze", "Toeplitz symbols, indices, weight grids");
  std::string ana_out = "analysis", ana_label;
  std::vector<int> ana_layers;
  ana->add_option("--out", ana_out, "output directory");
  ana->add_option("--layer", ana_layers, "layers to export (default: all)")
      ->delimiter(',');
  ana->add_option("--label", ana_label, "row label in the index table");
  add_shared_flags(ana, opts);

  auto* ben = app.add_subcommand("bench", "FFT vs materialized timing");
  std::vector<int> ben_dims{64};
  std::vector<std::int64_t> ben_lens{256, 512, 1024, 2048, 4096, 8192};
  int ben_repeats = 9;
  std::string ben_out = "bench.csv";
  ben->add_option("--dims", ben_dims, "hidden dimensions")->delimiter(',');
  ben->add_option("--lens", ben_lens, "sequence lengths")->delimiter(',');
  ben->add_option("--repeats", ben_repeats, "timing repeats (>= 5)");
  ben->add_option("--out", ben_out, "timing CSV path");
  add_shared_flags(ben, opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (tok->parsed()) return cmd_tokenize(tok_inputs, tok_output, tok_scheme);
    if (train->parsed()) return cmd_train(opts, train_tokens, train_stride, train_heldout);
    if (copy->parsed()) {
      return cmd_copy(opts, copy_tokens, copy_len, copy_unmasked, copy_stop_exact,
                      copy_eval_batches);
    }
    if (ret->parsed()) {
      return cmd_retention(opts, ret_tokens, ret_mode, ret_encoder, ret_seq_len);
    }
    if (gen->parsed()) {
      return cmd_generate(opts, gen_prompt, gen_max_new, gen_sampler, gen_temperature,
                          gen_top_k);
    }
    if (ana->parsed()) return cmd_analyze(opts, ana_out, ana_layers, ana_label);
    if (ben->parsed()) return cmd_bench(opts, ben_dims, ben_lens, ben_repeats, ben_out);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
