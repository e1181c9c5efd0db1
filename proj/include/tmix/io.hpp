#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tmix/model.hpp"

namespace tmix::model {
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
}  // namespace tmix::model

namespace tmix::io {

// ---------------------------------------------------------------------------
// Token files: "TMTK", version u32, vocab u32, width u32 (2 or 4 bytes per
// id), count u64, then count little-endian ids.

inline constexpr char kTokenMagic[4] = {'T', 'M', 'T', 'K'};
inline constexpr std::uint32_t kTokenVersion = 1;

struct TokenFile {
  std::uint32_t vocab_size = 0;
  std::uint32_t width = 0;
  std::vector<std::int32_t> tokens;
};

std::uint32_t token_width_for_vocab(std::uint32_t vocab_size);
void write_token_file(const std::string& path, std::uint32_t vocab_size,
                      const std::vector<std::int32_t>& tokens);
TokenFile read_token_file(const std::string& path);

// Byte-level scheme: ids are the raw bytes, vocab 256.
std::vector<std::int32_t> tokenize_bytes(const std::string& text);
std::string detokenize_bytes(const std::vector<std::int32_t>& tokens);

// Whitespace-word scheme. The vocabulary is ordered by descending frequency
// with lexicographic tie-break, so tokenization is deterministic; it is
// stored next to the token file as one word per line.
struct WordTokenization {
  std::vector<std::int32_t> tokens;
  std::vector<std::string> vocab;
};
WordTokenization tokenize_words(const std::string& text);
std::string detokenize_words(const std::vector<std::int32_t>& tokens,
                             const std::vector<std::string>& vocab);
void write_vocab_file(const std::string& path, const std::vector<std::string>& vocab);
std::vector<std::string> read_vocab_file(const std::string& path);

// ---------------------------------------------------------------------------
// Dataset windowing: fixed-length windows over the token stream,
// non-overlapping by default, with the held-out split taken from the tail.

struct WindowDataset {
  std::vector<std::int32_t> tokens;
  Eigen::Index n_ctx = 0;
  Eigen::Index stride = 0;
  std::vector<std::size_t> train_starts;
  std::vector<std::size_t> heldout_starts;

  static WindowDataset make(std::vector<std::int32_t> tokens, Eigen::Index n_ctx,
                            Eigen::Index stride = 0, double heldout_fraction = 0.0);
  std::size_t window_count() const {
    return train_starts.size() + heldout_starts.size();
  }
  // Concatenates the windows at the given starts into one batch token vector.
  std::vector<std::int32_t> gather(const std::vector<std::size_t>& starts) const;
};

// ---------------------------------------------------------------------------
// Checkpoints: "TMM1", version u32, then a crc32-guarded payload holding the
// model config as JSON, the named parameter table, and an optional optimizer
// section. Numeric payloads are little-endian f64, matrices column-major.

inline constexpr char kCheckpointMagic[4] = {'T', 'M', 'M', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::vector<Eigen::MatrixXd> m;  // first moments, aligned with parameters
  std::vector<Eigen::MatrixXd> v;  // second moments
};

struct LoadedCheckpoint {
  model::ModelConfig config;
  std::vector<model::Parameter> params;
  std::optional<OptimizerState> optimizer;
};

void save_checkpoint(const std::string& path, const model::TMModel& m,
                     const OptimizerState* optimizer = nullptr);
LoadedCheckpoint load_checkpoint(const std::string& path);
model::TMModel load_model(const std::string& path);

std::uint32_t crc32(const std::uint8_t* data, std::size_t length);

// ---------------------------------------------------------------------------
// Line-delimited JSON metrics, to stdout or a file.

class MetricsWriter {
 public:
  MetricsWriter();                            // stdout
  explicit MetricsWriter(const std::string& path);
  ~MetricsWriter();
  void write(const nlohmann::json& record);

 private:
  std::ostream* out_;
  std::unique_ptr<std::ostream> owned_;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace tmix::io
