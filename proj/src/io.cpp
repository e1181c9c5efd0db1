#include "tmix/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace tmix::model {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},
                     {"d_model", c.d_model},
                     {"n_layers", c.n_layers},
                     {"mode", mix_mode_name(c.mode)},
                     {"heads", c.heads},
                     {"kernel", c.kernel},
                     {"n_ctx", c.n_ctx},
                     {"mlp_expansion", c.mlp_expansion},
                     {"freeze_toeplitz", c.freeze_toeplitz},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.at("vocab_size").get<std::int64_t>();
  c.d_model = j.at("d_model").get<std::int64_t>();
  c.n_layers = j.at("n_layers").get<std::int64_t>();
  c.mode = mix_mode_from_name(j.at("mode").get<std::string>());
  c.heads = j.at("heads").get<std::int64_t>();
  c.kernel = j.at("kernel").get<std::int64_t>();
  c.n_ctx = j.at("n_ctx").get<std::int64_t>();
  c.mlp_expansion = j.at("mlp_expansion").get<std::int64_t>();
  c.freeze_toeplitz = j.at("freeze_toeplitz").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

}  // namespace tmix::model

namespace tmix::io {

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

struct Cursor {
  const std::string& data;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > data.size()) {
      throw std::runtime_error(std::string("truncated file while reading ") + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data[pos + i])) << (8 * i);
    }
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data.substr(pos, n);
    pos += n;
    return s;
  }
};

void put_matrix(std::string& buf, const Eigen::MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) put_f64(buf, m(i, j));
  }
}

Eigen::MatrixXd read_matrix(Cursor& c, Eigen::Index rows, Eigen::Index cols,
                            const char* what) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = c.f64(what);
  }
  return m;
}

constexpr std::uint32_t kDtypeF64 = 0;

}  // namespace

std::uint32_t crc32(const std::uint8_t* data, std::size_t length) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int bit = 0; bit < 8; ++bit) {
        c = (c & 1) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
      }
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < length; ++i) {
    crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

// ---------------------------------------------------------------------------
// Token files

std::uint32_t token_width_for_vocab(std::uint32_t vocab_size) {
  return vocab_size <= 65536 ? 2u : 4u;
}

void write_token_file(const std::string& path, std::uint32_t vocab_size,
                      const std::vector<std::int32_t>& tokens) {
  const std::uint32_t width = token_width_for_vocab(vocab_size);
  std::string buf;
  buf.append(kTokenMagic, 4);
  put_u32(buf, kTokenVersion);
  put_u32(buf, vocab_size);
  put_u32(buf, width);
  put_u64(buf, tokens.size());
  for (std::int32_t t : tokens) {
    if (t < 0 || static_cast<std::uint32_t>(t) >= vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) +
                                  " out of range for vocab " +
                                  std::to_string(vocab_size));
    }
    for (std::uint32_t b = 0; b < width; ++b) {
      buf.push_back(static_cast<char>((static_cast<std::uint32_t>(t) >> (8 * b)) & 0xff));
    }
  }
  write_file(path, buf);
}

TokenFile read_token_file(const std::string& path) {
  const std::string data = read_file(path);
  Cursor c{data};
  if (c.bytes(4, "magic") != std::string(kTokenMagic, 4)) {
    throw std::runtime_error(path + ": not a token file (bad magic)");
  }
  const std::uint32_t version = c.u32("version");
  if (version != kTokenVersion) {
    throw std::runtime_error(path + ": unsupported token file version " +
                             std::to_string(version));
  }
  TokenFile tf;
  tf.vocab_size = c.u32("vocab size");
  tf.width = c.u32("token width");
  if (tf.width != 2 && tf.width != 4) {
    throw std::runtime_error(path + ": invalid token width " + std::to_string(tf.width));
  }
  const std::uint64_t count = c.u64("token count");
  c.need(count * tf.width, "token payload");
  tf.tokens.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t v = 0;
    for (std::uint32_t b = 0; b < tf.width; ++b) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[c.pos + b])) << (8 * b);
    }
    c.pos += tf.width;
    if (v >= tf.vocab_size) {
      throw std::runtime_error(path + ": token id " + std::to_string(v) +
                               " out of range for vocab " +
                               std::to_string(tf.vocab_size));
    }
    tf.tokens[i] = static_cast<std::int32_t>(v);
  }
  return tf;
}

std::vector<std::int32_t> tokenize_bytes(const std::string& text) {
  std::vector<std::int32_t> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    out[i] = static_cast<std::int32_t>(static_cast<std::uint8_t>(text[i]));
  }
  return out;
}

std::string detokenize_bytes(const std::vector<std::int32_t>& tokens) {
  std::string out(tokens.size(), '\0');
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] > 255) {
      throw std::invalid_argument("byte token out of range: " + std::to_string(tokens[i]));
    }
    out[i] = static_cast<char>(static_cast<std::uint8_t>(tokens[i]));
  }
  return out;
}

WordTokenization tokenize_words(const std::string& text) {
  std::istringstream ss(text);
  std::vector<std::string> words;
  std::map<std::string, std::int64_t> counts;
  std::string w;
  while (ss >> w) {
    words.push_back(w);
    ++counts[w];
  }
  std::vector<std::string> vocab;
  vocab.reserve(counts.size());
  for (const auto& [word, n] : counts) vocab.push_back(word);
  std::sort(vocab.begin(), vocab.end(), [&](const std::string& a, const std::string& b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return a < b;
  });
  std::map<std::string, std::int32_t> index;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    index[vocab[i]] = static_cast<std::int32_t>(i);
  }
  WordTokenization out;
  out.vocab = std::move(vocab);
  out.tokens.reserve(words.size());
  for (const auto& word : words) out.tokens.push_back(index[word]);
  return out;
}

std::string detokenize_words(const std::vector<std::int32_t>& tokens,
                             const std::vector<std::string>& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::int32_t t = tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.size()) {
      throw std::invalid_argument("word token out of range: " + std::to_string(t));
    }
    if (i) out += ' ';
    out += vocab[static_cast<std::size_t>(t)];
  }
  return out;
}

void write_vocab_file(const std::string& path, const std::vector<std::string>& vocab) {
  std::string buf;
  for (const auto& w : vocab) {
    buf += w;
    buf += '\n';
  }
  write_file(path, buf);
}

std::vector<std::string> read_vocab_file(const std::string& path) {
  std::istringstream ss(read_file(path));
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(ss, line)) vocab.push_back(line);
  return vocab;
}

// ---------------------------------------------------------------------------
// Windowing

WindowDataset WindowDataset::make(std::vector<std::int32_t> tokens, Eigen::Index n_ctx,
                                  Eigen::Index stride, double heldout_fraction) {
  if (n_ctx < 1) throw std::invalid_argument("window_dataset: n_ctx must be >= 1");
  if (stride <= 0) stride = n_ctx;
  WindowDataset ds;
  ds.tokens = std::move(tokens);
  ds.n_ctx = n_ctx;
  ds.stride = stride;
  std::vector<std::size_t> starts;
  for (std::size_t s = 0;
       s + static_cast<std::size_t>(n_ctx) <= ds.tokens.size();
       s += static_cast<std::size_t>(stride)) {
    starts.push_back(s);
  }
  if (heldout_fraction < 0.0 || heldout_fraction >= 1.0) {
    throw std::invalid_argument("window_dataset: heldout fraction must be in [0, 1)");
  }
  const std::size_t heldout =
      static_cast<std::size_t>(heldout_fraction * static_cast<double>(starts.size()));
  const std::size_t cut = starts.size() - heldout;
  ds.train_starts.assign(starts.begin(), starts.begin() + static_cast<std::ptrdiff_t>(cut));
  ds.heldout_starts.assign(starts.begin() + static_cast<std::ptrdiff_t>(cut), starts.end());
  return ds;
}

std::vector<std::int32_t> WindowDataset::gather(
    const std::vector<std::size_t>& starts) const {
  std::vector<std::int32_t> out;
  out.reserve(starts.size() * static_cast<std::size_t>(n_ctx));
  for (std::size_t s : starts) {
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(s),
               tokens.begin() + static_cast<std::ptrdiff_t>(s) +
                   static_cast<std::ptrdiff_t>(n_ctx));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::string& path, const model::TMModel& m,
                     const OptimizerState* optimizer) {
  std::string payload;
  const nlohmann::json cfg = m.config();
  const std::string cfg_str = cfg.dump();
  put_u64(payload, cfg_str.size());
  payload += cfg_str;

  put_u32(payload, static_cast<std::uint32_t>(m.params().size()));
  for (const auto& p : m.params()) {
    put_u32(payload, static_cast<std::uint32_t>(p.name.size()));
    payload += p.name;
    put_u32(payload, 2);  // rank
    put_u64(payload, static_cast<std::uint64_t>(p.value.rows()));
    put_u64(payload, static_cast<std::uint64_t>(p.value.cols()));
    put_u32(payload, kDtypeF64);
    payload.push_back(p.trainable ? 1 : 0);
    put_matrix(payload, p.value);
  }
  if (optimizer) {
    if (optimizer->m.size() != m.params().size() ||
        optimizer->v.size() != m.params().size()) {
      throw std::invalid_argument("save_checkpoint: optimizer moments misaligned");
    }
    payload.push_back(1);
    put_u64(payload, optimizer->step);
    put_f64(payload, optimizer->beta1);
    put_f64(payload, optimizer->beta2);
    put_f64(payload, optimizer->eps);
    put_f64(payload, optimizer->weight_decay);
    for (std::size_t i = 0; i < m.params().size(); ++i) {
      put_matrix(payload, optimizer->m[i]);
      put_matrix(payload, optimizer->v[i]);
    }
  } else {
    payload.push_back(0);
  }

  std::string buf;
  buf.append(kCheckpointMagic, 4);
  put_u32(buf, kCheckpointVersion);
  buf += payload;
  put_u32(buf, crc32(reinterpret_cast<const std::uint8_t*>(payload.data()),
                     payload.size()));
  write_file(path, buf);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  Cursor c{data};
  if (c.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw std::runtime_error(path + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t version = c.u32("version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  }
  if (data.size() < c.pos + 4) throw std::runtime_error(path + ": truncated checkpoint");
  const std::size_t payload_len = data.size() - c.pos - 4;
  const std::uint32_t want_crc =
      crc32(reinterpret_cast<const std::uint8_t*>(data.data() + c.pos), payload_len);
  {
    Cursor tail{data, data.size() - 4};
    const std::uint32_t got_crc = tail.u32("crc");
    if (got_crc != want_crc) {
      throw std::runtime_error(path + ": checksum mismatch, file corrupted");
    }
  }

  LoadedCheckpoint out;
  const std::uint64_t cfg_len = c.u64("config length");
  const std::string cfg_str = c.bytes(cfg_len, "config json");
  out.config = nlohmann::json::parse(cfg_str).get<model::ModelConfig>();

  const std::uint32_t count = c.u32("parameter count");
  out.params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    model::Parameter p;
    const std::uint32_t name_len = c.u32("parameter name length");
    p.name = c.bytes(name_len, "parameter name");
    const std::uint32_t rank = c.u32("parameter rank");
    if (rank != 2) {
      throw std::runtime_error(path + ": unsupported parameter rank " +
                               std::to_string(rank));
    }
    const auto rows = static_cast<Eigen::Index>(c.u64("rows"));
    const auto cols = static_cast<Eigen::Index>(c.u64("cols"));
    const std::uint32_t dtype = c.u32("dtype");
    if (dtype != kDtypeF64) {
      throw std::runtime_error(path + ": unsupported dtype tag " + std::to_string(dtype));
    }
    p.trainable = c.bytes(1, "trainable flag")[0] != 0;
    p.value = read_matrix(c, rows, cols, "parameter data");
    out.params.push_back(std::move(p));
  }
  const bool has_opt = c.bytes(1, "optimizer flag")[0] != 0;
  if (has_opt) {
    OptimizerState opt;
    opt.step = c.u64("optimizer step");
    opt.beta1 = c.f64("beta1");
    opt.beta2 = c.f64("beta2");
    opt.eps = c.f64("eps");
    opt.weight_decay = c.f64("weight decay");
    for (const auto& p : out.params) {
      opt.m.push_back(read_matrix(c, p.value.rows(), p.value.cols(), "first moment"));
      opt.v.push_back(read_matrix(c, p.value.rows(), p.value.cols(), "second moment"));
    }
    out.optimizer = std::move(opt);
  }
  return out;
}

model::TMModel load_model(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  return model::TMModel::from_parts(std::move(ck.config), std::move(ck.params));
}

// ---------------------------------------------------------------------------
// Metrics

MetricsWriter::MetricsWriter() : out_(&std::cout) {}

MetricsWriter::MetricsWriter(const std::string& path) {
  auto file = std::make_unique<std::ofstream>(path, std::ios::trunc);
  if (!*file) throw std::runtime_error("cannot open metrics log " + path);
  out_ = file.get();
  owned_ = std::move(file);
}

MetricsWriter::~MetricsWriter() = default;

void MetricsWriter::write(const nlohmann::json& record) {
  (*out_) << record.dump() << '\n';
  out_->flush();
}

}  // namespace tmix::io
