#include "tmix/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "tmix/io.hpp"
#include "tmix/toeplitz.hpp"

namespace tmix::analysis {

namespace {

constexpr Eigen::Index kMaxSymbolSamples = 1 << 22;

}  // namespace

Eigen::Index default_symbol_samples(Eigen::Index coeff_len) {
  return std::max<Eigen::Index>(4096, 8 * coeff_len);
}

SymbolPath symbol_path(const VectorXd& coeffs, Eigen::Index samples) {
  if (samples < 4 * coeffs.size()) {
    throw std::invalid_argument("symbol_path: need at least 4x coefficient length, got " +
                                std::to_string(samples) + " samples for " +
                                std::to_string(coeffs.size()) + " coefficients");
  }
  SymbolPath path;
  path.points.resize(samples);
  for (Eigen::Index s = 0; s < samples; ++s) {
    const double theta =
        2.0 * std::numbers::pi * static_cast<double>(s) / static_cast<double>(samples);
    const std::complex<double> w{std::cos(-theta), std::sin(-theta)};  // z^{-1}
    // Horner evaluation of sum_k c_k w^k.
    std::complex<double> acc{0.0, 0.0};
    for (Eigen::Index k = coeffs.size() - 1; k >= 0; --k) {
      acc = acc * w + coeffs[k];
    }
    path.points[s] = acc;
  }
  return path;
}

int winding_number(const SymbolPath& path, double origin_tol) {
  const Eigen::Index m = path.points.size();
  if (m < 2) throw std::invalid_argument("winding_number: need at least 2 samples");
  const double max_abs = path.points.cwiseAbs().maxCoeff();
  const double min_abs = path.points.cwiseAbs().minCoeff();
  if (min_abs <= origin_tol * max_abs) {
    throw SymbolVanishesError("symbol vanishes on circle, index undefined");
  }
  double total = 0.0;
  for (Eigen::Index s = 0; s < m; ++s) {
    const std::complex<double> a = path.points[s];
    const std::complex<double> b = path.points[(s + 1) % m];
    const double step = std::arg(b * std::conj(a));
    if (std::abs(step) >= std::numbers::pi / 2.0) {
      throw PathUnderResolvedError("winding_number: angle step " +
                                   std::to_string(step) + " at segment " +
                                   std::to_string(s) + "; resample more densely");
    }
    total += step;
  }
  return static_cast<int>(std::lround(total / (2.0 * std::numbers::pi)));
}

int winding_number(const VectorXd& coeffs) {
  Eigen::Index samples = default_symbol_samples(coeffs.size());
  while (true) {
    try {
      return winding_number(symbol_path(coeffs, samples));
    } catch (const PathUnderResolvedError&) {
      if (samples >= kMaxSymbolSamples) throw;
      samples *= 2;
    }
  }
}

int winding_by_roots(const VectorXd& coeffs) {
  const Eigen::Index n = coeffs.size();
  Eigen::Index first = -1;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (coeffs[k] != 0.0) {
      first = k;
      break;
    }
  }
  if (first < 0) {
    throw SymbolVanishesError("symbol vanishes on circle, index undefined");
  }
  // q(z) = sum_{k>=first} c_k z^{(n-1)-k}, degree m with nonzero lead.
  const Eigen::Index degree = n - 1 - first;
  if (degree == 0) return -static_cast<int>(n - 1);

  MatrixXd companion = MatrixXd::Zero(degree, degree);
  for (Eigen::Index i = 1; i < degree; ++i) companion(i, i - 1) = 1.0;
  for (Eigen::Index i = 0; i < degree; ++i) {
    // Monic coefficients of z^{degree-1-i}.
    companion(i, degree - 1) = -coeffs[first + degree - i] / coeffs[first];
  }
  Eigen::EigenSolver<MatrixXd> solver(companion, /*computeEigenvectors=*/false);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("winding_by_roots: eigensolver failed");
  }
  int inside = 0;
  for (Eigen::Index i = 0; i < degree; ++i) {
    if (std::abs(solver.eigenvalues()[i]) < 1.0) ++inside;
  }
  return -static_cast<int>(n - 1) + inside;
}

int fredholm_index(const VectorXd& coeffs) { return winding_number(coeffs); }

Eigen::Index numerical_rank(const MatrixXd& m, double tol) {
  if (m.size() == 0) return 0;
  if (!m.allFinite()) throw std::invalid_argument("numerical_rank: non-finite matrix");
  Eigen::BDCSVD<MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] == 0.0) return 0;
  if (tol < 0.0) {
    tol = static_cast<double>(std::max(m.rows(), m.cols())) *
          std::numeric_limits<double>::epsilon();
  }
  const double cut = tol * sv[0];
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv[i] > cut) ++rank;
  }
  return rank;
}

namespace {

std::string slot_label(const model::ModelConfig& c, int slot) {
  switch (c.mode) {
    case model::MixMode::kSingle: return "";
    case model::MixMode::kHeads: return "head" + std::to_string(slot);
    case model::MixMode::kKernel: return "slot" + std::to_string(slot);
  }
  return "";
}

}  // namespace

IndexReport model_index_report(const model::TMModel& m) {
  const auto& c = m.config();
  IndexReport report;
  report.layers = c.n_layers;
  report.slots_per_layer = static_cast<std::int64_t>(m.blocks()[0].coeffs.size());
  for (std::size_t layer = 0; layer < m.blocks().size(); ++layer) {
    const auto& bp = m.blocks()[layer];
    for (std::size_t slot = 0; slot < bp.coeffs.size(); ++slot) {
      const VectorXd coeffs = m.params()[bp.coeffs[slot]].value.col(0);
      IndexEntry entry;
      entry.layer = static_cast<int>(layer);
      entry.slot = static_cast<int>(slot);
      entry.label = slot_label(c, static_cast<int>(slot));
      const SymbolPath path = symbol_path(coeffs, default_symbol_samples(coeffs.size()));
      entry.min_abs_symbol = path.points.cwiseAbs().minCoeff();
      try {
        entry.winding = winding_number(coeffs);
        entry.index = entry.winding;
      } catch (const SymbolVanishesError&) {
        // near-singular symbol; min_abs_symbol already records how close
      }
      entry.n = c.n_ctx;
      entry.rank = numerical_rank(
          toeplitz::materialize_causal<double>(coeffs, c.n_ctx));
      report.entries.push_back(std::move(entry));
    }
  }
  return report;
}

namespace {

void print_full(std::ostream& os, double v) {
  std::ostringstream ss;
  ss.precision(std::numeric_limits<double>::max_digits10);
  ss << v;
  os << ss.str();
}

}  // namespace

void write_symbol_csv(const std::string& path, const SymbolPath& symbol) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (Eigen::Index i = 0; i < symbol.points.size(); ++i) {
    print_full(out, symbol.points[i].real());
    out << ',';
    print_full(out, symbol.points[i].imag());
    out << '\n';
  }
}

void write_weight_grid_csv(const std::string& path, const MatrixXd& grid) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    for (Eigen::Index j = 0; j < grid.cols(); ++j) {
      if (j) out << ',';
      print_full(out, grid(i, j));
    }
    out << '\n';
  }
}

MatrixXd read_weight_grid_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) return MatrixXd(0, 0);
  MatrixXd m(static_cast<Eigen::Index>(rows.size()),
             static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) {
      throw std::runtime_error(path + ": ragged csv rows");
    }
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return m;
}

void write_index_tsv(const std::string& path, const std::string& model_label,
                     const IndexReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "model";
  for (std::int64_t l = 0; l < report.layers; ++l) out << '\t' << l;
  out << '\n';
  for (std::int64_t slot = 0; slot < report.slots_per_layer; ++slot) {
    out << model_label;
    bool labeled = false;
    for (const auto& e : report.entries) {
      if (e.slot != slot) continue;
      if (!labeled && !e.label.empty()) {
        out << '[' << e.label << ']';
      }
      labeled = true;
      out << '\t';
      if (e.index.has_value()) {
        out << *e.index;
      } else {
        out << "NA";
      }
    }
    out << '\n';
  }
}

void export_weights(const model::TMModel& m, const std::vector<int>& layers,
                    const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto& c = m.config();
  auto selected = [&layers](int layer) {
    if (layers.empty()) return true;
    return std::find(layers.begin(), layers.end(), layer) != layers.end();
  };
  for (std::size_t layer = 0; layer < m.blocks().size(); ++layer) {
    if (!selected(static_cast<int>(layer))) continue;
    const auto& bp = m.blocks()[layer];
    for (std::size_t slot = 0; slot < bp.coeffs.size(); ++slot) {
      const VectorXd coeffs = m.params()[bp.coeffs[slot]].value.col(0);
      std::string stem = "layer" + std::to_string(layer);
      const std::string label = slot_label(c, static_cast<int>(slot));
      if (!label.empty()) stem += "_" + label;
      write_weight_grid_csv(
          (fs::path(out_dir) / ("weights_" + stem + ".csv")).string(),
          toeplitz::materialize_causal<double>(coeffs, c.n_ctx));
      write_symbol_csv(
          (fs::path(out_dir) / ("symbol_" + stem + ".csv")).string(),
          symbol_path(coeffs, default_symbol_samples(coeffs.size())));
    }
  }
}

}  // namespace tmix::analysis
