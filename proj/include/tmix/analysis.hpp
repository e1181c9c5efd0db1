#pragma once

#include <Eigen/Core>
#include <complex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmix/model.hpp"

namespace tmix::analysis {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// sigma(z) = sum_k coeffs[k] z^{-k} sampled at `points.size()` uniform unit
// circle points, traversed counterclockwise.
struct SymbolPath {
  Eigen::VectorXcd points;
};

class SymbolVanishesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A per-segment angle step reached pi/2; the sample count cannot resolve the
// path. The adaptive entry points retry with doubled sampling.
class PathUnderResolvedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Eigen::Index default_symbol_samples(Eigen::Index coeff_len);  // max(4096, 8n)

// Requires samples >= 4 * coeffs length.
SymbolPath symbol_path(const VectorXd& coeffs, Eigen::Index samples);

// Accumulated argument change around the origin over the closed path,
// divided by 2*pi and rounded. Throws SymbolVanishesError when the path
// comes within origin_tol * max|point| of the origin and
// PathUnderResolvedError when a segment step reaches pi/2.
int winding_number(const SymbolPath& path, double origin_tol = 1e-9);

// Adaptive form: samples at the default density and doubles on
// under-resolution, up to a cap.
int winding_number(const VectorXd& coeffs);

// Independent route: roots of q(z) = sum_k coeffs[k] z^{N-1-k} via companion
// matrix eigenvalues; winding = -(N-1) + #roots strictly inside the unit
// disk (argument principle).
int winding_by_roots(const VectorXd& coeffs);

// Under this artifact's right-multiplication convention the Fredholm index
// of a causal layer equals the winding number of its symbol.
int fredholm_index(const VectorXd& coeffs);

// Count of singular values above tol * (largest singular value); tol < 0
// selects the default max(rows, cols) * machine epsilon.
Eigen::Index numerical_rank(const MatrixXd& m, double tol = -1.0);

struct IndexEntry {
  int layer = 0;
  int slot = 0;
  std::string label;             // "", "head2", "slot1"
  std::optional<int> index;      // empty when the symbol vanishes on the circle
  std::optional<int> winding;    // equals index for causal layers
  double min_abs_symbol = 0.0;
  Eigen::Index rank = 0;         // numerical rank of the materialized matrix
  Eigen::Index n = 0;            // its size
};

struct IndexReport {
  std::vector<IndexEntry> entries;
  std::int64_t layers = 0;
  std::int64_t slots_per_layer = 1;
};

IndexReport model_index_report(const model::TMModel& m);

// CSV/TSV emitters. Symbol files hold one "re,im" line per sample; weight
// grids one comma-separated row per line at round-trip precision; the index
// TSV mirrors a layer-indexed table with one row per slot series.
void write_symbol_csv(const std::string& path, const SymbolPath& symbol);
void write_weight_grid_csv(const std::string& path, const MatrixXd& grid);
MatrixXd read_weight_grid_csv(const std::string& path);
void write_index_tsv(const std::string& path, const std::string& model_label,
                     const IndexReport& report);

// Materialized matrices and symbol paths for the selected layers (empty
// selector = every layer) written under out_dir.
void export_weights(const model::TMModel& m, const std::vector<int>& layers,
                    const std::string& out_dir);

}  // namespace tmix::analysis
