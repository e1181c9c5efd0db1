#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <vector>

#include "tmix/toeplitz.hpp"

namespace tmix::autodiff {

using Eigen::MatrixXd;

class Tape;

// Handle to one node on a tape. Cheap to copy; invalid until assigned.
struct Var {
  Tape* tape = nullptr;
  Eigen::Index id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const MatrixXd& value() const;
  const MatrixXd& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Define-by-run reverse-mode record over dense double matrices. Nodes only
// ever reference earlier nodes, so a single reverse sweep settles every
// gradient. One tape is single-threaded; independent tapes are unrelated.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(MatrixXd value, bool requires_grad = false);

  // Accumulates d(root)/d(node) into every node that requires (or feeds a
  // node that requires) a gradient. root must be 1x1.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }
  const MatrixXd& value_of(Eigen::Index id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const MatrixXd& grad_of(Eigen::Index id) const;
  bool needs_grad(Eigen::Index id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Validate output finiteness on every primitive. On by default in debug
  // builds; tests may force it in release builds.
  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  Var emplace(MatrixXd value, bool needs_grad, std::function<void(Tape&)> pull,
              const char* op);

  template <typename Derived>
  void accumulate(Eigen::Index id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  struct Node {
    MatrixXd value;
    MatrixXd grad;
    bool needs_grad = false;
    std::function<void(Tape&)> pull;
  };
  std::vector<Node> nodes_;
#ifdef NDEBUG
  bool check_finite_ = false;
#else
  bool check_finite_ = true;
#endif
};

// Primitive set. Each op validates shapes, records its forward value, and
// registers the matching adjoint.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var elementwise_mul(Var a, Var b);
Var scale(Var a, double s);
Var gelu(Var x);                                // exact erf form
Var layer_norm(Var x, Var gain, Var shift);     // per column over rows, eps 1e-5
Var embedding_gather(Var table, const std::vector<std::int32_t>& ids);
Var concat_rows(Var a, Var b);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var sum(Var x);

// Causal Toeplitz mix applied independently to each of `batch` equal column
// segments of x. coeffs (and bias, when valid) are context-length column
// vectors; gradients flow to x, coeffs and bias.
Var causal_toeplitz_mix(Var x, Var coeffs, Var bias, Eigen::Index batch,
                        toeplitz::MixPath path = toeplitz::MixPath::kAuto);

// Mean over mask-weighted columns of -log softmax(logits)[target]. logits is
// V x C with one column per prediction site.
Var cross_entropy(Var logits, const std::vector<std::int32_t>& targets,
                  const std::vector<double>& mask);

}  // namespace tmix::autodiff
