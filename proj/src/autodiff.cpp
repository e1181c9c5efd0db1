#include "tmix/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "tmix/elementwise.hpp"

namespace tmix::autodiff {

namespace {

std::string shape_of(const MatrixXd& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) + ": operands from different tapes");
  }
}

constexpr double kLayerNormEps = 1e-5;

}  // namespace

const MatrixXd& Var::value() const { return tape->value_of(id); }
const MatrixXd& Var::grad() const { return tape->grad_of(id); }

const MatrixXd& Tape::grad_of(Eigen::Index id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    static const MatrixXd empty;
    return empty;
  }
  return n.grad;
}

Var Tape::leaf(MatrixXd value, bool requires_grad) {
  return emplace(std::move(value), requires_grad, nullptr, "leaf");
}

Var Tape::emplace(MatrixXd value, bool needs_grad, std::function<void(Tape&)> pull,
                  const char* op) {
  if (check_finite_ && !value.allFinite()) {
    throw std::runtime_error(std::string(op) + ": non-finite output");
  }
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<Eigen::Index>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("backward: root from another tape");
  const MatrixXd& v = value_of(root.id);
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " + shape_of(v));
  }
  Node& r = nodes_[static_cast<std::size_t>(root.id)];
  if (r.grad.size() == 0) r.grad = MatrixXd::Zero(1, 1);
  r.grad(0, 0) += 1.0;
  for (Eigen::Index i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.pull && n.grad.size() != 0) n.pull(*this);
  }
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const MatrixXd& av = a.value();
  const MatrixXd& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_of(av) +
                                " * " + shape_of(bv));
  }
  Tape& t = *a.tape;
  const bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  MatrixXd out = av * bv;
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index ai = a.id, bi = b.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [ai, bi, oi](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      tp.accumulate(ai, g * tp.value_of(bi).transpose());
      tp.accumulate(bi, tp.value_of(ai).transpose() * g);
    };
  }
  return t.emplace(std::move(out), needs, std::move(pull), "matmul");
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  const MatrixXd& av = a.value();
  const MatrixXd& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw std::invalid_argument("add: shape mismatch, " + shape_of(av) + " vs " +
                                shape_of(bv));
  }
  Tape& t = *a.tape;
  const bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index ai = a.id, bi = b.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [ai, bi, oi](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      tp.accumulate(ai, g);
      tp.accumulate(bi, g);
    };
  }
  return t.emplace(av + bv, needs, std::move(pull), "add");
}

Var elementwise_mul(Var a, Var b) {
  require_same_tape(a, b, "elementwise_mul");
  const MatrixXd& av = a.value();
  const MatrixXd& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw std::invalid_argument("elementwise_mul: shape mismatch, " + shape_of(av) +
                                " vs " + shape_of(bv));
  }
  Tape& t = *a.tape;
  const bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index ai = a.id, bi = b.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [ai, bi, oi](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      tp.accumulate(ai, g.cwiseProduct(tp.value_of(bi)));
      tp.accumulate(bi, g.cwiseProduct(tp.value_of(ai)));
    };
  }
  return t.emplace(av.cwiseProduct(bv), needs, std::move(pull), "elementwise_mul");
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const bool needs = t.needs_grad(a.id);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index ai = a.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [ai, oi, s](Tape& tp) { tp.accumulate(ai, s * tp.grad_of(oi)); };
  }
  return t.emplace(s * a.value(), needs, std::move(pull), "scale");
}

Var gelu(Var x) {
  Tape& t = *x.tape;
  const bool needs = t.needs_grad(x.id);
  MatrixXd cdf = elementwise::gelu_cdf(x.value());
  MatrixXd out = x.value().cwiseProduct(cdf);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index xi = x.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [xi, oi, cdf = std::move(cdf)](Tape& tp) {
      const MatrixXd dydx = elementwise::gelu_derivative(tp.value_of(xi), cdf);
      tp.accumulate(xi, tp.grad_of(oi).cwiseProduct(dydx));
    };
  }
  return t.emplace(std::move(out), needs, std::move(pull), "gelu");
}

Var layer_norm(Var x, Var gain, Var shift) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, shift, "layer_norm");
  const MatrixXd& xv = x.value();
  const Eigen::Index d = xv.rows();
  if (gain.value().rows() != d || gain.value().cols() != 1 ||
      shift.value().rows() != d || shift.value().cols() != 1) {
    throw std::invalid_argument("layer_norm: gain/shift must be " + std::to_string(d) +
                                "x1, got " + shape_of(gain.value()) + " and " +
                                shape_of(shift.value()));
  }
  Tape& t = *x.tape;
  const bool needs =
      t.needs_grad(x.id) || t.needs_grad(gain.id) || t.needs_grad(shift.id);

  MatrixXd out, xhat;
  Eigen::RowVectorXd inv_std;
  elementwise::layer_norm_with_stats(xv, gain.value().col(0), shift.value().col(0),
                                     kLayerNormEps, &out, needs ? &xhat : nullptr,
                                     needs ? &inv_std : nullptr);

  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index xi = x.id, gi = gain.id, si = shift.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [xi, gi, si, oi, xhat = std::move(xhat),
            inv_std = std::move(inv_std)](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      tp.accumulate(si, g.rowwise().sum());
      tp.accumulate(gi, g.cwiseProduct(xhat).rowwise().sum());
      if (!tp.needs_grad(xi)) return;
      tp.accumulate(xi, elementwise::layer_norm_input_grad(
                            g, xhat, inv_std, tp.value_of(gi).col(0)));
    };
  }
  return t.emplace(std::move(out), needs, std::move(pull), "layer_norm");
}

Var embedding_gather(Var table, const std::vector<std::int32_t>& ids) {
  Tape& t = *table.tape;
  const MatrixXd& tv = table.value();
  const Eigen::Index vocab = tv.cols();
  MatrixXd out(tv.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids[i];
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("embedding_gather: id " + std::to_string(id) +
                                  " out of range for vocab " + std::to_string(vocab));
    }
    out.col(static_cast<Eigen::Index>(i)) = tv.col(id);
  }
  const bool needs = t.needs_grad(table.id);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index ti = table.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [ti, oi, ids](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      MatrixXd gt = MatrixXd::Zero(tp.value_of(ti).rows(), tp.value_of(ti).cols());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        gt.col(ids[i]) += g.col(static_cast<Eigen::Index>(i));
      }
      tp.accumulate(ti, gt);
    };
  }
  return t.emplace(std::move(out), needs, std::move(pull), "embedding_gather");
}

Var concat_rows(Var a, Var b) {
  require_same_tape(a, b, "concat_rows");
  const MatrixXd& av = a.value();
  const MatrixXd& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw std::invalid_argument("concat_rows: column mismatch, " + shape_of(av) +
                                " vs " + shape_of(bv));
  }
  Tape& t = *a.tape;
  MatrixXd out(av.rows() + bv.rows(), av.cols());
  out.topRows(av.rows()) = av;
  out.bottomRows(bv.rows()) = bv;
  const bool needs = t.needs_grad(a.id) || t.needs_grad(b.id);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index ai = a.id, bi = b.id;
    const Eigen::Index ar = av.rows(), br = bv.rows();
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [ai, bi, ar, br, oi](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      tp.accumulate(ai, g.topRows(ar));
      tp.accumulate(bi, g.bottomRows(br));
    };
  }
  return t.emplace(std::move(out), needs, std::move(pull), "concat_rows");
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  const MatrixXd& xv = x.value();
  if (start < 0 || count < 0 || start + count > xv.rows()) {
    throw std::invalid_argument("slice_rows: [" + std::to_string(start) + ", " +
                                std::to_string(start + count) + ") out of " +
                                std::to_string(xv.rows()) + " rows");
  }
  Tape& t = *x.tape;
  const bool needs = t.needs_grad(x.id);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index xi = x.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [xi, start, count, oi](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      MatrixXd gx = MatrixXd::Zero(tp.value_of(xi).rows(), tp.value_of(xi).cols());
      gx.middleRows(start, count) = g;
      tp.accumulate(xi, gx);
    };
  }
  return t.emplace(xv.middleRows(start, count), needs, std::move(pull), "slice_rows");
}

Var sum(Var x) {
  Tape& t = *x.tape;
  const bool needs = t.needs_grad(x.id);
  MatrixXd out(1, 1);
  out(0, 0) = x.value().sum();
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index xi = x.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [xi, oi](Tape& tp) {
      const double g = tp.grad_of(oi)(0, 0);
      tp.accumulate(xi, MatrixXd::Constant(tp.value_of(xi).rows(),
                                           tp.value_of(xi).cols(), g));
    };
  }
  return t.emplace(std::move(out), needs, std::move(pull), "sum");
}

Var causal_toeplitz_mix(Var x, Var coeffs, Var bias, Eigen::Index batch,
                        toeplitz::MixPath path) {
  require_same_tape(x, coeffs, "causal_toeplitz_mix");
  if (bias.valid()) require_same_tape(x, bias, "causal_toeplitz_mix");
  const MatrixXd& xv = x.value();
  if (batch < 1 || xv.cols() % batch != 0) {
    throw std::invalid_argument("causal_toeplitz_mix: " + std::to_string(xv.cols()) +
                                " columns do not split into " + std::to_string(batch) +
                                " segments");
  }
  const Eigen::Index n = xv.cols() / batch;
  const MatrixXd& cv = coeffs.value();
  if (cv.cols() != 1 || cv.rows() < n) {
    throw std::invalid_argument("causal_toeplitz_mix: coefficient vector " +
                                shape_of(cv) + " too short for sequence length " +
                                std::to_string(n));
  }
  static const Eigen::VectorXd kNoBias;
  if (bias.valid() && (bias.value().cols() != 1 || bias.value().rows() != cv.rows())) {
    throw std::invalid_argument("causal_toeplitz_mix: bias " + shape_of(bias.value()) +
                                " does not match coefficients " + shape_of(cv));
  }
  Eigen::Ref<const Eigen::VectorXd> bias_vec =
      bias.valid() ? Eigen::Ref<const Eigen::VectorXd>(bias.value().col(0))
                   : Eigen::Ref<const Eigen::VectorXd>(kNoBias);

  Tape& t = *x.tape;
  MatrixXd out(xv.rows(), xv.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    out.middleCols(b * n, n) = toeplitz::mix_forward<double>(
        xv.middleCols(b * n, n), cv.col(0), bias_vec, path);
  }
  const bool needs = t.needs_grad(x.id) || t.needs_grad(coeffs.id) ||
                     (bias.valid() && t.needs_grad(bias.id));
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index xi = x.id, ci = coeffs.id;
    const Eigen::Index bi = bias.valid() ? bias.id : -1;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [xi, ci, bi, batch, n, path, oi](Tape& tp) {
      const MatrixXd& g = tp.grad_of(oi);
      const MatrixXd& xv2 = tp.value_of(xi);
      const Eigen::VectorXd cvec = tp.value_of(ci).col(0);
      Eigen::VectorXd bvec;
      if (bi >= 0) bvec = tp.value_of(bi).col(0);
      MatrixXd gx(xv2.rows(), xv2.cols());
      Eigen::VectorXd gc = Eigen::VectorXd::Zero(cvec.size());
      Eigen::VectorXd gb = Eigen::VectorXd::Zero(bvec.size());
      for (Eigen::Index b = 0; b < batch; ++b) {
        auto seg = toeplitz::mix_backward<double>(xv2.middleCols(b * n, n), cvec, bvec,
                                                  g.middleCols(b * n, n), path);
        gx.middleCols(b * n, n) = seg.x;
        gc += seg.coeffs;
        if (bi >= 0) gb += seg.bias;
      }
      tp.accumulate(xi, gx);
      tp.accumulate(ci, gc);
      if (bi >= 0) tp.accumulate(bi, gb);
    };
  }
  return t.emplace(std::move(out), needs, std::move(pull), "causal_toeplitz_mix");
}

Var cross_entropy(Var logits, const std::vector<std::int32_t>& targets,
                  const std::vector<double>& mask) {
  Tape& t = *logits.tape;
  const MatrixXd& z = logits.value();
  const Eigen::Index cols = z.cols();
  const Eigen::Index vocab = z.rows();
  if (static_cast<Eigen::Index>(targets.size()) != cols ||
      static_cast<Eigen::Index>(mask.size()) != cols) {
    throw std::invalid_argument("cross_entropy: targets/mask length must equal " +
                                std::to_string(cols) + " columns");
  }
  double wsum = 0.0;
  for (double w : mask) wsum += w;
  if (wsum <= 0.0) throw std::invalid_argument("cross_entropy: mask is all zero");

  MatrixXd probs(vocab, cols);
  double loss = 0.0;
  for (Eigen::Index c = 0; c < cols; ++c) {
    const std::int32_t y = targets[static_cast<std::size_t>(c)];
    if (y < 0 || y >= vocab) {
      throw std::invalid_argument("cross_entropy: target id " + std::to_string(y) +
                                  " out of range for vocab " + std::to_string(vocab));
    }
    const double zmax = z.col(c).maxCoeff();
    const Eigen::ArrayXd shifted = z.col(c).array() - zmax;
    const Eigen::ArrayXd ez = shifted.exp();
    const double denom = ez.sum();
    probs.col(c) = (ez / denom).matrix();
    const double logp = shifted(y) - std::log(denom);
    loss -= mask[static_cast<std::size_t>(c)] * logp;
  }
  loss /= wsum;

  const bool needs = t.needs_grad(logits.id);
  std::function<void(Tape&)> pull;
  if (needs) {
    const Eigen::Index li = logits.id;
    const Eigen::Index oi = static_cast<Eigen::Index>(t.size());
    pull = [li, oi, probs = std::move(probs), targets, mask, wsum](Tape& tp) {
      const double g = tp.grad_of(oi)(0, 0);
      MatrixXd gz = probs;
      for (Eigen::Index c = 0; c < gz.cols(); ++c) {
        gz(targets[static_cast<std::size_t>(c)], c) -= 1.0;
        gz.col(c) *= g * mask[static_cast<std::size_t>(c)] / wsum;
      }
      tp.accumulate(li, gz);
    };
  }
  MatrixXd out(1, 1);
  out(0, 0) = loss;
  return t.emplace(std::move(out), needs, std::move(pull), "cross_entropy");
}

}  // namespace tmix::autodiff
