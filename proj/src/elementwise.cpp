#include "tmix/elementwise.hpp"

#include <cmath>
#include <numbers>

namespace tmix::elementwise {

namespace {
constexpr double kInvSqrt2Pi = 0.3989422804014327;
}

Eigen::MatrixXd gelu_cdf(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd cdf(x.rows(), x.cols());
  const double* src = x.data();
  double* dst = cdf.data();
  const Eigen::Index size = x.size();
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < size; ++i) {
    dst[i] = 0.5 * (1.0 + std::erf(src[i] / std::numbers::sqrt2));
  }
  return cdf;
}

Eigen::MatrixXd gelu(const Eigen::MatrixXd& x) {
  return x.cwiseProduct(gelu_cdf(x));
}

Eigen::MatrixXd gelu_derivative(const Eigen::MatrixXd& x, const Eigen::MatrixXd& cdf) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  const double* xs = x.data();
  const double* cs = cdf.data();
  double* dst = out.data();
  const Eigen::Index size = x.size();
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < size; ++i) {
    dst[i] = cs[i] + xs[i] * kInvSqrt2Pi * std::exp(-0.5 * xs[i] * xs[i]);
  }
  return out;
}

void layer_norm_with_stats(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& shift, double eps,
                           Eigen::MatrixXd* y, Eigen::MatrixXd* xhat,
                           Eigen::RowVectorXd* inv_std) {
  const Eigen::Index d = x.rows();
  const Eigen::Index cols = x.cols();
  y->resize(d, cols);
  if (xhat) xhat->resize(d, cols);
  if (inv_std) inv_std->resize(cols);
  const double* g = gain.data();
  const double* s = shift.data();
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double* col = x.data() + c * d;
    double mean = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) mean += col[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      const double t = col[i] - mean;
      var += t * t;
    }
    const double scale = 1.0 / std::sqrt(var / static_cast<double>(d) + eps);
    if (inv_std) (*inv_std)[c] = scale;
    double* out = y->data() + c * d;
    double* hat = xhat ? xhat->data() + c * d : nullptr;
    for (Eigen::Index i = 0; i < d; ++i) {
      const double h = (col[i] - mean) * scale;
      if (hat) hat[i] = h;
      out[i] = g[i] * h + s[i];
    }
  }
}

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& shift, double eps) {
  Eigen::MatrixXd y;
  layer_norm_with_stats(x, gain, shift, eps, &y, nullptr, nullptr);
  return y;
}

Eigen::MatrixXd layer_norm_input_grad(const Eigen::MatrixXd& gy,
                                      const Eigen::MatrixXd& xhat,
                                      const Eigen::RowVectorXd& inv_std,
                                      const Eigen::VectorXd& gain) {
  const Eigen::Index d = gy.rows();
  const Eigen::Index cols = gy.cols();
  Eigen::MatrixXd gx(d, cols);
  const double* g = gain.data();
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double* gyc = gy.data() + c * d;
    const double* hc = xhat.data() + c * d;
    double* out = gx.data() + c * d;
    double mean_u = 0.0, mean_uh = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      const double u = gyc[i] * g[i];
      mean_u += u;
      mean_uh += u * hc[i];
    }
    mean_u /= static_cast<double>(d);
    mean_uh /= static_cast<double>(d);
    const double scale = inv_std[c];
    for (Eigen::Index i = 0; i < d; ++i) {
      const double u = gyc[i] * g[i];
      out[i] = (u - mean_u - hc[i] * mean_uh) * scale;
    }
  }
  return gx;
}

}  // namespace tmix::elementwise
