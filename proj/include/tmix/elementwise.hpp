#pragma once

#include <Eigen/Core>

namespace tmix::elementwise {

// Exact-erf GELU pieces shared by the tape and the no-tape forward paths.
// gelu(x) = x * cdf(x) with cdf the standard normal CDF; the derivative is
// cdf(x) + x * pdf(x). Loops are threaded: erf/exp dominate large blocks.
Eigen::MatrixXd gelu_cdf(const Eigen::MatrixXd& x);
Eigen::MatrixXd gelu(const Eigen::MatrixXd& x);
Eigen::MatrixXd gelu_derivative(const Eigen::MatrixXd& x, const Eigen::MatrixXd& cdf);

// Per-column layer norm over the rows (one token per contiguous column).
Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& shift, double eps);
// Variant that keeps the normalized values and scales for the backward pass.
void layer_norm_with_stats(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& shift, double eps,
                           Eigen::MatrixXd* y, Eigen::MatrixXd* xhat,
                           Eigen::RowVectorXd* inv_std);
Eigen::MatrixXd layer_norm_input_grad(const Eigen::MatrixXd& gy,
                                      const Eigen::MatrixXd& xhat,
                                      const Eigen::RowVectorXd& inv_std,
                                      const Eigen::VectorXd& gain);

}  // namespace tmix::elementwise
