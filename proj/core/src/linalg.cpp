#include "unlearn/linalg.hpp"

#include <cmath>
#include <limits>

namespace unlearn {

Eigen::VectorXd solve_symmetric(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const std::string& context) {
  if (a.rows() != a.cols() || a.rows() != b.size()) {
    throw std::invalid_argument(context + ": system of size " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " with rhs of length " + std::to_string(b.size()));
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  const auto rank = qr.rank();
  if (rank < a.rows()) {
    throw SingularSystemError(context + ": singular system, numerical rank " + std::to_string(rank) + " of " +
                                  std::to_string(a.rows()),
                              rank, a.rows(), std::numeric_limits<double>::infinity());
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (ldlt.info() != Eigen::Success) {
    throw SingularSystemError(context + ": factorization failed", rank, a.rows(), std::numeric_limits<double>::infinity());
  }
  return ldlt.solve(b);
}

PowerIteration largest_eigenvalue(const Eigen::MatrixXd& a, double tolerance, std::size_t max_iterations) {
  if (a.rows() != a.cols() || a.rows() == 0) throw std::invalid_argument("largest_eigenvalue: need a non-empty square matrix");
  PowerIteration result;
  if (a.rows() == 1) {
    result.eigenvalue = a(0, 0);
    result.converged = true;
    return result;
  }
  // Deterministic start with components in every direction.
  Eigen::VectorXd v(a.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = 1.0 + 0.1 * static_cast<double>(i % 7);
  v.normalize();
  double previous = v.dot(a * v);
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    Eigen::VectorXd w = a * v;
    const double norm = w.norm();
    if (norm == 0.0) {
      result.eigenvalue = 0.0;
      result.iterations = it;
      result.converged = true;
      return result;
    }
    v = w / norm;
    const Eigen::VectorXd av = a * v;
    const double rq = v.dot(av);
    result.iterations = it;
    // Quotient deltas stall when the eigengap is small; the residual does not.
    if ((av - rq * v).norm() <= tolerance * std::max(1.0, std::abs(rq))) {
      result.eigenvalue = rq;
      result.converged = true;
      return result;
    }
    previous = rq;
  }
  result.eigenvalue = previous;
  return result;
}

}  // namespace unlearn
