#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace unlearn {

/// Raised when a linear system has no unique solution. The message carries
/// the numerical rank (and condition estimate when available).
class SingularSystemError : public std::runtime_error {
 public:
  SingularSystemError(const std::string& what, Eigen::Index rank, Eigen::Index dim, double condition)
      : std::runtime_error(what), rank_(rank), dim_(dim), condition_(condition) {}
  Eigen::Index rank() const noexcept { return rank_; }
  Eigen::Index dim() const noexcept { return dim_; }
  double condition() const noexcept { return condition_; }

 private:
  Eigen::Index rank_;
  Eigen::Index dim_;
  double condition_;
};

/// Solves A x = b for symmetric positive (semi)definite A, rejecting
/// numerically rank-deficient systems.
Eigen::VectorXd solve_symmetric(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const std::string& context);

struct PowerIteration {
  double eigenvalue = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration; stops when the residual |A v - rq v| drops below `tolerance`
/// (relative to rq).
PowerIteration largest_eigenvalue(const Eigen::MatrixXd& a, double tolerance = 1e-10, std::size_t max_iterations = 10000);

}  // namespace unlearn
