#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "unlearn/dataset.hpp"
#include "unlearn/mask.hpp"

namespace unlearn {

/// Linear-regression instance: rows of X are samples. Forget rows are named
/// by ForgetSpec::by_ids with ids equal to row positions.
struct BoundInstance {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  ForgetSpec forget = ForgetSpec::by_ids({});
};

/// Both sides of the masking KL bound for one instance, in the diagonal
/// Fisher model w_j = b_j / F_jj. Every link of the chain
///   lhs <= lambda/(2|D|) * sum_sq_delta <= rhs
/// is stored so it can be checked separately.
struct BoundCertificate {
  double lhs = 0.0;            // 0.5 * sum_j (F_jj/|D|) dw_j^2
  double rhs = 0.0;            // lambda/(2|D|) * (c + 2 c1 per_term)
  double lambda = 0.0;         // largest eigenvalue of the d x d Gram matrix
  std::size_t lambda_iterations = 0;
  double c = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double per_term = 0.0;       // sum_{j not in M} (1/F_jj^2) (F_f,jj / F_r,jj)^2
  double sum_sq_delta = 0.0;   // sum_j dw_j^2
  double full_quadratic = 0.0; // 0.5 * dw^T (X^T X / |D|) dw
  double exact_gaussian_kl = 0.0;
  std::optional<double> full_solution_gap;  // |w_r(least squares) - w_r(diagonal)|_inf
  std::size_t dims = 0;
  std::size_t samples = 0;
  std::size_t forget_count = 0;
  std::size_t mask_size = 0;
  bool holds = false;

  nlohmann::json to_json() const;
};

/// Fisher diagonals and linear-term vectors of an instance.
struct DiagonalModel {
  Eigen::VectorXd f, f_forget, f_remain;
  Eigen::VectorXd b, b_forget, b_remain;
};
DiagonalModel diagonal_model(const BoundInstance& instance);

/// Rejects instances whose remain-set Fisher diagonal has a non-positive entry.
BoundCertificate verify_bound(const BoundInstance& instance, const ParameterMask& mask);

/// Masks the round(R d) parameters with the largest per-term contribution
/// (1/F_jj^2)(F_f,jj / F_r,jj)^2.
ParameterMask bound_guided_mask_ranking(const BoundInstance& instance, double ratio);

/// Random instance with 1 <= d <= max_dim, 2 <= |D| <= max_samples and a
/// forget fraction up to max_forget_fraction.
BoundInstance random_bound_instance(std::uint64_t seed, std::size_t max_dim = 20, std::size_t max_samples = 200,
                                    double max_forget_fraction = 0.3);
/// Uniformly sized random mask over d parameters (possibly empty).
ParameterMask random_parameter_mask(std::size_t dims, std::uint64_t seed);

struct BoundSweep {
  std::size_t trials = 0;
  std::size_t held = 0;
  double max_ratio = 0.0;  // max lhs / rhs
  std::uint64_t tightest_seed = 0;
  BoundCertificate tightest;
};

/// Certifies `trials` random instances derived from `seed`.
BoundSweep verify_bound_sweep(std::size_t trials, std::size_t max_dim, std::uint64_t seed);

}  // namespace unlearn
