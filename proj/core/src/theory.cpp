#include "unlearn/theory.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "unlearn/linalg.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

std::vector<bool> forget_flags(const BoundInstance& instance) {
  if (instance.forget.is_whole_class()) throw std::invalid_argument("bound instances name forget rows by id");
  const auto n = static_cast<std::size_t>(instance.x.rows());
  std::vector<bool> flags(n, false);
  for (auto id : instance.forget.ids) {
    if (id >= n) throw std::out_of_range("forget row " + std::to_string(id) + " outside " + std::to_string(n) + " samples");
    flags[id] = true;
  }
  return flags;
}

Eigen::VectorXd contributions(const DiagonalModel& m) {
  const Eigen::ArrayXd ratio = m.f_forget.array() / m.f_remain.array();
  return (ratio.square() / m.f.array().square()).matrix();
}

void check_remain_positive(const DiagonalModel& m) {
  for (Eigen::Index j = 0; j < m.f_remain.size(); ++j) {
    if (!(m.f_remain(j) > 0.0)) {
      throw std::invalid_argument("remain-set Fisher diagonal entry " + std::to_string(j) + " is not strictly positive");
    }
  }
}

}  // namespace

DiagonalModel diagonal_model(const BoundInstance& instance) {
  if (instance.x.rows() != instance.y.size()) throw std::invalid_argument("bound instance: X rows and y length differ");
  if (instance.x.rows() == 0 || instance.x.cols() == 0) throw std::invalid_argument("bound instance: empty design");
  const auto flags = forget_flags(instance);
  const auto d = instance.x.cols();
  DiagonalModel m;
  m.f_forget = m.f_remain = m.b_forget = m.b_remain = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < instance.x.rows(); ++i) {
    const auto row = instance.x.row(i).transpose();
    auto& f = flags[static_cast<std::size_t>(i)] ? m.f_forget : m.f_remain;
    auto& b = flags[static_cast<std::size_t>(i)] ? m.b_forget : m.b_remain;
    f += row.cwiseAbs2();
    b += instance.y(i) * row;
  }
  m.f = m.f_forget + m.f_remain;
  m.b = m.b_forget + m.b_remain;
  return m;
}

BoundCertificate verify_bound(const BoundInstance& instance, const ParameterMask& mask) {
  const auto m = diagonal_model(instance);
  check_remain_positive(m);
  const auto d = m.f.size();
  const double n = static_cast<double>(instance.x.rows());
  for (auto j : mask.indices) {
    if (j >= static_cast<std::size_t>(d)) throw std::out_of_range("mask index " + std::to_string(j) + " outside " + std::to_string(d) + " parameters");
  }

  const Eigen::VectorXd w_star = (m.b.array() / m.f.array()).matrix();
  const Eigen::VectorXd w_remain = (m.b_remain.array() / m.f_remain.array()).matrix();
  Eigen::VectorXd w_hat = w_star;
  for (auto j : mask.indices) w_hat(static_cast<Eigen::Index>(j)) = 0.0;
  const Eigen::VectorXd delta = w_remain - w_hat;

  BoundCertificate cert;
  cert.dims = static_cast<std::size_t>(d);
  cert.samples = static_cast<std::size_t>(instance.x.rows());
  cert.forget_count = instance.forget.ids.size();
  cert.mask_size = mask.indices.size();

  const Eigen::MatrixXd gram = instance.x.transpose() * instance.x;
  const auto power = largest_eigenvalue(gram);
  cert.lambda = power.eigenvalue;
  cert.lambda_iterations = power.iterations;

  cert.c1 = m.b_remain.cwiseAbs2().maxCoeff();
  cert.c2 = m.b_forget.cwiseAbs2().maxCoeff();
  cert.c = std::max(cert.c1, 2.0 * cert.c2) * m.f_remain.cwiseAbs2().cwiseInverse().sum();
  const auto contrib = contributions(m);
  for (Eigen::Index j = 0; j < d; ++j) {
    if (!mask.contains(static_cast<std::size_t>(j))) cert.per_term += contrib(j);
  }
  cert.sum_sq_delta = delta.squaredNorm();
  cert.lhs = 0.5 * (m.f.array() / n * delta.array().square()).sum();
  cert.full_quadratic = 0.5 * delta.dot(gram * delta) / n;
  // Unit-variance Gaussian likelihoods: KL averaged over inputs is exactly
  // the Gram quadratic form.
  cert.exact_gaussian_kl = 0.5 * (instance.x * delta).squaredNorm() / n;
  cert.rhs = cert.lambda / (2.0 * n) * (cert.c + 2.0 * cert.c1 * cert.per_term);
  cert.holds = cert.lhs <= cert.rhs + 1e-12;

  // Informational: distance to the true least-squares remain solution.
  const auto flags = forget_flags(instance);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < instance.x.rows(); ++i) {
    if (!flags[static_cast<std::size_t>(i)]) keep.push_back(i);
  }
  const Eigen::MatrixXd xr = instance.x(keep, Eigen::all);
  const Eigen::VectorXd yr = instance.y(keep);
  try {
    const Eigen::VectorXd ls = solve_symmetric(xr.transpose() * xr, xr.transpose() * yr, "remain least squares");
    cert.full_solution_gap = (ls - w_remain).cwiseAbs().maxCoeff();
  } catch (const SingularSystemError&) {
  }
  return cert;
}

nlohmann::json BoundCertificate::to_json() const {
  nlohmann::ordered_json j;
  j["holds"] = holds;
  j["lhs"] = lhs;
  j["rhs"] = rhs;
  j["lambda"] = lambda;
  j["lambda_iterations"] = lambda_iterations;
  j["c"] = c;
  j["c1"] = c1;
  j["c2"] = c2;
  j["per_term"] = per_term;
  j["sum_sq_delta"] = sum_sq_delta;
  j["full_quadratic"] = full_quadratic;
  j["exact_gaussian_kl"] = exact_gaussian_kl;
  j["full_solution_gap"] = full_solution_gap ? nlohmann::json(*full_solution_gap) : nlohmann::json();
  j["dims"] = dims;
  j["samples"] = samples;
  j["forget_count"] = forget_count;
  j["mask_size"] = mask_size;
  return nlohmann::json(j);
}

ParameterMask bound_guided_mask_ranking(const BoundInstance& instance, double ratio) {
  check_ratio(ratio);
  const auto m = diagonal_model(instance);
  check_remain_positive(m);
  const auto contrib = contributions(m);
  std::vector<double> score(contrib.data(), contrib.data() + contrib.size());
  ParameterMask mask;
  mask.strategy = MaskStrategy::BoundGuided;
  mask.ratio = ratio;
  mask.indices = top_k(score, ratio_count(score.size(), ratio));
  std::sort(mask.indices.begin(), mask.indices.end());
  if (mask.indices.empty()) mask.warning = "ratio selects zero elements; mask is empty";
  mask.scores = std::move(score);
  return mask;
}

BoundInstance random_bound_instance(std::uint64_t seed, std::size_t max_dim, std::size_t max_samples,
                                    double max_forget_fraction) {
  if (max_dim == 0 || max_samples < 2) throw std::invalid_argument("random_bound_instance: need max_dim >= 1 and max_samples >= 2");
  auto rng = make_rng(seed, {0x626f756eull});
  const auto d = std::uniform_int_distribution<std::size_t>(1, max_dim)(rng);
  const auto n = std::uniform_int_distribution<std::size_t>(2, max_samples)(rng);
  const double fraction = std::uniform_real_distribution<double>(0.0, max_forget_fraction)(rng);
  const auto forget_count = std::min(n - 1, static_cast<std::size_t>(fraction * static_cast<double>(n)));
  std::normal_distribution<double> normal(0.0, 1.0);
  BoundInstance inst;
  inst.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < inst.x.rows(); ++i) {
    for (Eigen::Index j = 0; j < inst.x.cols(); ++j) inst.x(i, j) = normal(rng);
  }
  Eigen::VectorXd w(static_cast<Eigen::Index>(d));
  for (Eigen::Index j = 0; j < w.size(); ++j) w(j) = normal(rng);
  inst.y = inst.x * w;
  for (Eigen::Index i = 0; i < inst.y.size(); ++i) inst.y(i) += 0.1 * normal(rng);
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  std::set<SampleId> ids(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(forget_count));
  inst.forget = ForgetSpec::by_ids(std::move(ids));
  return inst;
}

ParameterMask random_parameter_mask(std::size_t dims, std::uint64_t seed) {
  auto rng = make_rng(seed, {0x6d61736bull});
  const auto size = std::uniform_int_distribution<std::size_t>(0, dims)(rng);
  std::vector<std::size_t> all(dims);
  std::iota(all.begin(), all.end(), 0);
  ParameterMask mask;
  mask.strategy = MaskStrategy::Random;
  mask.ratio = dims ? static_cast<double>(size) / static_cast<double>(dims) : 0.0;
  std::sample(all.begin(), all.end(), std::back_inserter(mask.indices), size, rng);
  return mask;
}

BoundSweep verify_bound_sweep(std::size_t trials, std::size_t max_dim, std::uint64_t seed) {
  if (trials == 0) throw std::invalid_argument("verify_bound_sweep: trials must be at least 1");
  BoundSweep sweep;
  sweep.trials = trials;
  sweep.max_ratio = -1.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::uint64_t trial_seed = seed * 1000003ull + t;
    auto instance = random_bound_instance(trial_seed, max_dim);
    const auto mask = random_parameter_mask(static_cast<std::size_t>(instance.x.cols()), trial_seed);
    const auto cert = verify_bound(instance, mask);
    sweep.held += cert.holds;
    const double ratio = cert.rhs > 0.0 ? cert.lhs / cert.rhs : 0.0;
    if (ratio > sweep.max_ratio) {
      sweep.max_ratio = ratio;
      sweep.tightest_seed = trial_seed;
      sweep.tightest = cert;
    }
  }
  return sweep;
}

}  // namespace unlearn
