#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "unlearn/autodiff.hpp"
#include "unlearn/rng.hpp"

namespace unlearn::test_support {

// One differentiable function of several input tensors. `build` must return
// a scalar and must be repeatable (no hidden state carried between calls).
struct GradCase {
  std::string label;
  std::vector<Tensor> inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

inline double evaluate_case(const GradCase& c, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return c.build(tape, vars).value().item();
}

// Worst norm-wise relative error |g - g_fd| / max(|g|, |g_fd|, 1e-8) over the
// inputs, with g_fd from central differences.
inline double gradient_error(const GradCase& c, double step = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : c.inputs) vars.push_back(tape.variable(t));
  tape.backward(c.build(tape, vars));
  double worst = 0.0;
  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    const auto analytic = tape.grad(vars[k]);
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    auto probe = c.inputs;
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double x = c.inputs[k][i];
      probe[k][i] = x + step;
      const double up = evaluate_case(c, probe);
      probe[k][i] = x - step;
      const double down = evaluate_case(c, probe);
      probe[k][i] = x;
      const double numeric = (up - down) / (2.0 * step);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      norm_a += analytic[i] * analytic[i];
      norm_n += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(norm_a), std::sqrt(norm_n), 1e-8}));
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, double keep_away = 0.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    do {
      v = u(rng);
    } while (std::abs(v) < keep_away);
  }
  return t;
}

// Scalar probe of a tensor output: sum(out * r) with a fixed random r.
inline Var weighted_sum(Tape& tape, Var out, const Tensor& r) { return ops::sum(ops::mul(out, tape.constant(r))); }

inline const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> names{"matmul", "linear", "add", "mul", "sum", "relu", "conv2d",
                                              "batchnorm2d_train", "batchnorm2d_eval", "maxpool2d", "avgpool2d",
                                              "flatten", "softmax_cross_entropy", "half_squared_error"};
  return names;
}

// Random instance `index` of operation `op`.
inline GradCase make_grad_case(const std::string& op, std::uint64_t seed, std::size_t index) {
  const auto& names = gradcheck_ops();
  const auto op_index = static_cast<std::uint64_t>(std::find(names.begin(), names.end(), op) - names.begin());
  auto rng = make_rng(seed, {op_index, index});
  auto dim = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  GradCase c;
  c.label = op + "#" + std::to_string(index);

  if (op == "matmul") {
    const auto n = dim(1, 5), k = dim(1, 5), m = dim(1, 5);
    c.inputs = {random_tensor({n, k}, rng), random_tensor({k, m}, rng)};
    const auto r = random_tensor({n, m}, rng);
    c.build = [r](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::matmul(v[0], v[1]), r); };
  } else if (op == "linear") {
    const auto n = dim(1, 5), k = dim(1, 6), m = dim(1, 4);
    c.inputs = {random_tensor({n, k}, rng), random_tensor({m, k}, rng), random_tensor({m}, rng)};
    const auto r = random_tensor({n, m}, rng);
    c.build = [r](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::linear(v[0], v[1], v[2]), r); };
  } else if (op == "add" || op == "mul") {
    const Shape s{dim(1, 4), dim(1, 4), dim(1, 3)};
    c.inputs = {random_tensor(s, rng), random_tensor(s, rng)};
    const auto r = random_tensor(s, rng);
    const bool is_add = op == "add";
    c.build = [r, is_add](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, is_add ? ops::add(v[0], v[1]) : ops::mul(v[0], v[1]), r);
    };
  } else if (op == "sum") {
    c.inputs = {random_tensor({dim(1, 6), dim(1, 6)}, rng)};
    // squared first so the gradient depends on the input
    c.build = [](Tape&, const std::vector<Var>& v) { return ops::sum(ops::mul(v[0], v[0])); };
  } else if (op == "relu") {
    const Shape s{dim(1, 5), dim(1, 7)};
    c.inputs = {random_tensor(s, rng, -1.0, 1.0, 1e-3)};
    const auto r = random_tensor(s, rng);
    c.build = [r](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::relu(v[0]), r); };
  } else if (op == "conv2d") {
    const auto n = dim(1, 2), ch = dim(1, 3), o = dim(1, 3), kh = dim(1, 3);
    Conv2dOptions opt;
    opt.stride = dim(1, 2);
    opt.padding = dim(0, 1);
    const auto h = dim(kh, 6), w = dim(kh, 6);
    c.inputs = {random_tensor({n, ch, h, w}, rng), random_tensor({o, ch, kh, kh}, rng), random_tensor({o}, rng)};
    const std::size_t oh = (h + 2 * opt.padding - kh) / opt.stride + 1;
    const std::size_t ow = (w + 2 * opt.padding - kh) / opt.stride + 1;
    const auto r = random_tensor({n, o, oh, ow}, rng);
    c.build = [r, opt](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, ops::conv2d(v[0], v[1], v[2], opt), r);
    };
  } else if (op == "batchnorm2d_train" || op == "batchnorm2d_eval") {
    const auto n = dim(2, 4), ch = dim(1, 3), h = dim(1, 4), w = dim(1, 4);
    c.inputs = {random_tensor({n, ch, h, w}, rng), random_tensor({ch}, rng, 0.5, 1.5), random_tensor({ch}, rng)};
    const auto r = random_tensor({n, ch, h, w}, rng);
    BatchNormStats stats = BatchNormStats::fresh(ch);
    std::uniform_real_distribution<double> u(0.5, 2.0);
    for (auto& v : stats.running_var) v = u(rng);
    for (auto& m : stats.running_mean) m = u(rng) - 1.0;
    const bool training = op == "batchnorm2d_train";
    c.build = [r, stats, training](Tape& t, const std::vector<Var>& v) {
      auto local = stats;
      return weighted_sum(t, ops::batchnorm2d(v[0], v[1], v[2], local, training), r);
    };
  } else if (op == "maxpool2d" || op == "avgpool2d") {
    const auto k = dim(1, 3);
    const auto n = dim(1, 2), ch = dim(1, 3), h = dim(k, 7), w = dim(k, 7);
    c.inputs = {random_tensor({n, ch, h, w}, rng)};
    const auto r = random_tensor({n, ch, h / k, w / k}, rng);
    const bool take_max = op == "maxpool2d";
    c.build = [r, k, take_max](Tape& t, const std::vector<Var>& v) {
      return weighted_sum(t, take_max ? ops::maxpool2d(v[0], k) : ops::avgpool2d(v[0], k), r);
    };
  } else if (op == "flatten") {
    const auto n = dim(1, 3), ch = dim(1, 3), h = dim(1, 3);
    c.inputs = {random_tensor({n, ch, h, h}, rng)};
    const auto r = random_tensor({n, ch * h * h}, rng);
    c.build = [r](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::flatten(v[0]), r); };
  } else if (op == "softmax_cross_entropy") {
    const auto n = dim(1, 6), k = dim(2, 6);
    c.inputs = {random_tensor({n, k}, rng, -3.0, 3.0)};
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(dim(0, k - 1));
    c.build = [labels](Tape&, const std::vector<Var>& v) { return ops::softmax_cross_entropy(v[0], labels); };
  } else if (op == "half_squared_error") {
    const auto n = dim(1, 8);
    c.inputs = {random_tensor({n}, rng)};
    const auto y = random_tensor({n}, rng);
    c.build = [y](Tape&, const std::vector<Var>& v) { return ops::half_squared_error(v[0], y.values()); };
  } else {
    throw std::invalid_argument("no gradient check for op " + op);
  }
  return c;
}

}  // namespace unlearn::test_support
