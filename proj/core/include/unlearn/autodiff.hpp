#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// it came from is alive and not cleared.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Running statistics of one BatchNorm layer, one entry per channel.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  static BatchNormStats fresh(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Reverse-mode computation tape. Nodes are appended in evaluation order, so
/// every node's inputs precede it and a single reverse sweep is a valid
/// topological traversal.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is kept on the tape (see grad()).
  Var variable(Tensor value);
  /// Leaf bound to an external tensor. When `external.requires_grad()` is set,
  /// backward() adds dLoss/dExternal into `external.mutable_grad()`.
  Var leaf(Tensor& external);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  /// Gradient accumulated by the last backward(); zeros when none reached v.
  std::vector<double> grad(Var v) const;

  /// Reverse sweep from a scalar loss. Throws std::invalid_argument for a
  /// non-scalar loss or an empty tape.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Used by op implementations.
  Var record(Tensor value, std::vector<std::size_t> inputs, Backward backward);
  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  bool node_requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::span<const double> node_grad(std::size_t id) const { return nodes_[id].grad; }
  std::span<double> grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
    std::vector<double> grad;
    bool requires_grad = false;
    Tensor* bound = nullptr;
  };

  Var push(Node node);

  // deque keeps element references stable while ops append nodes.
  std::deque<Node> nodes_;
};

namespace ops {

/// [n,k] x [k,m] -> [n,m]
Var matmul(Var a, Var b);
/// x [n,k], weight [m,k], bias [m] -> x * weight^T + bias, shape [n,m]
Var linear(Var x, Var weight, std::optional<Var> bias);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var sum(Var a);
Var relu(Var a);
/// x [N,C,H,W], weight [O,C,KH,KW], bias [O] -> [N,O,OH,OW]
Var conv2d(Var x, Var weight, std::optional<Var> bias, Conv2dOptions options = {});
/// Per-channel normalization of x [N,C,H,W]. Training mode normalizes with
/// batch statistics, updates `stats` with momentum and needs N >= 2; eval mode
/// uses the running statistics and is an affine map of x.
Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training,
                BatchNormOptions options = {});
/// Non-overlapping k x k windows (stride k); trailing rows/columns that do not
/// fill a window are dropped.
Var maxpool2d(Var x, std::size_t k);
Var avgpool2d(Var x, std::size_t k);
/// [N, ...] -> [N, prod(...)]
Var flatten(Var x);
/// Mean over the batch of -log softmax(logits)[label]. Accepts rank-1 logits
/// with one label or rank-2 [N,K] logits with N labels.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
/// Mean over the batch of 0.5 * (prediction - target)^2; predictions [N] or [N,1].
Var half_squared_error(Var predictions, std::span<const double> targets);

}  // namespace ops

/// Negative log-likelihood of a categorical prediction.
inline Var log_loss(Var logits, std::span<const int> labels) {
  return ops::softmax_cross_entropy(logits, labels);
}

/// -log softmax(logits)[label] evaluated with log-sum-exp stabilization.
double log_loss_value(std::span<const double> logits, int label);

}  // namespace unlearn
