#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unlearn/autodiff.hpp"
#include "unlearn/dataset.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

enum class ModelKind { LinearRegression, SoftmaxRegression, MLP, SmallCNN };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

/// Architecture description. input_shape is per sample: {d} for vector
/// models, {C,H,W} for SmallCNN (vector models flatten image inputs).
struct ModelSpec {
  ModelKind kind = ModelKind::SmallCNN;
  Shape input_shape;
  int classes = 10;
  std::vector<std::size_t> hidden{128, 64};  // MLP widths
  std::vector<std::size_t> channels{8, 16};  // SmallCNN conv widths
  std::size_t conv_padding = 1;

  bool operator==(const ModelSpec&) const = default;
};

/// One named parameter tensor inside the flat parameter vector.
struct LayoutEntry {
  std::string name;
  std::size_t offset = 0;
  Shape shape;
  bool classifier = false;

  std::size_t size() const { return numel(shape); }
  std::size_t end() const { return offset + size(); }
  bool operator==(const LayoutEntry&) const = default;
};

std::vector<LayoutEntry> make_layout(const ModelSpec& spec);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epochs_trained = 0;
  std::string dataset_id;
  bool operator==(const CheckpointMeta&) const = default;
};

/// Flat view of every model parameter plus BatchNorm running statistics.
/// The layout ranges partition [0, parameters.size()).
struct Checkpoint {
  ModelSpec spec;
  std::vector<double> parameters;
  std::vector<LayoutEntry> layout;
  std::vector<BatchNormStats> batchnorm;
  CheckpointMeta meta;

  const LayoutEntry& entry(std::string_view name) const;
  std::span<double> slice(std::string_view name);
  std::span<const double> slice(std::string_view name) const;

  /// Indices belonging to the final classifier layer.
  std::vector<std::size_t> classifier_indices() const;
  /// Every index outside the final classifier.
  std::vector<std::size_t> maskable_indices() const;

  /// Throws std::invalid_argument if the layout does not partition the
  /// parameter vector or the BatchNorm state does not match its ModelSpec.
  void validate() const;
};

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b);

/// Freshly initialized parameters (He-normal hidden layers, zero biases,
/// unit BatchNorm scale), deterministic per seed.
Checkpoint initialize(const ModelSpec& spec, std::uint64_t seed);

enum class Mode { Train, Eval };

enum class ActivationSite {
  PostBatchNormRelu,  // output of Conv-BN-ReLU, before pooling
  PreBatchNorm,       // raw convolution output
};

/// Copies of intermediate SmallCNN activations, one tensor per conv block.
struct ActivationTrace {
  std::vector<Tensor> pre_bn;
  std::vector<Tensor> post_relu;
};

/// Records the forward graph of a checkpoint on a tape. Each layout entry
/// becomes one tape leaf; flat_gradient() gathers their gradients back into
/// the flat layout after Tape::backward.
class BoundModel {
 public:
  BoundModel(Tape& tape, const Checkpoint& checkpoint, bool requires_grad);

  /// Logits [N, classes], or predictions [N] for linear regression. Train
  /// mode updates the running statistics held by this object.
  Var forward(const Tensor& inputs, Mode mode, ActivationTrace* trace = nullptr);
  Var loss(Var output, const DatasetSplit& data, std::span<const std::size_t> rows) const;

  std::vector<double> flat_gradient() const;
  const std::vector<BatchNormStats>& batchnorm() const noexcept { return batchnorm_; }

 private:
  Var param(std::size_t index) const { return params_[index]; }

  Tape& tape_;
  const Checkpoint& checkpoint_;
  std::vector<Var> params_;
  std::vector<BatchNormStats> batchnorm_;
};

/// Training log line for one epoch.
struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> test_accuracy;
};

enum class Optimizer { SgdMomentum };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double initial_lr = 0.01;
  std::vector<std::size_t> decay_epochs;
  double decay_factor = 10.0;
  double momentum = 0.9;
  Optimizer optimizer = Optimizer::SgdMomentum;
  std::uint64_t seed = 0;

  /// decay_epochs strictly increasing and < epochs; positive sizes and rates.
  void validate() const;
  /// Learning rate of 1-based epoch t: initial_lr divided by decay_factor once
  /// for every decay epoch e < t.
  double lr_at(std::size_t epoch) const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SGD with heavy-ball momentum: v = mu * v + g; w -= lr * v.
class SgdMomentum {
 public:
  SgdMomentum(std::size_t parameter_count, double momentum);
  /// Indices in `frozen` are left untouched.
  void step(std::vector<double>& parameters, std::span<const double> gradient, double lr,
            const std::vector<bool>* frozen = nullptr);

 private:
  std::vector<double> velocity_;
  double momentum_;
};

/// One pass over `data` in an order shuffled from (seed, epoch). Updates the
/// checkpoint's parameters and BatchNorm statistics; returns the mean loss.
double train_epoch(Checkpoint& checkpoint, const DatasetSplit& data, std::size_t batch_size, double lr,
                   SgdMomentum& optimizer, std::uint64_t seed, std::size_t epoch,
                   const std::vector<bool>* frozen = nullptr);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> history;
};

/// Trains from a seeded initialization. Linear regression is solved in
/// closed form; every other model kind runs train_iterative.
TrainResult train(const ModelSpec& spec, const DatasetSplit& data, const TrainConfig& config,
                  const DatasetSplit* test = nullptr);
/// SGD-momentum training for any model kind.
TrainResult train_iterative(const ModelSpec& spec, const DatasetSplit& data, const TrainConfig& config,
                            const DatasetSplit* test = nullptr);

/// Minimizer of sum_i 0.5 (w.x_i - y_i)^2 + 0.5 ridge |w|^2, from the normal
/// equations (X^T X + ridge I) w = X^T y. Rows of `design` are samples.
Checkpoint solve_linear_closed_form(const Eigen::MatrixXd& design, const Eigen::VectorXd& targets, double ridge = 0.0);

/// Design matrix (rows = samples) and targets of a regression dataset.
Eigen::MatrixXd design_matrix(const DatasetSplit& data);
Eigen::VectorXd target_vector(const DatasetSplit& data);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Eval-mode accuracy and mean log-loss. For linear regression a prediction
/// counts as correct when it lies within 0.5 of the target.
EvalResult evaluate(const Checkpoint& checkpoint, const DatasetSplit& data, std::size_t batch_size = 256);

/// Predicted class (or regression value) per sample, eval mode.
std::vector<double> predict(const Checkpoint& checkpoint, const DatasetSplit& data, std::size_t batch_size = 256);

/// Per-sample channel means of SmallCNN activations.
/// table[i * channels + j] is the spatial mean of channel j for sample i;
/// channels of all conv blocks are concatenated in layer order.
struct ActivationProfile {
  ActivationSite site = ActivationSite::PostBatchNormRelu;
  std::vector<SampleId> sample_ids;
  std::vector<int> labels;
  std::size_t channels = 0;
  std::vector<double> table;
  std::vector<std::size_t> channel_layer;
  std::vector<std::vector<std::size_t>> channel_params;

  std::size_t rows() const noexcept { return sample_ids.size(); }
  double at(std::size_t row, std::size_t channel) const { return table[row * channels + channel]; }
};

/// Eval-mode activation table. PostBatchNormRelu records the Conv-BN-ReLU
/// output; PreBatchNorm records ReLU of the raw convolution output so channel
/// scores stay nonnegative. Rejects models without conv layers.
ActivationProfile record_activations(const Checkpoint& checkpoint, const DatasetSplit& data,
                                     ActivationSite site = ActivationSite::PostBatchNormRelu,
                                     std::size_t batch_size = 256);

/// Binary container plus "<path>.json" metadata sidecar.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// SHA-256 (hex) of the binary serialization.
std::string checkpoint_fingerprint(const Checkpoint& checkpoint);

}  // namespace unlearn
