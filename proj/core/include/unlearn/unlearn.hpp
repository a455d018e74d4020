#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "unlearn/dataset.hpp"
#include "unlearn/fisher.hpp"
#include "unlearn/mask.hpp"
#include "unlearn/metrics.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

enum class UnlearnStrategy {
  FinetuneOnly,
  RandomMask,
  FisherMask,
  ActivationMask,
  TfIdf,
  FisherNoise,
  ClassifierMask,
  NewtonExact,
};

std::string_view to_string(UnlearnStrategy strategy);
UnlearnStrategy parse_unlearn_strategy(std::string_view name);

struct RemainPolicy {
  enum class Kind { Full, Subsample, None };
  Kind kind = Kind::Full;
  std::size_t count = 0;  // Subsample only

  static RemainPolicy full() { return {Kind::Full, 0}; }
  static RemainPolicy subsample(std::size_t n) { return {Kind::Subsample, n}; }
  static RemainPolicy none() { return {Kind::None, 0}; }
};

/// Learning rates for fine-tuning epochs 1..S that replay the original
/// decay schedule compressed into S epochs.
struct LrReplay {
  std::vector<double> rates;
  double at(std::size_t epoch) const { return rates.at(epoch - 1); }
};

/// Decay epoch e of the original schedule fires at replay epoch
/// ceil(e / epochs * S); decays landing on the same epoch stack.
LrReplay build_lr_replay(const TrainConfig& original, std::size_t finetune_epochs);

struct UnlearnConfig {
  UnlearnStrategy strategy = UnlearnStrategy::FisherMask;
  double ratio = 0.04;
  std::size_t finetune_epochs = 5;
  RemainPolicy remain_policy = RemainPolicy::full();
  std::uint64_t seed = 0;
  bool freeze_masked = false;  // ablation: keep masked entries at zero while fine-tuning
  LabelMode fisher_labels = LabelMode::ObservedLabel;
  FisherNoiseParams noise;
  TfIdfOptions tfidf;
  double newton_ridge = 0.0;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  nlohmann::json to_json() const;
};

/// Labelled sets on which each fine-tuning epoch is scored.
struct EvalSets {
  DatasetSplit remain;
  DatasetSplit forget;
};

/// Remain/forget split of a test set for whole-class removal.
EvalSets class_eval_sets(const DatasetSplit& test_set, int forget_class);

struct UnlearnResult {
  Checkpoint checkpoint;  // best epoch by unlearn score
  Checkpoint perturbed;   // state at fine-tuning epoch 0
  UnlearnReport report;
  std::optional<ParameterMask> mask;
};

/// Perturbs w* according to the strategy, then fine-tunes on the remain data
/// with the compressed schedule and the original optimizer. Epoch 0 is the
/// perturbed model; the returned checkpoint is the best-scoring epoch.
UnlearnResult run_unlearn(const Checkpoint& w_star, const DatasetSplit& train_set, const ForgetSpec& forget,
                      const TrainConfig& original, const UnlearnConfig& config, const EvalSets& eval);

/// Summed loss gradient and Hessian over `data` for linear and softmax
/// regression (analytic formulas).
struct GradientHessian {
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};
GradientHessian loss_gradient_hessian(const Checkpoint& checkpoint, const DatasetSplit& data);

/// w* + (1/|D_f|) (H(w*, D) + ridge I)^{-1} grad L(w*, D_f).
Checkpoint newton_unlearn_linear(const Checkpoint& w_star, const DatasetSplit& all, const DatasetSplit& forget,
                                 double ridge = 0.0);

/// One Newton step on the remain loss: w - (H_r + ridge I)^{-1} grad L_r(w).
/// Exact for linear regression.
Checkpoint newton_step(const Checkpoint& w, const DatasetSplit& remain, double ridge = 0.0);

struct RelearnResult {
  std::size_t epochs = 0;
  bool converged = false;
  std::vector<double> forget_loss;  // index t = loss after t epochs
};

/// Trains on the full set with the original optimizer until the mean loss
/// on `forget` drops to reference_loss. Epoch 0 is checked first.
RelearnResult relearn_time(const Checkpoint& unlearned, const DatasetSplit& train_set, const DatasetSplit& forget,
                           double reference_loss, const TrainConfig& original, std::size_t max_epochs);

}  // namespace unlearn
