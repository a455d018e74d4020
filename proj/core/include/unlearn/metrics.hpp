#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/dataset.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

inline constexpr int kReportSchemaVersion = 1;

/// remain_acc / (1 + forget_acc); both accuracies are fractions in [0,1].
double unlearn_score(double remain_acc, double forget_acc);

/// (1/(S-1)) * sum_{t=1..S} |acc_t - acc_{t-1}| over a series of S+1 points.
double fluctuation(std::span<const double> series);

/// Accuracy on the remain and forget parts of a labelled set. An empty part
/// yields no value rather than 0.
struct SubsetAccuracy {
  std::optional<double> remain;
  std::optional<double> forget;
  std::size_t remain_count = 0;
  std::size_t forget_count = 0;
};

SubsetAccuracy accuracy_on_subsets(const Checkpoint& checkpoint, const DatasetSplit& test_set, const ForgetSpec& spec);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double remain_acc = 0.0;
  double forget_acc = 0.0;
  double unlearn_score = 0.0;
};

struct UnlearnReport {
  std::string strategy;
  std::vector<EpochRecord> per_epoch;
  std::size_t best_epoch = 0;
  std::optional<double> remain_fluctuation;
  std::optional<double> forget_fluctuation;
  std::optional<std::size_t> relearn_epochs;
  bool relearn_converged = true;
  nlohmann::json config = nlohmann::json::object();

  const EpochRecord& best() const { return per_epoch.at(best_epoch); }
  /// Picks the epoch with the highest unlearn score (earliest on ties) and
  /// fills the fluctuation fields when at least three epochs were recorded.
  void finalize();
};

/// One JSON object per epoch followed by a summary object, newline separated.
std::string report_jsonl(const UnlearnReport& report);
/// Header "epoch,lr,remain_acc,forget_acc,unlearn_score" then one row per epoch.
std::string report_csv(const UnlearnReport& report);

}  // namespace unlearn
