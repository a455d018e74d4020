#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/dataset.hpp"
#include "unlearn/model.hpp"
#include "unlearn/theory.hpp"
#include "unlearn/unlearn.hpp"

namespace unlearn {

inline constexpr int kRunRecordSchemaVersion = 1;

/// Malformed configuration: bad JSON syntax (with line and column) or an
/// invalid field (with its dotted path).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Scenario { RemoveClass, RemovePoison, RemoveLabelNoise, LimitedRemain, RelearnReadout, BoundVerification };

std::string_view to_string(Scenario scenario);

struct DatasetConfig {
  enum class Kind { Mnist, Gaussians };
  Kind kind = Kind::Mnist;
  std::filesystem::path dir;  // IDX directory (Mnist)
  bool standardize = true;
  int forget_class = 0;
  std::size_t poison_count = 200;
  std::size_t trigger_size = 4;
  int poison_target = 0;
  double label_noise = 0.1;
  // Gaussians
  int classes = 10;
  std::size_t dim = 20;
  std::size_t per_class = 100;
  std::size_t test_per_class = 50;
  double separation = 3.0;
};

struct BoundConfig {
  std::size_t trials = 1000;
  std::size_t max_dim = 20;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::RemoveClass;
  DatasetConfig dataset;
  ModelSpec model;
  TrainConfig train;
  std::vector<UnlearnConfig> strategies;
  std::vector<std::uint64_t> seeds{1};
  std::vector<double> ratios;  // sweep / per-ratio blocks; empty = each strategy's own ratio
  std::size_t relearn_max_epochs = 60;
  std::size_t workers = 1;
  BoundConfig bound;
  std::filesystem::path output;
  nlohmann::json source;  // parsed document, used for hashing

  /// SHA-256 of the canonical (key-sorted) JSON form; independent of field
  /// order and whitespace in the file.
  std::string hash() const;
};

/// Parses a JSON experiment document. Relative dataset paths resolve
/// against `base_dir`.
ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Train/test data for one seed with the forget set and evaluation sets the
/// scenario prescribes.
struct PreparedData {
  DatasetSplit train;
  DatasetSplit test;
  ForgetSpec forget;
  EvalSets eval;
};
PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t seed);

struct RunRecord {
  std::string config_hash;
  Scenario scenario = Scenario::RemoveClass;
  std::uint64_t seed = 0;
  std::string strategy;
  double ratio = 0.0;
  UnlearnReport report;
  std::optional<std::string> error;  // set when the run was rejected
  std::filesystem::path checkpoint_path;
  std::filesystem::path mask_path;
  std::filesystem::path csv_path;
  double wall_seconds = 0.0;  // kept out of the JSON-lines record

  nlohmann::ordered_json to_json() const;
};

/// Trains (or reuses a cached) w* for every seed; returns checkpoint paths.
std::vector<std::filesystem::path> cmd_train(const ExperimentConfig& config, std::ostream& log);

/// Runs every (ratio block, strategy, seed) and writes runs.jsonl,
/// per-run CSV and report files, masks and summary.csv under config.output.
std::vector<RunRecord> cmd_unlearn(const ExperimentConfig& config, std::ostream& log);

/// FisherMask at every ratio; writes one trajectory CSV per ratio and seed.
std::vector<std::filesystem::path> cmd_sweep_ratio(const ExperimentConfig& config, const std::vector<double>& ratios,
                                                   std::ostream& log);

/// Unlearns with every strategy, then measures relearn time; a
/// "RetrainFromScratch" row uses a freshly initialized model.
std::vector<RunRecord> cmd_relearn(const ExperimentConfig& config, std::ostream& log);

/// Randomized bound certification; writes bound.json when `out` is given.
BoundSweep cmd_verify_bound(std::size_t trials, std::size_t max_dim, std::uint64_t seed,
                            const std::optional<std::filesystem::path>& out, std::ostream& log);

struct AggregateRow {
  double ratio = 0.0;
  std::string strategy;
  std::size_t runs = 0;
  double mask_remain_mean = 0.0, mask_remain_std = 0.0;
  double mask_forget_mean = 0.0, mask_forget_std = 0.0;
  double mask_score_mean = 0.0, mask_score_std = 0.0;
  double remain_mean = 0.0, remain_std = 0.0;
  double forget_mean = 0.0, forget_std = 0.0;
  double score_mean = 0.0, score_std = 0.0;
  double epochs_mean = 0.0, epochs_std = 0.0;
  std::optional<double> relearn_mean, relearn_std;
};

/// Mean and population standard deviation per (ratio, strategy), in first
/// appearance order. Rejected runs are skipped.
std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& records);
std::string format_table(const std::vector<AggregateRow>& rows);
std::string aggregate_csv(const std::vector<AggregateRow>& rows);

/// Reads runs.jsonl from an output directory and rebuilds the records.
std::vector<RunRecord> read_run_records(const std::filesystem::path& output_dir);

}  // namespace unlearn
