#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unlearn/tensor.hpp"

namespace unlearn {

using SampleId = std::uint64_t;

/// Raised by the IDX reader for malformed or inconsistent files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Provenance { Clean, Poisoned, LabelNoised };

struct ProvenanceInfo {
  Provenance kind = Provenance::Clean;
  std::size_t poison_count = 0;
  std::size_t trigger_size = 0;
  int target_label = 0;
  double noise_ratio = 0.0;
  std::uint64_t seed = 0;
};

/// A labelled batch of samples. inputs has shape [n, ...sample shape];
/// labels, ids (and targets, for regression data) are parallel to it.
struct DatasetSplit {
  Tensor inputs;
  std::vector<int> labels;
  std::vector<SampleId> ids;
  std::vector<double> targets;  // regression targets; empty for classification data
  int class_count = 0;
  ProvenanceInfo provenance;
  std::string name;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  Shape sample_shape() const;
  std::size_t sample_size() const;
  std::span<const double> sample(std::size_t row) const;

  /// Rows at the given positions, in the given order.
  DatasetSplit select(std::span<const std::size_t> rows) const;
  /// Input batch [rows.size(), ...sample shape].
  Tensor gather_inputs(std::span<const std::size_t> rows) const;
  std::vector<int> gather_labels(std::span<const std::size_t> rows) const;

  /// Throws std::invalid_argument when the parallel arrays or id uniqueness
  /// or label range invariants are broken.
  void validate() const;
};

/// Which samples to forget.
struct ForgetSpec {
  enum class Kind { WholeClass, ByIds };
  Kind kind = Kind::ByIds;
  int forget_class = 0;
  std::set<SampleId> ids;

  static ForgetSpec whole_class(int c) { return {Kind::WholeClass, c, {}}; }
  static ForgetSpec by_ids(std::set<SampleId> ids) { return {Kind::ByIds, 0, std::move(ids)}; }
  bool is_whole_class() const noexcept { return kind == Kind::WholeClass; }
};

struct ForgetRemain {
  DatasetSplit forget;
  DatasetSplit remain;
};

/// Partitions `dataset` into (D_f, D_r), preserving the original order on
/// each side. Unknown ids are rejected.
ForgetRemain split_forget(const DatasetSplit& dataset, const ForgetSpec& spec);

/// Reads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// scaled to [0,1]; images become [n,1,rows,cols].
DatasetSplit load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writes an IDX pair with the standard big-endian headers. Input values are
/// expected in [0,1] and are quantized to bytes.
void write_mnist_idx(const DatasetSplit& dataset, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path);

/// Per-pixel affine standardization (x - mean) / stddev applied in place.
void standardize(DatasetSplit& dataset, double mean, double stddev);

/// Widely used MNIST pixel statistics on the [0,1] scale.
inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;

/// Class c is a unit-covariance Gaussian centred at separation * e_c.
/// Requires dim >= classes. Samples are ordered class by class.
DatasetSplit make_synthetic_gaussians(int classes, std::size_t dim, std::size_t per_class, double separation,
                                      std::uint64_t seed);

struct Corrupted {
  DatasetSplit dataset;
  std::set<SampleId> affected_ids;
};

/// Picks `count` samples uniformly at random, sets the lower-right
/// trigger_size x trigger_size pixels of every channel to `trigger_value`,
/// and overwrites their label with target_label.
Corrupted inject_backdoor(const DatasetSplit& dataset, std::size_t count, std::size_t trigger_size,
                          int target_label, std::uint64_t seed, double trigger_value = 0.0);

/// Relabels round(n * ratio) uniformly chosen samples with a label drawn
/// uniformly from the other classes.
Corrupted inject_label_noise(const DatasetSplit& dataset, double noise_ratio, std::uint64_t seed);

/// Uniform subset without replacement of `count` rows, kept in original order.
DatasetSplit subsample_remain(const DatasetSplit& remain, std::size_t count, std::uint64_t seed);
DatasetSplit subsample_remain_fraction(const DatasetSplit& remain, double fraction, std::uint64_t seed);

/// Concatenates two splits with the same sample shape and class count.
DatasetSplit concatenate(const DatasetSplit& a, const DatasetSplit& b);

/// Round-half-to-even count used for ratio-based selections.
std::size_t ratio_count(std::size_t n, double ratio);

/// Stores a dataset in the versioned binary container used for checkpoints.
void save_dataset(const DatasetSplit& dataset, const std::filesystem::path& path);
DatasetSplit load_dataset(const std::filesystem::path& path);

}  // namespace unlearn
