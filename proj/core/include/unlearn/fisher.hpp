#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "unlearn/dataset.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

enum class FisherNormalization { SumOverSamples, MeanOverSamples };
/// ObservedLabel: empirical Fisher with the dataset label. SampledLabel: one
/// label drawn from p(y|x,w). ExpectedLabel: exact expectation over the
/// model's predictive distribution, sum_y p(y|x,w) g_y^2.
enum class LabelMode { ObservedLabel, SampledLabel, ExpectedLabel };

std::string_view to_string(LabelMode mode);
LabelMode parse_label_mode(std::string_view name);

/// Diagonal Fisher information split into the forget-set and remain-set
/// contributions. Under SumOverSamples, full == forget + remain.
struct FisherDiagonal {
  std::vector<double> full;
  std::vector<double> forget;
  std::vector<double> remain;
  FisherNormalization normalization = FisherNormalization::SumOverSamples;
  std::size_t forget_count = 0;
  std::size_t remain_count = 0;
  std::string source_checkpoint;  // checkpoint fingerprint

  std::size_t size() const noexcept { return full.size(); }
};

struct FisherOptions {
  LabelMode label_mode = LabelMode::ObservedLabel;
  FisherNormalization normalization = FisherNormalization::SumOverSamples;
  std::uint64_t seed = 0;  // label draws for SampledLabel
};

/// Squared per-sample gradients of log p(y|x,w), accumulated per bucket.
/// Gradients are taken one sample at a time with BatchNorm in eval mode.
/// Linear regression uses its exact expected Fisher, sum_i x_ij^2.
FisherDiagonal fisher_diagonal(const Checkpoint& checkpoint, const DatasetSplit& forget, const DatasetSplit& remain,
                               const FisherOptions& options = {});

/// Per-sample gradient of -log p(y|x,w) over the flat parameter vector.
std::vector<double> sample_log_likelihood_gradient(const Checkpoint& checkpoint, const DatasetSplit& data,
                                                   std::size_t row, int label);

/// 0.5 * sum_j F_jj (w_j - w'_j)^2 using the full diagonal.
double fisher_kl_quadratic(const FisherDiagonal& fisher, const Checkpoint& w, const Checkpoint& w_prime);
double fisher_kl_quadratic(const std::vector<double>& diagonal, const std::vector<double>& w,
                           const std::vector<double>& w_prime);

void save_fisher(const FisherDiagonal& fisher, const std::filesystem::path& path);
FisherDiagonal load_fisher(const std::filesystem::path& path);

}  // namespace unlearn
