#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlearn/fisher.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

enum class MaskStrategy { Fisher, Activation, TfIdf, Random, Classifier, BoundGuided };

std::string_view to_string(MaskStrategy strategy);
MaskStrategy parse_mask_strategy(std::string_view name);

/// A set of parameter indices to zero. `indices` is sorted and unique.
struct ParameterMask {
  std::vector<std::size_t> indices;
  double ratio = 0.0;
  MaskStrategy strategy = MaskStrategy::Fisher;
  std::vector<std::size_t> channels;  // selected channels (channel-level strategies)
  std::optional<std::vector<double>> scores;
  std::string warning;  // non-empty when the selection came out empty

  std::size_t size() const noexcept { return indices.size(); }
  bool empty() const noexcept { return indices.empty(); }
  bool contains(std::size_t index) const;
};

/// Positions of the k largest scores, ties broken by lower position first.
/// The result is ordered by rank.
std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k);

/// Throws std::invalid_argument unless 0 < ratio <= 1.
void check_ratio(double ratio);

/// Top round(R n) maskable parameters by F_f - F_r.
ParameterMask fisher_mask(const FisherDiagonal& fisher, const Checkpoint& checkpoint, double ratio);

/// Top channels by mean activation on D_f minus mean on D_r. Selection is
/// made per conv layer: round(R C_l) channels of layer l.
ParameterMask activation_mask(const ActivationProfile& profile, const std::set<SampleId>& forget_ids,
                              const std::set<SampleId>& remain_ids, double ratio);

struct TfIdfOptions {
  /// Presence threshold for document counting. When unset, a channel counts
  /// as present in class c when its tf exceeds the mean tf of that class.
  std::optional<double> threshold;
  /// Normalize tf over the channels of each layer (true) or over all channels.
  bool per_layer_normalization = true;
};

/// tf-idf score of every channel for one class. tf[j][c] is the term
/// frequency of channel j in class c; idf(j) = log(K / df(j)) with df
/// counted over the K classes (df = 0 is treated as 1).
std::vector<double> tfidf_scores(const std::vector<std::vector<double>>& tf, int forget_class,
                                 const TfIdfOptions& options = {});

/// Class-as-document tf-idf channel selection on a PreBatchNorm profile.
ParameterMask tfidf_mask(const ActivationProfile& profile, int class_count, int forget_class, double ratio,
                         const TfIdfOptions& options = {});

/// Uniform random subset of round(R n) maskable parameters.
ParameterMask random_mask(const Checkpoint& checkpoint, double ratio, std::uint64_t seed);

/// Weight row and bias entry of the forget class in the final classifier.
ParameterMask classifier_mask(const Checkpoint& checkpoint, int forget_class);

/// Copy of the checkpoint with masked entries zeroed.
Checkpoint apply_mask(const Checkpoint& checkpoint, const ParameterMask& mask);

struct FisherNoiseParams {
  double lambda = 1.0;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  bool clamp = true;
  double floor = 1e-12;
};

/// w_j + (lambda sigma^2)^(1/4) h_j^(-1/4) eps_j with eps ~ N(0,1), applied
/// to every parameter. h is the remain-set Fisher diagonal at w.
Checkpoint fisher_noise(const Checkpoint& checkpoint, const std::vector<double>& h, const FisherNoiseParams& params);

nlohmann::json to_json(const ParameterMask& mask);
ParameterMask mask_from_json(const nlohmann::json& j);
void save_mask(const ParameterMask& mask, const std::filesystem::path& path);
ParameterMask load_mask(const std::filesystem::path& path);

}  // namespace unlearn
