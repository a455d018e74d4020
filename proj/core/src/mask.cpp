#include "unlearn/mask.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

constexpr const char* kEmptyWarning = "ratio selects zero elements; mask is empty";

ParameterMask finish(ParameterMask mask) {
  std::sort(mask.indices.begin(), mask.indices.end());
  mask.indices.erase(std::unique(mask.indices.begin(), mask.indices.end()), mask.indices.end());
  std::sort(mask.channels.begin(), mask.channels.end());
  if (mask.indices.empty()) mask.warning = kEmptyWarning;
  return mask;
}

// Groups channel positions by conv layer, preserving order.
std::vector<std::vector<std::size_t>> channels_by_layer(const ActivationProfile& profile) {
  std::vector<std::vector<std::size_t>> layers;
  for (std::size_t j = 0; j < profile.channels; ++j) {
    const std::size_t l = profile.channel_layer[j];
    if (layers.size() <= l) layers.resize(l + 1);
    layers[l].push_back(j);
  }
  return layers;
}

// Per layer, picks round(R C_l) channels by score and adds their kernels.
void select_channels(const ActivationProfile& profile, const std::vector<double>& score, double ratio, ParameterMask& mask) {
  for (const auto& layer : channels_by_layer(profile)) {
    std::vector<double> s(layer.size());
    for (std::size_t i = 0; i < layer.size(); ++i) s[i] = score[layer[i]];
    for (auto pos : top_k(s, ratio_count(layer.size(), ratio))) {
      const std::size_t j = layer[pos];
      mask.channels.push_back(j);
      mask.indices.insert(mask.indices.end(), profile.channel_params[j].begin(), profile.channel_params[j].end());
    }
  }
}

}  // namespace

std::string_view to_string(MaskStrategy strategy) {
  switch (strategy) {
    case MaskStrategy::Fisher: return "Fisher";
    case MaskStrategy::Activation: return "Activation";
    case MaskStrategy::TfIdf: return "TfIdf";
    case MaskStrategy::Random: return "Random";
    case MaskStrategy::Classifier: return "Classifier";
    case MaskStrategy::BoundGuided: return "BoundGuided";
  }
  return "?";
}

MaskStrategy parse_mask_strategy(std::string_view name) {
  for (auto s : {MaskStrategy::Fisher, MaskStrategy::Activation, MaskStrategy::TfIdf, MaskStrategy::Random,
                 MaskStrategy::Classifier, MaskStrategy::BoundGuided}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown mask strategy '" + std::string(name) + "'");
}

bool ParameterMask::contains(std::size_t index) const {
  return std::binary_search(indices.begin(), indices.end(), index);
}

std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  k = std::min(k, order.size());
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  order.resize(k);
  return order;
}

void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("mask ratio must lie in (0, 1], got " + std::to_string(ratio));
}

ParameterMask fisher_mask(const FisherDiagonal& fisher, const Checkpoint& checkpoint, double ratio) {
  check_ratio(ratio);
  if (fisher.size() != checkpoint.parameters.size()) {
    throw std::invalid_argument("fisher_mask: Fisher has " + std::to_string(fisher.size()) + " entries, checkpoint " +
                                std::to_string(checkpoint.parameters.size()));
  }
  const auto maskable = checkpoint.maskable_indices();
  std::vector<double> score(maskable.size());
  for (std::size_t i = 0; i < maskable.size(); ++i) score[i] = fisher.forget[maskable[i]] - fisher.remain[maskable[i]];
  ParameterMask mask;
  mask.ratio = ratio;
  mask.strategy = MaskStrategy::Fisher;
  for (auto pos : top_k(score, ratio_count(maskable.size(), ratio))) mask.indices.push_back(maskable[pos]);
  mask.scores = std::move(score);
  return finish(std::move(mask));
}

ParameterMask activation_mask(const ActivationProfile& profile, const std::set<SampleId>& forget_ids,
                              const std::set<SampleId>& remain_ids, double ratio) {
  check_ratio(ratio);
  if (forget_ids.empty()) throw std::invalid_argument("activation_mask: forget set is empty");
  std::vector<double> forget_mean(profile.channels, 0.0), remain_mean(profile.channels, 0.0);
  std::size_t nf = 0, nr = 0;
  for (std::size_t i = 0; i < profile.rows(); ++i) {
    const SampleId id = profile.sample_ids[i];
    std::vector<double>* target = nullptr;
    if (forget_ids.count(id)) {
      target = &forget_mean;
      ++nf;
    } else if (remain_ids.count(id)) {
      target = &remain_mean;
      ++nr;
    } else {
      continue;
    }
    for (std::size_t j = 0; j < profile.channels; ++j) (*target)[j] += profile.at(i, j);
  }
  if (nf != forget_ids.size() || nr != remain_ids.size()) {
    throw std::invalid_argument("activation_mask: profile does not cover every forget and remain sample");
  }
  std::vector<double> score(profile.channels);
  for (std::size_t j = 0; j < profile.channels; ++j) {
    // Without remain data (limited-data setting) the remain mean is taken as 0.
    score[j] = forget_mean[j] / static_cast<double>(nf) - (nr ? remain_mean[j] / static_cast<double>(nr) : 0.0);
  }
  ParameterMask mask;
  mask.ratio = ratio;
  mask.strategy = MaskStrategy::Activation;
  select_channels(profile, score, ratio, mask);
  mask.scores = std::move(score);
  return finish(std::move(mask));
}

std::vector<double> tfidf_scores(const std::vector<std::vector<double>>& tf, int forget_class, const TfIdfOptions& options) {
  if (tf.empty()) return {};
  const std::size_t classes = tf.front().size();
  if (forget_class < 0 || static_cast<std::size_t>(forget_class) >= classes) {
    throw std::out_of_range("tfidf_scores: class " + std::to_string(forget_class) + " out of range");
  }
  std::vector<double> threshold(classes, options.threshold.value_or(0.0));
  if (!options.threshold) {
    for (std::size_t c = 0; c < classes; ++c) {
      double s = 0.0;
      for (const auto& row : tf) s += row[c];
      threshold[c] = s / static_cast<double>(tf.size());
    }
  }
  std::vector<double> score(tf.size());
  for (std::size_t j = 0; j < tf.size(); ++j) {
    if (tf[j].size() != classes) throw std::invalid_argument("tfidf_scores: ragged tf table");
    std::size_t df = 0;
    for (std::size_t c = 0; c < classes; ++c) df += tf[j][c] > threshold[c] ? 1 : 0;
    const double idf = std::log(static_cast<double>(classes) / static_cast<double>(std::max<std::size_t>(df, 1)));
    score[j] = tf[j][static_cast<std::size_t>(forget_class)] * idf;
  }
  return score;
}

ParameterMask tfidf_mask(const ActivationProfile& profile, int class_count, int forget_class, double ratio,
                         const TfIdfOptions& options) {
  check_ratio(ratio);
  if (profile.site != ActivationSite::PreBatchNorm) throw std::invalid_argument("tfidf_mask: needs a PreBatchNorm profile");
  if (forget_class < 0 || forget_class >= class_count) {
    throw std::out_of_range("tfidf_mask: class " + std::to_string(forget_class) + " out of range");
  }
  // Classes present in the profile are the documents.
  std::vector<int> present;
  std::unordered_map<int, std::size_t> column;
  for (int y : profile.labels) {
    if (y < 0 || y >= class_count) throw std::out_of_range("tfidf_mask: profile label out of range");
    if (!column.count(y)) column[y] = 0;
  }
  for (int c = 0; c < class_count; ++c) {
    if (column.count(c)) {
      column[c] = present.size();
      present.push_back(c);
    }
  }
  if (!column.count(forget_class)) throw std::invalid_argument("tfidf_mask: forget class has no samples in the profile");

  std::vector<std::vector<double>> mean(profile.channels, std::vector<double>(present.size(), 0.0));
  std::vector<std::size_t> count(present.size(), 0);
  for (std::size_t i = 0; i < profile.rows(); ++i) {
    const std::size_t c = column[profile.labels[i]];
    ++count[c];
    for (std::size_t j = 0; j < profile.channels; ++j) mean[j][c] += profile.at(i, j);
  }
  for (auto& row : mean) {
    for (std::size_t c = 0; c < present.size(); ++c) row[c] /= static_cast<double>(count[c]);
  }

  std::vector<std::vector<std::size_t>> groups;
  if (options.per_layer_normalization) {
    groups = channels_by_layer(profile);
  } else {
    groups.emplace_back(profile.channels);
    std::iota(groups.back().begin(), groups.back().end(), 0);
  }
  std::vector<double> score(profile.channels, 0.0);
  for (const auto& group : groups) {
    std::vector<std::vector<double>> tf(group.size(), std::vector<double>(present.size(), 0.0));
    for (std::size_t c = 0; c < present.size(); ++c) {
      double total = 0.0;
      for (auto j : group) total += mean[j][c];
      if (total <= 0.0) continue;
      for (std::size_t i = 0; i < group.size(); ++i) tf[i][c] = mean[group[i]][c] / total;
    }
    const auto s = tfidf_scores(tf, static_cast<int>(column[forget_class]), options);
    for (std::size_t i = 0; i < group.size(); ++i) score[group[i]] = s[i];
  }
  ParameterMask mask;
  mask.ratio = ratio;
  mask.strategy = MaskStrategy::TfIdf;
  select_channels(profile, score, ratio, mask);
  mask.scores = std::move(score);
  return finish(std::move(mask));
}

ParameterMask random_mask(const Checkpoint& checkpoint, double ratio, std::uint64_t seed) {
  check_ratio(ratio);
  const auto maskable = checkpoint.maskable_indices();
  ParameterMask mask;
  mask.ratio = ratio;
  mask.strategy = MaskStrategy::Random;
  auto rng = make_rng(seed, {0x72616e64ull});
  std::sample(maskable.begin(), maskable.end(), std::back_inserter(mask.indices), ratio_count(maskable.size(), ratio), rng);
  return finish(std::move(mask));
}

ParameterMask classifier_mask(const Checkpoint& checkpoint, int forget_class) {
  if (checkpoint.spec.kind == ModelKind::LinearRegression) {
    throw std::invalid_argument("classifier_mask: linear regression has no classifier layer");
  }
  if (forget_class < 0 || forget_class >= checkpoint.spec.classes) {
    throw std::out_of_range("classifier_mask: class " + std::to_string(forget_class) + " outside [0, " +
                            std::to_string(checkpoint.spec.classes) + ")");
  }
  const auto& w = checkpoint.entry("classifier.weight");
  const auto& b = checkpoint.entry("classifier.bias");
  const std::size_t width = w.shape[1], c = static_cast<std::size_t>(forget_class);
  ParameterMask mask;
  mask.strategy = MaskStrategy::Classifier;
  mask.ratio = static_cast<double>(width + 1) / static_cast<double>(w.size() + b.size());
  for (std::size_t i = 0; i < width; ++i) mask.indices.push_back(w.offset + c * width + i);
  mask.indices.push_back(b.offset + c);
  return finish(std::move(mask));
}

Checkpoint apply_mask(const Checkpoint& checkpoint, const ParameterMask& mask) {
  Checkpoint out = checkpoint;
  for (auto j : mask.indices) {
    if (j >= out.parameters.size()) {
      throw std::out_of_range("apply_mask: index " + std::to_string(j) + " outside " + std::to_string(out.parameters.size()) +
                              " parameters");
    }
    out.parameters[j] = 0.0;
  }
  return out;
}

Checkpoint fisher_noise(const Checkpoint& checkpoint, const std::vector<double>& h, const FisherNoiseParams& params) {
  if (!(params.lambda > 0.0) || !(params.sigma > 0.0)) throw std::invalid_argument("fisher_noise: lambda and sigma must be positive");
  if (h.size() != checkpoint.parameters.size()) throw std::invalid_argument("fisher_noise: h length differs from parameter count");
  const double scale = std::pow(params.lambda * params.sigma * params.sigma, 0.25);
  auto rng = make_rng(params.seed, {0x6e6f6973ull});
  std::normal_distribution<double> normal(0.0, 1.0);
  Checkpoint out = checkpoint;
  for (std::size_t j = 0; j < h.size(); ++j) {
    double hj = h[j];
    if (hj < 0.0 || !std::isfinite(hj)) throw std::invalid_argument("fisher_noise: h[" + std::to_string(j) + "] is not a valid Fisher entry");
    if (params.clamp) {
      hj = std::max(hj, params.floor);
    } else if (hj == 0.0) {
      throw std::invalid_argument("fisher_noise: h[" + std::to_string(j) + "] = 0 and clamping is disabled");
    }
    out.parameters[j] += scale * std::pow(hj, -0.25) * normal(rng);
  }
  return out;
}

nlohmann::json to_json(const ParameterMask& mask) {
  nlohmann::ordered_json j;
  j["format"] = "unlearn-mask";
  j["version"] = 1;
  j["strategy"] = to_string(mask.strategy);
  j["ratio"] = mask.ratio;
  j["size"] = mask.indices.size();
  j["indices"] = mask.indices;
  if (!mask.channels.empty()) j["channels"] = mask.channels;
  if (!mask.warning.empty()) j["warning"] = mask.warning;
  return nlohmann::json(j);
}

ParameterMask mask_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "unlearn-mask" || j.value("version", 0) != 1) throw FormatError("not a mask document");
  ParameterMask mask;
  mask.strategy = parse_mask_strategy(j.at("strategy").get<std::string>());
  mask.ratio = j.at("ratio").get<double>();
  mask.indices = j.at("indices").get<std::vector<std::size_t>>();
  if (j.contains("channels")) mask.channels = j.at("channels").get<std::vector<std::size_t>>();
  if (!std::is_sorted(mask.indices.begin(), mask.indices.end()) ||
      std::adjacent_find(mask.indices.begin(), mask.indices.end()) != mask.indices.end()) {
    throw FormatError("mask indices must be sorted and unique");
  }
  mask.warning = j.value("warning", "");
  return mask;
}

void save_mask(const ParameterMask& mask, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(mask).dump() << '\n';
}

ParameterMask load_mask(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return mask_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace unlearn
