#include "unlearn/fisher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

int draw_label(std::span<const double> logits, Rng& rng) {
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> weights(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) weights[k] = std::exp(logits[k] - top);
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  return pick(rng);
}

void accumulate(const Checkpoint& checkpoint, const DatasetSplit& data, const FisherOptions& options,
                std::vector<double>& bucket) {
  const bool linear = checkpoint.spec.kind == ModelKind::LinearRegression;
  for (std::size_t row = 0; row < data.size(); ++row) {
    if (linear) {
      // Gaussian likelihood with unit variance: E[(w.x - y)^2] = 1, so F_jj = x_j^2.
      const auto x = data.sample(row);
      for (std::size_t j = 0; j < x.size(); ++j) bucket[j] += x[j] * x[j];
      continue;
    }
    const std::size_t rows[1] = {row};
    Tape tape;
    BoundModel model(tape, checkpoint, true);
    Var logits = model.forward(data.gather_inputs(rows), Mode::Eval);
    if (options.label_mode == LabelMode::ExpectedLabel) {
      const auto z = logits.value().data();
      const double top = *std::max_element(z.begin(), z.end());
      std::vector<double> p(z.size());
      double total = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) total += (p[k] = std::exp(z[k] - top));
      for (std::size_t k = 0; k < z.size(); ++k) {
        const double weight = p[k] / total;
        if (weight == 0.0) continue;
        const int labels[1] = {static_cast<int>(k)};
        // Each backward re-sweeps the shared forward graph for another label.
        tape.backward(ops::softmax_cross_entropy(logits, labels));
        const auto g = model.flat_gradient();
        for (std::size_t j = 0; j < g.size(); ++j) bucket[j] += weight * g[j] * g[j];
      }
      continue;
    }
    int label = data.labels[row];
    if (options.label_mode == LabelMode::SampledLabel) {
      auto rng = make_rng(options.seed, {0x66697368ull, data.ids[row]});
      label = draw_label(logits.value().data(), rng);
    }
    const int labels[1] = {label};
    tape.backward(ops::softmax_cross_entropy(logits, labels));
    const auto g = model.flat_gradient();
    for (std::size_t j = 0; j < g.size(); ++j) bucket[j] += g[j] * g[j];
  }
}

void check_inputs(const Checkpoint& checkpoint, const DatasetSplit& data, const char* which) {
  if (data.empty()) return;
  if (data.sample_size() != numel(checkpoint.spec.input_shape)) {
    throw ShapeError(std::string("fisher_diagonal: ") + which + " samples have shape " + shape_string(data.sample_shape()) +
                     ", model expects " + shape_string(checkpoint.spec.input_shape));
  }
}

}  // namespace

std::string_view to_string(LabelMode mode) {
  switch (mode) {
    case LabelMode::ObservedLabel: return "ObservedLabel";
    case LabelMode::SampledLabel: return "SampledLabel";
    case LabelMode::ExpectedLabel: return "ExpectedLabel";
  }
  return "?";
}

LabelMode parse_label_mode(std::string_view name) {
  for (auto m : {LabelMode::ObservedLabel, LabelMode::SampledLabel, LabelMode::ExpectedLabel}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown Fisher label mode '" + std::string(name) + "'");
}

std::vector<double> sample_log_likelihood_gradient(const Checkpoint& checkpoint, const DatasetSplit& data,
                                                   std::size_t row, int label) {
  const std::size_t rows[1] = {row};
  Tape tape;
  BoundModel model(tape, checkpoint, true);
  Var out = model.forward(data.gather_inputs(rows), Mode::Eval);
  if (checkpoint.spec.kind == ModelKind::LinearRegression) {
    const double y[1] = {data.targets.empty() ? static_cast<double>(label) : data.targets[row]};
    tape.backward(ops::half_squared_error(out, y));
  } else {
    const int labels[1] = {label};
    tape.backward(ops::softmax_cross_entropy(out, labels));
  }
  return model.flat_gradient();
}

FisherDiagonal fisher_diagonal(const Checkpoint& checkpoint, const DatasetSplit& forget, const DatasetSplit& remain,
                               const FisherOptions& options) {
  if (forget.empty() && remain.empty()) throw std::invalid_argument("fisher_diagonal: forget and remain sets are both empty");
  check_inputs(checkpoint, forget, "forget");
  check_inputs(checkpoint, remain, "remain");
  const std::size_t n = checkpoint.parameters.size();
  FisherDiagonal f;
  f.forget.assign(n, 0.0);
  f.remain.assign(n, 0.0);
  f.normalization = options.normalization;
  f.forget_count = forget.size();
  f.remain_count = remain.size();
  f.source_checkpoint = checkpoint_fingerprint(checkpoint);
  accumulate(checkpoint, forget, options, f.forget);
  accumulate(checkpoint, remain, options, f.remain);
  f.full.resize(n);
  for (std::size_t j = 0; j < n; ++j) f.full[j] = f.forget[j] + f.remain[j];
  if (options.normalization == FisherNormalization::MeanOverSamples) {
    const double total = static_cast<double>(f.forget_count + f.remain_count);
    for (std::size_t j = 0; j < n; ++j) {
      f.full[j] /= total;
      if (f.forget_count) f.forget[j] /= static_cast<double>(f.forget_count);
      if (f.remain_count) f.remain[j] /= static_cast<double>(f.remain_count);
    }
  }
  return f;
}

double fisher_kl_quadratic(const std::vector<double>& diagonal, const std::vector<double>& w,
                           const std::vector<double>& w_prime) {
  if (diagonal.size() != w.size() || w.size() != w_prime.size()) {
    throw std::invalid_argument("fisher_kl_quadratic: lengths " + std::to_string(diagonal.size()) + ", " +
                                std::to_string(w.size()) + ", " + std::to_string(w_prime.size()) + " differ");
  }
  double s = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    const double d = w[j] - w_prime[j];
    s += diagonal[j] * d * d;
  }
  return 0.5 * s;
}

double fisher_kl_quadratic(const FisherDiagonal& fisher, const Checkpoint& w, const Checkpoint& w_prime) {
  return fisher_kl_quadratic(fisher.full, w.parameters, w_prime.parameters);
}

void save_fisher(const FisherDiagonal& fisher, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format"] = "unlearn-fisher";
  j["version"] = 1;
  j["source_checkpoint"] = fisher.source_checkpoint;
  j["normalization"] = fisher.normalization == FisherNormalization::SumOverSamples ? "SumOverSamples" : "MeanOverSamples";
  j["forget_count"] = fisher.forget_count;
  j["remain_count"] = fisher.remain_count;
  j["full"] = fisher.full;
  j["forget"] = fisher.forget;
  j["remain"] = fisher.remain;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

FisherDiagonal load_fisher(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "unlearn-fisher" || j.at("version") != 1) throw FormatError("not a Fisher file: " + path.string());
    FisherDiagonal f;
    f.source_checkpoint = j.at("source_checkpoint").get<std::string>();
    f.normalization = j.at("normalization") == "SumOverSamples" ? FisherNormalization::SumOverSamples
                                                                 : FisherNormalization::MeanOverSamples;
    f.forget_count = j.at("forget_count").get<std::size_t>();
    f.remain_count = j.at("remain_count").get<std::size_t>();
    f.full = j.at("full").get<std::vector<double>>();
    f.forget = j.at("forget").get<std::vector<double>>();
    f.remain = j.at("remain").get<std::vector<double>>();
    if (f.forget.size() != f.full.size() || f.remain.size() != f.full.size()) throw FormatError("Fisher bucket lengths differ in " + path.string());
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace unlearn
