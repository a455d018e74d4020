#include "unlearn/unlearn.hpp"

#include <cmath>

#include "unlearn/linalg.hpp"

namespace unlearn {

namespace {

bool uses_mask_ratio(UnlearnStrategy s) {
  return s == UnlearnStrategy::RandomMask || s == UnlearnStrategy::FisherMask || s == UnlearnStrategy::ActivationMask ||
         s == UnlearnStrategy::TfIdf;
}

void require_cnn(const Checkpoint& c, UnlearnStrategy s) {
  if (c.spec.kind != ModelKind::SmallCNN) {
    throw std::invalid_argument(std::string(to_string(s)) + " needs conv channels; model is " + std::string(to_string(c.spec.kind)));
  }
}

void require_whole_class(const ForgetSpec& f, UnlearnStrategy s) {
  if (!f.is_whole_class()) throw std::invalid_argument(std::string(to_string(s)) + " can only remove a whole class");
}

std::set<SampleId> id_set(const DatasetSplit& d) { return {d.ids.begin(), d.ids.end()}; }

EpochRecord score_epoch(const Checkpoint& c, const EvalSets& eval, std::size_t epoch, double lr) {
  EpochRecord r;
  r.epoch = epoch;
  r.lr = lr;
  r.remain_acc = evaluate(c, eval.remain).accuracy;
  r.forget_acc = evaluate(c, eval.forget).accuracy;
  r.unlearn_score = unlearn_score(r.remain_acc, r.forget_acc);
  return r;
}

// Class-space layout of softmax regression parameters: W [K,d] row-major,
// then b [K]. Feature index d stands for the bias.
std::size_t softmax_index(std::size_t k, std::size_t i, std::size_t d, std::size_t classes) {
  return i == d ? classes * d + k : k * d + i;
}

}  // namespace

std::string_view to_string(UnlearnStrategy strategy) {
  switch (strategy) {
    case UnlearnStrategy::FinetuneOnly: return "FinetuneOnly";
    case UnlearnStrategy::RandomMask: return "RandomMask";
    case UnlearnStrategy::FisherMask: return "FisherMask";
    case UnlearnStrategy::ActivationMask: return "ActivationMask";
    case UnlearnStrategy::TfIdf: return "TfIdf";
    case UnlearnStrategy::FisherNoise: return "FisherNoise";
    case UnlearnStrategy::ClassifierMask: return "ClassifierMask";
    case UnlearnStrategy::NewtonExact: return "NewtonExact";
  }
  return "?";
}

UnlearnStrategy parse_unlearn_strategy(std::string_view name) {
  for (auto s : {UnlearnStrategy::FinetuneOnly, UnlearnStrategy::RandomMask, UnlearnStrategy::FisherMask,
                 UnlearnStrategy::ActivationMask, UnlearnStrategy::TfIdf, UnlearnStrategy::FisherNoise,
                 UnlearnStrategy::ClassifierMask, UnlearnStrategy::NewtonExact}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown unlearning strategy '" + std::string(name) + "'");
}

LrReplay build_lr_replay(const TrainConfig& original, std::size_t finetune_epochs) {
  if (finetune_epochs == 0) throw std::invalid_argument("build_lr_replay: S must be at least 1");
  std::vector<std::size_t> fires;
  for (auto e : original.decay_epochs) fires.push_back((e * finetune_epochs + original.epochs - 1) / original.epochs);
  LrReplay replay;
  for (std::size_t t = 1; t <= finetune_epochs; ++t) {
    double lr = original.initial_lr;
    for (auto m : fires) {
      if (m <= t) lr /= original.decay_factor;
    }
    replay.rates.push_back(lr);
  }
  return replay;
}

void UnlearnConfig::validate() const {
  if (remain_policy.kind != RemainPolicy::Kind::None && finetune_epochs == 0 && strategy != UnlearnStrategy::NewtonExact) {
    throw std::invalid_argument("unlearn config: finetune_epochs must be at least 1 unless the remain policy is None");
  }
  if (remain_policy.kind == RemainPolicy::Kind::Subsample && remain_policy.count == 0) {
    throw std::invalid_argument("unlearn config: Subsample policy needs a positive count");
  }
  if (uses_mask_ratio(strategy)) check_ratio(ratio);
  if (strategy == UnlearnStrategy::FisherNoise && remain_policy.kind == RemainPolicy::Kind::None) {
    throw std::invalid_argument("unlearn config: FisherNoise needs remain data to compute the Fisher diagonal");
  }
  if (strategy == UnlearnStrategy::NewtonExact && remain_policy.kind == RemainPolicy::Kind::None) {
    throw std::invalid_argument("unlearn config: NewtonExact needs remain data");
  }
  if (!(newton_ridge >= 0.0)) throw std::invalid_argument("unlearn config: newton_ridge must be nonnegative");
}

nlohmann::json UnlearnConfig::to_json() const {
  nlohmann::json j;
  j["strategy"] = to_string(strategy);
  j["ratio"] = ratio;
  j["finetune_epochs"] = finetune_epochs;
  switch (remain_policy.kind) {
    case RemainPolicy::Kind::Full: j["remain_policy"] = "Full"; break;
    case RemainPolicy::Kind::Subsample: j["remain_policy"] = {{"Subsample", remain_policy.count}}; break;
    case RemainPolicy::Kind::None: j["remain_policy"] = "None"; break;
  }
  j["seed"] = seed;
  j["freeze_masked"] = freeze_masked;
  j["fisher_labels"] = to_string(fisher_labels);
  if (strategy == UnlearnStrategy::FisherNoise) j["noise"] = {{"lambda", noise.lambda}, {"sigma", noise.sigma}};
  if (strategy == UnlearnStrategy::NewtonExact) j["newton_ridge"] = newton_ridge;
  return j;
}

EvalSets class_eval_sets(const DatasetSplit& test_set, int forget_class) {
  auto parts = split_forget(test_set, ForgetSpec::whole_class(forget_class));
  if (parts.forget.empty()) throw std::invalid_argument("test set has no samples of class " + std::to_string(forget_class));
  return {std::move(parts.remain), std::move(parts.forget)};
}

UnlearnResult run_unlearn(const Checkpoint& w_star, const DatasetSplit& train_set, const ForgetSpec& forget,
                      const TrainConfig& original, const UnlearnConfig& config, const EvalSets& eval) {
  config.validate();
  original.validate();
  if (eval.remain.empty() || eval.forget.empty()) throw std::invalid_argument("run_unlearn: evaluation sets must be non-empty");
  auto parts = split_forget(train_set, forget);

  DatasetSplit remain_data;
  switch (config.remain_policy.kind) {
    case RemainPolicy::Kind::Full: remain_data = parts.remain; break;
    case RemainPolicy::Kind::Subsample:
      remain_data = subsample_remain(parts.remain, std::min(config.remain_policy.count, parts.remain.size()), config.seed);
      break;
    case RemainPolicy::Kind::None: break;
  }
  const bool has_remain = !remain_data.empty();
  std::size_t epochs = config.remain_policy.kind == RemainPolicy::Kind::None ? 0 : config.finetune_epochs;

  UnlearnResult result{w_star, w_star, {}, std::nullopt};
  const auto scored = [&] { return has_remain ? concatenate(parts.forget, remain_data) : parts.forget; };

  switch (config.strategy) {
    case UnlearnStrategy::FinetuneOnly:
      break;
    case UnlearnStrategy::RandomMask:
      result.mask = random_mask(w_star, config.ratio, config.seed);
      break;
    case UnlearnStrategy::FisherMask: {
      const FisherOptions options{config.fisher_labels, FisherNormalization::MeanOverSamples, config.seed};
      result.mask = fisher_mask(fisher_diagonal(w_star, parts.forget, remain_data, options), w_star, config.ratio);
      break;
    }
    case UnlearnStrategy::ActivationMask: {
      require_cnn(w_star, config.strategy);
      const auto profile = record_activations(w_star, scored(), ActivationSite::PostBatchNormRelu);
      result.mask = activation_mask(profile, id_set(parts.forget), id_set(remain_data), config.ratio);
      break;
    }
    case UnlearnStrategy::TfIdf: {
      require_cnn(w_star, config.strategy);
      require_whole_class(forget, config.strategy);
      const auto profile = record_activations(w_star, scored(), ActivationSite::PreBatchNorm);
      result.mask = tfidf_mask(profile, w_star.spec.classes, forget.forget_class, config.ratio, config.tfidf);
      break;
    }
    case UnlearnStrategy::FisherNoise: {
      const FisherOptions options{config.fisher_labels, FisherNormalization::MeanOverSamples, config.seed};
      const auto h = fisher_diagonal(w_star, DatasetSplit{}, remain_data, options);
      FisherNoiseParams params = config.noise;
      params.seed = config.seed;
      result.perturbed = fisher_noise(w_star, h.remain, params);
      break;
    }
    case UnlearnStrategy::ClassifierMask:
      require_whole_class(forget, config.strategy);
      result.mask = classifier_mask(w_star, forget.forget_class);
      break;
    case UnlearnStrategy::NewtonExact:
      result.perturbed = newton_step(w_star, remain_data, config.newton_ridge);
      epochs = 0;
      break;
  }
  if (result.mask) result.perturbed = apply_mask(w_star, *result.mask);

  UnlearnReport& report = result.report;
  report.strategy = std::string(to_string(config.strategy));
  report.config = config.to_json();
  report.per_epoch.push_back(score_epoch(result.perturbed, eval, 0, 0.0));

  Checkpoint current = result.perturbed;
  result.checkpoint = current;
  if (epochs > 0) {
    const auto replay = build_lr_replay(original, epochs);
    std::vector<bool> frozen;
    if (config.freeze_masked && result.mask) {
      frozen.assign(current.parameters.size(), false);
      for (auto j : result.mask->indices) frozen[j] = true;
    }
    SgdMomentum optimizer(current.parameters.size(), original.momentum);
    double best = report.per_epoch.front().unlearn_score;
    for (std::size_t t = 1; t <= epochs; ++t) {
      const double lr = replay.at(t);
      train_epoch(current, remain_data, original.batch_size, lr, optimizer, config.seed, t, frozen.empty() ? nullptr : &frozen);
      report.per_epoch.push_back(score_epoch(current, eval, t, lr));
      if (report.per_epoch.back().unlearn_score > best) {
        best = report.per_epoch.back().unlearn_score;
        result.checkpoint = current;
      }
    }
  }
  report.finalize();
  return result;
}

GradientHessian loss_gradient_hessian(const Checkpoint& checkpoint, const DatasetSplit& data) {
  const auto& w = checkpoint.parameters;
  const std::size_t d = data.sample_size();
  GradientHessian out;
  if (checkpoint.spec.kind == ModelKind::LinearRegression) {
    if (d != w.size()) throw ShapeError("loss_gradient_hessian: sample size differs from weight length");
    out.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    out.hessian = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    const Eigen::Map<const Eigen::VectorXd> wv(w.data(), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto s = data.sample(i);
      const Eigen::Map<const Eigen::VectorXd> x(s.data(), static_cast<Eigen::Index>(d));
      const double y = data.targets.empty() ? static_cast<double>(data.labels[i]) : data.targets[i];
      out.gradient += (wv.dot(x) - y) * x;
      out.hessian.selfadjointView<Eigen::Lower>().rankUpdate(x);
    }
    out.hessian = out.hessian.selfadjointView<Eigen::Lower>();
    return out;
  }
  if (checkpoint.spec.kind != ModelKind::SoftmaxRegression) {
    throw std::invalid_argument("loss_gradient_hessian: only linear and softmax regression are supported");
  }
  const std::size_t k = static_cast<std::size_t>(checkpoint.spec.classes);
  const std::size_t n = k * (d + 1);
  if (n != w.size()) throw ShapeError("loss_gradient_hessian: sample size does not match the softmax layout");
  out.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  out.hessian = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  std::vector<double> xt(d + 1), p(k);
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto x = data.sample(s);
    std::copy(x.begin(), x.end(), xt.begin());
    xt[d] = 1.0;
    for (std::size_t c = 0; c < k; ++c) {
      double z = w[k * d + c];
      for (std::size_t i = 0; i < d; ++i) z += w[c * d + i] * x[i];
      p[c] = z;
    }
    const double top = *std::max_element(p.begin(), p.end());
    double total = 0.0;
    for (auto& v : p) total += (v = std::exp(v - top));
    for (auto& v : p) v /= total;
    const auto y = static_cast<std::size_t>(data.labels[s]);
    for (std::size_t c = 0; c < k; ++c) {
      const double r = p[c] - (c == y ? 1.0 : 0.0);
      for (std::size_t i = 0; i <= d; ++i) out.gradient(static_cast<Eigen::Index>(softmax_index(c, i, d, k))) += r * xt[i];
    }
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        const double curvature = (a == b ? p[a] : 0.0) - p[a] * p[b];
        for (std::size_t i = 0; i <= d; ++i) {
          const auto row = static_cast<Eigen::Index>(softmax_index(a, i, d, k));
          for (std::size_t j = 0; j <= d; ++j) {
            out.hessian(row, static_cast<Eigen::Index>(softmax_index(b, j, d, k))) += curvature * xt[i] * xt[j];
          }
        }
      }
    }
  }
  return out;
}

Checkpoint newton_unlearn_linear(const Checkpoint& w_star, const DatasetSplit& all, const DatasetSplit& forget, double ridge) {
  if (forget.empty()) throw std::invalid_argument("newton_unlearn_linear: |D_f| = 0, the 1/|D_f| factor is undefined");
  if (!(ridge >= 0.0)) throw std::invalid_argument("newton_unlearn_linear: ridge must be nonnegative");
  auto h = loss_gradient_hessian(w_star, all).hessian;
  h.diagonal().array() += ridge;
  const auto g = loss_gradient_hessian(w_star, forget).gradient;
  const Eigen::VectorXd step = solve_symmetric(h, g, "influence update Hessian") / static_cast<double>(forget.size());
  Checkpoint out = w_star;
  for (Eigen::Index j = 0; j < step.size(); ++j) out.parameters[static_cast<std::size_t>(j)] += step(j);
  return out;
}

Checkpoint newton_step(const Checkpoint& w, const DatasetSplit& remain, double ridge) {
  if (remain.empty()) throw std::invalid_argument("newton_step: remain set is empty");
  if (!(ridge >= 0.0)) throw std::invalid_argument("newton_step: ridge must be nonnegative");
  auto gh = loss_gradient_hessian(w, remain);
  gh.hessian.diagonal().array() += ridge;
  Eigen::VectorXd gradient = gh.gradient;
  for (Eigen::Index j = 0; j < gradient.size(); ++j) gradient(j) += ridge * w.parameters[static_cast<std::size_t>(j)];
  const Eigen::VectorXd step = solve_symmetric(gh.hessian, gradient, "remain-set Newton step");
  Checkpoint out = w;
  for (Eigen::Index j = 0; j < step.size(); ++j) out.parameters[static_cast<std::size_t>(j)] -= step(j);
  return out;
}

RelearnResult relearn_time(const Checkpoint& unlearned, const DatasetSplit& train_set, const DatasetSplit& forget,
                           double reference_loss, const TrainConfig& original, std::size_t max_epochs) {
  original.validate();
  if (forget.empty()) throw std::invalid_argument("relearn_time: forget set is empty");
  RelearnResult result;
  Checkpoint current = unlearned;
  result.forget_loss.push_back(evaluate(current, forget).loss);
  if (result.forget_loss.back() <= reference_loss) {
    result.converged = true;
    return result;
  }
  SgdMomentum optimizer(current.parameters.size(), original.momentum);
  for (std::size_t t = 1; t <= max_epochs; ++t) {
    train_epoch(current, train_set, original.batch_size, original.lr_at(t), optimizer, original.seed, t);
    result.forget_loss.push_back(evaluate(current, forget).loss);
    result.epochs = t;
    if (result.forget_loss.back() <= reference_loss) {
      result.converged = true;
      return result;
    }
  }
  return result;
}

}  // namespace unlearn
