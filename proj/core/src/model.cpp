#include "unlearn/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "unlearn/digest.hpp"
#include "unlearn/linalg.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

constexpr char kCheckpointMagic[8] = {'U', 'L', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::size_t kConvKernel = 3;
constexpr std::size_t kPool = 2;

std::size_t flat_input_size(const ModelSpec& spec) { return numel(spec.input_shape); }

struct CnnGeometry {
  std::vector<std::size_t> height, width;  // spatial size after each block's pooling
};

CnnGeometry cnn_geometry(const ModelSpec& spec) {
  if (spec.input_shape.size() != 3) {
    throw ShapeError("SmallCNN needs [C,H,W] inputs, got " + shape_string(spec.input_shape));
  }
  CnnGeometry g;
  std::size_t h = spec.input_shape[1], w = spec.input_shape[2];
  for (std::size_t block = 0; block < spec.channels.size(); ++block) {
    if (h + 2 * spec.conv_padding < kConvKernel || w + 2 * spec.conv_padding < kConvKernel) {
      throw ShapeError("SmallCNN input " + shape_string(spec.input_shape) + " too small for block " + std::to_string(block + 1));
    }
    h = (h + 2 * spec.conv_padding - kConvKernel + 1) / kPool;
    w = (w + 2 * spec.conv_padding - kConvKernel + 1) / kPool;
    if (h == 0 || w == 0) {
      throw ShapeError("SmallCNN input " + shape_string(spec.input_shape) + " vanishes after block " + std::to_string(block + 1));
    }
    g.height.push_back(h);
    g.width.push_back(w);
  }
  return g;
}

std::size_t argmax_row(const double* z, std::size_t k) {
  return static_cast<std::size_t>(std::max_element(z, z + k) - z);
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::LinearRegression: return "LinearRegression";
    case ModelKind::SoftmaxRegression: return "SoftmaxRegression";
    case ModelKind::MLP: return "MLP";
    case ModelKind::SmallCNN: return "SmallCNN";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view name) {
  for (auto k : {ModelKind::LinearRegression, ModelKind::SoftmaxRegression, ModelKind::MLP, ModelKind::SmallCNN}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown model kind '" + std::string(name) + "'");
}

std::vector<LayoutEntry> make_layout(const ModelSpec& spec) {
  std::vector<LayoutEntry> layout;
  std::size_t offset = 0;
  auto add = [&](std::string name, Shape shape, bool classifier) {
    LayoutEntry e{std::move(name), offset, std::move(shape), classifier};
    offset += e.size();
    layout.push_back(std::move(e));
  };
  const std::size_t d = flat_input_size(spec);
  const std::size_t k = static_cast<std::size_t>(spec.classes);
  switch (spec.kind) {
    case ModelKind::LinearRegression:
      add("linear.weight", {1, d}, false);
      break;
    case ModelKind::SoftmaxRegression:
      add("classifier.weight", {k, d}, true);
      add("classifier.bias", {k}, true);
      break;
    case ModelKind::MLP: {
      std::size_t in = d;
      for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
        add("fc" + std::to_string(i + 1) + ".weight", {spec.hidden[i], in}, false);
        add("fc" + std::to_string(i + 1) + ".bias", {spec.hidden[i]}, false);
        in = spec.hidden[i];
      }
      add("classifier.weight", {k, in}, true);
      add("classifier.bias", {k}, true);
      break;
    }
    case ModelKind::SmallCNN: {
      const auto g = cnn_geometry(spec);
      std::size_t in = spec.input_shape[0];
      for (std::size_t i = 0; i < spec.channels.size(); ++i) {
        const std::string n = std::to_string(i + 1);
        add("conv" + n + ".weight", {spec.channels[i], in, kConvKernel, kConvKernel}, false);
        add("bn" + n + ".weight", {spec.channels[i]}, false);
        add("bn" + n + ".bias", {spec.channels[i]}, false);
        in = spec.channels[i];
      }
      add("classifier.weight", {k, in * g.height.back() * g.width.back()}, true);
      add("classifier.bias", {k}, true);
      break;
    }
  }
  return layout;
}

const LayoutEntry& Checkpoint::entry(std::string_view name) const {
  for (const auto& e : layout) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("checkpoint has no parameter '" + std::string(name) + "'");
}

std::span<double> Checkpoint::slice(std::string_view name) {
  const auto& e = entry(name);
  return std::span<double>(parameters).subspan(e.offset, e.size());
}

std::span<const double> Checkpoint::slice(std::string_view name) const {
  const auto& e = entry(name);
  return std::span<const double>(parameters).subspan(e.offset, e.size());
}

std::vector<std::size_t> Checkpoint::classifier_indices() const {
  std::vector<std::size_t> out;
  for (const auto& e : layout) {
    if (!e.classifier) continue;
    for (std::size_t i = e.offset; i < e.end(); ++i) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Checkpoint::maskable_indices() const {
  std::vector<std::size_t> out;
  for (const auto& e : layout) {
    if (e.classifier) continue;
    for (std::size_t i = e.offset; i < e.end(); ++i) out.push_back(i);
  }
  return out;
}

void Checkpoint::validate() const {
  std::size_t expected = 0;
  for (const auto& e : layout) {
    if (e.offset != expected) throw std::invalid_argument("layout entry '" + e.name + "' does not start where the previous one ends");
    expected = e.end();
  }
  if (expected != parameters.size()) {
    throw std::invalid_argument("layout covers " + std::to_string(expected) + " parameters but checkpoint holds " +
                                std::to_string(parameters.size()));
  }
  if (layout != make_layout(spec)) throw std::invalid_argument("layout does not match the model spec");
  const std::size_t bn_layers = spec.kind == ModelKind::SmallCNN ? spec.channels.size() : 0;
  if (batchnorm.size() != bn_layers) throw std::invalid_argument("BatchNorm state count does not match the model");
  for (std::size_t i = 0; i < batchnorm.size(); ++i) {
    if (batchnorm[i].running_mean.size() != spec.channels[i] || batchnorm[i].running_var.size() != spec.channels[i]) {
      throw std::invalid_argument("BatchNorm state " + std::to_string(i + 1) + " has the wrong channel count");
    }
  }
}

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) {
  auto same = [](const std::vector<double>& x, const std::vector<double>& y) {
    return x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
  };
  if (!(a.spec == b.spec) || a.layout != b.layout || !(a.meta == b.meta)) return false;
  if (!same(a.parameters, b.parameters) || a.batchnorm.size() != b.batchnorm.size()) return false;
  for (std::size_t i = 0; i < a.batchnorm.size(); ++i) {
    if (!same(a.batchnorm[i].running_mean, b.batchnorm[i].running_mean) ||
        !same(a.batchnorm[i].running_var, b.batchnorm[i].running_var)) {
      return false;
    }
  }
  return true;
}

Checkpoint initialize(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.classes < 1) throw std::invalid_argument("model needs at least one class");
  Checkpoint c;
  c.spec = spec;
  c.layout = make_layout(spec);
  c.parameters.assign(c.layout.back().end(), 0.0);
  c.meta.seed = seed;
  auto rng = make_rng(seed, {0x696e6974ull});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& e : c.layout) {
    auto w = c.slice(e.name);
    const bool is_weight = e.name.ends_with(".weight");
    if (e.name.starts_with("bn")) {
      if (is_weight) std::fill(w.begin(), w.end(), 1.0);
      continue;
    }
    if (!is_weight) continue;
    const std::size_t fan_in = e.size() / e.shape[0];
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    if (e.classifier) stddev = std::sqrt(1.0 / static_cast<double>(fan_in));
    if (spec.kind == ModelKind::LinearRegression) stddev = 0.0;
    if (spec.kind == ModelKind::SoftmaxRegression) stddev = 0.01;
    for (double& v : w) v = stddev * normal(rng);
  }
  if (spec.kind == ModelKind::SmallCNN) {
    for (auto ch : spec.channels) c.batchnorm.push_back(BatchNormStats::fresh(ch));
  }
  return c;
}

BoundModel::BoundModel(Tape& tape, const Checkpoint& checkpoint, bool requires_grad)
    : tape_(tape), checkpoint_(checkpoint), batchnorm_(checkpoint.batchnorm) {
  params_.reserve(checkpoint.layout.size());
  for (const auto& e : checkpoint.layout) {
    auto values = checkpoint.slice(e.name);
    Tensor t(e.shape, std::vector<double>(values.begin(), values.end()));
    params_.push_back(requires_grad ? tape.variable(std::move(t)) : tape.constant(std::move(t)));
  }
}

Var BoundModel::forward(const Tensor& inputs, Mode mode, ActivationTrace* trace) {
  const ModelSpec& spec = checkpoint_.spec;
  if (inputs.rank() < 2) throw ShapeError("forward expects a batch [N, ...], got " + shape_string(inputs.shape()));
  const std::size_t n = inputs.dim(0);
  const Shape sample(inputs.shape().begin() + 1, inputs.shape().end());
  if (numel(sample) != flat_input_size(spec)) {
    throw ShapeError("model expects samples of shape " + shape_string(spec.input_shape) + ", got " + shape_string(sample));
  }
  if (spec.kind != ModelKind::SmallCNN) {
    Var x = tape_.constant(inputs.reshaped(Shape{n, flat_input_size(spec)}));
    if (spec.kind == ModelKind::LinearRegression) return ops::linear(x, param(0), std::nullopt);
    std::size_t p = 0;
    if (spec.kind == ModelKind::MLP) {
      for (std::size_t i = 0; i < spec.hidden.size(); ++i, p += 2) {
        x = ops::relu(ops::linear(x, param(p), param(p + 1)));
      }
    }
    return ops::linear(x, param(p), param(p + 1));
  }

  if (sample != spec.input_shape) {
    throw ShapeError("SmallCNN expects samples of shape " + shape_string(spec.input_shape) + ", got " + shape_string(sample));
  }
  Var x = tape_.constant(inputs);
  const bool training = mode == Mode::Train;
  for (std::size_t block = 0; block < spec.channels.size(); ++block) {
    Var conv = ops::conv2d(x, param(3 * block), std::nullopt, {1, spec.conv_padding});
    Var bn = ops::batchnorm2d(conv, param(3 * block + 1), param(3 * block + 2), batchnorm_[block], training);
    Var act = ops::relu(bn);
    if (trace) {
      trace->pre_bn.push_back(conv.value());
      trace->post_relu.push_back(act.value());
    }
    x = ops::maxpool2d(act, kPool);
  }
  const std::size_t p = 3 * spec.channels.size();
  return ops::linear(ops::flatten(x), param(p), param(p + 1));
}

Var BoundModel::loss(Var output, const DatasetSplit& data, std::span<const std::size_t> rows) const {
  if (checkpoint_.spec.kind == ModelKind::LinearRegression) {
    std::vector<double> y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      y[i] = data.targets.empty() ? static_cast<double>(data.labels[rows[i]]) : data.targets[rows[i]];
    }
    return ops::half_squared_error(output, y);
  }
  const auto labels = data.gather_labels(rows);
  return ops::softmax_cross_entropy(output, labels);
}

std::vector<double> BoundModel::flat_gradient() const {
  std::vector<double> g(checkpoint_.parameters.size(), 0.0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto part = tape_.grad(params_[i]);
    std::copy(part.begin(), part.end(), g.begin() + static_cast<std::ptrdiff_t>(checkpoint_.layout[i].offset));
  }
  return g;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(initial_lr > 0.0)) throw std::invalid_argument("train config: initial_lr must be positive");
  if (!(decay_factor > 0.0)) throw std::invalid_argument("train config: decay_factor must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train config: momentum must lie in [0,1)");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] >= epochs) throw std::invalid_argument("train config: decay epoch " + std::to_string(decay_epochs[i]) + " not below epochs");
    if (i && decay_epochs[i] <= decay_epochs[i - 1]) throw std::invalid_argument("train config: decay_epochs must be strictly increasing");
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double lr = initial_lr;
  for (auto e : decay_epochs) {
    if (epoch > e) lr /= decay_factor;
  }
  return lr;
}

SgdMomentum::SgdMomentum(std::size_t parameter_count, double momentum)
    : velocity_(parameter_count, 0.0), momentum_(momentum) {}

void SgdMomentum::step(std::vector<double>& parameters, std::span<const double> gradient, double lr,
                       const std::vector<bool>* frozen) {
  for (std::size_t i = 0; i < parameters.size(); ++i) {
    if (frozen && (*frozen)[i]) continue;
    velocity_[i] = momentum_ * velocity_[i] + gradient[i];
    parameters[i] -= lr * velocity_[i];
  }
}

double train_epoch(Checkpoint& checkpoint, const DatasetSplit& data, std::size_t batch_size, double lr,
                   SgdMomentum& optimizer, std::uint64_t seed, std::size_t epoch, const std::vector<bool>* frozen) {
  const std::size_t n = data.size();
  if (n == 0) throw std::invalid_argument("train_epoch: empty dataset");
  const bool has_bn = checkpoint.spec.kind == ModelKind::SmallCNN;
  if (has_bn && n < 2) throw std::invalid_argument("train_epoch: BatchNorm training needs at least 2 samples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, {0x73687566ull, epoch});
  std::shuffle(order.begin(), order.end(), rng);

  double total = 0.0;
  for (std::size_t start = 0; start < n;) {
    std::size_t end = std::min(n, start + batch_size);
    if (has_bn && n - end == 1) end = n;  // never leave a single-sample batch for BatchNorm
    const std::span<const std::size_t> rows(order.data() + start, end - start);
    Tape tape;
    BoundModel model(tape, checkpoint, true);
    Var out = model.forward(data.gather_inputs(rows), Mode::Train);
    Var loss = model.loss(out, data, rows);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " (loss " + std::to_string(value) +
                             ", lr " + std::to_string(lr) + ")");
    }
    tape.backward(loss);
    const auto grad = model.flat_gradient();
    optimizer.step(checkpoint.parameters, grad, lr, frozen);
    checkpoint.batchnorm = model.batchnorm();
    total += value * static_cast<double>(rows.size());
    start = end;
  }
  return total / static_cast<double>(n);
}

TrainResult train_iterative(const ModelSpec& spec, const DatasetSplit& data, const TrainConfig& config,
                            const DatasetSplit* test) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult result{initialize(spec, config.seed), {}};
  result.checkpoint.meta.dataset_id = data.name;
  SgdMomentum optimizer(result.checkpoint.parameters.size(), config.momentum);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = config.lr_at(epoch);
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.train_loss = train_epoch(result.checkpoint, data, config.batch_size, lr, optimizer, config.seed, epoch);
    if (test && !test->empty()) log.test_accuracy = evaluate(result.checkpoint, *test).accuracy;
    result.checkpoint.meta.epochs_trained = epoch;
    result.history.push_back(log);
  }
  return result;
}

Eigen::MatrixXd design_matrix(const DatasetSplit& data) {
  const std::size_t n = data.size(), d = data.sample_size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    auto s = data.sample(i);
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s[j];
  }
  return x;
}

Eigen::VectorXd target_vector(const DatasetSplit& data) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    y(static_cast<Eigen::Index>(i)) = data.targets.empty() ? static_cast<double>(data.labels[i]) : data.targets[i];
  }
  return y;
}

TrainResult train(const ModelSpec& spec, const DatasetSplit& data, const TrainConfig& config, const DatasetSplit* test) {
  if (spec.kind != ModelKind::LinearRegression) return train_iterative(spec, data, config, test);
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult result{solve_linear_closed_form(design_matrix(data), target_vector(data)), {}};
  result.checkpoint.meta.seed = config.seed;
  result.checkpoint.meta.dataset_id = data.name;
  return result;
}

Checkpoint solve_linear_closed_form(const Eigen::MatrixXd& design, const Eigen::VectorXd& targets, double ridge) {
  if (design.rows() != targets.size()) throw std::invalid_argument("closed form: design rows and targets differ in length");
  if (!(ridge >= 0.0)) throw std::invalid_argument("closed form: ridge must be nonnegative");
  Eigen::MatrixXd gram = design.transpose() * design;
  gram.diagonal().array() += ridge;
  const Eigen::VectorXd b = design.transpose() * targets;
  const Eigen::VectorXd w = solve_symmetric(gram, b, "linear regression normal equations");
  ModelSpec spec{ModelKind::LinearRegression, {static_cast<std::size_t>(design.cols())}, 1, {}, {}, 0};
  Checkpoint c = initialize(spec, 0);
  std::copy(w.data(), w.data() + w.size(), c.parameters.begin());
  return c;
}

std::vector<double> predict(const Checkpoint& checkpoint, const DatasetSplit& data, std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(data.size());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tape tape;
    BoundModel model(tape, checkpoint, false);
    const Tensor& z = model.forward(data.gather_inputs(rows), Mode::Eval).value();
    if (checkpoint.spec.kind == ModelKind::LinearRegression) {
      out.insert(out.end(), z.data().begin(), z.data().end());
      continue;
    }
    const std::size_t k = z.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) out.push_back(static_cast<double>(argmax_row(z.data().data() + i * k, k)));
  }
  return out;
}

EvalResult evaluate(const Checkpoint& checkpoint, const DatasetSplit& data, std::size_t batch_size) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tape tape;
    BoundModel model(tape, checkpoint, false);
    const Tensor& z = model.forward(data.gather_inputs(rows), Mode::Eval).value();
    if (checkpoint.spec.kind == ModelKind::LinearRegression) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const double y = data.targets.empty() ? static_cast<double>(data.labels[rows[i]]) : data.targets[rows[i]];
        loss += 0.5 * (z[i] - y) * (z[i] - y);
        if (std::abs(z[i] - y) < 0.5) ++correct;
      }
      continue;
    }
    const std::size_t k = z.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::span<const double> logits(z.data().data() + i * k, k);
      const int y = data.labels[rows[i]];
      loss += log_loss_value(logits, y);
      if (argmax_row(logits.data(), k) == static_cast<std::size_t>(y)) ++correct;
    }
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, loss / n};
}

ActivationProfile record_activations(const Checkpoint& checkpoint, const DatasetSplit& data, ActivationSite site,
                                     std::size_t batch_size) {
  const ModelSpec& spec = checkpoint.spec;
  if (spec.kind != ModelKind::SmallCNN) {
    throw std::invalid_argument("record_activations: model kind " + std::string(to_string(spec.kind)) + " has no conv channels");
  }
  ActivationProfile profile;
  profile.site = site;
  for (std::size_t block = 0; block < spec.channels.size(); ++block) {
    const auto& e = checkpoint.entry("conv" + std::to_string(block + 1) + ".weight");
    const std::size_t per_channel = e.size() / e.shape[0];
    for (std::size_t j = 0; j < spec.channels[block]; ++j) {
      std::vector<std::size_t> idx(per_channel);
      std::iota(idx.begin(), idx.end(), e.offset + j * per_channel);
      profile.channel_params.push_back(std::move(idx));
      profile.channel_layer.push_back(block);
    }
  }
  profile.channels = profile.channel_layer.size();
  profile.sample_ids = data.ids;
  profile.labels = data.labels;
  profile.table.assign(data.size() * profile.channels, 0.0);

  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tape tape;
    BoundModel model(tape, checkpoint, false);
    ActivationTrace trace;
    model.forward(data.gather_inputs(rows), Mode::Eval, &trace);
    std::size_t channel_base = 0;
    for (std::size_t block = 0; block < spec.channels.size(); ++block) {
      const Tensor& a = site == ActivationSite::PreBatchNorm ? trace.pre_bn[block] : trace.post_relu[block];
      const std::size_t c = a.dim(1), plane = a.dim(2) * a.dim(3);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double* p = a.data().data() + (i * c + j) * plane;
          double s = 0.0;
          for (std::size_t q = 0; q < plane; ++q) s += site == ActivationSite::PreBatchNorm ? std::max(0.0, p[q]) : p[q];
          profile.table[(start + i) * profile.channels + channel_base + j] = s / static_cast<double>(plane);
        }
      }
      channel_base += c;
    }
  }
  return profile;
}

namespace {

void write_checkpoint(const Checkpoint& c, std::ostream& out) {
  detail::BinaryWriter w(out);
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(std::string(to_string(c.spec.kind)));
  w.u64s(std::vector<std::uint64_t>(c.spec.input_shape.begin(), c.spec.input_shape.end()));
  w.i32(c.spec.classes);
  w.u64s(std::vector<std::uint64_t>(c.spec.hidden.begin(), c.spec.hidden.end()));
  w.u64s(std::vector<std::uint64_t>(c.spec.channels.begin(), c.spec.channels.end()));
  w.u64(c.spec.conv_padding);
  w.u64(c.layout.size());
  for (const auto& e : c.layout) {
    w.str(e.name);
    w.u64(e.offset);
    w.u64s(std::vector<std::uint64_t>(e.shape.begin(), e.shape.end()));
    w.u32(e.classifier ? 1 : 0);
  }
  w.f64s(c.parameters);
  w.u64(c.batchnorm.size());
  for (const auto& bn : c.batchnorm) {
    w.f64s(bn.running_mean);
    w.f64s(bn.running_var);
  }
  w.u64(c.meta.seed);
  w.u64(c.meta.epochs_trained);
  w.str(c.meta.dataset_id);
}

Checkpoint read_checkpoint(std::istream& in, const std::string& origin) {
  detail::BinaryReader r(in);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError("not a checkpoint container: " + origin);
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + origin);
  Checkpoint c;
  c.spec.kind = parse_model_kind(r.str());
  auto shape = r.u64s();
  c.spec.input_shape.assign(shape.begin(), shape.end());
  c.spec.classes = r.i32();
  auto hidden = r.u64s();
  c.spec.hidden.assign(hidden.begin(), hidden.end());
  auto channels = r.u64s();
  c.spec.channels.assign(channels.begin(), channels.end());
  c.spec.conv_padding = r.u64();
  const auto entries = r.u64();
  if (entries > 1024) throw FormatError("implausible layout size in " + origin);
  for (std::uint64_t i = 0; i < entries; ++i) {
    LayoutEntry e;
    e.name = r.str();
    e.offset = r.u64();
    auto s = r.u64s();
    e.shape.assign(s.begin(), s.end());
    e.classifier = r.u32() != 0;
    c.layout.push_back(std::move(e));
  }
  c.parameters = r.f64s();
  const auto bn = r.u64();
  if (bn > 1024) throw FormatError("implausible BatchNorm layer count in " + origin);
  for (std::uint64_t i = 0; i < bn; ++i) {
    BatchNormStats s;
    s.running_mean = r.f64s();
    s.running_var = r.f64s();
    c.batchnorm.push_back(std::move(s));
  }
  c.meta.seed = r.u64();
  c.meta.epochs_trained = r.u64();
  c.meta.dataset_id = r.str();
  c.validate();
  return c;
}

}  // namespace

std::string checkpoint_fingerprint(const Checkpoint& checkpoint) {
  std::ostringstream bytes(std::ios::binary);
  write_checkpoint(checkpoint, bytes);
  return sha256_hex(bytes.str());
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  checkpoint.validate();
  std::ostringstream bytes(std::ios::binary);
  write_checkpoint(checkpoint, bytes);
  write_file_atomic(path, bytes.str());
  nlohmann::ordered_json meta;
  meta["format"] = "unlearn-checkpoint";
  meta["version"] = kCheckpointVersion;
  meta["model_kind"] = to_string(checkpoint.spec.kind);
  meta["input_shape"] = checkpoint.spec.input_shape;
  meta["classes"] = checkpoint.spec.classes;
  meta["parameter_count"] = checkpoint.parameters.size();
  meta["seed"] = checkpoint.meta.seed;
  meta["epochs_trained"] = checkpoint.meta.epochs_trained;
  meta["dataset_id"] = checkpoint.meta.dataset_id;
  meta["fingerprint"] = sha256_hex(bytes.str());
  auto& layout = meta["layout"];
  layout = nlohmann::ordered_json::array();
  for (const auto& e : checkpoint.layout) {
    layout.push_back({{"name", e.name}, {"offset", e.offset}, {"size", e.size()}, {"classifier", e.classifier}});
  }
  write_file_atomic(path.string() + ".json", meta.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(in, path.string());
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace unlearn
