#include "unlearn/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "unlearn/digest.hpp"

namespace unlearn {

namespace {

using json = nlohmann::json;

std::string type_name(const json& j) { return j.type_name(); }

// Typed access to one JSON object with dotted-path diagnostics.
class Fields {
 public:
  Fields(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + ": expected an object, got " + type_name(j));
    for (const auto& [key, value] : j.items()) {
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        throw ConfigError("unknown field '" + field(key) + "'");
      }
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  std::string str(const char* key, std::string fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_string()) throw bad(key, "a string");
    return j_[key].get<std::string>();
  }
  bool boolean(const char* key, bool fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_boolean()) throw bad(key, "true or false");
    return j_[key].get<bool>();
  }
  double number(const char* key, double fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_number()) throw bad(key, "a number");
    return j_[key].get<double>();
  }
  std::size_t count(const char* key, std::size_t fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_number_unsigned()) throw bad(key, "a nonnegative integer");
    return j_[key].get<std::size_t>();
  }
  int integer(const char* key, int fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_number_integer()) throw bad(key, "an integer");
    return j_[key].get<int>();
  }
  std::vector<std::size_t> counts(const char* key, std::vector<std::size_t> fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_array()) throw bad(key, "an array of nonnegative integers");
    std::vector<std::size_t> out;
    for (const auto& v : j_[key]) {
      if (!v.is_number_unsigned()) throw bad(key, "an array of nonnegative integers");
      out.push_back(v.get<std::size_t>());
    }
    return out;
  }
  std::vector<double> numbers(const char* key) const {
    if (!has(key)) return {};
    if (!j_[key].is_array()) throw bad(key, "an array of numbers");
    std::vector<double> out;
    for (const auto& v : j_[key]) {
      if (!v.is_number()) throw bad(key, "an array of numbers");
      out.push_back(v.get<double>());
    }
    return out;
  }

  ConfigError bad(const std::string& key, const std::string& expected) const {
    return ConfigError("field '" + field(key) + "': expected " + expected + ", got " + j_[key].dump());
  }
  ConfigError invalid(const std::string& key, const std::string& message) const {
    return ConfigError("field '" + field(key) + "': " + message);
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "field '" + path_ + "'"; }
  const json& j_;
  std::string path_;
};

Scenario parse_scenario(const std::string& name) {
  for (auto s : {Scenario::RemoveClass, Scenario::RemovePoison, Scenario::RemoveLabelNoise, Scenario::LimitedRemain,
                 Scenario::RelearnReadout, Scenario::BoundVerification}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("field 'scenario': unknown scenario '" + name + "'");
}

UnlearnConfig parse_strategy(const json& j, const std::string& path) {
  UnlearnConfig u;
  if (j.is_string()) {
    try {
      u.strategy = parse_unlearn_strategy(j.get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("field '" + path + "': " + e.what());
    }
    return u;
  }
  Fields f(j, path,
           {"strategy", "ratio", "finetune_epochs", "remain_policy", "fisher_labels", "freeze_masked", "noise",
            "newton_ridge", "tfidf_threshold", "tfidf_per_layer"});
  if (!f.has("strategy")) throw ConfigError("field '" + f.field("strategy") + "' is required");
  try {
    u.strategy = parse_unlearn_strategy(f.str("strategy", ""));
    u.fisher_labels = parse_label_mode(f.str("fisher_labels", "ObservedLabel"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("field '" + path + "': " + e.what());
  }
  u.ratio = f.number("ratio", u.ratio);
  u.finetune_epochs = f.count("finetune_epochs", u.finetune_epochs);
  u.freeze_masked = f.boolean("freeze_masked", false);
  u.newton_ridge = f.number("newton_ridge", 0.0);
  if (f.has("tfidf_threshold")) u.tfidf.threshold = f.number("tfidf_threshold", 0.0);
  u.tfidf.per_layer_normalization = f.boolean("tfidf_per_layer", true);
  if (f.has("remain_policy")) {
    const auto& p = f.at("remain_policy");
    if (p == "Full") {
      u.remain_policy = RemainPolicy::full();
    } else if (p == "None") {
      u.remain_policy = RemainPolicy::none();
    } else if (p.is_object() && p.size() == 1 && p.contains("subsample") && p["subsample"].is_number_unsigned()) {
      u.remain_policy = RemainPolicy::subsample(p["subsample"].get<std::size_t>());
    } else {
      throw f.bad("remain_policy", "\"Full\", \"None\" or {\"subsample\": count}");
    }
  }
  if (f.has("noise")) {
    Fields n(f.at("noise"), f.field("noise"), {"lambda", "sigma"});
    u.noise.lambda = n.number("lambda", 1.0);
    u.noise.sigma = n.number("sigma", 1.0);
  }
  try {
    u.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("field '" + path + "': " + e.what());
  }
  return u;
}

std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

// Every field that influences results, with defaults filled in.
json resolved_json(const ExperimentConfig& c) {
  json j;
  j["scenario"] = to_string(c.scenario);
  const auto& d = c.dataset;
  if (d.kind == DatasetConfig::Kind::Mnist) {
    j["dataset"] = {{"kind", "mnist"}, {"dir", d.dir.filename().string()}, {"standardize", d.standardize}};
  } else {
    j["dataset"] = {{"kind", "gaussians"}, {"classes", d.classes}, {"dim", d.dim}, {"per_class", d.per_class},
                    {"test_per_class", d.test_per_class}, {"separation", d.separation}};
  }
  j["dataset"]["forget_class"] = d.forget_class;
  if (c.scenario == Scenario::RemovePoison) {
    j["dataset"]["poison"] = {{"count", d.poison_count}, {"trigger_size", d.trigger_size}, {"target", d.poison_target}};
  }
  if (c.scenario == Scenario::RemoveLabelNoise) j["dataset"]["label_noise"] = d.label_noise;
  j["model"] = {{"kind", to_string(c.model.kind)}, {"hidden", c.model.hidden}, {"channels", c.model.channels},
                {"conv_padding", c.model.conv_padding}, {"classes", c.model.classes}, {"input_shape", c.model.input_shape}};
  j["train"] = {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"lr", c.train.initial_lr},
                {"decay_epochs", c.train.decay_epochs}, {"decay_factor", c.train.decay_factor},
                {"momentum", c.train.momentum}};
  j["strategies"] = json::array();
  for (const auto& s : c.strategies) j["strategies"].push_back(s.to_json());
  j["seeds"] = c.seeds;
  j["ratios"] = c.ratios;
  j["relearn_max_epochs"] = c.relearn_max_epochs;
  j["bound"] = {{"trials", c.bound.trials}, {"max_dim", c.bound.max_dim}};
  return j;
}

std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto& candidate : {dir / (stem + ".gz"), dir / stem}) {
    if (std::filesystem::exists(candidate)) return candidate;
  }
  throw std::runtime_error("dataset file not found: " + (dir / (stem + ".gz")).string());
}

std::string ratio_tag(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", r);
  return buf;
}

bool uses_ratio(UnlearnStrategy s) {
  return s == UnlearnStrategy::FisherMask || s == UnlearnStrategy::RandomMask || s == UnlearnStrategy::ActivationMask ||
         s == UnlearnStrategy::TfIdf;
}

std::string run_tag(const std::string& strategy, std::optional<double> ratio, std::uint64_t seed) {
  std::string tag = strategy;
  if (ratio) tag += "-r" + ratio_tag(*ratio);
  return tag + "-seed" + std::to_string(seed);
}

std::string train_key(const ExperimentConfig& config, std::uint64_t seed) {
  const json r = resolved_json(config);
  json key = {{"dataset", r["dataset"]}, {"model", r["model"]}, {"train", r["train"]}, {"seed", seed}};
  if (config.scenario == Scenario::RemovePoison || config.scenario == Scenario::RemoveLabelNoise) key["scenario"] = r["scenario"];
  return sha256_hex(key.dump()).substr(0, 16);
}

// Trains and logs one line per epoch.
Checkpoint train_model(const ModelSpec& spec, const DatasetSplit& data, const TrainConfig& config, const DatasetSplit* test,
                       std::ostream& log) {
  auto result = train(spec, data, config, test);
  for (const auto& e : result.history) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "  epoch %3zu  lr %.4g  loss %.5f", e.epoch, e.lr, e.train_loss);
    log << buf;
    if (e.test_accuracy) {
      std::snprintf(buf, sizeof buf, "  test acc %.4f", *e.test_accuracy);
      log << buf;
    }
    log << '\n';
  }
  return result.checkpoint;
}

std::filesystem::path w_star_path(const ExperimentConfig& config, std::uint64_t seed) {
  return config.output / "checkpoints" / ("w_star-seed" + std::to_string(seed) + ".ckpt");
}

Checkpoint obtain_w_star(const ExperimentConfig& config, const PreparedData& data, std::uint64_t seed, std::ostream& log) {
  const auto path = w_star_path(config, seed);
  const std::string id = data.train.name + "@" + train_key(config, seed);
  if (std::filesystem::exists(path)) {
    try {
      auto cached = load_checkpoint(path);
      if (cached.meta.dataset_id == id) {
        log << "seed " << seed << ": reusing " << path.string() << '\n';
        return cached;
      }
    } catch (const FormatError&) {
    }
  }
  TrainConfig train = config.train;
  train.seed = seed;
  log << "seed " << seed << ": training " << to_string(config.model.kind) << " on " << data.train.size() << " samples\n";
  auto result = train_model(config.model, data.train, train, &data.test, log);
  result.meta.dataset_id = id;
  save_checkpoint(result, path);
  return result;
}

template <typename Task>
void run_parallel(std::size_t count, std::size_t workers, Task task) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void write_records(const ExperimentConfig& config, const std::vector<RunRecord>& records, std::ostream& log) {
  std::string lines, timings;
  for (const auto& r : records) {
    lines += r.to_json().dump() + '\n';
    nlohmann::ordered_json t;
    t["strategy"] = r.strategy;
    t["ratio"] = r.ratio;
    t["seed"] = r.seed;
    t["wall_seconds"] = r.wall_seconds;
    timings += t.dump() + '\n';
  }
  write_file_atomic(config.output / "runs.jsonl", lines);
  write_file_atomic(config.output / "timings.jsonl", timings);
  const auto rows = aggregate(records);
  write_file_atomic(config.output / "summary.csv", aggregate_csv(rows));
  log << format_table(rows);
  for (const auto& r : records) {
    if (r.error) log << "rejected: " << r.strategy << " seed " << r.seed << ": " << *r.error << '\n';
  }
}

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(v.size()));
  return m;
}

}  // namespace

std::string_view to_string(Scenario scenario) {
  switch (scenario) {
    case Scenario::RemoveClass: return "RemoveClass";
    case Scenario::RemovePoison: return "RemovePoison";
    case Scenario::RemoveLabelNoise: return "RemoveLabelNoise";
    case Scenario::LimitedRemain: return "LimitedRemain";
    case Scenario::RelearnReadout: return "RelearnReadout";
    case Scenario::BoundVerification: return "BoundVerification";
  }
  return "?";
}

std::string ExperimentConfig::hash() const { return sha256_hex(resolved_json(*this).dump()); }

ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, column] = line_column(text, e.byte);
    std::string detail = e.what();
    if (const auto pos = detail.find("syntax error"); pos != std::string::npos) detail = detail.substr(pos);
    throw ConfigError("JSON syntax error at line " + std::to_string(line) + ", column " + std::to_string(column) + ": " +
                      detail);
  }
  ExperimentConfig c;
  c.source = doc;
  Fields top(doc, "",
             {"scenario", "dataset", "model", "train", "strategies", "seeds", "ratios", "relearn_max_epochs", "workers",
              "bound", "output"});
  c.scenario = parse_scenario(top.str("scenario", "RemoveClass"));

  if (top.has("dataset")) {
    Fields d(top.at("dataset"), "dataset",
             {"kind", "dir", "standardize", "forget_class", "poison_count", "trigger_size", "poison_target", "label_noise",
              "classes", "dim", "per_class", "test_per_class", "separation"});
    const auto kind = d.str("kind", "mnist");
    if (kind == "mnist") {
      c.dataset.kind = DatasetConfig::Kind::Mnist;
    } else if (kind == "gaussians") {
      c.dataset.kind = DatasetConfig::Kind::Gaussians;
    } else {
      throw d.invalid("kind", "expected \"mnist\" or \"gaussians\", got \"" + kind + "\"");
    }
    c.dataset.dir = d.str("dir", "");
    c.dataset.standardize = d.boolean("standardize", true);
    c.dataset.forget_class = d.integer("forget_class", 0);
    c.dataset.poison_count = d.count("poison_count", 200);
    c.dataset.trigger_size = d.count("trigger_size", 4);
    c.dataset.poison_target = d.integer("poison_target", 0);
    c.dataset.label_noise = d.number("label_noise", 0.1);
    c.dataset.classes = d.integer("classes", 10);
    c.dataset.dim = d.count("dim", 20);
    c.dataset.per_class = d.count("per_class", 100);
    c.dataset.test_per_class = d.count("test_per_class", 50);
    c.dataset.separation = d.number("separation", 3.0);
    if (c.dataset.label_noise < 0.0 || c.dataset.label_noise > 1.0) throw d.invalid("label_noise", "must lie in [0,1]");
  }
  if (c.dataset.kind == DatasetConfig::Kind::Mnist && c.scenario != Scenario::BoundVerification) {
    if (c.dataset.dir.empty()) throw ConfigError("field 'dataset.dir' is required for MNIST data");
    if (c.dataset.dir.is_relative() && !base_dir.empty()) c.dataset.dir = base_dir / c.dataset.dir;
  }

  c.model.input_shape = c.dataset.kind == DatasetConfig::Kind::Mnist ? Shape{1, 28, 28} : Shape{c.dataset.dim};
  c.model.classes = c.dataset.kind == DatasetConfig::Kind::Mnist ? 10 : c.dataset.classes;
  if (top.has("model")) {
    Fields m(top.at("model"), "model", {"kind", "hidden", "channels", "conv_padding"});
    try {
      c.model.kind = parse_model_kind(m.str("kind", "SmallCNN"));
    } catch (const std::invalid_argument& e) {
      throw m.invalid("kind", e.what());
    }
    c.model.hidden = m.counts("hidden", c.model.hidden);
    c.model.channels = m.counts("channels", c.model.channels);
    c.model.conv_padding = m.count("conv_padding", c.model.conv_padding);
  }
  if (c.model.kind == ModelKind::SmallCNN && c.model.input_shape.size() != 3) {
    throw ConfigError("field 'model.kind': SmallCNN needs image data");
  }
  if (c.model.kind == ModelKind::LinearRegression) c.model.classes = 1;

  if (top.has("train")) {
    Fields t(top.at("train"), "train", {"epochs", "batch_size", "lr", "decay_epochs", "decay_factor", "momentum"});
    c.train.epochs = t.count("epochs", c.train.epochs);
    c.train.batch_size = t.count("batch_size", c.train.batch_size);
    c.train.initial_lr = t.number("lr", c.train.initial_lr);
    c.train.decay_epochs = t.counts("decay_epochs", {});
    c.train.decay_factor = t.number("decay_factor", c.train.decay_factor);
    c.train.momentum = t.number("momentum", c.train.momentum);
    try {
      c.train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("field 'train': ") + e.what());
    }
  }

  if (top.has("strategies")) {
    const auto& list = top.at("strategies");
    if (!list.is_array()) throw top.bad("strategies", "an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      c.strategies.push_back(parse_strategy(list[i], "strategies[" + std::to_string(i) + "]"));
    }
  }
  if (c.strategies.empty() && c.scenario != Scenario::BoundVerification) {
    throw ConfigError("field 'strategies': at least one strategy is required");
  }
  if (top.has("seeds")) {
    const auto& s = top.at("seeds");
    if (!s.is_array()) throw top.bad("seeds", "an array of nonnegative integers");
    c.seeds.clear();
    for (const auto& v : s) {
      if (!v.is_number_unsigned()) throw top.bad("seeds", "an array of nonnegative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
    if (c.seeds.empty()) throw top.invalid("seeds", "must not be empty");
  }
  c.ratios = top.numbers("ratios");
  for (double r : c.ratios) {
    if (!(r > 0.0 && r < 1.0)) throw top.invalid("ratios", "every ratio must lie in (0,1)");
  }
  c.relearn_max_epochs = top.count("relearn_max_epochs", c.relearn_max_epochs);
  c.workers = std::max<std::size_t>(1, top.count("workers", 1));
  if (top.has("bound")) {
    Fields b(top.at("bound"), "bound", {"trials", "max_dim"});
    c.bound.trials = b.count("trials", c.bound.trials);
    c.bound.max_dim = b.count("max_dim", c.bound.max_dim);
  }
  c.output = top.str("output", "");
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_experiment_config(buffer.str(), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t seed) {
  const auto& d = config.dataset;
  PreparedData p;
  if (d.kind == DatasetConfig::Kind::Mnist) {
    p.train = load_mnist_idx(find_idx(d.dir, "train-images-idx3-ubyte"), find_idx(d.dir, "train-labels-idx1-ubyte"));
    p.test = load_mnist_idx(find_idx(d.dir, "t10k-images-idx3-ubyte"), find_idx(d.dir, "t10k-labels-idx1-ubyte"));
    p.train.name = "mnist-train";
    p.test.name = "mnist-test";
    if (d.standardize) {
      standardize(p.train, kMnistMean, kMnistStd);
      standardize(p.test, kMnistMean, kMnistStd);
    }
  } else {
    // One draw split into train and test so both share the class centres.
    auto all = make_synthetic_gaussians(d.classes, d.dim, d.per_class + d.test_per_class, d.separation, seed);
    std::vector<std::size_t> train_rows, test_rows;
    const std::size_t block = d.per_class + d.test_per_class;
    for (std::size_t i = 0; i < all.size(); ++i) (i % block < d.per_class ? train_rows : test_rows).push_back(i);
    p.train = all.select(train_rows);
    p.test = all.select(test_rows);
    p.train.name = "gaussians-train";
    p.test.name = "gaussians-test";
    if (config.model.kind == ModelKind::LinearRegression) {
      for (auto* split : {&p.train, &p.test}) {
        split->targets.assign(split->labels.begin(), split->labels.end());
      }
    }
  }

  switch (config.scenario) {
    case Scenario::RemovePoison: {
      auto poisoned = inject_backdoor(p.train, d.poison_count, d.trigger_size, d.poison_target, seed);
      p.train = std::move(poisoned.dataset);
      p.forget = ForgetSpec::by_ids(std::move(poisoned.affected_ids));
      p.eval = {p.test, split_forget(p.train, p.forget).forget};
      break;
    }
    case Scenario::RemoveLabelNoise: {
      auto noised = inject_label_noise(p.train, d.label_noise, seed);
      p.train = std::move(noised.dataset);
      p.forget = ForgetSpec::by_ids(std::move(noised.affected_ids));
      p.eval = {p.test, split_forget(p.train, p.forget).forget};
      break;
    }
    default:
      p.forget = ForgetSpec::whole_class(d.forget_class);
      p.eval = class_eval_sets(p.test, d.forget_class);
      break;
  }
  if (p.eval.forget.empty()) throw std::invalid_argument("scenario produced an empty forget evaluation set");
  return p;
}

nlohmann::ordered_json RunRecord::to_json() const {
  nlohmann::ordered_json j;
  j["schema"] = kRunRecordSchemaVersion;
  j["config_hash"] = config_hash;
  j["scenario"] = to_string(scenario);
  j["seed"] = seed;
  j["strategy"] = strategy;
  j["ratio"] = ratio;
  j["status"] = error ? "rejected" : "ok";
  if (error) {
    j["error"] = *error;
    return j;
  }
  j["best_epoch"] = report.per_epoch.empty() ? 0 : report.best().epoch;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : report.per_epoch) {
    j["epochs"].push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"remain_acc", e.remain_acc}, {"forget_acc", e.forget_acc},
                           {"unlearn_score", e.unlearn_score}});
  }
  j["remain_fluctuation"] = report.remain_fluctuation ? nlohmann::ordered_json(*report.remain_fluctuation) : nlohmann::ordered_json();
  j["forget_fluctuation"] = report.forget_fluctuation ? nlohmann::ordered_json(*report.forget_fluctuation) : nlohmann::ordered_json();
  if (report.relearn_epochs) {
    j["relearn_epochs"] = *report.relearn_epochs;
    j["relearn_converged"] = report.relearn_converged;
  }
  j["config"] = report.config;
  j["artifacts"] = {{"checkpoint", checkpoint_path.generic_string()},
                    {"mask", mask_path.generic_string()},
                    {"csv", csv_path.generic_string()}};
  return j;
}

std::vector<std::filesystem::path> cmd_train(const ExperimentConfig& config, std::ostream& log) {
  std::vector<std::filesystem::path> paths;
  for (auto seed : config.seeds) {
    const auto data = prepare_data(config, seed);
    const auto w = obtain_w_star(config, data, seed, log);
    const auto eval = evaluate(w, data.test);
    char buf[96];
    std::snprintf(buf, sizeof buf, "seed %llu: test accuracy %.4f, loss %.5f\n", static_cast<unsigned long long>(seed),
                  eval.accuracy, eval.loss);
    log << buf;
    paths.push_back(w_star_path(config, seed));
  }
  return paths;
}

std::vector<RunRecord> cmd_unlearn(const ExperimentConfig& config, std::ostream& log) {
  std::vector<PreparedData> data;
  std::vector<Checkpoint> w_stars;
  for (auto seed : config.seeds) {
    data.push_back(prepare_data(config, seed));
    w_stars.push_back(obtain_w_star(config, data.back(), seed, log));
  }
  std::vector<std::optional<double>> blocks;
  if (config.ratios.empty()) {
    blocks.push_back(std::nullopt);
  } else {
    for (double r : config.ratios) blocks.emplace_back(r);
  }

  struct Task {
    std::optional<double> ratio;
    std::size_t strategy;
    std::size_t seed_index;
  };
  std::vector<Task> tasks;
  for (const auto& block : blocks) {
    for (std::size_t s = 0; s < config.strategies.size(); ++s) {
      for (std::size_t k = 0; k < config.seeds.size(); ++k) tasks.push_back({block, s, k});
    }
  }

  const std::string hash = config.hash();
  std::vector<RunRecord> records(tasks.size());
  std::mutex log_mutex;
  run_parallel(tasks.size(), config.workers, [&](std::size_t i) {
    const auto& task = tasks[i];
    const auto start = std::chrono::steady_clock::now();
    UnlearnConfig u = config.strategies[task.strategy];
    const std::uint64_t seed = config.seeds[task.seed_index];
    u.seed = seed;
    if (task.ratio) u.ratio = *task.ratio;
    RunRecord& r = records[i];
    r.config_hash = hash;
    r.scenario = config.scenario;
    r.seed = seed;
    r.strategy = std::string(to_string(u.strategy));
    r.ratio = task.ratio ? *task.ratio : (uses_ratio(u.strategy) ? u.ratio : 0.0);
    const auto& d = data[task.seed_index];
    try {
      auto result = run_unlearn(w_stars[task.seed_index], d.train, d.forget, config.train, u, d.eval);
      const std::filesystem::path dir = std::filesystem::path("runs") / run_tag(r.strategy, task.ratio, seed);
      r.report = std::move(result.report);
      r.checkpoint_path = dir / "unlearned.ckpt";
      r.csv_path = dir / "trajectory.csv";
      save_checkpoint(result.checkpoint, config.output / r.checkpoint_path);
      write_file_atomic(config.output / r.csv_path, report_csv(r.report));
      write_file_atomic(config.output / dir / "report.jsonl", report_jsonl(r.report));
      if (result.mask) {
        r.mask_path = dir / "mask.json";
        write_file_atomic(config.output / r.mask_path, to_json(*result.mask).dump() + "\n");
      }
    } catch (const std::invalid_argument& e) {
      r.error = e.what();
    }
    r.wall_seconds = seconds_since(start);
    std::lock_guard lock(log_mutex);
    char buf[200];
    if (r.error) {
      std::snprintf(buf, sizeof buf, "%-15s seed %llu: rejected\n", r.strategy.c_str(), static_cast<unsigned long long>(seed));
    } else {
      const auto& first = r.report.per_epoch.front();
      const auto& best = r.report.best();
      std::snprintf(buf, sizeof buf,
                    "%-15s ratio %-5g seed %llu: mask-only remain %.3f forget %.3f | best epoch %zu remain %.3f forget %.3f (%.1fs)\n",
                    r.strategy.c_str(), r.ratio, static_cast<unsigned long long>(seed), first.remain_acc, first.forget_acc,
                    best.epoch, best.remain_acc, best.forget_acc, r.wall_seconds);
    }
    log << buf;
  });
  write_records(config, records, log);
  return records;
}

std::vector<std::filesystem::path> cmd_sweep_ratio(const ExperimentConfig& config, const std::vector<double>& ratios,
                                                   std::ostream& log) {
  if (ratios.empty()) throw std::invalid_argument("sweep-ratio: the ratio list is empty");
  for (double r : ratios) {
    if (!(r > 0.0 && r < 1.0)) throw std::invalid_argument("sweep-ratio: ratio " + ratio_tag(r) + " outside (0,1)");
  }
  UnlearnConfig base;
  base.strategy = UnlearnStrategy::FisherMask;
  for (const auto& s : config.strategies) {
    if (s.strategy == UnlearnStrategy::FisherMask) base = s;
  }
  std::vector<std::filesystem::path> paths;
  std::map<double, std::map<std::size_t, std::vector<double>>> remain_by_epoch;
  for (auto seed : config.seeds) {
    const auto data = prepare_data(config, seed);
    const auto w = obtain_w_star(config, data, seed, log);
    for (double r : ratios) {
      UnlearnConfig u = base;
      u.ratio = r;
      u.seed = seed;
      const auto result = run_unlearn(w, data.train, data.forget, config.train, u, data.eval);
      const auto path = config.output / "sweep" / ("fisher-r" + ratio_tag(r) + "-seed" + std::to_string(seed) + ".csv");
      write_file_atomic(path, report_csv(result.report));
      paths.push_back(path);
      for (const auto& e : result.report.per_epoch) remain_by_epoch[r][e.epoch].push_back(e.remain_acc);
      char buf[160];
      std::snprintf(buf, sizeof buf, "ratio %-5g seed %llu: remain %.3f (epoch 0) -> %.3f (best), forget %.3f (best)\n", r,
                    static_cast<unsigned long long>(seed), result.report.per_epoch.front().remain_acc,
                    result.report.best().remain_acc, result.report.best().forget_acc);
      log << buf;
    }
  }
  std::ostringstream summary;
  summary << "# schema " << kReportSchemaVersion << "\nratio,epoch,remain_acc_mean,remain_acc_std\n";
  for (const auto& [r, epochs] : remain_by_epoch) {
    for (const auto& [e, values] : epochs) {
      const auto m = mean_std(values);
      summary << ratio_tag(r) << ',' << e << ',' << m.mean << ',' << m.std << '\n';
    }
  }
  write_file_atomic(config.output / "sweep" / "summary.csv", summary.str());
  return paths;
}

std::vector<RunRecord> cmd_relearn(const ExperimentConfig& config, std::ostream& log) {
  const std::string hash = config.hash();
  std::vector<RunRecord> records;
  for (auto seed : config.seeds) {
    const auto data = prepare_data(config, seed);
    const auto w = obtain_w_star(config, data, seed, log);
    const auto forget = split_forget(data.train, data.forget).forget;
    const double reference = evaluate(w, forget).loss;
    TrainConfig train = config.train;
    train.seed = seed;
    auto add = [&](const std::string& name, double ratio, UnlearnReport report, const Checkpoint& start) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto relearn = relearn_time(start, data.train, forget, reference, train, config.relearn_max_epochs);
      RunRecord r;
      r.config_hash = hash;
      r.scenario = config.scenario;
      r.seed = seed;
      r.strategy = name;
      r.ratio = ratio;
      r.report = std::move(report);
      r.report.relearn_epochs = relearn.epochs;
      r.report.relearn_converged = relearn.converged;
      r.wall_seconds = seconds_since(t0);
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-18s seed %llu: relearn %zu epochs%s (reference loss %.5f)\n", name.c_str(),
                    static_cast<unsigned long long>(seed), relearn.epochs, relearn.converged ? "" : " (cap reached)", reference);
      log << buf;
      records.push_back(std::move(r));
    };
    for (const auto& s : config.strategies) {
      UnlearnConfig u = s;
      u.seed = seed;
      try {
        auto result = run_unlearn(w, data.train, data.forget, config.train, u, data.eval);
        add(std::string(to_string(u.strategy)), uses_ratio(u.strategy) ? u.ratio : 0.0, std::move(result.report), result.checkpoint);
      } catch (const std::invalid_argument& e) {
        RunRecord r;
        r.config_hash = hash;
        r.scenario = config.scenario;
        r.seed = seed;
        r.strategy = std::string(to_string(u.strategy));
        r.error = e.what();
        records.push_back(std::move(r));
      }
    }
    // Retrain from scratch: a fresh initialization with a different seed.
    const auto fresh = initialize(config.model, seed + 7919);
    UnlearnReport report;
    report.strategy = "RetrainFromScratch";
    EpochRecord e0;
    e0.remain_acc = evaluate(fresh, data.eval.remain).accuracy;
    e0.forget_acc = evaluate(fresh, data.eval.forget).accuracy;
    e0.unlearn_score = unlearn_score(e0.remain_acc, e0.forget_acc);
    report.per_epoch.push_back(e0);
    report.finalize();
    add("RetrainFromScratch", 0.0, std::move(report), fresh);
  }
  write_records(config, records, log);
  return records;
}

BoundSweep cmd_verify_bound(std::size_t trials, std::size_t max_dim, std::uint64_t seed,
                            const std::optional<std::filesystem::path>& out, std::ostream& log) {
  const auto sweep = verify_bound_sweep(trials, max_dim, seed);
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu/%zu hold\nmax lhs/rhs %.15g (trial seed %llu)\n", sweep.held, sweep.trials,
                sweep.max_ratio, static_cast<unsigned long long>(sweep.tightest_seed));
  log << buf;
  log << "tightest instance: " << sweep.tightest.to_json().dump() << '\n';
  if (out) {
    nlohmann::ordered_json j;
    j["schema"] = kRunRecordSchemaVersion;
    j["trials"] = sweep.trials;
    j["held"] = sweep.held;
    j["max_dim"] = max_dim;
    j["seed"] = seed;
    j["max_ratio"] = sweep.max_ratio;
    j["tightest_seed"] = sweep.tightest_seed;
    j["tightest"] = sweep.tightest.to_json();
    write_file_atomic(*out / "bound.json", j.dump(2) + "\n");
  }
  return sweep;
}

std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& records) {
  std::vector<AggregateRow> rows;
  std::vector<std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    if (r.error || r.report.per_epoch.empty()) continue;
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& a) { return a.strategy == r.strategy && a.ratio == r.ratio; });
    if (it == rows.end()) {
      rows.push_back({});
      rows.back().strategy = r.strategy;
      rows.back().ratio = r.ratio;
      groups.emplace_back();
      it = rows.end() - 1;
    }
    groups[static_cast<std::size_t>(it - rows.begin())].push_back(&r);
  }
  for (std::size_t g = 0; g < rows.size(); ++g) {
    std::vector<double> mr, mf, ms, br, bf, bs, be, rl;
    for (const auto* r : groups[g]) {
      const auto& first = r->report.per_epoch.front();
      const auto& best = r->report.best();
      mr.push_back(first.remain_acc);
      mf.push_back(first.forget_acc);
      ms.push_back(first.unlearn_score);
      br.push_back(best.remain_acc);
      bf.push_back(best.forget_acc);
      bs.push_back(best.unlearn_score);
      be.push_back(static_cast<double>(best.epoch));
      if (r->report.relearn_epochs) rl.push_back(static_cast<double>(*r->report.relearn_epochs));
    }
    auto& row = rows[g];
    row.runs = groups[g].size();
    auto set = [](const std::vector<double>& v, double& mean, double& sd) {
      const auto m = mean_std(v);
      mean = m.mean;
      sd = m.std;
    };
    set(mr, row.mask_remain_mean, row.mask_remain_std);
    set(mf, row.mask_forget_mean, row.mask_forget_std);
    set(ms, row.mask_score_mean, row.mask_score_std);
    set(br, row.remain_mean, row.remain_std);
    set(bf, row.forget_mean, row.forget_std);
    set(bs, row.score_mean, row.score_std);
    set(be, row.epochs_mean, row.epochs_std);
    if (!rl.empty()) {
      const auto m = mean_std(rl);
      row.relearn_mean = m.mean;
      row.relearn_std = m.std;
    }
  }
  return rows;
}

std::string format_table(const std::vector<AggregateRow>& rows) {
  std::ostringstream out;
  char buf[320];
  std::snprintf(buf, sizeof buf, "%-20s %-6s %-4s | %-12s %-12s %-12s | %-12s %-12s %-12s %-10s %s\n", "strategy", "ratio",
                "runs", "remain%", "forget%", "score%", "remain%", "forget%", "score%", "epochs", "relearn");
  out << "mask only (left) / with fine-tuning (right), mean ± population std\n" << buf;
  auto pct = [](double m, double s) {
    char b[32];
    std::snprintf(b, sizeof b, "%.1f±%.1f", 100.0 * m, 100.0 * s);
    return std::string(b);
  };
  for (const auto& r : rows) {
    char ep[32], rl[32] = "-";
    std::snprintf(ep, sizeof ep, "%.1f±%.1f", r.epochs_mean, r.epochs_std);
    if (r.relearn_mean) std::snprintf(rl, sizeof rl, "%.1f±%.1f", *r.relearn_mean, *r.relearn_std);
    std::snprintf(buf, sizeof buf, "%-20s %-6g %-4zu | %-12s %-12s %-12s | %-12s %-12s %-12s %-10s %s\n", r.strategy.c_str(),
                  r.ratio, r.runs, pct(r.mask_remain_mean, r.mask_remain_std).c_str(),
                  pct(r.mask_forget_mean, r.mask_forget_std).c_str(), pct(r.mask_score_mean, r.mask_score_std).c_str(),
                  pct(r.remain_mean, r.remain_std).c_str(), pct(r.forget_mean, r.forget_std).c_str(),
                  pct(r.score_mean, r.score_std).c_str(), ep, rl);
    out << buf;
  }
  return out.str();
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
  std::ostringstream out;
  out << "# schema " << kRunRecordSchemaVersion << '\n';
  out << "strategy,ratio,runs,mask_remain_mean,mask_remain_std,mask_forget_mean,mask_forget_std,mask_score_mean,"
         "mask_score_std,remain_mean,remain_std,forget_mean,forget_std,score_mean,score_std,epochs_mean,epochs_std,"
         "relearn_mean,relearn_std\n";
  for (const auto& r : rows) {
    out << r.strategy << ',' << r.ratio << ',' << r.runs << ',' << r.mask_remain_mean << ',' << r.mask_remain_std << ','
        << r.mask_forget_mean << ',' << r.mask_forget_std << ',' << r.mask_score_mean << ',' << r.mask_score_std << ','
        << r.remain_mean << ',' << r.remain_std << ',' << r.forget_mean << ',' << r.forget_std << ',' << r.score_mean << ','
        << r.score_std << ',' << r.epochs_mean << ',' << r.epochs_std << ',';
    if (r.relearn_mean) out << *r.relearn_mean << ',' << *r.relearn_std;
    else out << ',';
    out << '\n';
  }
  return out.str();
}

std::vector<RunRecord> read_run_records(const std::filesystem::path& output_dir) {
  const auto path = output_dir / "runs.jsonl";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("no run records at " + path.string());
  std::vector<RunRecord> records;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      if (j.at("schema").get<int>() != kRunRecordSchemaVersion) {
        throw FormatError("unsupported record schema " + j.at("schema").dump());
      }
      RunRecord r;
      r.config_hash = j.at("config_hash").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.strategy = j.at("strategy").get<std::string>();
      r.ratio = j.at("ratio").get<double>();
      r.report.strategy = r.strategy;
      if (j.at("status") == "rejected") {
        r.error = j.value("error", "");
      } else {
        for (const auto& e : j.at("epochs")) {
          r.report.per_epoch.push_back({e.at("epoch").get<std::size_t>(), e.at("lr").get<double>(),
                                        e.at("remain_acc").get<double>(), e.at("forget_acc").get<double>(),
                                        e.at("unlearn_score").get<double>()});
        }
        r.report.finalize();
        if (j.contains("relearn_epochs")) {
          r.report.relearn_epochs = j.at("relearn_epochs").get<std::size_t>();
          r.report.relearn_converged = j.at("relearn_converged").get<bool>();
        }
      }
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace unlearn
