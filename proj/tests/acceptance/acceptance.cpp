// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "gradcheck.hpp"
#include "unlearn/experiment.hpp"
#include "unlearn/fisher.hpp"
#include "unlearn/metrics.hpp"
#include "unlearn/theory.hpp"
#include "unlearn/unlearn.hpp"

using namespace unlearn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---- 1: bound certification
Outcome bound_certification() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto sweep = verify_bound_sweep(1000, 20, 1);
  const double secs = seconds_since(t0);
  return {sweep.held == 1000 && secs < 60.0,
          format("%zu/1000 hold, max lhs/rhs %.15g, %.1f s (budget 60 s)", sweep.held, sweep.max_ratio, secs)};
}

// ---- 2: gradient checks
Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_case;
  std::size_t failures = 0, total = 0;
  for (const auto& op : test_support::gradcheck_ops()) {
    for (std::size_t i = 0; i < 50; ++i) {
      const auto c = test_support::make_grad_case(op, 20240601, i);
      const double err = test_support::gradient_error(c);
      ++total;
      if (!(err < 1e-4)) ++failures;
      if (err > worst || std::isnan(err)) {
        worst = err;
        worst_case = c.label;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && secs < 30.0,
          format("%zu ops x 50 cases, %zu failures, worst relative error %.3g (%s), %.1f s (budget 30 s)",
                 test_support::gradcheck_ops().size(), failures, worst, worst_case.c_str(), secs)};
}

// ---- 3: Fisher vs dense outer products
Outcome fisher_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t max_params = 0;
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    auto rng = make_rng(inst, {0x66697368});
    const int k = std::uniform_int_distribution<int>(2, 6)(rng);
    // (d + 1) k <= 31 * 6 = 186 parameters
    const std::size_t d = std::uniform_int_distribution<std::size_t>(static_cast<std::size_t>(k), 30)(rng);
    const std::size_t n_f = std::uniform_int_distribution<std::size_t>(1, 10)(rng);
    const std::size_t n_r = std::uniform_int_distribution<std::size_t>(5, 30)(rng);
    ModelSpec spec;
    spec.kind = ModelKind::SoftmaxRegression;
    spec.input_shape = {d};
    spec.classes = k;
    auto c = initialize(spec, inst + 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& w : c.parameters) w = 0.5 * normal(rng);
    auto make = [&](std::size_t n, SampleId first) {
      DatasetSplit s;
      s.inputs = Tensor({n, d});
      for (auto& v : s.inputs.data()) v = normal(rng);
      for (std::size_t i = 0; i < n; ++i) {
        s.labels.push_back(std::uniform_int_distribution<int>(0, k - 1)(rng));
        s.ids.push_back(first + i);
      }
      s.class_count = k;
      return s;
    };
    const auto forget = make(n_f, 0), remain = make(n_r, 1000);
    const auto fisher = fisher_diagonal(c, forget, remain);
    max_params = std::max(max_params, c.parameters.size());

    // Dense per-sample outer product of the analytic gradient (p - e_y) x^T, bias p - e_y.
    const auto& wl = c.entry("classifier.weight");
    const auto& bl = c.entry("classifier.bias");
    auto dense_diag = [&](const DatasetSplit& s) {
      const auto p_count = static_cast<Eigen::Index>(c.parameters.size());
      Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(p_count, p_count);
      for (std::size_t i = 0; i < s.size(); ++i) {
        const auto x = s.sample(i);
        std::vector<long double> logits(static_cast<std::size_t>(k));
        long double mx = -1e300L;
        for (int a = 0; a < k; ++a) {
          long double z = c.parameters[bl.offset + static_cast<std::size_t>(a)];
          for (std::size_t j = 0; j < d; ++j) z += static_cast<long double>(c.parameters[wl.offset + static_cast<std::size_t>(a) * d + j]) * x[j];
          logits[static_cast<std::size_t>(a)] = z;
          mx = std::max(mx, z);
        }
        long double total = 0;
        for (auto& z : logits) total += std::exp(z - mx);
        Eigen::VectorXd g = Eigen::VectorXd::Zero(p_count);
        for (int a = 0; a < k; ++a) {
          const double r = static_cast<double>(std::exp(logits[static_cast<std::size_t>(a)] - mx) / total) - (a == s.labels[i] ? 1.0 : 0.0);
          for (std::size_t j = 0; j < d; ++j) g(static_cast<Eigen::Index>(wl.offset + static_cast<std::size_t>(a) * d + j)) = r * x[j];
          g(static_cast<Eigen::Index>(bl.offset + static_cast<std::size_t>(a))) = r;
        }
        sum += g * g.transpose();
      }
      return Eigen::VectorXd(sum.diagonal());
    };
    const auto df = dense_diag(forget), dr = dense_diag(remain);
    for (Eigen::Index j = 0; j < df.size(); ++j) {
      worst = std::max(worst, std::abs(df(j) - fisher.forget[static_cast<std::size_t>(j)]));
      worst = std::max(worst, std::abs(dr(j) - fisher.remain[static_cast<std::size_t>(j)]));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 10.0,
          format("20 instances (<= %zu parameters), max |diag - dense| %.3g, %.2f s", max_params, worst, secs)};
}

// ---- 4: exact linear unlearning
Outcome exact_linear() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0, worst_qr = 0.0;
  for (std::uint64_t inst = 0; inst < 50; ++inst) {
    auto rng = make_rng(inst, {0x6c696e});
    const auto d = std::uniform_int_distribution<Eigen::Index>(1, 12)(rng);
    const auto n = std::uniform_int_distribution<Eigen::Index>(4 * d + 10, 200)(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) x(i, j) = normal(rng);
    }
    Eigen::VectorXd w(d);
    for (auto& v : w) v = normal(rng);
    Eigen::VectorXd y = x * w;
    for (auto& v : y) v += 0.1 * normal(rng);
    DatasetSplit data;
    data.inputs = Tensor({static_cast<std::size_t>(n), static_cast<std::size_t>(d)});
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) data.inputs[static_cast<std::size_t>(i * d + j)] = x(i, j);
      data.labels.push_back(0);
      data.ids.push_back(static_cast<SampleId>(i));
      data.targets.push_back(y(i));
    }
    data.class_count = 1;
    std::set<SampleId> forget_ids;
    const auto forget_count = std::uniform_int_distribution<Eigen::Index>(1, n / 4)(rng);
    while (static_cast<Eigen::Index>(forget_ids.size()) < forget_count) {
      forget_ids.insert(std::uniform_int_distribution<SampleId>(0, static_cast<SampleId>(n - 1))(rng));
    }
    const auto spec = ForgetSpec::by_ids(forget_ids);
    const auto parts = split_forget(data, spec);
    const auto w_star = solve_linear_closed_form(x, y);

    UnlearnConfig cfg;
    cfg.strategy = UnlearnStrategy::NewtonExact;
    TrainConfig tc;
    tc.epochs = 1;
    const auto result = run_unlearn(w_star, data, spec, tc, cfg, {parts.remain, parts.forget});
    const auto reference = solve_linear_closed_form(design_matrix(parts.remain), target_vector(parts.remain));
    const Eigen::VectorXd qr = design_matrix(parts.remain).colPivHouseholderQr().solve(target_vector(parts.remain));
    for (Eigen::Index j = 0; j < d; ++j) {
      const double got = result.checkpoint.parameters[static_cast<std::size_t>(j)];
      worst = std::max(worst, std::abs(got - reference.parameters[static_cast<std::size_t>(j)]));
      worst_qr = std::max(worst_qr, std::abs(got - qr(j)));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-8 && secs < 10.0,
          format("50 instances, max |dw|_inf %.3g vs closed form (%.3g vs QR least squares), %.2f s", worst, worst_qr, secs)};
}

// ---- 5: unlearn score arithmetic
Outcome score_arithmetic() {
  const double a = 100.0 * unlearn_score(0.850, 0.876), b = 100.0 * unlearn_score(0.740, 0.907);
  return {std::abs(a - 45.3) <= 0.05 && std::abs(b - 38.8) <= 0.05,
          format("(85.0, 87.6) -> %.4f, (74.0, 90.7) -> %.4f", a, b)};
}

// ---- 10: fluctuation
Outcome fluctuation_metric() {
  const double v = fluctuation(std::vector<double>{0.80, 0.70, 0.75, 0.75, 0.72, 0.72});
  const double c = fluctuation(std::vector<double>{0.6, 0.6, 0.6, 0.6, 0.6, 0.6});
  return {std::abs(v - 0.045) < 1e-12 && c == 0.0, format("example %.15g, constant %.3g", v, c)};
}

// ---- desk-scale MNIST experiments

std::string mnist_config(const fs::path& data, const std::string& scenario, const std::string& strategies,
                         const std::string& extra = "") {
  std::ostringstream s;
  s << "{\"scenario\": \"" << scenario << "\", \"dataset\": {\"kind\": \"mnist\", \"dir\": " << nlohmann::json(data.string()).dump()
    << ", \"forget_class\": 0, \"poison_count\": 200, \"trigger_size\": 4, \"poison_target\": 0},"
    << " \"model\": {\"kind\": \"SmallCNN\", \"channels\": [8, 16]},"
    << " \"train\": {\"epochs\": 30, \"batch_size\": 128, \"lr\": 0.01, \"momentum\": 0.9},"
    << " \"strategies\": [" << strategies << "]" << extra << "}";
  return s.str();
}

const RunRecord& find(const std::vector<RunRecord>& records, const std::string& strategy, std::uint64_t seed) {
  for (const auto& r : records) {
    if (r.strategy == strategy && r.seed == seed) return r;
  }
  throw std::runtime_error("no record for " + strategy + " seed " + std::to_string(seed));
}

struct ClassRemoval {
  std::vector<RunRecord> records;
  std::map<std::uint64_t, double> retrain_remain;
};

ClassRemoval run_class_removal(const fs::path& data, const fs::path& work) {
  auto config = parse_experiment_config(mnist_config(data, "RemoveClass",
                                                     R"({"strategy": "FisherMask", "ratio": 0.04, "finetune_epochs": 5},
      {"strategy": "ActivationMask", "ratio": 0.04, "finetune_epochs": 5},
      {"strategy": "RandomMask", "ratio": 0.04, "finetune_epochs": 5},
      {"strategy": "FinetuneOnly", "finetune_epochs": 5})",
                                                     R"(, "seeds": [1, 2, 3])"));
  config.output = work / "class-removal";
  ClassRemoval out;
  out.records = cmd_unlearn(config, std::cout);
  for (auto seed : config.seeds) {
    // Retrained-from-scratch reference: same recipe on D_r only.
    const auto prepared = prepare_data(config, seed);
    const auto remain = split_forget(prepared.train, prepared.forget).remain;
    TrainConfig tc = config.train;
    tc.seed = seed;
    const auto retrained = train(config.model, remain, tc).checkpoint;
    out.retrain_remain[seed] = evaluate(retrained, prepared.eval.remain).accuracy;
    std::printf("retrain-from-scratch seed %llu: remain %.3f forget %.3f\n", static_cast<unsigned long long>(seed),
                out.retrain_remain[seed], evaluate(retrained, prepared.eval.forget).accuracy);
  }
  return out;
}

Outcome class_removal_thresholds(const ClassRemoval& cr) {
  // Seed means, as the results are reported averaged over 3 seeds.
  double best_forget = 0, best_remain = 0, retrain = 0, mask_forget = 0, finetune0 = 0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& fm = find(cr.records, "FisherMask", seed).report;
    const auto& ft = find(cr.records, "FinetuneOnly", seed).report;
    best_forget += fm.best().forget_acc / 3;
    best_remain += fm.best().remain_acc / 3;
    retrain += cr.retrain_remain.at(seed) / 3;
    mask_forget += fm.per_epoch.front().forget_acc / 3;
    finetune0 += ft.per_epoch.front().forget_acc / 3;
    per_seed += format(" [seed %llu: best forget %.3f remain %.3f retrain %.3f mask-only forget %.3f ft0 forget %.3f]",
                       static_cast<unsigned long long>(seed), fm.best().forget_acc, fm.best().remain_acc,
                       cr.retrain_remain.at(seed), fm.per_epoch.front().forget_acc, ft.per_epoch.front().forget_acc);
  }
  const bool a = best_forget <= 0.05 && std::abs(best_remain - retrain) <= 0.03;
  const bool b = mask_forget <= 0.10 && finetune0 >= 0.80;
  return {a && b, format("(a) forget %.3f <= 0.05, |remain %.3f - retrain %.3f| <= 0.03: %s; "
                         "(b) mask-only forget %.3f <= 0.10, FinetuneOnly epoch-0 forget %.3f >= 0.80: %s;",
                         best_forget, best_remain, retrain, a ? "yes" : "no", mask_forget, finetune0, b ? "yes" : "no") +
                      per_seed};
}

Outcome class_removal_ordering(const ClassRemoval& cr) {
  std::size_t votes = 0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const double f = find(cr.records, "FisherMask", seed).report.best().forget_acc;
    const double a = find(cr.records, "ActivationMask", seed).report.best().forget_acc;
    const double r = find(cr.records, "RandomMask", seed).report.best().forget_acc;
    const double t = find(cr.records, "FinetuneOnly", seed).report.best().forget_acc;
    const bool ok = f <= a && a <= r && r <= t;
    votes += ok;
    per_seed += format(" [seed %llu: %.3f %.3f %.3f %.3f %s]", static_cast<unsigned long long>(seed), f, a, r, t, ok ? "ok" : "no");
  }
  return {votes >= 2, format("Fisher <= Activation <= Random <= FinetuneOnly holds on %zu/3 seeds;", votes) + per_seed};
}

Outcome backdoor(const fs::path& data, const fs::path& work) {
  auto config = parse_experiment_config(mnist_config(data, "RemovePoison",
                                                     R"({"strategy": "FisherMask", "ratio": 0.2, "finetune_epochs": 5},
      {"strategy": "FinetuneOnly", "finetune_epochs": 5})",
                                                     R"(, "seeds": [1])"));
  config.output = work / "backdoor";
  const auto records = cmd_unlearn(config, std::cout);
  const auto& fm = find(records, "FisherMask", 1).report.best();
  const auto& ft = find(records, "FinetuneOnly", 1).report.best();
  return {ft.forget_acc >= 0.5 && fm.forget_acc <= 0.10,
          format("poisoned-sample accuracy: FinetuneOnly %.3f >= 0.5, FisherMask %.3f <= 0.10 (remain %.3f / %.3f)",
                 ft.forget_acc, fm.forget_acc, ft.remain_acc, fm.remain_acc)};
}

Outcome relearn(const fs::path& data, const fs::path& work) {
  auto config = parse_experiment_config(mnist_config(data, "RelearnReadout",
                                                     R"({"strategy": "ClassifierMask", "finetune_epochs": 5},
      {"strategy": "FisherMask", "ratio": 0.04, "finetune_epochs": 5})",
                                                     R"(, "seeds": [1, 2, 3], "relearn_max_epochs": 60)"));
  config.output = work / "relearn";
  // w* is shared with the class-removal run
  fs::create_directories(config.output / "checkpoints");
  for (const auto& e : fs::directory_iterator(work / "class-removal" / "checkpoints")) {
    fs::copy_file(e.path(), config.output / "checkpoints" / e.path().filename(), fs::copy_options::overwrite_existing);
  }
  const auto records = cmd_relearn(config, std::cout);
  std::size_t votes = 0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& c = find(records, "ClassifierMask", seed).report;
    const auto& f = find(records, "FisherMask", seed).report;
    const auto& r = find(records, "RetrainFromScratch", seed).report;
    // a capped retrain time is a lower bound on the true one
    const bool ok = *c.relearn_epochs < *f.relearn_epochs && (*f.relearn_epochs <= *r.relearn_epochs || !r.relearn_converged);
    votes += ok;
    per_seed += format(" [seed %llu: %zu%s < %zu%s <= %zu%s %s]", static_cast<unsigned long long>(seed), *c.relearn_epochs,
                       c.relearn_converged ? "" : "+", *f.relearn_epochs, f.relearn_converged ? "" : "+", *r.relearn_epochs,
                       r.relearn_converged ? "" : "+", ok ? "ok" : "no");
  }
  return {votes >= 2, format("ClassifierMask < FisherMask <= RetrainFromScratch holds on %zu/3 seeds;", votes) + per_seed};
}

Outcome reproducibility(const fs::path& data, const fs::path& work) {
  auto config = parse_experiment_config(mnist_config(data, "RemoveClass",
                                                     R"({"strategy": "FisherMask", "ratio": 0.04, "finetune_epochs": 5},
      {"strategy": "RandomMask", "ratio": 0.04, "finetune_epochs": 5})",
                                                     R"(, "seeds": [1])"));
  std::string first;
  for (const char* name : {"repro-a", "repro-b"}) {
    config.output = work / name;
    fs::remove_all(config.output);  // w* is retrained each time
    std::ostringstream log;
    cmd_unlearn(config, log);
    const auto text = read_file(config.output / "runs.jsonl");
    if (first.empty()) {
      first = text;
    } else {
      return {!first.empty() && text == first,
              format("two full runs (train + unlearn) in separate directories: runs.jsonl %s (%zu bytes)",
                     text == first ? "byte-identical" : "DIFFERS", text.size())};
    }
  }
  return {false, "unreachable"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  fs::path data = "data/mnist5k";
  fs::path work = "acceptance-work";
  std::vector<int> only;
  app.add_option("--data", data, "Directory with the MNIST IDX subset")->check(CLI::ExistingDirectory);
  app.add_option("--work", work, "Scratch directory for experiment outputs");
  app.add_option("--only", only, "Run only these criterion numbers");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  auto selected = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  std::map<int, Outcome> results;
  auto run = [&](int n, const std::function<Outcome()>& f) {
    if (!selected(n)) return;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      results[n] = f();
    } catch (const std::exception& e) {
      results[n] = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %d finished in %.1f s\n", n, seconds_since(t0));
    std::fflush(stdout);
  };

  run(1, bound_certification);
  run(2, gradient_checks);
  run(3, fisher_oracle);
  run(4, exact_linear);
  run(5, score_arithmetic);
  run(10, fluctuation_metric);
  if (selected(6) || selected(7) || selected(9)) {
    std::optional<ClassRemoval> cr;
    try {
      cr = run_class_removal(data, work);
    } catch (const std::exception& e) {
      for (int n : {6, 7, 9}) {
        if (selected(n)) results[n] = {false, std::string("error: ") + e.what()};
      }
    }
    if (cr) {
      run(6, [&] { return class_removal_thresholds(*cr); });
      run(7, [&] { return class_removal_ordering(*cr); });
      run(9, [&] { return relearn(data, work); });
    }
  }
  run(8, [&] { return backdoor(data, work); });
  run(11, [&] { return reproducibility(data, work); });

  std::printf("\n");
  bool all = true;
  for (const auto& [n, o] : results) {
    std::printf("%s criterion %d: %s\n", o.pass ? "PASS" : "FAIL", n, o.detail.c_str());
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
