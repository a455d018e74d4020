#include "unlearn/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace unlearn {

namespace {

void check_fraction(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string("unlearn_score: ") + what + " " + std::to_string(v) + " outside [0,1]");
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

double unlearn_score(double remain_acc, double forget_acc) {
  check_fraction(remain_acc, "remain accuracy");
  check_fraction(forget_acc, "forget accuracy");
  return remain_acc / (1.0 + forget_acc);
}

double fluctuation(std::span<const double> series) {
  if (series.size() < 3) throw std::invalid_argument("fluctuation: needs S >= 2, i.e. at least 3 points");
  const std::size_t s = series.size() - 1;
  double total = 0.0;
  for (std::size_t t = 1; t <= s; ++t) total += std::abs(series[t] - series[t - 1]);
  return total / static_cast<double>(s - 1);
}

SubsetAccuracy accuracy_on_subsets(const Checkpoint& checkpoint, const DatasetSplit& test_set, const ForgetSpec& spec) {
  const auto predictions = predict(checkpoint, test_set);
  SubsetAccuracy out;
  std::size_t remain_hits = 0, forget_hits = 0;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const bool in_forget = spec.is_whole_class() ? test_set.labels[i] == spec.forget_class : spec.ids.count(test_set.ids[i]) > 0;
    const bool hit = static_cast<int>(predictions[i]) == test_set.labels[i];
    if (in_forget) {
      ++out.forget_count;
      forget_hits += hit;
    } else {
      ++out.remain_count;
      remain_hits += hit;
    }
  }
  if (out.remain_count) out.remain = static_cast<double>(remain_hits) / static_cast<double>(out.remain_count);
  if (out.forget_count) out.forget = static_cast<double>(forget_hits) / static_cast<double>(out.forget_count);
  return out;
}

void UnlearnReport::finalize() {
  if (per_epoch.empty()) throw std::logic_error("UnlearnReport::finalize: no epochs recorded");
  best_epoch = 0;
  for (std::size_t i = 1; i < per_epoch.size(); ++i) {
    if (per_epoch[i].unlearn_score > per_epoch[best_epoch].unlearn_score) best_epoch = i;
  }
  remain_fluctuation.reset();
  forget_fluctuation.reset();
  if (per_epoch.size() >= 3) {
    std::vector<double> r, f;
    for (const auto& e : per_epoch) {
      r.push_back(e.remain_acc);
      f.push_back(e.forget_acc);
    }
    remain_fluctuation = fluctuation(r);
    forget_fluctuation = fluctuation(f);
  }
}

std::string report_jsonl(const UnlearnReport& report) {
  std::string out;
  for (const auto& e : report.per_epoch) {
    nlohmann::ordered_json j;
    j["schema"] = kReportSchemaVersion;
    j["type"] = "epoch";
    j["strategy"] = report.strategy;
    j["epoch"] = e.epoch;
    j["lr"] = e.lr;
    j["remain_acc"] = e.remain_acc;
    j["forget_acc"] = e.forget_acc;
    j["unlearn_score"] = e.unlearn_score;
    out += j.dump() + '\n';
  }
  nlohmann::ordered_json s;
  s["schema"] = kReportSchemaVersion;
  s["type"] = "summary";
  s["strategy"] = report.strategy;
  s["best_epoch"] = report.per_epoch.empty() ? 0 : report.per_epoch[report.best_epoch].epoch;
  if (!report.per_epoch.empty()) {
    const auto& b = report.best();
    s["remain_acc"] = b.remain_acc;
    s["forget_acc"] = b.forget_acc;
    s["unlearn_score"] = b.unlearn_score;
  }
  s["remain_fluctuation"] = report.remain_fluctuation ? nlohmann::json(*report.remain_fluctuation) : nlohmann::json();
  s["forget_fluctuation"] = report.forget_fluctuation ? nlohmann::json(*report.forget_fluctuation) : nlohmann::json();
  if (report.relearn_epochs) {
    s["relearn_epochs"] = *report.relearn_epochs;
    s["relearn_converged"] = report.relearn_converged;
  }
  s["config"] = report.config;
  out += s.dump() + '\n';
  return out;
}

std::string report_csv(const UnlearnReport& report) {
  std::ostringstream out;
  out << "# schema " << kReportSchemaVersion << '\n';
  out << "epoch,lr,remain_acc,forget_acc,unlearn_score\n";
  for (const auto& e : report.per_epoch) {
    out << e.epoch << ',' << e.lr << ',' << fixed(e.remain_acc) << ',' << fixed(e.forget_acc) << ',' << fixed(e.unlearn_score) << '\n';
  }
  return out.str();
}

}  // namespace unlearn
