#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mag/error.hpp"

namespace mag {

/// One training metric: {step, loss_name, value, λ_draw, i, t}. Absent
/// fields serialize as null.
struct MetricRecord {
  long step = 0;
  std::string loss_name;
  double value = 0.0;
  std::optional<bool> lambda_draw;
  std::optional<int> i;
  std::optional<double> t;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["step"] = step;
    j["loss_name"] = loss_name;
    j["value"] = value;
    j["λ_draw"] = lambda_draw ? nlohmann::json(*lambda_draw) : nlohmann::json(nullptr);
    j["i"] = i ? nlohmann::json(*i) : nlohmann::json(nullptr);
    j["t"] = t ? nlohmann::json(*t) : nlohmann::json(nullptr);
    return j;
  }

  static MetricRecord from_json(const nlohmann::json& j) {
    MetricRecord r;
    r.step = j.at("step").get<long>();
    r.loss_name = j.at("loss_name").get<std::string>();
    r.value = j.at("value").get<double>();
    if (!j.at("λ_draw").is_null()) r.lambda_draw = j.at("λ_draw").get<bool>();
    if (!j.at("i").is_null()) r.i = j.at("i").get<int>();
    if (!j.at("t").is_null()) r.t = j.at("t").get<double>();
    return r;
  }
};

using MetricSink = std::function<void(const MetricRecord&)>;

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path) : path_(path), out_(path) {
    if (!out_) throw DependencyError("cannot write metrics: " + path.string());
  }
  void write(const MetricRecord& r) { out_ << r.to_json().dump() << '\n'; }
  MetricSink sink() {
    return [this](const MetricRecord& r) { write(r); };
  }
  void flush() { out_.flush(); }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline std::vector<MetricRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot read metrics: " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(MetricRecord::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

/// Raises TrainingFailure once the loss stays above `factor` x the first
/// observed loss for `patience` consecutive steps.
class DivergenceMonitor {
 public:
  explicit DivergenceMonitor(std::string phase, double factor = 10.0, int patience = 100)
      : phase_(std::move(phase)), factor_(factor), patience_(patience) {}

  void observe(double loss) {
    if (!initial_) initial_ = loss;
    if (loss > factor_ * *initial_) {
      if (++run_ >= patience_) {
        throw TrainingFailure(phase_ + ": loss diverged (above " + std::to_string(factor_) + "x initial for " +
                              std::to_string(patience_) + " steps)");
      }
    } else {
      run_ = 0;
    }
  }

 private:
  std::string phase_;
  double factor_;
  int patience_;
  std::optional<double> initial_;
  int run_ = 0;
};

}  // namespace mag
