#include "dee/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "dee/parallel.hpp"

namespace dee {

std::vector<double> accuracy_by_split(std::span<const std::size_t> predictions,
                                      std::span<const std::uint32_t> labels,
                                      const std::vector<std::vector<std::size_t>>& split_indices) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("predictions/labels size mismatch");
  std::vector<double> row;
  row.reserve(split_indices.size());
  for (const auto& idx : split_indices) {
    if (idx.empty()) throw std::invalid_argument("empty test set for a split");
    std::size_t hits = 0;
    for (std::size_t i : idx) hits += predictions[i] == labels[i] ? 1 : 0;
    row.push_back(static_cast<double>(hits) / static_cast<double>(idx.size()));
  }
  return row;
}

std::vector<std::size_t> predict_all(const EnsembleState& state, const EnsembleConfig& cfg,
                                     const EmbeddingDataset& test) {
  std::vector<std::size_t> out(test.size());
  parallel_for(test.size(), [&](std::size_t i) { out[i] = predict(state, cfg, test.vector(i)); });
  return out;
}

std::vector<double> evaluate(const EnsembleState& state, const EnsembleConfig& cfg, const EmbeddingDataset& test,
                             const std::vector<std::vector<std::size_t>>& split_indices) {
  if (test.size() == 0) throw std::invalid_argument("empty test set");
  return accuracy_by_split(predict_all(state, cfg, test), test.labels, split_indices);
}

double final_average_accuracy(const AccuracyMatrix& m) {
  if (m.acc.empty()) throw std::invalid_argument("accuracy matrix has no stages");
  const auto& last = m.acc.back();
  if (last.size() != m.split_sizes.size() || last.empty()) {
    throw std::invalid_argument("last row of the accuracy matrix is incomplete");
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t j = 0; j < last.size(); ++j) {
    num += last[j] * static_cast<double>(m.split_sizes[j]);
    den += static_cast<double>(m.split_sizes[j]);
  }
  if (!(den > 0.0)) throw std::invalid_argument("split sizes sum to zero");
  return num / den;
}

double forgetting(const AccuracyMatrix& m) {
  const std::size_t t_count = m.stages();
  if (t_count < 2) throw std::invalid_argument("forgetting needs at least two stages");
  const auto& last = m.acc[t_count - 1];
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < t_count; ++j) {
    if (last.size() <= j) throw std::invalid_argument("accuracy matrix is not lower-triangular complete");
    double best = -1.0;
    for (std::size_t t = j; t + 1 < t_count; ++t) {
      if (m.acc[t].size() <= j) throw std::invalid_argument("accuracy matrix is not lower-triangular complete");
      best = std::max(best, m.acc[t][j]);
    }
    total += best - last[j];
  }
  return total / static_cast<double>(t_count - 1);
}

ConfusionMatrix confusion_from_predictions(std::span<const std::uint32_t> labels,
                                           std::span<const std::size_t> predictions, std::size_t n_classes) {
  if (labels.size() != predictions.size()) throw std::invalid_argument("predictions/labels size mismatch");
  ConfusionMatrix cm(n_classes, std::vector<std::uint64_t>(n_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes || predictions[i] >= n_classes) throw std::invalid_argument("class out of range");
    ++cm[labels[i]][predictions[i]];
  }
  return cm;
}

ConfusionMatrix confusion(const EnsembleState& state, const EnsembleConfig& cfg, const EmbeddingDataset& test) {
  return confusion_from_predictions(test.labels, predict_all(state, cfg, test), cfg.n_classes);
}

nlohmann::json report_to_json(const ExperimentReport& r) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["config"] = r.config;
  j["accuracy_matrix"] = r.accuracy.acc;
  j["split_test_sizes"] = r.accuracy.split_sizes;
  j["final_accuracy"] = r.final_accuracy;
  j["forgetting"] = r.forgetting ? nlohmann::json(*r.forgetting) : nlohmann::json(nullptr);
  j["confusion"] = r.confusion;
  j["train_seconds"] = r.train_seconds;
  return j;
}

ExperimentReport report_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kReportSchemaVersion) {
    throw std::invalid_argument("unsupported report schema version");
  }
  ExperimentReport r;
  r.config = j.at("config");
  r.accuracy.acc = j.at("accuracy_matrix").get<std::vector<std::vector<double>>>();
  r.accuracy.split_sizes = j.at("split_test_sizes").get<std::vector<std::size_t>>();
  r.final_accuracy = j.at("final_accuracy").get<double>();
  if (!j.at("forgetting").is_null()) r.forgetting = j.at("forgetting").get<double>();
  r.confusion = j.at("confusion").get<ConfusionMatrix>();
  r.train_seconds = j.at("train_seconds").get<double>();
  return r;
}

void write_report(const ExperimentReport& r, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << report_to_json(r).dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
  std::filesystem::path csv = path;
  csv.replace_extension(".csv");
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out.precision(17);
  for (const auto& row : r.accuracy.acc) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + csv.string());
}

ExperimentReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrorKind::io, "cannot open " + path.string());
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorKind::parse, path.string() + ": not a report: " + e.what());
  }
}

}  // namespace dee
