#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "dee/ensemble.hpp"
#include "dee/stream_data.hpp"

namespace dee {

/// acc[t][j]: accuracy on split j's test examples after training stage t.
/// Every stage is evaluated on every split, including splits not trained yet.
struct AccuracyMatrix {
  std::vector<std::vector<double>> acc;
  std::vector<std::size_t> split_sizes;

  std::size_t stages() const { return acc.size(); }
};

using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;

/// Per-split accuracy of the given predictions. `split_indices[j]` lists the
/// positions (into predictions/labels) belonging to split j.
std::vector<double> accuracy_by_split(std::span<const std::size_t> predictions,
                                      std::span<const std::uint32_t> labels,
                                      const std::vector<std::vector<std::size_t>>& split_indices);

/// Predicted class for every example of `test`, argmax over all classes.
std::vector<std::size_t> predict_all(const EnsembleState& state, const EnsembleConfig& cfg,
                                     const EmbeddingDataset& test);

/// One row of the accuracy matrix for the current state.
std::vector<double> evaluate(const EnsembleState& state, const EnsembleConfig& cfg, const EmbeddingDataset& test,
                             const std::vector<std::vector<std::size_t>>& split_indices);

/// Test-size-weighted mean of the last row.
double final_average_accuracy(const AccuracyMatrix& m);

/// Mean over non-final splits of (best earlier accuracy - final accuracy).
double forgetting(const AccuracyMatrix& m);

ConfusionMatrix confusion_from_predictions(std::span<const std::uint32_t> labels,
                                           std::span<const std::size_t> predictions, std::size_t n_classes);

ConfusionMatrix confusion(const EnsembleState& state, const EnsembleConfig& cfg, const EmbeddingDataset& test);

inline constexpr int kReportSchemaVersion = 1;

struct ExperimentReport {
  nlohmann::json config;
  AccuracyMatrix accuracy;
  double final_accuracy = 0.0;
  std::optional<double> forgetting;  // absent for single-split runs
  ConfusionMatrix confusion;
  double train_seconds = 0.0;
};

nlohmann::json report_to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const nlohmann::json& j);

/// Writes `path` (JSON) and the accuracy matrix next to it with a .csv extension.
void write_report(const ExperimentReport& r, const std::filesystem::path& path);
ExperimentReport read_report(const std::filesystem::path& path);

}  // namespace dee
