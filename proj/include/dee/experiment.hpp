#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dee/ensemble.hpp"
#include "dee/metrics.hpp"
#include "dee/stream_data.hpp"
#include "dee/training.hpp"

namespace dee {

/// Invalid or inconsistent run configuration; the message names the field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSource {
  std::string train_path;  // .embd or .csv
  std::string test_path;
  std::optional<SyntheticSpec> synthetic;
  std::size_t synthetic_test_per_class = 100;
};

/// Ensemble settings that do not depend on the data (M and K come from it).
struct ModelSettings {
  std::size_t n_classifiers = 16;
  std::optional<std::size_t> kappa;  // default_kappa(n_classifiers) when unset
  double sigma = 0.0005;
  std::size_t iterations = 400;
  double gamma_threshold = 0.3;
  RoutingMode mode = RoutingMode::soft;
  VoteWeighting vote_weighting = VoteWeighting::distance;
  double tanh_scale = 250.0;
};

struct RunConfig {
  DataSource data;
  ModelSettings model;
  TrainConfig train;
  std::size_t n_splits = 10;
  std::vector<std::vector<std::uint32_t>> splits;  // explicit class order; overrides n_splits
  std::uint64_t seed = 0;
  std::size_t n_seeds = 1;
  std::string out_dir = "runs";

  void validate() const;
};

/// Parses a config document. Missing fields take their defaults, unknown
/// fields are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved config (every default spelled out, kappa resolved).
nlohmann::json run_config_to_json(const RunConfig& cfg);

struct RunData {
  EmbeddingDataset train;
  EmbeddingDataset test;
};

RunData load_run_data(const RunConfig& cfg);

EnsembleConfig make_ensemble_config(const RunConfig& cfg, std::size_t embed_dim, std::size_t n_classes,
                                    std::uint64_t seed);

/// Single-pass online training over the split stream for one seed, with an
/// evaluation on every split's test set after each split.
ExperimentReport run_experiment(const RunConfig& cfg, const RunData& data, std::uint64_t seed);

struct AggregateRow {
  nlohmann::json config;  // shared config, seed fields removed
  std::size_t runs = 0;
  double accuracy_mean = 0.0;
  double accuracy_std = 0.0;
  std::optional<double> forgetting_mean;
  std::optional<double> forgetting_std;
};

/// Mean and population standard deviation across reports of one config.
/// Throws ConfigError if the reports were produced by different configs.
AggregateRow aggregate_reports(const std::vector<ExperimentReport>& reports);

nlohmann::json aggregate_to_json(const AggregateRow& row);
void write_aggregate_csv(const AggregateRow& row, const std::filesystem::path& path);

}  // namespace dee
