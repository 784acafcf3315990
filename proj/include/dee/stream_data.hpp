#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dee/numerics.hpp"

namespace dee {

/// Distinct failure kinds raised while reading or validating embedding data.
enum class DataErrorKind {
  io,
  bad_magic,
  bad_version,
  truncated,
  dimension_mismatch,
  label_out_of_range,
  non_finite,
  empty,
  missing_class,
  plan_mismatch,
  parse,
};

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  DataErrorKind kind() const { return kind_; }

 private:
  DataErrorKind kind_;
};

struct EmbeddingDataset {
  std::string name;
  std::size_t embed_dim = 0;
  std::size_t n_classes = 0;
  DenseMatrix vectors;               // count x M
  std::vector<std::uint32_t> labels;  // count

  std::size_t size() const { return labels.size(); }
  std::span<const double> vector(std::size_t i) const { return vectors.row(i); }

  /// Checks shape, label range, finiteness and that every class occurs.
  void validate() const;
};

/// EMBD container, little-endian:
///   "EMBD" | u32 version=1 | u32 M | u32 K | u64 count | count x (u32 label, M x f32)
EmbeddingDataset load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path);

/// CSV with header `label,f0,f1,...`. K is one past the largest label unless given.
EmbeddingDataset load_embeddings_csv(const std::filesystem::path& path, std::size_t n_classes = 0);

struct SyntheticSpec {
  std::size_t n_classes = 10;
  std::size_t embed_dim = 64;
  std::size_t per_class = 100;
  double center_norm = 1.0;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
};

/// Gaussian clusters: centres drawn N(0, I) and rescaled to center_norm,
/// samples = centre + N(0, noise_std^2 I). Examples are grouped by class.
EmbeddingDataset generate_synthetic(const SyntheticSpec& spec);

struct TrainTestSplit {
  EmbeddingDataset train;
  EmbeddingDataset test;
};

/// Moves the first `test_per_class` examples of every class into the test set.
TrainTestSplit holdout_per_class(const EmbeddingDataset& ds, std::size_t test_per_class);

struct StreamPlan {
  std::vector<std::vector<std::uint32_t>> splits;
  std::size_t batch_size = 60;
  std::uint64_t shuffle_seed = 0;

  void validate(const EmbeddingDataset& ds) const;
};

/// Contiguous ascending label blocks: 10 classes into 5 splits gives {0,1},{2,3},...
std::vector<std::vector<std::uint32_t>> contiguous_splits(std::size_t n_classes, std::size_t n_splits);

/// One experience of the stream: the batches of a single split, as example indices.
struct Experience {
  std::vector<std::uint32_t> classes;
  std::vector<std::vector<std::size_t>> batches;
};

std::vector<Experience> make_stream(const EmbeddingDataset& ds, const StreamPlan& plan);

/// Indices of the examples whose labels lie in `classes`, in dataset order.
std::vector<std::size_t> indices_for_classes(const EmbeddingDataset& ds, std::span<const std::uint32_t> classes);

}  // namespace dee
