#include "dee/stream_data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

namespace dee {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void put(std::string& buf, T v) {
  v = to_little(v);
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename T>
  T get() {
    if (data_.size() - pos_ < sizeof(T)) throw DataError(DataErrorKind::truncated, "unexpected end of data");
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }

  void expect_magic() {
    if (data_.size() < sizeof(kMagic)) throw DataError(DataErrorKind::truncated, "unexpected end of data");
    if (std::memcmp(data_.data(), kMagic, sizeof(kMagic)) != 0) {
      throw DataError(DataErrorKind::bad_magic, "bad magic: not an EMBD file");
    }
    pos_ = sizeof(kMagic);
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double parse_double(std::string_view field, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw DataError(DataErrorKind::parse, "line " + std::to_string(line) + ": cannot parse '" +
                                              std::string(field) + "'");
  }
  return v;
}

std::vector<std::string_view> split_commas(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    out.push_back(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

void EmbeddingDataset::validate() const {
  if (labels.empty()) throw DataError(DataErrorKind::empty, "dataset has no examples");
  if (embed_dim == 0) throw DataError(DataErrorKind::dimension_mismatch, "embedding dimension is zero");
  if (n_classes == 0) throw DataError(DataErrorKind::label_out_of_range, "dataset declares zero classes");
  if (vectors.rows() != labels.size() || vectors.cols() != embed_dim) {
    throw DataError(DataErrorKind::dimension_mismatch, "vector storage does not match count x dimension");
  }
  std::vector<bool> seen(n_classes, false);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw DataError(DataErrorKind::label_out_of_range, "label out of range: example " + std::to_string(i) +
                                                             " has label " + std::to_string(labels[i]));
    }
    seen[labels[i]] = true;
  }
  if (!all_finite(vectors.values())) throw DataError(DataErrorKind::non_finite, "non-finite value in embeddings");
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (!seen[k]) throw DataError(DataErrorKind::missing_class, "class " + std::to_string(k) + " has no examples");
  }
}

EmbeddingDataset load_embeddings(const std::filesystem::path& path) {
  Reader r(read_file(path));
  r.expect_magic();
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw DataError(DataErrorKind::bad_version, "unsupported EMBD version " + std::to_string(version));
  }
  EmbeddingDataset ds;
  ds.name = path.stem().string();
  ds.embed_dim = r.get<std::uint32_t>();
  ds.n_classes = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (ds.embed_dim == 0) throw DataError(DataErrorKind::dimension_mismatch, "embedding dimension is zero");
  const std::uint64_t record = 4 + 4ull * ds.embed_dim;
  if (count > r.remaining() / record) throw DataError(DataErrorKind::truncated, "unexpected end of data");

  ds.vectors = DenseMatrix(count, ds.embed_dim);
  ds.labels.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    ds.labels[i] = r.get<std::uint32_t>();
    auto row = ds.vectors.row(i);
    for (double& v : row) v = static_cast<double>(r.get<float>());
  }
  if (r.remaining() != 0) {
    throw DataError(DataErrorKind::dimension_mismatch, "trailing bytes after declared records");
  }
  ds.validate();
  return ds;
}

void save_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::string buf;
  buf.reserve(24 + ds.size() * (4 + 4 * ds.embed_dim));
  buf.append(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.embed_dim));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.n_classes));
  put<std::uint64_t>(buf, ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    put<std::uint32_t>(buf, ds.labels[i]);
    for (double v : ds.vector(i)) put<float>(buf, static_cast<float>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(DataErrorKind::io, "cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError(DataErrorKind::io, "write failed for " + path.string());
}

EmbeddingDataset load_embeddings_csv(const std::filesystem::path& path, std::size_t n_classes) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw DataError(DataErrorKind::empty, "empty CSV file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_commas(line);
  if (header.size() < 2 || header[0] != "label") {
    throw DataError(DataErrorKind::parse, "CSV header must be label,f0,f1,...");
  }
  const std::size_t m = header.size() - 1;

  std::vector<double> values;
  std::vector<std::uint32_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() != m + 1) {
      throw DataError(DataErrorKind::dimension_mismatch,
                      "line " + std::to_string(line_no) + ": expected " + std::to_string(m + 1) + " fields");
    }
    std::uint32_t label = 0;
    const auto [ptr, ec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), label);
    if (ec != std::errc() || ptr != fields[0].data() + fields[0].size()) {
      throw DataError(DataErrorKind::parse, "line " + std::to_string(line_no) + ": bad label");
    }
    labels.push_back(label);
    for (std::size_t i = 1; i <= m; ++i) values.push_back(parse_double(fields[i], line_no));
  }

  EmbeddingDataset ds;
  ds.name = path.stem().string();
  ds.embed_dim = m;
  if (n_classes == 0 && !labels.empty()) n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  ds.n_classes = n_classes;
  ds.vectors = DenseMatrix(labels.size(), m, std::move(values));
  ds.labels = std::move(labels);
  ds.validate();
  return ds;
}

EmbeddingDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes == 0 || spec.embed_dim == 0 || spec.per_class == 0) {
    throw DataError(DataErrorKind::empty, "synthetic data needs positive classes, dimension and count");
  }
  if (!(spec.noise_std >= 0.0) || !(spec.center_norm > 0.0)) {
    throw DataError(DataErrorKind::parse, "synthetic data needs noise_std >= 0 and center_norm > 0");
  }
  SeededRng rng(spec.seed);
  const std::size_t m = spec.embed_dim;

  std::vector<DenseVector> centers;
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    DenseVector c = l2_normalize(draw_standard_normal(rng, m));
    for (double& v : c) v *= spec.center_norm;
    centers.push_back(std::move(c));
  }

  EmbeddingDataset ds;
  ds.name = "synthetic";
  ds.embed_dim = m;
  ds.n_classes = spec.n_classes;
  ds.vectors = DenseMatrix(spec.n_classes * spec.per_class, m);
  ds.labels.resize(spec.n_classes * spec.per_class);
  std::size_t i = 0;
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    for (std::size_t j = 0; j < spec.per_class; ++j, ++i) {
      ds.labels[i] = static_cast<std::uint32_t>(k);
      auto row = ds.vectors.row(i);
      for (std::size_t d = 0; d < m; ++d) {
        // Stored at float precision so the dataset survives an EMBD round trip unchanged.
        row[d] = static_cast<double>(static_cast<float>(centers[k][d] + spec.noise_std * rng.normal()));
      }
    }
  }
  return ds;
}

TrainTestSplit holdout_per_class(const EmbeddingDataset& ds, std::size_t test_per_class) {
  std::vector<std::size_t> seen(ds.n_classes, 0);
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (seen[ds.labels[i]]++ < test_per_class) {
      test_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  auto subset = [&](const std::vector<std::size_t>& idx, const std::string& suffix) {
    EmbeddingDataset out;
    out.name = ds.name + suffix;
    out.embed_dim = ds.embed_dim;
    out.n_classes = ds.n_classes;
    out.vectors = DenseMatrix(idx.size(), ds.embed_dim);
    out.labels.resize(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.labels[r] = ds.labels[idx[r]];
      std::copy_n(ds.vector(idx[r]).begin(), ds.embed_dim, out.vectors.row(r).begin());
    }
    return out;
  };
  TrainTestSplit split{subset(train_idx, "-train"), subset(test_idx, "-test")};
  split.train.validate();
  split.test.validate();
  return split;
}

void StreamPlan::validate(const EmbeddingDataset& ds) const {
  if (batch_size == 0) throw DataError(DataErrorKind::plan_mismatch, "batch_size must be positive");
  if (splits.empty()) throw DataError(DataErrorKind::plan_mismatch, "stream plan has no splits");
  std::set<std::uint32_t> covered;
  for (const auto& split : splits) {
    if (split.empty()) throw DataError(DataErrorKind::plan_mismatch, "stream plan contains an empty split");
    for (std::uint32_t k : split) {
      if (k >= ds.n_classes) {
        throw DataError(DataErrorKind::plan_mismatch, "split references unknown class " + std::to_string(k));
      }
      if (!covered.insert(k).second) {
        throw DataError(DataErrorKind::plan_mismatch, "class " + std::to_string(k) + " appears in two splits");
      }
    }
  }
  for (std::uint32_t label : ds.labels) {
    if (!covered.contains(label)) {
      throw DataError(DataErrorKind::plan_mismatch, "class " + std::to_string(label) + " is in no split");
    }
  }
}

std::vector<std::vector<std::uint32_t>> contiguous_splits(std::size_t n_classes, std::size_t n_splits) {
  if (n_splits == 0 || n_splits > n_classes) {
    throw DataError(DataErrorKind::plan_mismatch, "cannot divide " + std::to_string(n_classes) + " classes into " +
                                                      std::to_string(n_splits) + " splits");
  }
  std::vector<std::vector<std::uint32_t>> out(n_splits);
  // Remainder classes go to the earliest splits.
  const std::size_t base = n_classes / n_splits;
  const std::size_t extra = n_classes % n_splits;
  std::uint32_t next = 0;
  for (std::size_t s = 0; s < n_splits; ++s) {
    const std::size_t size = base + (s < extra ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) out[s].push_back(next++);
  }
  return out;
}

std::vector<std::size_t> indices_for_classes(const EmbeddingDataset& ds, std::span<const std::uint32_t> classes) {
  std::vector<bool> wanted(ds.n_classes, false);
  for (std::uint32_t k : classes) {
    if (k < ds.n_classes) wanted[k] = true;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (wanted[ds.labels[i]]) out.push_back(i);
  }
  return out;
}

std::vector<Experience> make_stream(const EmbeddingDataset& ds, const StreamPlan& plan) {
  plan.validate(ds);
  SeededRng rng(plan.shuffle_seed);
  std::vector<Experience> stream;
  for (const auto& split : plan.splits) {
    Experience exp;
    exp.classes = split;
    std::vector<std::size_t> idx = indices_for_classes(ds, split);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t start = 0; start < idx.size(); start += plan.batch_size) {
      const std::size_t end = std::min(idx.size(), start + plan.batch_size);
      exp.batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                               idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
    stream.push_back(std::move(exp));
  }
  return stream;
}

}  // namespace dee
