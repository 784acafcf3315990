#include "dee/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

namespace dee {

namespace {

using nlohmann::json;

// Reads fields from one JSON object, remembering which keys were consumed so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  void mark(const std::string& key) { seen_.insert(key); }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(j_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.contains(item.key())) throw ConfigError(path_ + "." + item.key() + ": unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

EmbeddingDataset load_any(const std::string& path, std::size_t n_classes = 0) {
  const std::filesystem::path p(path);
  if (!std::filesystem::exists(p)) throw DataError(DataErrorKind::io, "dataset file not found: " + path);
  if (p.extension() == ".csv") return load_embeddings_csv(p, n_classes);
  return load_embeddings(p);
}

std::vector<std::vector<std::uint32_t>> resolve_splits(const RunConfig& cfg, std::size_t n_classes) {
  if (!cfg.splits.empty()) return cfg.splits;
  return contiguous_splits(n_classes, cfg.n_splits);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

void RunConfig::validate() const {
  if (data.synthetic) {
    if (!data.train_path.empty() || !data.test_path.empty()) {
      throw ConfigError("config.data: give either synthetic or train/test paths, not both");
    }
    if (data.synthetic_test_per_class == 0) throw ConfigError("config.data.synthetic.test_per_class: must be positive");
  } else if (data.train_path.empty() || data.test_path.empty()) {
    throw ConfigError("config.data: train and test paths are required without a synthetic block");
  }
  if (model.n_classifiers == 0) throw ConfigError("config.ensemble.n_classifiers: must be positive");
  const std::size_t kappa = model.kappa.value_or(default_kappa(model.n_classifiers));
  if (kappa == 0 || kappa > model.n_classifiers) {
    throw ConfigError("config.ensemble.kappa: must lie in [1, n_classifiers]");
  }
  if (!(model.sigma > 0.0)) throw ConfigError("config.ensemble.sigma: must be positive");
  if (model.iterations == 0) throw ConfigError("config.ensemble.iterations: must be positive");
  if (!(model.gamma_threshold >= 0.0 && model.gamma_threshold < 1.0)) {
    throw ConfigError("config.ensemble.gamma_threshold: must lie in [0, 1)");
  }
  if (!(model.tanh_scale > 0.0)) throw ConfigError("config.ensemble.tanh_scale: must be positive");
  try {
    train.validate();
  } catch (const NumericError& e) {
    throw ConfigError(std::string("config.train: ") + e.what());
  }
  if (train.train_keys && model.mode != RoutingMode::soft) {
    throw ConfigError("config.train.train_keys: key training requires soft routing");
  }
  if (splits.empty() && n_splits == 0) throw ConfigError("config.stream.n_splits: must be positive");
  if (n_seeds == 0) throw ConfigError("config.n_seeds: must be at least 1");
}

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  Section root(j, "config");

  if (root.has("data")) {
    Section data = root.child("data");
    data.read("train", cfg.data.train_path);
    data.read("test", cfg.data.test_path);
    if (data.has("synthetic")) {
      Section syn = data.child("synthetic");
      SyntheticSpec spec;
      syn.read("n_classes", spec.n_classes);
      syn.read("embed_dim", spec.embed_dim);
      syn.read("per_class", spec.per_class);
      syn.read("center_norm", spec.center_norm);
      syn.read("noise_std", spec.noise_std);
      syn.read("seed", spec.seed);
      syn.read("test_per_class", cfg.data.synthetic_test_per_class);
      syn.finish();
      cfg.data.synthetic = spec;
    }
    data.finish();
  }

  if (root.has("ensemble")) {
    Section e = root.child("ensemble");
    e.read("n_classifiers", cfg.model.n_classifiers);
    if (e.has("kappa")) {
      std::size_t k = 0;
      e.read("kappa", k);
      cfg.model.kappa = k;
    } else {
      e.mark("kappa");
    }
    e.read("sigma", cfg.model.sigma);
    e.read("iterations", cfg.model.iterations);
    e.read("gamma_threshold", cfg.model.gamma_threshold);
    e.read("tanh_scale", cfg.model.tanh_scale);
    std::string mode = to_string(cfg.model.mode);
    std::string weighting = to_string(cfg.model.vote_weighting);
    e.read("mode", mode);
    e.read("vote_weighting", weighting);
    try {
      cfg.model.mode = parse_routing_mode(mode);
      cfg.model.vote_weighting = parse_vote_weighting(weighting);
    } catch (const std::invalid_argument& ex) {
      throw ConfigError(std::string("config.ensemble: ") + ex.what());
    }
    e.finish();
  }

  if (root.has("train")) {
    Section t = root.child("train");
    t.read("learning_rate", cfg.train.learning_rate);
    t.read("weight_decay", cfg.train.weight_decay);
    t.read("train_keys", cfg.train.train_keys);
    t.read("key_lr", cfg.train.key_lr);
    t.read("adam_beta1", cfg.train.adam_beta1);
    t.read("adam_beta2", cfg.train.adam_beta2);
    t.read("adam_eps", cfg.train.adam_eps);
    t.read("batch_size", cfg.train.batch_size);
    t.finish();
  }

  if (root.has("stream")) {
    Section s = root.child("stream");
    s.read("n_splits", cfg.n_splits);
    s.read("splits", cfg.splits);
    s.finish();
  }

  root.read("seed", cfg.seed);
  root.read("n_seeds", cfg.n_seeds);
  root.read("out_dir", cfg.out_dir);
  root.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  json data = json::object();
  if (cfg.data.synthetic) {
    const SyntheticSpec& s = *cfg.data.synthetic;
    data["synthetic"] = {{"n_classes", s.n_classes},     {"embed_dim", s.embed_dim},
                         {"per_class", s.per_class},     {"center_norm", s.center_norm},
                         {"noise_std", s.noise_std},     {"seed", s.seed},
                         {"test_per_class", cfg.data.synthetic_test_per_class}};
  } else {
    data["train"] = cfg.data.train_path;
    data["test"] = cfg.data.test_path;
  }
  j["data"] = data;
  j["ensemble"] = {{"n_classifiers", cfg.model.n_classifiers},
                   {"kappa", cfg.model.kappa.value_or(default_kappa(cfg.model.n_classifiers))},
                   {"sigma", cfg.model.sigma},
                   {"iterations", cfg.model.iterations},
                   {"gamma_threshold", cfg.model.gamma_threshold},
                   {"tanh_scale", cfg.model.tanh_scale},
                   {"mode", to_string(cfg.model.mode)},
                   {"vote_weighting", to_string(cfg.model.vote_weighting)}};
  j["train"] = {{"learning_rate", cfg.train.learning_rate}, {"weight_decay", cfg.train.weight_decay},
                {"train_keys", cfg.train.train_keys},       {"key_lr", cfg.train.key_lr},
                {"adam_beta1", cfg.train.adam_beta1},       {"adam_beta2", cfg.train.adam_beta2},
                {"adam_eps", cfg.train.adam_eps},           {"batch_size", cfg.train.batch_size}};
  j["stream"] = {{"n_splits", cfg.splits.empty() ? cfg.n_splits : cfg.splits.size()}};
  if (!cfg.splits.empty()) j["stream"]["splits"] = cfg.splits;
  j["seed"] = cfg.seed;
  j["n_seeds"] = cfg.n_seeds;
  j["out_dir"] = cfg.out_dir;
  return j;
}

RunData load_run_data(const RunConfig& cfg) {
  if (cfg.data.synthetic) {
    SyntheticSpec spec = *cfg.data.synthetic;
    spec.per_class += cfg.data.synthetic_test_per_class;
    TrainTestSplit split = holdout_per_class(generate_synthetic(spec), cfg.data.synthetic_test_per_class);
    return {std::move(split.train), std::move(split.test)};
  }
  RunData d{load_any(cfg.data.train_path), {}};
  d.test = load_any(cfg.data.test_path, d.train.n_classes);
  if (d.test.embed_dim != d.train.embed_dim) {
    throw DataError(DataErrorKind::dimension_mismatch, "train and test embeddings differ in dimension");
  }
  if (d.test.n_classes != d.train.n_classes) {
    throw DataError(DataErrorKind::label_out_of_range, "train and test declare different class counts");
  }
  return d;
}

EnsembleConfig make_ensemble_config(const RunConfig& cfg, std::size_t embed_dim, std::size_t n_classes,
                                    std::uint64_t seed) {
  EnsembleConfig e;
  e.n_classifiers = cfg.model.n_classifiers;
  e.embed_dim = embed_dim;
  e.n_classes = n_classes;
  e.soft_knn.kappa = cfg.model.kappa.value_or(default_kappa(cfg.model.n_classifiers));
  e.soft_knn.sigma = cfg.model.sigma;
  e.soft_knn.iterations = cfg.model.iterations;
  e.soft_knn.gamma_threshold = cfg.model.gamma_threshold;
  e.mode = cfg.model.mode;
  e.vote_weighting = cfg.model.vote_weighting;
  e.tanh_scale = cfg.model.tanh_scale;
  e.seed = seed;
  e.validate();
  return e;
}

ExperimentReport run_experiment(const RunConfig& cfg, const RunData& data, std::uint64_t seed) {
  const EmbeddingDataset& train = data.train;
  const EmbeddingDataset& test = data.test;
  const EnsembleConfig ecfg = make_ensemble_config(cfg, train.embed_dim, train.n_classes, seed);

  StreamPlan plan;
  plan.splits = resolve_splits(cfg, train.n_classes);
  plan.batch_size = cfg.train.batch_size;
  plan.shuffle_seed = seed;
  const std::vector<Experience> stream = make_stream(train, plan);

  std::vector<std::vector<std::size_t>> test_splits;
  for (const auto& classes : plan.splits) test_splits.push_back(indices_for_classes(test, classes));

  EnsembleState state = init_ensemble(ecfg);
  AdamState adam;
  ExperimentReport report;
  for (const auto& idx : test_splits) report.accuracy.split_sizes.push_back(idx.size());

  std::chrono::steady_clock::duration trained{};
  std::vector<Example> batch;
  for (const Experience& exp : stream) {
    const auto start = std::chrono::steady_clock::now();
    for (const auto& indices : exp.batches) {
      batch.clear();
      for (std::size_t i : indices) batch.push_back({train.vector(i), train.labels[i]});
      train_batch(state, adam, batch, ecfg, cfg.train);
    }
    trained += std::chrono::steady_clock::now() - start;
    report.accuracy.acc.push_back(evaluate(state, ecfg, test, test_splits));
  }

  RunConfig resolved = cfg;
  resolved.seed = seed;
  resolved.n_seeds = 1;
  report.config = run_config_to_json(resolved);
  report.config.erase("out_dir");
  report.final_accuracy = final_average_accuracy(report.accuracy);
  if (report.accuracy.stages() >= 2) report.forgetting = forgetting(report.accuracy);
  report.confusion = confusion(state, ecfg, test);
  report.train_seconds = std::chrono::duration<double>(trained).count();
  return report;
}

AggregateRow aggregate_reports(const std::vector<ExperimentReport>& reports) {
  if (reports.empty()) throw ConfigError("no reports to aggregate");
  auto shared = [](json c) {
    c.erase("seed");
    c.erase("n_seeds");
    c.erase("out_dir");
    return c;
  };
  AggregateRow row;
  row.config = shared(reports.front().config);
  std::vector<double> acc;
  std::vector<double> forg;
  for (const auto& r : reports) {
    if (shared(r.config) != row.config) throw ConfigError("reports come from different configurations");
    acc.push_back(r.final_accuracy);
    if (r.forgetting) forg.push_back(*r.forgetting);
  }
  row.runs = reports.size();
  row.accuracy_mean = mean(acc);
  row.accuracy_std = population_std(acc);
  if (forg.size() == reports.size()) {
    row.forgetting_mean = mean(forg);
    row.forgetting_std = population_std(forg);
  }
  return row;
}

json aggregate_to_json(const AggregateRow& row) {
  json j = {{"config", row.config},
            {"runs", row.runs},
            {"accuracy_mean", row.accuracy_mean},
            {"accuracy_std", row.accuracy_std},
            {"forgetting_mean", nullptr},
            {"forgetting_std", nullptr}};
  if (row.forgetting_mean) {
    j["forgetting_mean"] = *row.forgetting_mean;
    j["forgetting_std"] = *row.forgetting_std;
  }
  return j;
}

void write_aggregate_csv(const AggregateRow& row, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  const json& e = row.config.at("ensemble");
  out << "mode,vote_weighting,n_classifiers,kappa,train_keys,runs,accuracy_mean,accuracy_std,"
         "forgetting_mean,forgetting_std\n";
  out << e.at("mode").get<std::string>() << ',' << e.at("vote_weighting").get<std::string>() << ','
      << e.at("n_classifiers").get<std::size_t>() << ',' << e.at("kappa").get<std::size_t>() << ','
      << (row.config.at("train").at("train_keys").get<bool>() ? "true" : "false") << ',' << row.runs << ','
      << row.accuracy_mean << ',' << row.accuracy_std << ',';
  if (row.forgetting_mean) {
    out << *row.forgetting_mean << ',' << *row.forgetting_std;
  } else {
    out << ',';
  }
  out << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace dee
