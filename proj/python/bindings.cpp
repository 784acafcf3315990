#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "dee/experiment.hpp"
#include "dee/gradcheck.hpp"

namespace py = pybind11;
using namespace dee;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DenseVector to_vector(const Array& a) {
  if (a.ndim() != 1) throw py::value_error("expected a 1-d array");
  return DenseVector(a.data(), a.data() + a.size());
}

DenseMatrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-d array");
  return DenseMatrix(a.shape(0), a.shape(1), DenseVector(a.data(), a.data() + a.size()));
}

py::array_t<double> from_vector(std::span<const double> v) {
  py::array_t<double> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<double> from_matrix(const DenseMatrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

EmbeddingDataset make_dataset(const Array& x, const py::array_t<std::uint32_t>& y, std::size_t n_classes) {
  EmbeddingDataset ds;
  ds.vectors = to_matrix(x);
  ds.embed_dim = ds.vectors.cols();
  ds.labels.assign(y.data(), y.data() + y.size());
  ds.n_classes = n_classes;
  ds.validate();
  return ds;
}

py::tuple dataset_tuple(const EmbeddingDataset& ds) {
  py::array_t<std::uint32_t> y(std::vector<py::ssize_t>{static_cast<py::ssize_t>(ds.labels.size())});
  std::copy(ds.labels.begin(), ds.labels.end(), y.mutable_data());
  return py::make_tuple(from_matrix(ds.vectors), y, ds.n_classes);
}

// Stateful wrapper so Python can drive training step by step.
class Ensemble {
 public:
  Ensemble(std::size_t n_classifiers, std::size_t embed_dim, std::size_t n_classes, std::optional<std::size_t> kappa,
           double sigma, std::size_t iterations, double gamma_threshold, const std::string& mode,
           const std::string& vote_weighting, double tanh_scale, std::uint64_t seed) {
    cfg_.n_classifiers = n_classifiers;
    cfg_.embed_dim = embed_dim;
    cfg_.n_classes = n_classes;
    cfg_.soft_knn.kappa = kappa.value_or(default_kappa(n_classifiers));
    cfg_.soft_knn.sigma = sigma;
    cfg_.soft_knn.iterations = iterations;
    cfg_.soft_knn.gamma_threshold = gamma_threshold;
    cfg_.mode = parse_routing_mode(mode);
    cfg_.vote_weighting = parse_vote_weighting(vote_weighting);
    cfg_.tanh_scale = tanh_scale;
    cfg_.seed = seed;
    cfg_.validate();
    state_ = init_ensemble(cfg_);
  }

  py::dict forward(const Array& z) const {
    const DenseVector v = to_vector(z);
    const ForwardTrace t = dee::forward(state_, cfg_, v);
    py::dict d;
    d["prediction"] = from_vector(t.prediction);
    d["c"] = from_vector(t.knn.c);
    d["gamma"] = from_vector(t.selection);
    d["gamma_raw"] = from_vector(t.knn.gamma_raw);
    return d;
  }

  py::array_t<std::int64_t> predict(const Array& x) const {
    const DenseMatrix m = to_matrix(x);
    py::array_t<std::int64_t> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(m.rows())});
    for (std::size_t i = 0; i < m.rows(); ++i) {
      out.mutable_data()[i] = static_cast<std::int64_t>(dee::predict(state_, cfg_, m.row(i)));
    }
    return out;
  }

  double train_batch(const Array& x, const py::array_t<std::uint32_t>& y, const TrainConfig& tc) {
    const DenseMatrix m = to_matrix(x);
    if (static_cast<std::size_t>(y.size()) != m.rows()) throw py::value_error("x and y differ in length");
    std::vector<Example> batch;
    for (std::size_t i = 0; i < m.rows(); ++i) batch.push_back({m.row(i), y.data()[i]});
    py::gil_scoped_release release;
    return dee::train_batch(state_, adam_, batch, cfg_, tc);
  }

  py::array_t<double> keys() const { return from_matrix(state_.keys); }

  py::array_t<double> weights() const {
    const std::size_t n = cfg_.n_classifiers, k = cfg_.n_classes, m = cfg_.embed_dim;
    py::array_t<double> out({n, k, m});
    double* p = out.mutable_data();
    for (const auto& w : state_.weights) p = std::copy(w.values().begin(), w.values().end(), p);
    return out;
  }

  py::array_t<double> biases() const {
    py::array_t<double> out({cfg_.n_classifiers, cfg_.n_classes});
    double* p = out.mutable_data();
    for (const auto& b : state_.biases) p = std::copy(b.begin(), b.end(), p);
    return out;
  }

  std::size_t kappa() const { return cfg_.soft_knn.kappa; }
  std::string mode() const { return to_string(cfg_.mode); }
  std::string vote_weighting() const { return to_string(cfg_.vote_weighting); }

 private:
  EnsembleConfig cfg_;
  EnsembleState state_;
  AdamState adam_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Soft-kNN routed classifier ensembles";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("cosine_distances", [](const Array& z, const Array& keys) {
    return from_vector(cosine_distances(to_vector(z), to_matrix(keys)));
  }, py::arg("z"), py::arg("keys"));

  m.def("default_kappa", &default_kappa, py::arg("n_classifiers"));

  m.def("hard_topk", [](const Array& c, std::size_t kappa) { return hard_topk(to_vector(c), kappa); },
        py::arg("c"), py::arg("kappa"));

  py::class_<SoftKnnResult>(m, "SoftKnnResult")
      .def_property_readonly("c", [](const SoftKnnResult& r) { return from_vector(r.c); })
      .def_property_readonly("gamma", [](const SoftKnnResult& r) { return from_vector(r.gamma); })
      .def_property_readonly("gamma_raw", [](const SoftKnnResult& r) { return from_vector(r.gamma_raw); })
      .def("backward", [](const SoftKnnResult& r, const Array& upstream) {
        return from_vector(sinkhorn_backward(r, to_vector(upstream)));
      }, py::arg("upstream"), "gradient of upstream . gamma_raw with respect to c");

  m.def("sinkhorn", [](const Array& c, std::size_t kappa, double sigma, std::size_t iterations, double threshold) {
    SoftKnnConfig cfg;
    cfg.kappa = kappa;
    cfg.sigma = sigma;
    cfg.iterations = iterations;
    cfg.gamma_threshold = threshold;
    return sinkhorn_forward(to_vector(c), cfg);
  }, py::arg("c"), py::arg("kappa"), py::arg("sigma") = 0.0005, py::arg("iterations") = 400,
     py::arg("gamma_threshold") = 0.3);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init([](double lr, double wd, bool train_keys, double key_lr) {
        TrainConfig t;
        t.learning_rate = lr;
        t.weight_decay = wd;
        t.train_keys = train_keys;
        t.key_lr = key_lr;
        t.validate();
        return t;
      }), py::arg("learning_rate") = 0.0001, py::arg("weight_decay") = 0.0001, py::arg("train_keys") = false,
          py::arg("key_lr") = 0.0005)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("train_keys", &TrainConfig::train_keys)
      .def_readwrite("key_lr", &TrainConfig::key_lr);

  py::class_<Ensemble>(m, "Ensemble")
      .def(py::init<std::size_t, std::size_t, std::size_t, std::optional<std::size_t>, double, std::size_t, double,
                    const std::string&, const std::string&, double, std::uint64_t>(),
           py::arg("n_classifiers"), py::arg("embed_dim"), py::arg("n_classes"), py::arg("kappa") = py::none(),
           py::arg("sigma") = 0.0005, py::arg("iterations") = 400, py::arg("gamma_threshold") = 0.3,
           py::arg("mode") = "soft", py::arg("vote_weighting") = "distance", py::arg("tanh_scale") = 250.0,
           py::arg("seed") = 0)
      .def("forward", &Ensemble::forward, py::arg("z"))
      .def("predict", &Ensemble::predict, py::arg("x"))
      .def("train_batch", &Ensemble::train_batch, py::arg("x"), py::arg("y"), py::arg("config") = TrainConfig{},
           "one sign step on the batch; returns the mean loss before the update")
      .def_property_readonly("keys", &Ensemble::keys)
      .def_property_readonly("weights", &Ensemble::weights)
      .def_property_readonly("biases", &Ensemble::biases)
      .def_property_readonly("kappa", &Ensemble::kappa)
      .def_property_readonly("mode", &Ensemble::mode)
      .def_property_readonly("vote_weighting", &Ensemble::vote_weighting);

  m.def("load_embeddings", [](const std::string& path) { return dataset_tuple(load_embeddings(path)); },
        py::arg("path"), "returns (x, y, n_classes)");
  m.def("save_embeddings", [](const std::string& path, const Array& x, const py::array_t<std::uint32_t>& y,
                              std::size_t n_classes) { save_embeddings(make_dataset(x, y, n_classes), path); },
        py::arg("path"), py::arg("x"), py::arg("y"), py::arg("n_classes"));
  m.def("generate_synthetic", [](std::size_t n_classes, std::size_t embed_dim, std::size_t per_class,
                                 double center_norm, double noise_std, std::uint64_t seed) {
    SyntheticSpec s;
    s.n_classes = n_classes;
    s.embed_dim = embed_dim;
    s.per_class = per_class;
    s.center_norm = center_norm;
    s.noise_std = noise_std;
    s.seed = seed;
    return dataset_tuple(generate_synthetic(s));
  }, py::arg("n_classes") = 10, py::arg("embed_dim") = 64, py::arg("per_class") = 100, py::arg("center_norm") = 1.0,
     py::arg("noise_std") = 0.05, py::arg("seed") = 0);

  m.def("forgetting", [](const std::vector<std::vector<double>>& acc) {
    AccuracyMatrix a;
    a.acc = acc;
    a.split_sizes.assign(acc.empty() ? 0 : acc.back().size(), 1);
    return forgetting(a);
  }, py::arg("acc"), "acc[t][j]: accuracy on split j after stage t");
  m.def("final_average_accuracy", [](const std::vector<std::vector<double>>& acc,
                                     std::optional<std::vector<std::size_t>> sizes) {
    AccuracyMatrix a;
    a.acc = acc;
    a.split_sizes = sizes.value_or(std::vector<std::size_t>(acc.empty() ? 0 : acc.back().size(), 1));
    return final_average_accuracy(a);
  }, py::arg("acc"), py::arg("split_sizes") = py::none());

  m.def("resolve_config", [](const py::object& config) {
    return to_python(run_config_to_json(run_config_from_json(from_python(config))));
  }, py::arg("config"), "fills in every default and validates");

  m.def("run_experiment", [](const py::object& config, std::optional<std::uint64_t> seed) {
    const RunConfig cfg = run_config_from_json(from_python(config));
    nlohmann::json report;
    {
      py::gil_scoped_release release;
      const RunData data = load_run_data(cfg);
      report = report_to_json(run_experiment(cfg, data, seed.value_or(cfg.seed)));
    }
    return to_python(report);
  }, py::arg("config"), py::arg("seed") = py::none(), "one seed of the streaming experiment; returns the report");

  m.def("gradcheck", [](std::size_t instances, std::uint64_t seed, bool corrupt_backward) {
    GradcheckOptions o;
    o.instances = instances;
    o.seed = seed;
    o.corrupt_backward = corrupt_backward;
    GradcheckSummary s;
    {
      py::gil_scoped_release release;
      s = run_gradcheck(o);
    }
    py::dict d;
    d["passed"] = s.passed();
    for (const char* suite : {"soft_knn", "classifier", "keys"}) {
      d[py::str(std::string(suite) + "_worst")] = s.worst(suite);
      d[py::str(std::string(suite) + "_checked")] = s.checked(suite);
    }
    return d;
  }, py::arg("instances") = 20, py::arg("seed") = 0, py::arg("corrupt_backward") = false);

#ifdef VERSION_INFO
#define DEE_STR(x) #x
#define DEE_XSTR(x) DEE_STR(x)
  m.attr("__version__") = DEE_XSTR(VERSION_INFO);
#else
  m.attr("__version__") = "dev";
#endif
}
