#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lowrank/harness.hpp"

namespace py = pybind11;
using namespace lowrank;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-d array");
  return Matrix(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

Array from_matrix(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

Array from_vector(const std::vector<double>& v) {
  Array out(v.size());
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

MatrixNorm norm_from(const std::string& s) {
  if (s == "spectral") return MatrixNorm::Spectral;
  if (s == "frobenius") return MatrixNorm::Frobenius;
  throw py::value_error("norm must be 'spectral' or 'frobenius'");
}

Tensor3 to_input(const NetworkGraph& g, const Array& x) {
  const Shape3 s = g.layers.front();
  if (static_cast<std::size_t>(x.size()) != s.size()) throw py::value_error("input size differs from the network");
  return Tensor3(s, std::vector<double>(x.data(), x.data() + x.size()));
}

// Rows of a 2-d array as network inputs.
std::vector<Tensor3> to_inputs(const NetworkGraph& g, const Array& xs) {
  if (xs.ndim() != 2) throw py::value_error("expected samples as rows of a 2-d array");
  const Shape3 s = g.layers.front();
  if (static_cast<std::size_t>(xs.shape(1)) != s.size()) throw py::value_error("input size differs from the network");
  std::vector<Tensor3> out;
  for (py::ssize_t i = 0; i < xs.shape(0); ++i)
    out.emplace_back(s, std::vector<double>(xs.data(i, 0), xs.data(i, 0) + s.size()));
  return out;
}

std::vector<Sample> to_samples(const NetworkGraph& g, const Array& xs, const std::vector<std::size_t>& labels) {
  const auto inputs = to_inputs(g, xs);
  if (labels.size() != inputs.size()) throw py::value_error("labels and inputs differ in length");
  std::vector<Sample> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> y(g.k_out, 0.0);
    if (g.k_out == 1) {
      y[0] = static_cast<double>(labels[i]);
    } else {
      if (labels[i] >= g.k_out) throw py::value_error("label out of range");
      y[labels[i]] = 1.0;
    }
    out.push_back({inputs[i], std::move(y)});
  }
  return out;
}

py::dict metrics_dict(const EpochMetrics& m) {
  py::dict d;
  d["epoch"] = m.epoch;
  d["lr"] = m.lr;
  d["train_loss"] = m.train_loss;
  d["train_acc"] = m.train_acc;
  d["test_acc"] = m.test_acc;
  d["avg_rank"] = m.avg_rank;
  d["d_metric"] = m.d_metric;
  d["edge_ranks"] = m.edge_ranks;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Low-rank bias of SGD: core routines";

  py::register_exception<Error>(m, "LowrankError");

  m.def("svd", [](const Array& a) {
    const auto s = svd(to_matrix(a), true);
    return py::make_tuple(from_matrix(*s.left_vectors), from_vector(s.singular_values),
                          from_matrix(*s.right_vectors));
  }, py::arg("a"), "Thin SVD (U, s, V) with a = U diag(s) V^T.");
  m.def("singular_values", [](const Array& a) { return from_vector(singular_values(to_matrix(a))); },
        py::arg("a"));
  m.def("effective_rank", [](const Array& a, double eps) { return effective_rank(to_matrix(a), eps); },
        py::arg("a"), py::arg("eps") = 1e-3);
  m.def("numerical_rank", [](const Array& a, double tol) { return numerical_rank(to_matrix(a), tol); },
        py::arg("a"), py::arg("rel_tol") = 1e-8);
  m.def("distance_to_rank",
        [](const Array& a, std::size_t r, const std::string& norm) {
          return distance_to_rank(to_matrix(a), r, norm_from(norm));
        },
        py::arg("a"), py::arg("r"), py::arg("norm") = "spectral");
  m.def("truncated", [](const Array& a, std::size_t r) { return from_matrix(truncated(to_matrix(a), r)); },
        py::arg("a"), py::arg("r"));
  m.def("k_for_epsilon", [](double lr, double lambda, double eps) { return k_for_epsilon(lr, lambda, eps).k; },
        py::arg("lr"), py::arg("weight_decay"), py::arg("eps"));

  m.def("gen_synthetic",
        [](std::size_t n, std::size_t samples, std::size_t classes, std::uint64_t seed, double test_fraction) {
          const auto d = gen_synthetic(n, samples, classes, seed, test_fraction);
          Array x({d.size(), n});
          for (std::size_t i = 0; i < d.size(); ++i)
            std::copy(d.inputs[i].data().begin(), d.inputs[i].data().end(), x.mutable_data(i, 0));
          py::dict out;
          out["x"] = x;
          out["labels"] = d.labels;
          out["train"] = d.train_indices;
          out["test"] = d.test_indices;
          out["classes"] = d.classes;
          return out;
        },
        py::arg("n"), py::arg("m"), py::arg("classes"), py::arg("seed") = 0,
        py::arg("test_fraction") = kDefaultTestFraction);

  py::class_<Network>(m, "Network")
      .def_static("mlp",
                  [](const std::vector<std::size_t>& widths, bool residual, std::uint64_t seed) {
                    Rng rng(seed);
                    return build_mlp(widths, residual, rng);
                  },
                  py::arg("widths"), py::arg("residual") = false, py::arg("seed") = 0)
      .def_static("preset",
                  [](const std::string& name, std::size_t inputs, std::size_t k_out, std::uint64_t seed) {
                    return network_preset(name, {inputs, 1, 1}, k_out, seed);
                  },
                  py::arg("name"), py::arg("inputs"), py::arg("k_out"), py::arg("seed") = 0)
      .def_static("from_json",
                  [](const std::string& text, std::uint64_t default_seed) {
                    std::optional<std::uint64_t> seed;
                    Network net;
                    net.graph = graph_from_json(text, &seed);
                    require_valid(net.graph);
                    Rng rng(seed.value_or(default_seed));
                    net.params = Parameters::init_uniform(net.graph, rng);
                    return net;
                  },
                  py::arg("text"), py::arg("seed") = 0)
      .def("to_json", [](const Network& n) { return graph_to_json(n.graph); })
      .def_property_readonly("k_out", [](const Network& n) { return n.graph.k_out; })
      .def_property_readonly("input_size", [](const Network& n) { return n.graph.layers.front().size(); })
      .def_property(
          "weights",
          [](const Network& n) {
            py::list out;
            for (const auto& w : n.params.weights) out.append(from_matrix(w));
            return out;
          },
          [](Network& n, const std::vector<Array>& ws) {
            Parameters p;
            for (const auto& w : ws) p.weights.push_back(to_matrix(w));
            check_parameters(n.graph, p);
            n.params = std::move(p);
          })
      .def("forward",
           [](const Network& n, const Array& x) { return from_vector(forward(n.graph, n.params, to_input(n.graph, x)).output); },
           py::arg("x"))
      .def("gradient_ranks",
           [](const Network& n, const Array& xs, double tol) {
             const auto rep = verify_gradient_rank(n.graph, n.params, to_inputs(n.graph, xs), tol);
             py::dict out;
             out["samples_checked"] = rep.samples_checked;
             out["samples_skipped"] = rep.samples_skipped;
             out["ok"] = rep.ok();
             py::list edges;
             for (const auto& e : rep.edges) {
               py::dict d;
               d["edge"] = e.edge;
               d["patch_count"] = e.patch_count;
               d["worst_rank"] = e.worst_rank;
               d["violations"] = e.violations;
               edges.append(d);
             }
             out["edges"] = edges;
             return out;
           },
           py::arg("x"), py::arg("tolerance") = kLemmaRankTolerance)
      .def("effective_ranks",
           [](const Network& n, double eps) {
             std::vector<std::size_t> r;
             for (const auto& e : rank_report(n.params, eps).edges) r.push_back(e.rank);
             return r;
           },
           py::arg("eps") = 1e-3)
      .def("train",
           [](Network& n, const Array& x, const std::vector<std::size_t>& labels, const std::string& loss,
              double lr, double weight_decay, std::size_t batch_size, std::size_t epochs, std::uint64_t seed,
              double rank_eps) {
             const LossKind kind = loss_from_string(loss);
             const auto train = to_samples(n.graph, x, labels);
             SgdConfig cfg;
             cfg.lr = lr;
             cfg.weight_decay = weight_decay;
             cfg.batch_size = batch_size;
             cfg.epochs = epochs;
             cfg.seed = seed;
             cfg.validate(train.size());
             TrainingOptions opts;
             opts.rank_epsilon = rank_eps;
             TrainingResult res;
             {
               py::gil_scoped_release release;
               res = run_training(n.graph, n.params, train, {}, kind, cfg, nullptr, opts);
             }
             n.params = std::move(res.params);
             py::list series;
             for (const auto& e : res.series) series.append(metrics_dict(e));
             return series;
           },
           py::arg("x"), py::arg("labels"), py::arg("loss") = "softmax_ce", py::arg("lr") = 0.1,
           py::arg("weight_decay") = 5e-4, py::arg("batch_size") = 16, py::arg("epochs") = 10,
           py::arg("seed") = 0, py::arg("rank_eps") = 1e-3,
           "Train in place with mini-batch SGD; returns per-epoch metrics.");

  m.def("run_experiment",
        [](const std::string& toml_text, std::size_t threads) {
          const ExperimentConfig cfg = parse_config(toml_text);
          ExperimentResult res;
          {
            py::gil_scoped_release release;
            res = run_experiment(cfg, threads);
          }
          py::list runs;
          for (const auto& r : res.runs) {
            py::dict d;
            d["run_id"] = r.run_id;
            d["ok"] = r.ok;
            d["error"] = r.error;
            d["directory"] = r.directory;
            d["epochs"] = r.rows.size();
            runs.append(d);
          }
          return runs;
        },
        py::arg("config"), py::arg("threads") = 1, "Run an experiment from TOML text.");
}
