#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "itlumm/data_io.hpp"
#include "itlumm/errors.hpp"
#include "itlumm/experiments.hpp"
#include "itlumm/linalg.hpp"
#include "itlumm/nn.hpp"
#include "itlumm/partition.hpp"
#include "itlumm/table.hpp"

namespace py = pybind11;
using namespace itlumm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data().begin());
  return m;
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

LabeledDataset make_dataset(const Array& x, const std::vector<std::size_t>& y, std::size_t classes) {
  LabeledDataset ds{to_matrix(x), y, classes};
  ds.validate();
  return ds;
}

py::dict row_dict(const ExperimentRow& r) {
  py::dict d;
  d["experiment"] = r.experiment;
  d["layer"] = r.layer;
  d["codebooks"] = r.codebooks;
  d["partition"] = r.partition;
  d["objective"] = r.objective;
  d["accuracy"] = r.accuracy;
  d["relative_accuracy"] = r.relative_accuracy;
  d["ratio"] = r.ratio;
  d["breakeven_c"] = r.breakeven_c;
  return d;
}

py::list rows_list(const std::vector<ExperimentRow>& rows) {
  py::list out;
  for (const auto& r : rows) out.append(row_dict(r));
  return out;
}

AmmFitOptions amm_options(std::size_t codebooks, const std::string& partition, const std::string& objective,
                          const std::string& method, const std::string& encoder, double lambda, bool quantize) {
  AmmFitOptions o;
  o.codebooks = codebooks;
  o.partition = parse_partition_kind(partition);
  o.fit.objective = parse_objective(objective);
  o.method = parse_lut_method(method);
  if (encoder != "tree" && encoder != "pq") throw ArgumentError("encoder must be 'tree' or 'pq'");
  o.encoder = encoder == "pq" ? EncoderKind::pq : EncoderKind::hash_tree;
  if (!(lambda >= 0.0)) throw ArgumentError("lambda must be non-negative");
  o.fit.lambda = lambda;
  o.quantize = quantize;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Lookup-table approximate matrix multiplication (C++ core)";

  // most recently registered translators run first, so the generic base goes in first
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  auto numerical = py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  py::register_exception<SingularSystemError>(m, "SingularSystemError", numerical.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ShapeError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const ArgumentError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    }
  });

  m.def("version", &version_string);

  py::class_<Rng>(m, "Rng")
      .def(py::init<std::uint64_t>(), py::arg("seed") = 0)
      .def("fork", &Rng::fork)
      .def_property_readonly("seed", &Rng::seed);

  // linalg
  m.def("matmul", [](const Array& a, const Array& b) { return to_array(matmul(to_matrix(a), to_matrix(b))); });
  m.def("ridge_solve", [](const Array& g, const Array& y, double lambda, const Array& p0) {
    return to_array(ridge_solve(to_matrix(g), to_matrix(y), lambda, to_matrix(p0)));
  }, py::arg("g"), py::arg("y"), py::arg("lam"), py::arg("p0"));
  m.def("hungarian_max", [](const Array& w) { return hungarian_max(to_matrix(w)); });

  // partition
  py::class_<PartitionSpec>(m, "PartitionSpec")
      .def_readonly("perm", &PartitionSpec::perm)
      .def_readonly("boundaries", &PartitionSpec::boundaries)
      .def("chunk_dims", [](const PartitionSpec& s, std::size_t c) {
        if (c >= s.chunks()) throw ArgumentError("chunk index out of range");
        auto d = s.chunk_dims(c);
        return std::vector<std::size_t>(d.begin(), d.end());
      })
      .def_property_readonly("chunks", &PartitionSpec::chunks);
  m.def("naive_partition", &naive_partition, py::arg("d"), py::arg("c"));
  m.def("r2_partition", [](const Array& a, std::size_t c) { return r2_partition(to_matrix(a), c); });
  m.def("opq_partition", [](const Array& a, std::size_t c, std::size_t k, std::size_t iters, Rng& rng) {
    return opq_partition(to_matrix(a), c, k, iters, rng);
  }, py::arg("a"), py::arg("c"), py::arg("k") = 16, py::arg("iters") = 10, py::arg("rng"));
  m.def("corr_squared", [](const Array& a) { return to_array(corr_squared(to_matrix(a))); });

  // table
  py::class_<AmmOperator>(m, "AmmOperator")
      .def_property_readonly("input_dim", &AmmOperator::input_dim)
      .def_property_readonly("output_dim", &AmmOperator::output_dim)
      .def_property_readonly("codebooks", [](const AmmOperator& op) { return op.table.codebooks(); })
      .def_property_readonly("quantized", [](const AmmOperator& op) { return op.table.quantized.has_value(); })
      .def_property_readonly("table", [](const AmmOperator& op) { return to_array(op.table.t); })
      .def_property_readonly("spec", [](const AmmOperator& op) { return op.spec; })
      .def("apply", [](const AmmOperator& op, const Array& a, bool quantized) {
        return to_array(amm_apply(op, to_matrix(a), quantized));
      }, py::arg("a"), py::arg("quantized") = false)
      .def("quantize", [](const AmmOperator& op) {
        AmmOperator q = op;
        q.table = quantize_lut(op.table);
        return q;
      });
  m.def("fit_amm",
        [](const Array& a, const Array& b, std::vector<double> bias, const std::string& activation,
           std::size_t codebooks, const std::string& partition, const std::string& objective,
           const std::string& method, const std::string& encoder, double lambda, bool quantize, Rng& rng) {
          const Matrix bm = to_matrix(b);
          if (bias.empty()) bias.assign(bm.cols(), 0.0);
          return fit_amm(to_matrix(a), bm, bias, parse_activation(activation),
                         amm_options(codebooks, partition, objective, method, encoder, lambda, quantize), rng);
        },
        py::arg("a"), py::arg("b"), py::arg("bias") = std::vector<double>{}, py::arg("activation") = "identity",
        py::arg("codebooks") = 16, py::arg("partition") = "naive", py::arg("objective") = "mse",
        py::arg("method") = "itlumm", py::arg("encoder") = "tree", py::arg("lam") = 1.0, py::arg("quantize") = false,
        py::arg("rng"));
  m.def("lac_cost_model", [](std::size_t d, std::size_t mm, std::size_t c, double ratio) {
    const CostModel cm = lac_cost_model(d, mm, c, ratio);
    return py::dict(py::arg("amm_cost") = cm.amm_cost, py::arg("exact_cost") = cm.exact_cost,
                    py::arg("breakeven_c") = cm.breakeven_c);
  }, py::arg("d"), py::arg("m"), py::arg("c"), py::arg("ratio") = 1.0);

  // datasets
  py::class_<LabeledDataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("features"), py::arg("labels"), py::arg("num_classes"))
      .def_property_readonly("features", [](const LabeledDataset& d) { return to_array(d.features); })
      .def_readonly("labels", &LabeledDataset::labels)
      .def_readonly("num_classes", &LabeledDataset::num_classes)
      .def("head", &LabeledDataset::head)
      .def("__len__", &LabeledDataset::size);
  m.def("load_mnist", [](const std::filesystem::path& dir, bool train) { return load_mnist_split(dir, train); },
        py::arg("directory"), py::arg("train") = true);
  m.def("load_cifar10", [](const std::vector<std::filesystem::path>& files) { return load_cifar10(files); });

  // models
  py::class_<MlpModel>(m, "MlpModel")
      .def_property_readonly("input_dim", &MlpModel::input_dim)
      .def_property_readonly("output_dim", &MlpModel::output_dim)
      .def_property_readonly("num_layers", [](const MlpModel& mm) { return mm.layers.size(); })
      .def_readwrite("metadata", &MlpModel::metadata)
      .def("is_replaced", &MlpModel::is_replaced)
      .def("weights", [](const MlpModel& mm, std::size_t l) { return to_array(mm.dense(l).weights); })
      .def("forward", [](const MlpModel& mm, const Array& x) { return to_array(forward(mm, to_matrix(x)).output); })
      .def("predict", [](const MlpModel& mm, const Array& x) { return predict(mm, to_matrix(x)); })
      .def("accuracy", [](const MlpModel& mm, const LabeledDataset& d) { return accuracy(mm, d); })
      .def("copy", [](const MlpModel& mm) { return mm; })
      .def("__eq__", [](const MlpModel& a, const MlpModel& b) { return a == b; });
  m.def("make_mlp", [](const std::vector<std::size_t>& widths, Rng& rng) { return make_mlp(widths, rng); });
  m.def("train",
        [](MlpModel& model, const LabeledDataset& data, std::size_t epochs, std::size_t batch_size, double lr,
           double momentum, std::uint64_t seed) {
          TrainConfig cfg;
          cfg.epochs = epochs;
          cfg.batch_size = batch_size;
          cfg.learn_rate = lr;
          cfg.momentum = momentum;
          cfg.seed = seed;
          cfg.validate();
          return train(model, data, cfg).loss;
        },
        py::arg("model"), py::arg("data"), py::arg("epochs") = 20, py::arg("batch_size") = 64, py::arg("lr") = 0.1,
        py::arg("momentum") = 0.9, py::arg("seed") = 0);
  m.def("replace_layer",
        [](MlpModel& model, std::size_t l, const Array& x, std::size_t codebooks, const std::string& partition,
           const std::string& objective, const std::string& method, Rng& rng) {
          replace_layer(model, l, to_matrix(x),
                        amm_options(codebooks, partition, objective, method, "tree", 1.0, false), rng);
        },
        py::arg("model"), py::arg("layer"), py::arg("x"), py::arg("codebooks") = 16, py::arg("partition") = "naive",
        py::arg("objective") = "kld", py::arg("method") = "itlumm", py::arg("rng"));
  m.def("save_model", &save_model);
  m.def("load_model", &load_model);
  m.def("serialize_model", [](const MlpModel& mm) {
    const auto b = serialize_model(mm);
    return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
  });
  m.def("deserialize_model", [](const py::bytes& data) {
    const std::string s = data;
    return deserialize_model(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  });

  // experiments
  auto config = [](const std::vector<std::size_t>& codebooks, const std::string& partition,
                   const std::string& objective, std::uint64_t seed, double ratio, std::size_t jobs) {
    ExperimentConfig cfg;
    cfg.codebooks = codebooks;
    cfg.amm.partition = parse_partition_kind(partition);
    cfg.amm.fit.objective = parse_objective(objective);
    cfg.seed = seed;
    cfg.finetune = default_finetune_config(seed);
    cfg.mac_lac_ratio = ratio;
    cfg.jobs = jobs;
    return cfg;
  };
  m.def("run_ablation",
        [config](const MlpModel& model, const LabeledDataset& tr, const LabeledDataset& te,
                 const std::vector<std::size_t>& codebooks, const std::string& partition,
                 const std::string& objective, std::uint64_t seed, double ratio, std::size_t jobs) {
          const ExperimentConfig cfg = config(codebooks, partition, objective, seed, ratio, jobs);
          std::vector<ExperimentRow> rows;
          {
            py::gil_scoped_release release;
            rows = run_ablation(model, tr, te, cfg);
          }
          return rows_list(rows);
        },
        py::arg("model"), py::arg("train"), py::arg("eval"), py::arg("codebooks") = std::vector<std::size_t>{1, 2, 4, 8, 16},
        py::arg("partition") = "naive", py::arg("objective") = "kld", py::arg("seed") = 0, py::arg("mac_lac_ratio") = 1.0,
        py::arg("jobs") = 1);
  m.def("run_replace_all",
        [config](const MlpModel& model, const LabeledDataset& tr, const LabeledDataset& te,
                 const std::vector<std::size_t>& codebooks, const std::string& partition,
                 const std::string& objective, bool finetune, std::uint64_t seed, double ratio, std::size_t jobs) {
          const ExperimentConfig cfg = config(codebooks, partition, objective, seed, ratio, jobs);
          std::vector<ExperimentRow> rows;
          {
            py::gil_scoped_release release;
            rows = run_replace_all(model, tr, te, cfg, finetune);
          }
          return rows_list(rows);
        },
        py::arg("model"), py::arg("train"), py::arg("eval"), py::arg("codebooks") = std::vector<std::size_t>{1, 2, 4, 8, 16},
        py::arg("partition") = "naive", py::arg("objective") = "kld", py::arg("finetune") = true, py::arg("seed") = 0,
        py::arg("mac_lac_ratio") = 1.0, py::arg("jobs") = 1);
  m.def("csv_header", &csv_header);
}
