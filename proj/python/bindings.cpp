#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "diffattn/cli.hpp"
#include "diffattn/container.hpp"
#include "diffattn/dcn.hpp"
#include "diffattn/error.hpp"
#include "diffattn/gradcheck.hpp"
#include "diffattn/losses.hpp"
#include "diffattn/metrics.hpp"
#include "diffattn/trainer.hpp"

#include <sstream>

namespace py = pybind11;
using namespace diffattn;

namespace {

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw ShapeError("ragged nested list");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

std::vector<std::vector<double>> to_rows(const Matrix& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Differential attention networks: core numerics, retrieval, metrics and training";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);

  m.def("softmax", [](const Vector& v) { return softmax(v); });
  m.def("matmul", [](const std::vector<std::vector<double>>& a,
                     const std::vector<std::vector<double>>& b) {
    return to_rows(matmul(to_matrix(a), to_matrix(b)));
  });

  m.def("project", [](const Vector& v, const Vector& s) { return project(v, s); });
  m.def("reject", [](const Vector& v, const Vector& s) { return reject(v, s); });
  m.def("supporting_context",
        [](const Vector& s, const Vector& sp, const Vector& sm) { return supporting_context(s, sp, sm); });
  m.def("opposing_context",
        [](const Vector& s, const Vector& sp, const Vector& sm) { return opposing_context(s, sp, sm); });

  m.def("triplet_loss", [](const Vector& s, const Vector& sp, const Vector& sm, double alpha) {
    return triplet_loss(s, sp, sm, alpha);
  }, py::arg("s"), py::arg("s_plus"), py::arg("s_minus"), py::arg("alpha") = 0.2);
  m.def("triplet_grads", [](const Vector& s, const Vector& sp, const Vector& sm, double alpha) {
    const auto g = triplet_grads(s, sp, sm, alpha);
    return py::make_tuple(g.target, g.support, g.oppose, g.active);
  }, py::arg("s"), py::arg("s_plus"), py::arg("s_minus"), py::arg("alpha") = 0.2);
  m.def("cross_entropy", [](const Vector& probs, std::size_t label, bool scale) {
    return cross_entropy(probs, label, scale).value;
  }, py::arg("probs"), py::arg("label"), py::arg("scale_by_classes") = true);

  m.def("vqa_accuracy", [](const std::string& pred, const std::vector<std::string>& answers) {
    return vqa_accuracy_text(pred, answers);
  });
  m.def("normalize_answer", &normalize_answer);
  m.def("rank_correlation", [](const Vector& p, const Vector& q) { return rank_correlation(p, q); });
  m.def("downscale_attention", [](const std::vector<std::vector<double>>& grid, std::size_t side) {
    return downscale_attention(to_matrix(grid), side);
  }, py::arg("grid"), py::arg("side") = 14);
  m.def("decay_factor", &decay_factor);

  m.def("knn", [](const std::vector<std::vector<double>>& points, std::size_t query, std::size_t k) {
    EmbeddingStore store;
    store.embeddings = to_matrix(points);
    for (std::size_t i = 0; i < points.size(); ++i) store.ids.push_back(static_cast<ItemId>(i));
    return KdIndex::build(std::move(store)).knn(static_cast<ItemId>(query), k);
  }, py::arg("points"), py::arg("query"), py::arg("k"));

  m.def("grad_check", [](const std::string& model, std::size_t samples, std::uint64_t seed) {
    GradCheckOptions o;
    o.samples = samples;
    o.seed = seed;
    const auto r = grad_check(parse_model_kind(model), o);
    py::dict blocks;
    for (const auto& b : r.blocks) blocks[py::str(b.name)] = b.max_rel_error;
    return blocks;
  }, py::arg("model"), py::arg("samples") = 5, py::arg("seed") = 0);

  py::class_<EpochStats>(m, "EpochStats")
      .def_readonly("epoch", &EpochStats::epoch)
      .def_readonly("loss", &EpochStats::loss)
      .def_readonly("accuracy", &EpochStats::accuracy)
      .def_readonly("triplet_sat", &EpochStats::triplet_sat)
      .def_readonly("rank_corr", &EpochStats::rank_corr);

  m.def("train_and_evaluate",
        [](const std::string& model, std::size_t n_items, std::size_t epochs, std::uint64_t seed,
           std::size_t hidden, std::size_t batch, double lr) {
          GenConfig g;
          g.n_items = n_items;
          g.seed = seed;
          const Dataset ds = generate(g);
          const Split split = holdout_split(ds.size(), 0.2);
          const auto idx = build_exemplar_index(joint_store(ds, split.train),
                                                std::min<std::size_t>(ds.header.n_clusters, 25), seed);
          TrainConfig c;
          c.model = parse_model_kind(model);
          c.epochs = epochs;
          c.seed = seed;
          c.hidden = hidden;
          c.batch = batch;
          c.lr_cls = lr;
          c.opposing_offset = std::min<std::size_t>(c.opposing_offset, idx.clusters.n_clusters() - 1);
          const auto res = train(ds, idx, c);
          const auto ev = evaluate(ds, idx, res.params, split.test, eval_config_from(c));
          py::dict out;
          out["history"] = res.history;
          out["accuracy"] = ev.accuracy;
          out["rank_corr"] = ev.rank_corr;
          return out;
        },
        py::arg("model"), py::arg("n_items") = 400, py::arg("epochs") = 5, py::arg("seed") = 0,
        py::arg("hidden") = 16, py::arg("batch") = 20, py::arg("lr") = 2e-3);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  });
}
