#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "xsteer/alignment.hpp"
#include "xsteer/corpora.hpp"
#include "xsteer/evaluation.hpp"
#include "xsteer/intervention.hpp"
#include "xsteer/pipeline.hpp"
#include "xsteer/transformer.hpp"

namespace py = pybind11;
using namespace xsteer;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DenseMatrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw Error("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return DenseMatrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const DenseMatrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

ActivationSet to_set(const Array& a, const std::string& model_id) {
  ActivationSet s;
  s.model_id = model_id;
  s.layer_index = 1;
  s.matrix = to_matrix(a);
  for (std::size_t i = 0; i < s.matrix.rows(); ++i) s.item_ids.push_back("row-" + std::to_string(i));
  return s;
}

py::dict mapper_dict(const Mapper& m) {
  py::dict d;
  d["weights"] = to_array(m.weights);
  d["bias"] = m.bias;
  d["reg_kind"] = std::string(to_string(m.reg_kind));
  d["lambda"] = m.lambda;
  d["sparsity"] = m.sparsity;
  d["converged"] = m.converged;
  d["iterations"] = m.iterations;
  return d;
}

py::dict report_dict(const ScoreReport& r) {
  py::dict d;
  d["item_id"] = r.item_id;
  d["correct"] = r.correct;
  d["matched_reference"] = r.matched_reference;
  d["extracted_answer_segment"] = r.extracted_answer_segment;
  d["delimiter_missing"] = r.delimiter_missing;
  return d;
}

pipeline::RunConfig config_from(const py::object& cfg) {
  if (cfg.is_none()) return pipeline::default_config(42);
  const std::string text = py::module_::import("json").attr("dumps")(cfg).cast<std::string>();
  return pipeline::from_json(nlohmann::json::parse(text));
}

py::object config_to_py(const pipeline::RunConfig& c) {
  return py::module_::import("json").attr("loads")(pipeline::to_json(c).dump());
}

}  // namespace

PYBIND11_MODULE(_xsteer, m) {
  m.doc() = "Cross-architecture activation steering on toy transformers";
  py::register_exception<Error>(m, "XsteerError", PyExc_RuntimeError);

  py::class_<SeededRng>(m, "SeededRng")
      .def(py::init<std::uint64_t>(), py::arg("seed"))
      .def("next", &SeededRng::next)
      .def("uniform", &SeededRng::uniform)
      .def("normal", &SeededRng::normal)
      .def("uniform_index", &SeededRng::uniform_index, py::arg("n"))
      .def("permutation", &SeededRng::permutation, py::arg("n"));

  py::enum_<Domain>(m, "Domain").value("verbal", Domain::verbal).value("math", Domain::math);

  py::class_<QAItem>(m, "QAItem")
      .def(py::init<>())
      .def_readwrite("id", &QAItem::id)
      .def_readwrite("domain", &QAItem::domain)
      .def_readwrite("question", &QAItem::question)
      .def_readwrite("prompt", &QAItem::prompt)
      .def_readwrite("best_answer", &QAItem::best_answer)
      .def_readwrite("correct_answers", &QAItem::correct_answers)
      .def_readwrite("gold_solution", &QAItem::gold_solution)
      .def("__repr__", [](const QAItem& it) { return "<QAItem " + it.id + ": " + it.question + ">"; });

  m.def("gen_verbal_task", &gen_verbal_task, py::arg("seed"), py::arg("n_items"));
  m.def("gen_math_task", &gen_math_task, py::arg("seed"), py::arg("n_items"));
  m.def("make_prompt", &make_prompt, py::arg("question"));
  m.def("training_text", &training_text, py::arg("item"));

  py::class_<Tokenizer>(m, "Tokenizer")
      .def(py::init<>())
      .def_property_readonly("vocab_size", &Tokenizer::vocab_size)
      .def("encode", &Tokenizer::encode, py::arg("text"))
      .def("decode", [](const Tokenizer& t, const std::vector<int>& ids) { return t.decode(ids); });

  m.def("score_verbal", [](const std::string& text, const QAItem& item) { return report_dict(score_verbal(text, item)); },
        py::arg("generated"), py::arg("item"));
  m.def("score_numeric", [](const std::string& text, double gold) { return report_dict(score_numeric(text, gold)); },
        py::arg("generated"), py::arg("gold"));
  m.def("score_item", [](const std::string& text, const QAItem& item) { return report_dict(score_item(text, item)); },
        py::arg("generated"), py::arg("item"));
  m.def("extract_numeric_gold", &extract_numeric_gold, py::arg("solution"));
  m.def(
      "correction_rate",
      [](const std::map<std::string, bool>& baseline, const std::map<std::string, bool>& intervened,
         const std::vector<std::string>& opportunity) { return correction_rate(baseline, intervened, opportunity).delta; },
      py::arg("baseline"), py::arg("intervened"), py::arg("opportunity"),
      "Percentage of opportunity items corrected, or None for an empty opportunity set.");

  m.def(
      "fit_ridge", [](const Array& t, const Array& s, double lam) { return mapper_dict(fit_ridge(to_set(t, "t"), to_set(s, "s"), lam)); },
      py::arg("teacher"), py::arg("student"), py::arg("lam"));
  m.def(
      "fit_lasso",
      [](const Array& t, const Array& s, double lam, std::size_t max_iter, double tol) {
        LassoOptions o;
        o.max_iter = max_iter;
        o.tol = tol;
        return mapper_dict(fit_lasso(to_set(t, "t"), to_set(s, "s"), lam, o));
      },
      py::arg("teacher"), py::arg("student"), py::arg("lam"), py::arg("max_iter") = 5000, py::arg("tol") = 1e-4);
  m.def(
      "fit_permutation_control",
      [](const Array& t, const Array& s, double lam, std::uint64_t seed) {
        return mapper_dict(fit_permutation_control(to_set(t, "t"), to_set(s, "s"), lam, seed));
      },
      py::arg("teacher"), py::arg("student"), py::arg("lam"), py::arg("seed"));
  m.def(
      "r2_score", [](const Array& pred, const Array& target) { return r2_score(to_matrix(pred), to_matrix(target)).value; },
      py::arg("predicted"), py::arg("target"));
  m.def("row_l2_normalize", [](const Array& a) { return to_array(row_l2_normalize(to_matrix(a))); }, py::arg("matrix"));

  m.def(
      "blend",
      [](const std::vector<double>& h, const std::vector<double>& u, double alpha) { return blend(h, u, alpha); },
      py::arg("h_student"), py::arg("h_projected"), py::arg("alpha"));
  m.def("relative_depth_to_layer", &relative_depth_to_layer, py::arg("relative_depth"), py::arg("n_layers"));
  m.attr("DEPTH_GRID") = std::vector<double>(kDepthGrid.begin(), kDepthGrid.end());
  m.attr("ALPHA_GRID") = std::vector<double>(kAlphaGrid.begin(), kAlphaGrid.end());
  m.def(
      "pearson_r", [](const std::vector<double>& x, const std::vector<double>& y) { return pearson_r(x, y); },
      py::arg("x"), py::arg("y"));

  py::class_<TransformerModel>(m, "TransformerModel")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def_property_readonly("n_layers", [](const TransformerModel& t) { return t.config().n_layers; })
      .def_property_readonly("d_model", [](const TransformerModel& t) { return t.config().d_model; })
      .def_property_readonly("model_id", [](const TransformerModel& t) { return t.config().model_id; })
      .def(
          "generate",
          [](const TransformerModel& t, const std::vector<QAItem>& items, std::size_t max_new_tokens) {
            GenerationOptions o;
            o.max_new_tokens = max_new_tokens;
            std::vector<std::string> out;
            for (const auto& g : generate_texts(t, items, o)) out.push_back(g.text);
            return out;
          },
          py::arg("items"), py::arg("max_new_tokens") = 16)
      .def(
          "activations",
          [](const TransformerModel& t, const std::vector<QAItem>& items, std::size_t layer) {
            return to_array(extract_activations(t, items, layer).matrix);
          },
          py::arg("items"), py::arg("layer"));

  m.def("default_config", [](std::uint64_t seed) { return config_to_py(pipeline::default_config(seed)); },
        py::arg("seed") = 42);
  m.def("resolve_config", [](const py::object& cfg) { return config_to_py(config_from(cfg)); }, py::arg("config"));

  const std::pair<const char*, void (*)(const pipeline::RunConfig&)> stages[] = {
      {"corpus_gen", pipeline::cmd_corpus_gen}, {"train_pair", pipeline::cmd_train_pair},
      {"extract", pipeline::cmd_extract},       {"fit_mappers", pipeline::cmd_fit_mappers},
      {"sweep", pipeline::cmd_sweep},           {"dissociate", pipeline::cmd_dissociate},
      {"report", pipeline::cmd_report},         {"run_all", pipeline::cmd_all},
  };
  for (const auto& [name, fn] : stages) {
    m.def(
        name,
        [fn](const py::object& cfg) {
          const auto c = config_from(cfg);
          py::gil_scoped_release release;
          fn(c);
        },
        py::arg("config") = py::none());
  }
}
