#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mmcl/cli.hpp"
#include "mmcl/demo.hpp"
#include "mmcl/evaluate.hpp"
#include "mmcl/index.hpp"
#include "mmcl/train.hpp"

namespace py = pybind11;
using namespace mmcl;

namespace {

using Image = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

ImageTensor to_tensor(const Image& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected an H x W x 3 uint8 array");
  ImageTensor t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), t.pixels.begin());
  return t;
}

Image to_array(const ImageTensor& t) {
  Image a({t.height, t.width, 3});
  std::copy(t.pixels.begin(), t.pixels.end(), a.mutable_data());
  return a;
}

py::dict record_dict(const SampleRecord& r) {
  py::dict d;
  d["id"] = r.id;
  d["image_ref"] = r.image_ref;
  d["label"] = std::string(label_code(r.label));
  d["dataset"] = r.dataset;
  d["split"] = std::string(split_name(r.split));
  d["image_type"] = std::string(image_type_name(r.image_type));
  if (r.bbox) d["bbox"] = py::make_tuple(r.bbox->x, r.bbox->y, r.bbox->w, r.bbox->h);
  return d;
}

Strategy strategy_arg(const std::string& s) {
  const auto parsed = parse_strategy(s);
  if (!parsed) throw py::value_error("unknown strategy '" + s + "'");
  return *parsed;
}

py::tuple loss_tuple(const LossGrad& g) {
  return py::make_tuple(g.value, g.grad_a, g.grad_b.size() ? py::cast(g.grad_b) : py::none());
}

py::object json_to_py(const nlohmann::ordered_json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

/// Loaded checkpoint plus the query encoder bound to it.
class Model {
 public:
  explicit Model(const std::string& path)
      : ckpt_(load_checkpoint(path)), hash_(checkpoint_hash(path)), encoder_(ckpt_) {}

  Eigen::RowVectorXd encode_text(const std::string& text) const { return encoder_.encode_text(text); }
  Eigen::RowVectorXd encode_image_file(const std::string& path) const { return encoder_.encode_image(read_file(path)); }
  py::object meta() const { return json_to_py(ckpt_.meta); }
  bool has_text() const { return ckpt_.model->has_text(); }
  const std::string& hash() const { return hash_; }
  const Checkpoint& checkpoint() const { return ckpt_; }

 private:
  Checkpoint ckpt_;
  std::string hash_;
  QueryEncoder encoder_;
};

py::list hits_to_py(const EmbeddingIndex& index, const QueryResult& r) {
  py::list out;
  for (const auto& h : r.hits) {
    const IndexItem& it = index.item(h.item);
    py::dict d;
    d["id"] = it.id;
    d["score"] = h.score;
    d["label"] = std::string(label_code(it.label));
    d["modality"] = std::string(modality_name(it.modality));
    d["dataset"] = it.dataset;
    d["sample_id"] = it.sample_id;
    out.append(d);
  }
  return out;
}

std::optional<Modality> filter_arg(const std::optional<std::string>& f) {
  if (!f) return std::nullopt;
  if (*f == "image") return Modality::image;
  if (*f == "text") return Modality::text;
  throw py::value_error("filter must be 'image' or 'text'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multimodal image-text co-learning core";

  py::register_exception<Error>(m, "MmclError", PyExc_RuntimeError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one mmcl verb; returns (exit_code, stdout, stderr).");

  m.def(
      "write_demo_corpus", [](const std::string& out, std::uint64_t seed) { return write_demo_corpus(out, seed).size(); },
      py::arg("out_dir"), py::arg("seed") = 0);

  m.def(
      "load_manifest",
      [](const std::string& path) {
        const Corpus corpus = load_manifest(path);
        py::list out;
        for (const auto& r : corpus.records()) out.append(record_dict(r));
        return out;
      },
      py::arg("path"));

  m.def(
      "synthesize_notes",
      [](const std::string& manifest, const std::string& strategy, const std::string& backend, std::uint64_t seed,
         std::optional<double> corruption) {
        const Strategy s = strategy_arg(strategy);
        const Corpus corpus = load_manifest(manifest);
        std::unique_ptr<GenerationBackend> b;
        if (backend == "template") {
          b = std::make_unique<TemplateBackend>();
        } else if (backend == "mock") {
          MockBackendConfig mc;
          mc.corruption_rate = corruption.value_or(s == Strategy::P3 ? 1.0 : 0.0);
          b = std::make_unique<MockBackend>(mc);
        } else {
          throw py::value_error("backend must be 'template' or 'mock'");
        }
        const SynthesisResult r = synthesize(corpus, s, *b, seed);
        py::list out;
        for (const auto& n : r.notes) {
          py::dict d;
          d["sample_id"] = n.sample_id;
          d["strategy"] = std::string(strategy_code(n.strategy));
          d["text"] = n.text;
          out.append(d);
        }
        return out;
      },
      py::arg("manifest"), py::arg("strategy"), py::arg("backend") = "template", py::arg("seed") = 0,
      py::arg("corruption") = py::none());

  m.def(
      "otsu_crop",
      [](const Image& image, double margin) {
        CropOptions opts;
        opts.margin = margin;
        const CropResult r = otsu_crop(to_tensor(image), opts);
        py::dict d;
        d["image"] = to_array(r.image);
        d["region"] = py::make_tuple(r.region.x, r.region.y, r.region.w, r.region.h);
        d["threshold"] = r.threshold;
        d["fallback"] = r.fallback;
        return d;
      },
      py::arg("image"), py::arg("margin") = 0.10, "Otsu lesion crop resized to 224 x 224.");

  m.def(
      "tokenize",
      [](const std::string& text) {
        const TokenSequence s = Tokenizer::builtin().encode(text);
        py::dict d;
        d["ids"] = s.ids;
        d["truncated"] = s.truncated;
        return d;
      },
      py::arg("text"));

  m.def("cohen_kappa", &cohen_kappa, py::arg("y_true"), py::arg("y_pred"));
  m.def(
      "mean_average_precision",
      [](const Matrix& q, const Matrix& pool, const std::vector<std::vector<bool>>& rel) {
        const MapResult r = mean_average_precision(q, pool, rel);
        return py::make_tuple(r.map, r.evaluated, r.excluded);
      },
      py::arg("queries"), py::arg("pool"), py::arg("relevance"), "Returns (map, evaluated, excluded).");

  m.def(
      "cross_entropy", [](const Matrix& s, const std::vector<int>& labels) { return loss_tuple(cross_entropy(s, labels)); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "l1_align", [](const Matrix& a, const Matrix& b) { return loss_tuple(l1_align(a, b)); }, py::arg("z_img"),
      py::arg("z_txt"));
  m.def(
      "cosine_align", [](const Matrix& a, const Matrix& b) { return loss_tuple(cosine_align(a, b)); }, py::arg("z_img"),
      py::arg("z_txt"));
  m.def(
      "nt_xent",
      [](const Matrix& a, const Matrix& b, double temperature, bool intra) {
        return loss_tuple(nt_xent(a, b, {temperature, intra}));
      },
      py::arg("z_img"), py::arg("z_txt"), py::arg("temperature") = 0.5, py::arg("intra_modal_negatives") = true,
      "Returns (value, grad_img, grad_txt).");

  m.def(
      "train",
      [](const std::string& manifest, const std::string& out, std::optional<std::string> notes, py::object config,
         std::optional<std::string> cache) {
        const TrainConfig cfg = config.is_none() ? TrainConfig{} : TrainConfig::from_json(py_to_json(config));
        const Corpus corpus = load_manifest(manifest);
        ImageStore store(std::filesystem::path(manifest).parent_path(),
                         cache ? std::optional<std::filesystem::path>(*cache) : std::nullopt);
        TrainResult r;
        {
          py::gil_scoped_release release;
          if (notes) {
            r = train(corpus, load_notes(*notes).notes, cfg, store);
          } else {
            r = train_image_only(corpus, cfg, store);
          }
          save_checkpoint(r.checkpoint, out);
        }
        py::dict d;
        d["best_epoch"] = r.best_epoch;
        d["history"] = json_to_py(history_to_json(r.history));
        return d;
      },
      py::arg("manifest"), py::arg("out"), py::arg("notes") = py::none(), py::arg("config") = py::none(),
      py::arg("cache") = py::none(), "Trains one model and writes its checkpoint to `out`.");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("path"))
      .def("encode_text", &Model::encode_text, py::arg("text"))
      .def("encode_image_file", &Model::encode_image_file, py::arg("path"))
      .def_property_readonly("meta", &Model::meta)
      .def_property_readonly("has_text", &Model::has_text)
      .def_property_readonly("hash", &Model::hash);

  py::class_<EmbeddingIndex>(m, "Index")
      .def_static("load", [](const std::string& path) { return load_index(path); }, py::arg("path"))
      .def_static(
          "build",
          [](const Model& model, const std::string& manifest, const std::vector<std::string>& notes_files) {
            const Corpus corpus = load_manifest(manifest);
            ImageStore store(std::filesystem::path(manifest).parent_path());
            std::vector<ClinicalNote> notes;
            for (const auto& f : notes_files) {
              auto r = load_notes(f);
              notes.insert(notes.end(), r.notes.begin(), r.notes.end());
            }
            return build_index(model.checkpoint(), model.hash(), corpus, store, notes);
          },
          py::arg("model"), py::arg("manifest"), py::arg("notes") = std::vector<std::string>{})
      .def("save", [](const EmbeddingIndex& ix, const std::string& path) { save_index(ix, path); }, py::arg("path"))
      .def("__len__", &EmbeddingIndex::size)
      .def_property_readonly("dim", &EmbeddingIndex::dim)
      .def_property_readonly("vectors", &EmbeddingIndex::vectors)
      .def_property_readonly("ids",
                             [](const EmbeddingIndex& ix) {
                               std::vector<std::string> ids;
                               for (const auto& it : ix.items()) ids.push_back(it.id);
                               return ids;
                             })
      .def(
          "query",
          [](const EmbeddingIndex& ix, const Eigen::RowVectorXd& v, std::size_t k, std::optional<std::string> filter) {
            return hits_to_py(ix, query(ix, v, k, filter_arg(filter)));
          },
          py::arg("vector"), py::arg("k") = 10, py::arg("filter") = py::none());
}
