#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hallucheck/analysis.hpp"
#include "hallucheck/error.hpp"
#include "hallucheck/features.hpp"
#include "hallucheck/hs.hpp"
#include "hallucheck/image.hpp"
#include "hallucheck/metrics.hpp"
#include "hallucheck/vit.hpp"

namespace py = pybind11;
using namespace hallucheck;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

// (H, W, 3) float array in [0, 1] <-> Image
Image to_image(const F32& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeMismatch("expected an (H, W, 3) array");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.data().begin());
  return img;
}

F32 from_image(const Image& img) {
  F32 out({img.height(), img.width(), 3});
  std::copy(img.data().begin(), img.data().end(), out.mutable_data());
  return out;
}

F32 from_tokens(const features::TokenMatrix& m) {
  F32 out({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), out.mutable_data());
  return out;
}

metrics::SegmentationDistribution to_seg(const F64& a, std::vector<std::string> labels) {
  if (a.ndim() != 3) throw ShapeMismatch("expected an (H, W, K) array");
  if (labels.empty())
    for (py::ssize_t k = 0; k < a.shape(2); ++k) labels.push_back("c" + std::to_string(k));
  if (static_cast<py::ssize_t>(labels.size()) != a.shape(2)) throw ShapeMismatch("label count differs from K");
  metrics::SegmentationDistribution d{std::move(labels), static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                                      std::vector<double>(a.data(), a.data() + a.size())};
  d.validate();
  return d;
}

analysis::ScoreSeries to_series(const std::vector<double>& v, const char* name) {
  analysis::ScoreSeries s{name, {}};
  // zero-padded keys keep map order equal to list order
  char key[16];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(key, sizeof key, "%010zu", i);
    s.values[key] = v[i];
  }
  return s;
}

features::TokenKind token_kind(const std::string& s) {
  if (s == "st" || s == "ST") return features::TokenKind::ST;
  if (s == "cls" || s == "CLS") return features::TokenKind::CLS;
  throw ValidationError("token kind must be 'st' or 'cls', got '" + s + "'");
}

py::dict bundle_dict(const features::FeatureBundle& b) {
  py::list tokens;
  for (const auto& t : b.tokens) tokens.append(from_tokens(t));
  py::dict d;
  d["backend"] = b.backend_id;
  d["layers"] = b.layers;
  d["grid"] = py::make_tuple(b.grid_rows, b.grid_cols);
  d["tokens"] = tokens;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "hallucheck native core";

  static py::exception<Error> base(m, "Error");
  static py::exception<ValidationError> validation(m, "ValidationError", base.ptr());
  static py::exception<ParseError> parse(m, "ParseError", base.ptr());
  static py::exception<ShapeMismatch> shape(m, "ShapeMismatch", validation.ptr());
  static py::exception<Unavailable> unavailable(m, "Unavailable", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ShapeMismatch& e) {
      shape(e.what());
    } catch (const ValidationError& e) {
      validation(e.what());
    } catch (const ParseError& e) {
      parse(e.what());
    } catch (const Unavailable& e) {
      unavailable(e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });

  // images
  m.def("load_image", [](const std::filesystem::path& p) { return from_image(decode_image(p)); }, py::arg("path"));
  m.def("save_png", [](const F32& a, const std::filesystem::path& p) { write_png(to_image(a), p); }, py::arg("image"),
        py::arg("path"));
  m.def("resize_cubic", [](const F32& a, int h, int w) { return from_image(resize(to_image(a), h, w, Interp::Cubic)); },
        py::arg("image"), py::arg("height"), py::arg("width"));

  // metrics
  m.def("mse", [](const F32& a, const F32& b) { return metrics::mse(to_image(a), to_image(b)); });
  m.def("psnr", [](const F32& a, const F32& b) { return metrics::psnr(to_image(a), to_image(b)); });
  m.def("ssim", [](const F32& a, const F32& b) { return metrics::ssim(to_image(a), to_image(b)); });
  m.def("sharpness", [](const F32& a) { return metrics::sharpness(to_image(a)); });
  m.def(
      "ssd",
      [](const F64& gt, const F64& sr, double eps) { return metrics::ssd(to_seg(gt, {}), to_seg(sr, {}), eps); },
      py::arg("gt"), py::arg("sr"), py::arg("epsilon") = metrics::kSsdEpsilon);

  // statistics
  m.def("average_ranks", &analysis::average_ranks);
  m.def("spearman", [](const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ShapeMismatch("series lengths differ");
    return analysis::spearman(to_series(x, "x"), to_series(y, "y"));
  });

  // scorer responses
  m.def("parse_hs_response", [](const std::string& text) {
    const auto r = hs::parse_response(text);
    return py::make_tuple(r.score, r.reasoning);
  });

  // features
  m.attr("INTERM_LAYERS") = features::kIntermLayers;
  m.attr("LAST_LAYER") = features::kLastLayer;

  py::class_<features::Backend>(m, "Backend")
      .def_property_readonly("id", &features::Backend::id)
      .def_property_readonly("depth", &features::Backend::depth)
      .def_property_readonly("dim", &features::Backend::dim)
      .def(
          "embed",
          [](features::Backend& b, const F32& img, const std::string& kind, std::vector<int> layers) {
            return bundle_dict(features::embed(b, to_image(img), token_kind(kind), std::move(layers)));
          },
          py::arg("image"), py::arg("kind") = "st", py::arg("layers") = features::kIntermLayers)
      .def(
          "distance",
          [](features::Backend& b, const F32& x, const F32& y, const std::string& kind, std::vector<int> layers) {
            const auto k = token_kind(kind);
            return features::feature_distance(features::embed(b, to_image(x), k, layers),
                                              features::embed(b, to_image(y), k, layers));
          },
          py::arg("a"), py::arg("b"), py::arg("kind") = "st", py::arg("layers") = features::kIntermLayers);

  py::class_<features::ProjectionBackend, features::Backend>(m, "ProjectionBackend")
      .def(py::init([](const std::string& id, int patch, int dim, int depth, std::uint64_t seed) {
             features::ProjectionBackend::Options o;
             o.id = id;
             o.patch = patch;
             o.dim = dim;
             o.depth = depth;
             o.seed = seed;
             return features::ProjectionBackend(o);
           }),
           py::arg("id") = "projection", py::arg("patch") = 16, py::arg("dim") = 64, py::arg("depth") = 12,
           py::arg("seed") = 7);

  py::class_<features::VitBackend, features::Backend>(m, "VitBackend")
      .def(py::init(&features::VitBackend::load), py::arg("id"), py::arg("weights"))
      .def_property_readonly("patch", [](const features::VitBackend& v) { return v.config().patch; })
      .def_property_readonly("flavor", [](const features::VitBackend& v) {
        return v.config().flavor == features::VitFlavor::Dino ? "dino" : "clip";
      })
      .def("input_side", &features::VitBackend::input_side)
      .def(
          "forward",
          [](const features::VitBackend& v, const F32& img, const std::vector<int>& layers) {
            py::list out;
            for (const auto& t : v.forward(to_image(img), layers)) out.append(from_tokens(t));
            return out;
          },
          py::arg("image"), py::arg("layers"),
          "Per-layer normalized tokens (CLS, registers, patches) for an already-sized image.");
}
