// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "relfsl/cli.hpp"
#include "relfsl/config.hpp"
#include "relfsl/data.hpp"
#include "relfsl/encoder.hpp"
#include "relfsl/gradcheck_suite.hpp"
#include "relfsl/relational.hpp"
#include "relfsl/routing.hpp"
#include "relfsl/trainer.hpp"

namespace py = pybind11;
using namespace relfsl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>::from_data(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_relfsl, m) {
  m.doc() = "Few-shot classification with relational embeddings and routed co-attention";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one subcommand; returns (exit_code, stdout, stderr).");

  m.def("default_config", [] { return serialize_config(RunConfig{}); });
  m.def("normalize_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
        py::arg("text"));

  m.def(
      "flop_count",
      [](std::uint64_t n_q, std::uint64_t n_s, std::uint64_t d, std::uint64_t grid, std::uint64_t k) {
        const auto c = flop_count(n_q, n_s, d, grid, k);
        return py::dict(py::arg("vanilla") = c.vanilla, py::arg("routed") = c.routed, py::arg("ratio") = c.ratio());
      },
      py::arg("n_q"), py::arg("n_s"), py::arg("d"), py::arg("grid"), py::arg("k"));

  m.def(
      "compute_metrics",
      [](const std::vector<std::vector<std::uint64_t>>& confusion) {
        const auto r = compute_metrics(confusion);
        return py::dict(py::arg("accuracy") = r.accuracy, py::arg("precision") = r.precision,
                        py::arg("recall") = r.recall, py::arg("f1") = r.f1);
      },
      py::arg("confusion"));

  m.def(
      "sample_lambda",
      [](double alpha, double beta, std::size_t n, std::uint64_t seed) {
        InterpolationConfig cfg;
        cfg.alpha = alpha;
        cfg.beta = beta;
        std::mt19937_64 rng(seed);
        py::array_t<double> out(static_cast<py::ssize_t>(n));
        for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = sample_lambda(cfg, rng);
        return out;
      },
      py::arg("alpha") = 2.0, py::arg("beta") = 2.0, py::arg("n") = 1, py::arg("seed") = 0);

  m.def(
      "synthetic_images",
      [](std::size_t classes, std::size_t per_class, std::size_t size, std::uint64_t seed) {
        const auto ds = generate_synthetic(classes, per_class, size, seed);
        py::array_t<float> images({classes * per_class, std::size_t{3}, size, size});
        py::array_t<std::int64_t> labels(static_cast<py::ssize_t>(classes * per_class));
        float* dst = images.mutable_data();
        for (std::size_t c = 0; c < classes; ++c) {
          for (std::size_t i = 0; i < per_class; ++i) {
            const auto img = ds.image(c, i);
            dst = std::copy(img.data().begin(), img.data().end(), dst);
            labels.mutable_data()[c * per_class + i] = static_cast<std::int64_t>(c);
          }
        }
        return py::make_tuple(images, labels);
      },
      py::arg("classes"), py::arg("per_class"), py::arg("size") = kInputSize, py::arg("seed") = 0,
      "Returns (images [N,3,size,size] float32 in [0,1], labels [N]).");

  m.def(
      "self_correlation", [](const Array& z, std::size_t window) { return to_array(self_correlation(to_tensor(z), window)); },
      py::arg("z"), py::arg("window") = 5, "[C,H,W] -> [C,d,d,H,W].");
  m.def(
      "cross_correlation",
      [](const Array& fq, const Array& fs) { return to_array(cross_correlation(to_tensor(fq), to_tensor(fs))); },
      py::arg("fq"), py::arg("fs"), "[C,H,W] x [C,H,W] -> [H,W,H,W] cosine similarities.");
  m.def(
      "vanilla_attention",
      [](const Array& q, const Array& k, const Array& v) {
        return to_array(vanilla_attention(to_tensor(q), to_tensor(k), to_tensor(v)));
      },
      py::arg("q"), py::arg("k"), py::arg("v"));
  m.def(
      "routed_attention",
      [](const Array& q, const Array& k, const Array& v, std::size_t height, std::size_t width, std::size_t grid,
         std::size_t top_k) {
        const auto g = make_region_grid(height, width, grid);
        auto qt = to_tensor(q), kt = to_tensor(k), vt = to_tensor(v);
        const std::size_t d = qt.dim(1);
        auto as_map = [&](const Tensor<double>& x) {
          std::vector<double> chw(x.numel());
          for (std::size_t t = 0; t < g.num_tokens(); ++t)
            for (std::size_t c = 0; c < d; ++c) chw[c * g.num_tokens() + t] = x.data()[t * d + c];
          return Tensor<double>::from_data({d, height, width}, std::move(chw));
        };
        const auto qr = partition_regions(as_map(qt), grid), kr = partition_regions(as_map(kt), grid);
        const auto routing = topk_routing(region_affinity(qr.descriptors, kr.descriptors), top_k);
        return to_array(routed_attention(qt, kt, vt, routing, g, g));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("height"), py::arg("width"), py::arg("grid"),
      py::arg("top_k"), "Token-major [H*W,d] inputs; regions routed by descriptor affinity.");

  m.def(
      "gradcheck",
      [](int bits, std::size_t seeds) {
        if (bits != 32 && bits != 64) throw ContractError("bits must be 32 or 64");
        GradcheckSummary s;
        {
          py::gil_scoped_release release;
          s = run_gradcheck_suite(bits == 32 ? Precision::f32 : Precision::f64, seeds);
        }
        py::list rows;
        for (const auto& r : s.results)
          rows.append(py::make_tuple(r.name, r.seed, r.report.max_rel_error, r.report.pass));
        return rows;
      },
      py::arg("bits") = 64, py::arg("seeds") = 1, "List of (case, seed, max_rel_error, passed).");
}
