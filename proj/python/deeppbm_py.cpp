#include <optional>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "deeppbm/error.hpp"
#include "deeppbm/evaluation.hpp"
#include "deeppbm/pipeline.hpp"
#include "deeppbm/rpca.hpp"
#include "deeppbm/training.hpp"
#include "deeppbm/vae.hpp"
#include "deeppbm/video_io.hpp"

namespace py = pybind11;
using namespace deeppbm;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

// [N,C,H,W] or [N,H,W] (single channel) array into frames.
FrameTensor frames_from(const FloatArray& a) {
    if (a.ndim() != 3 && a.ndim() != 4) throw ShapeError("frames must be [N,C,H,W] or [N,H,W]");
    const auto n = static_cast<std::size_t>(a.shape(0));
    const std::size_t c = a.ndim() == 4 ? static_cast<std::size_t>(a.shape(1)) : 1;
    const auto h = static_cast<std::size_t>(a.shape(a.ndim() - 2));
    const auto w = static_cast<std::size_t>(a.shape(a.ndim() - 1));
    return FrameTensor(n, c, h, w, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray array_from(const FrameTensor& f) {
    FloatArray out({f.frames(), f.channels(), f.height(), f.width()});
    std::copy(f.data().begin(), f.data().end(), out.mutable_data());
    return out;
}

ByteArray masks_array(const std::vector<std::uint8_t>& m, std::size_t n, std::size_t h, std::size_t w) {
    ByteArray out({n, h, w});
    std::copy(m.begin(), m.end(), out.mutable_data());
    return out;
}

ChannelRule parse_rule(const std::string& s) {
    if (s == "max-channel") return ChannelRule::max_channel;
    if (s == "luma") return ChannelRule::luma;
    throw ConfigError("channel_rule must be max-channel or luma, got " + s);
}

SubtractConfig subtract_config(double threshold, const std::string& rule) {
    SubtractConfig c;
    c.threshold = threshold;
    c.channel_rule = parse_rule(rule);
    c.validate();
    return c;
}

py::list history_list(const TrainHistory& h) {
    py::list out;
    for (const auto& e : h.epochs)
        out.append(py::dict(py::arg("total") = e.total, py::arg("reconstruction_l1") = e.reconstruction_l1,
                            py::arg("kl") = e.kl, py::arg("seconds") = e.seconds));
    return out;
}

py::dict scores_dict(const Scores& s) {
    return py::dict(py::arg("precision") = s.precision, py::arg("recall") = s.recall,
                    py::arg("f_measure") = s.f_measure);
}

}  // namespace

PYBIND11_MODULE(deeppbm, m) {
    m.doc() = "Variational-autoencoder background models and an RPCA baseline for background subtraction";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());

    py::class_<VaeModel<float>>(m, "Model")
        .def_property_readonly("latent_dim", [](const VaeModel<float>& v) { return v.latent_dim; })
        .def_property_readonly("input_shape",
                               [](const VaeModel<float>& v) {
                                   const auto& s = v.input_shape();
                                   return std::vector<std::size_t>(s.begin(), s.end());
                               })
        .def_property_readonly("parameter_count",
                               [](const VaeModel<float>& v) {
                                   return v.encoder_params.total_elements() + v.decoder_params.total_elements();
                               })
        .def(
            "encode",
            [](const VaeModel<float>& v, const FloatArray& frames) {
                const auto lat = encode(v, to_tensor<float>(frames_from(frames)));
                FloatArray mu({lat.size(), v.latent_dim}), lv({lat.size(), v.latent_dim});
                for (std::size_t i = 0; i < lat.size(); ++i) {
                    std::copy(lat[i].mu.begin(), lat[i].mu.end(), mu.mutable_data() + i * v.latent_dim);
                    std::copy(lat[i].log_var.begin(), lat[i].log_var.end(), lv.mutable_data() + i * v.latent_dim);
                }
                return py::make_tuple(mu, lv);
            },
            py::arg("frames"), "Posterior mean and log-variance, each [N, d].")
        .def(
            "decode",
            [](const VaeModel<float>& v, const FloatArray& z) {
                if (z.ndim() != 2) throw ShapeError("z must be [N, d]");
                const std::vector<std::size_t> shape{static_cast<std::size_t>(z.shape(0)),
                                                     static_cast<std::size_t>(z.shape(1))};
                const Tensor<float> t(Shape(shape.begin(), shape.end()), std::vector<float>(z.data(), z.data() + z.size()));
                return array_from(to_frames(decode(v, t)));
            },
            py::arg("z"))
        .def(
            "save",
            [](const VaeModel<float>& v, const std::filesystem::path& path) { save_checkpoint(path, v, {}); },
            py::arg("path"));

    m.def(
        "synthetic_scene",
        [](std::size_t frames, std::size_t height, std::size_t width, std::size_t channels, std::uint64_t seed,
           std::size_t parked_frames, double contrast, bool sinusoidal, std::pair<std::size_t, std::size_t> object,
           std::pair<std::size_t, std::size_t> start) {
            SyntheticSceneSpec spec;
            spec.frames = frames;
            spec.size = FrameSize{height, width};
            spec.channels = channels;
            spec.seed = seed;
            spec.parked_frames = parked_frames;
            spec.contrast = contrast;
            spec.object = FrameSize{object.second, object.first};
            spec.start_x = start.first;
            spec.start_y = start.second;
            if (sinusoidal) spec.background = BackgroundKind::sinusoidal_illumination;
            const auto s = generate_synthetic_scene(spec);
            return py::make_tuple(array_from(s.frames), masks_array(s.truth.masks, frames, height, width));
        },
        py::arg("frames") = 100, py::arg("height") = 64, py::arg("width") = 64, py::arg("channels") = 1,
        py::arg("seed") = 7, py::arg("parked_frames") = 0, py::arg("contrast") = 0.4, py::arg("sinusoidal") = false,
        py::arg("object") = std::pair<std::size_t, std::size_t>{8, 8},
        py::arg("start") = std::pair<std::size_t, std::size_t>{4, 28},
        "Moving-rectangle scene: (frames [N,C,H,W] float32, truth masks [N,H,W] uint8).\n"
        "object is (width, height) and start is (x, y).");

    m.def(
        "load_frames",
        [](const std::filesystem::path& dir, std::optional<std::pair<std::size_t, std::size_t>> resize,
           bool grayscale) {
            LoadOptions o;
            if (resize) o.resize = FrameSize{resize->second, resize->first};
            o.grayscale = grayscale;
            return array_from(load_frame_sequence(dir, o));
        },
        py::arg("dir"), py::arg("resize") = std::nullopt, py::arg("grayscale") = false,
        "Image directory as [N,C,H,W] floats in [0,1]; resize is (width, height).");

    m.def(
        "train",
        [](const FloatArray& frames, std::size_t latent_dim, std::size_t epochs, std::size_t batch_size,
           double learning_rate, std::uint64_t seed, std::size_t base_channels, bool shuffle, int precision) {
            TrainConfig c;
            c.latent_dim = latent_dim;
            c.epochs = epochs;
            c.batch_size = batch_size;
            c.learning_rate = learning_rate;
            c.seed = seed;
            c.base_channels = base_channels;
            c.shuffle = shuffle;
            c.precision = precision;
            const FrameTensor f = frames_from(frames);
            TrainResult<float> r = [&] {
                py::gil_scoped_release release;
                return train_model(f, c);
            }();
            return py::make_tuple(std::move(r.model), history_list(r.history));
        },
        py::arg("frames"), py::arg("latent_dim") = 8, py::arg("epochs") = 200, py::arg("batch_size") = 140,
        py::arg("learning_rate") = 1e-3, py::arg("seed") = 0, py::arg("base_channels") = 32, py::arg("shuffle") = true,
        py::arg("precision") = 32, "Trains a background model: (Model, per-epoch loss history).");

    m.def(
        "load_model", [](const std::filesystem::path& path) { return load_checkpoint(path).model; },
        py::arg("path"));

    m.def(
        "estimate_background",
        [](const VaeModel<float>& model, const FloatArray& frames) {
            return array_from(estimate_background(model, frames_from(frames)));
        },
        py::arg("model"), py::arg("frames"));

    m.def(
        "extract_mask",
        [](const FloatArray& frame, const FloatArray& background, double threshold, const std::string& rule) {
            const FrameTensor f = frames_from(frame), b = frames_from(background);
            if (f.frames() != 1 || b.frames() != 1) throw ShapeError("extract_mask takes single [1,C,H,W] frames");
            auto m = extract_mask(f.data(), b.data(), f.channels(), f.height(), f.width(),
                                  subtract_config(threshold, rule));
            return masks_array(m, 1, f.height(), f.width());
        },
        py::arg("frame"), py::arg("background"), py::arg("threshold") = 0.1, py::arg("channel_rule") = "max-channel");

    m.def(
        "subtract",
        [](const VaeModel<float>& model, const FloatArray& frames, double threshold, const std::string& rule) {
            const auto r = run_deeppbm(frames_from(frames), model, subtract_config(threshold, rule));
            return py::make_tuple(masks_array(r.masks, r.frames, r.height, r.width), array_from(*r.backgrounds));
        },
        py::arg("model"), py::arg("frames"), py::arg("threshold") = 0.1, py::arg("channel_rule") = "max-channel",
        "Foreground masks [N,H,W] and backgrounds [N,C,H,W] from a trained model.");

    m.def(
        "rpca",
        [](const DoubleArray& matrix, std::optional<double> lam, double tol, std::size_t max_iter) {
            if (matrix.ndim() != 2) throw ShapeError("rpca takes a 2-D matrix");
            const auto rows = matrix.shape(0), cols = matrix.shape(1);
            const Eigen::MatrixXd mat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                matrix.data(), rows, cols);
            RpcaOptions o;
            o.lambda = lam;
            o.tol = tol;
            o.max_iter = max_iter;
            const auto r = rpca_decompose(mat, o);
            using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
            DoubleArray low({rows, cols}), sparse({rows, cols});
            Eigen::Map<RowMajor>(low.mutable_data(), rows, cols) = r.low_rank;
            Eigen::Map<RowMajor>(sparse.mutable_data(), rows, cols) = r.sparse;
            return py::dict(py::arg("low_rank") = low, py::arg("sparse") = sparse,
                            py::arg("iterations") = r.iterations, py::arg("residual") = r.residual,
                            py::arg("converged") = r.converged, py::arg("lambda") = r.lambda,
                            py::arg("rank") = r.rank);
        },
        py::arg("matrix"), py::arg("lam") = std::nullopt, py::arg("tol") = 1e-7, py::arg("max_iter") = 500,
        "Low-rank plus sparse decomposition of a matrix.");

    m.def(
        "rpca_subtract",
        [](const FloatArray& frames, std::optional<double> lam, double threshold, const std::string& rule) {
            RpcaOptions o;
            o.lambda = lam;
            const auto r = run_rpca_bs(frames_from(frames), o, subtract_config(threshold, rule));
            return py::make_tuple(masks_array(r.masks.masks, r.masks.frames, r.masks.height, r.masks.width),
                                  array_from(*r.masks.backgrounds), r.converged);
        },
        py::arg("frames"), py::arg("lam") = std::nullopt, py::arg("threshold") = 0.1,
        py::arg("channel_rule") = "max-channel", "RPCA baseline: (masks, backgrounds, converged).");

    m.def(
        "evaluate",
        [](const ByteArray& pred, const ByteArray& truth) {
            if (pred.ndim() != 3 || truth.ndim() != 3) throw ShapeError("masks must be [N,H,W]");
            MaskSequence p;
            p.frames = static_cast<std::size_t>(pred.shape(0));
            p.height = static_cast<std::size_t>(pred.shape(1));
            p.width = static_cast<std::size_t>(pred.shape(2));
            for (py::ssize_t i = 0; i < pred.size(); ++i) p.masks.push_back(pred.data()[i] ? 1 : 0);
            GroundTruthMasks g{static_cast<std::size_t>(truth.shape(0)), static_cast<std::size_t>(truth.shape(1)),
                               static_cast<std::size_t>(truth.shape(2)), {}, {}};
            for (py::ssize_t i = 0; i < truth.size(); ++i) g.masks.push_back(truth.data()[i] ? 1 : 0);
            for (std::size_t i = 0; i < g.frames; ++i) g.labeled_indices.push_back(i);
            return scores_dict(evaluate_sequence(p, g).aggregate);
        },
        py::arg("pred"), py::arg("truth"), "Micro-averaged precision, recall and F-measure over all frames.");

    m.def(
        "kl_divergence",
        [](std::vector<double> mu, std::vector<double> log_var) {
            if (mu.size() != log_var.size()) throw ShapeError("mu and log_var differ in length");
            return kl_divergence(LatentGaussian<double>{std::move(mu), std::move(log_var)});
        },
        py::arg("mu"), py::arg("log_var"), "KL(N(mu, exp(log_var)) || N(0, I)).");

    m.def(
        "generate",
        [](const VaeModel<float>& model, std::uint64_t seed, std::optional<FloatArray> frame, double scale) {
            GenerateMode mode = PriorSample{};
            if (frame) mode = Perturb{frames_from(*frame), scale};
            return array_from(generate_background(model, mode, seed));
        },
        py::arg("model"), py::arg("seed") = 0, py::arg("frame") = std::nullopt, py::arg("scale") = 1.0,
        "One background decoded from the prior, or from a perturbed posterior of `frame`.");
}
