#include "deeppbm/diffnet.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "deeppbm/error.hpp"

namespace deeppbm {

namespace {

constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
    std::size_t channels, height, width;  // image side
    std::size_t kernel, stride, padding;
    std::size_t out_height, out_width;    // column side
};

// col[(c*k*k + ky*k + kx), oy*Wo + ox] = image[c, oy*s - p + ky, ox*s - p + kx]
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
    const std::size_t k = g.kernel;
    const std::size_t cols = g.out_height * g.out_width;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((c * k + ky) * k + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                    T* dst = row + oy * g.out_width;
                    if (iy < 0 || iy >= static_cast<long>(g.height)) {
                        std::fill(dst, dst + g.out_width, T(0));
                        continue;
                    }
                    const T* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_width; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0)
                                                                               : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back onto the (zeroed) image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
    const std::size_t k = g.kernel;
    const std::size_t cols = g.out_height * g.out_width;
    std::fill(image, image + g.channels * g.height * g.width, T(0));
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((c * k + ky) * k + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_height; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                    if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                    T* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    const T* src = row + oy * g.out_width;
                    for (std::size_t ox = 0; ox < g.out_width; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                        if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Geometry of the convolution side of a layer: for conv2d the image is the input,
// for transposed_conv2d the image is the output.
ConvGeometry conv_geometry(const LayerSpec& l, const Shape& in, const Shape& out) {
    if (l.kind == LayerKind::conv2d)
        return {in[0], in[1], in[2], l.kernel, l.stride, l.padding, out[1], out[2]};
    return {out[0], out[1], out[2], l.kernel, l.stride, l.padding, in[1], in[2]};
}

std::pair<std::size_t, std::size_t> fans(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::transposed_conv2d:
            return {l.in_channels * l.kernel * l.kernel, l.out_channels * l.kernel * l.kernel};
        case LayerKind::dense:
            return {l.in_features, l.out_features};
        default:
            return {0, 0};
    }
}

Shape weight_shape(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::conv2d:
            return {l.out_channels, l.in_channels, l.kernel, l.kernel};
        case LayerKind::transposed_conv2d:
            return {l.in_channels, l.out_channels, l.kernel, l.kernel};
        case LayerKind::dense:
            return {l.out_features, l.in_features};
        default:
            return {};
    }
}

std::size_t bias_size(const LayerSpec& l) {
    return l.kind == LayerKind::dense ? l.out_features : l.out_channels;
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (element_count(shape) != values.size())
        throw ShapeError("tensor of shape " + to_string(shape) + " given " + std::to_string(values.size()) +
                         " values");
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape s) {
    const std::size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<T>(n, T(0)));
}

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::transposed_conv2d: return "transposed_conv2d";
        case LayerKind::dense: return "dense";
        case LayerKind::relu: return "relu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::flatten: return "flatten";
        case LayerKind::reshape: return "reshape";
    }
    return "unknown";
}

LayerKind parse_layer_kind(const std::string& name) {
    for (auto k : {LayerKind::conv2d, LayerKind::transposed_conv2d, LayerKind::dense, LayerKind::relu,
                   LayerKind::sigmoid, LayerKind::flatten, LayerKind::reshape}) {
        if (to_string(k) == name) return k;
    }
    throw FormatError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    return l;
}

LayerSpec LayerSpec::transposed_conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                                       std::size_t stride, std::size_t padding) {
    LayerSpec l = conv2d(in, out, kernel, stride, padding);
    l.kind = LayerKind::transposed_conv2d;
    return l;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.in_features = in;
    l.out_features = out;
    return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::sigmoid() {
    LayerSpec l;
    l.kind = LayerKind::sigmoid;
    return l;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = LayerKind::flatten;
    return l;
}

LayerSpec LayerSpec::reshape(Shape target) {
    LayerSpec l;
    l.kind = LayerKind::reshape;
    l.target = std::move(target);
    return l;
}

Shape layer_output_shape(const LayerSpec& l, const Shape& in) {
    const std::string where = to_string(l.kind) + " on input " + to_string(in);
    switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::transposed_conv2d: {
            if (in.size() != 3) throw ShapeError(where + ": expected a [C x H x W] input");
            if (in[0] != l.in_channels)
                throw ShapeError(where + ": expected " + std::to_string(l.in_channels) + " channels");
            if (l.kernel == 0 || l.stride == 0 || l.out_channels == 0)
                throw ShapeError(where + ": kernel, stride and channels must be positive");
            if (l.kind == LayerKind::conv2d) {
                const long h = static_cast<long>(in[1] + 2 * l.padding) - static_cast<long>(l.kernel);
                const long w = static_cast<long>(in[2] + 2 * l.padding) - static_cast<long>(l.kernel);
                if (h < 0 || w < 0) throw ShapeError(where + ": kernel larger than padded input");
                return {l.out_channels, static_cast<std::size_t>(h) / l.stride + 1,
                        static_cast<std::size_t>(w) / l.stride + 1};
            }
            const long h = static_cast<long>((in[1] - 1) * l.stride + l.kernel) - 2 * static_cast<long>(l.padding);
            const long w = static_cast<long>((in[2] - 1) * l.stride + l.kernel) - 2 * static_cast<long>(l.padding);
            if (h <= 0 || w <= 0) throw ShapeError(where + ": empty output");
            return {l.out_channels, static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
        }
        case LayerKind::dense:
            if (in.size() != 1 || in[0] != l.in_features)
                throw ShapeError(where + ": expected " + std::to_string(l.in_features) + " features");
            if (l.out_features == 0) throw ShapeError(where + ": zero output features");
            return {l.out_features};
        case LayerKind::relu:
        case LayerKind::sigmoid:
            return in;
        case LayerKind::flatten:
            return {element_count(in)};
        case LayerKind::reshape:
            if (l.target.empty() || element_count(l.target) != element_count(in))
                throw ShapeError(where + ": cannot reshape to " + to_string(l.target));
            return l.target;
    }
    throw ShapeError(where);
}

std::vector<Shape> infer_shapes(std::span<const LayerSpec> layers, const Shape& input) {
    if (input.empty() || element_count(input) == 0) throw ShapeError("empty network input shape");
    std::vector<Shape> shapes{input};
    for (const auto& l : layers) shapes.push_back(layer_output_shape(l, shapes.back()));
    return shapes;
}

template <typename T>
std::size_t ParameterSet<T>::total_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
}

template <typename T>
ParameterSet<T> ParameterSet<T>::zeros_like() const {
    ParameterSet out;
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.shape, std::vector<T>(t.values.size(), T(0))});
    return out;
}

template <typename T>
void ParameterSet<T>::require_finite(const std::string& what) const {
    for (const auto& t : tensors) {
        if (!all_finite(t.values)) throw NumericError("non-finite " + what + " in tensor '" + t.name + "'");
    }
}

template <typename T>
bool ParameterSet<T>::operator==(const ParameterSet& other) const {
    if (tensors.size() != other.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& a = tensors[i];
        const auto& b = other.tensors[i];
        if (a.name != b.name || a.shape != b.shape || a.values != b.values) return false;
    }
    return true;
}

template <typename T>
Network<T>::Network(std::vector<LayerSpec> layers, Shape input_shape)
    : layers_(std::move(layers)), shapes_(infer_shapes(layers_, input_shape)) {
    std::size_t slot = 0;
    for (const auto& l : layers_) {
        if (l.has_parameters()) {
            param_slot_.push_back(slot);
            slot += 2;
        } else {
            param_slot_.push_back(npos);
        }
    }
}

template <typename T>
ParameterSet<T> Network<T>::zero_parameters() const {
    ParameterSet<T> p;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (!l.has_parameters()) continue;
        const std::string prefix = "layer" + std::to_string(i) + "." + to_string(l.kind);
        const Shape ws = weight_shape(l);
        p.tensors.push_back({prefix + ".weight", ws, std::vector<T>(element_count(ws), T(0))});
        p.tensors.push_back({prefix + ".bias", Shape{bias_size(l)}, std::vector<T>(bias_size(l), T(0))});
    }
    return p;
}

template <typename T>
ParameterSet<T> Network<T>::init_parameters(std::uint64_t seed) const {
    ParameterSet<T> p = zero_parameters();
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (param_slot_[i] == npos) continue;
        const auto [fan_in, fan_out] = fans(layers_[i]);
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& w : p.tensors[param_slot_[i]].values) w = static_cast<T>(dist(rng));
    }
    return p;
}

template <typename T>
void Network<T>::check_parameters(const ParameterSet<T>& params) const {
    const auto expected = zero_parameters();
    if (params.size() != expected.size())
        throw ShapeError("expected " + std::to_string(expected.size()) + " parameter tensors, got " +
                         std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape != expected[i].shape || params[i].values.size() != expected[i].values.size())
            throw ShapeError("parameter '" + expected[i].name + "' expected " + to_string(expected[i].shape) +
                             ", got " + to_string(params[i].shape));
    }
}

template <typename T>
void Network<T>::check_input(const Tensor<T>& input) const {
    if (input.batch() == 0) throw ShapeError("empty input batch");
    if (input.sample_shape() != input_shape())
        throw ShapeError("network expects samples of " + to_string(input_shape()) + ", got " +
                         to_string(input.sample_shape()));
}

template <typename T>
Tensor<T> Network<T>::apply(std::size_t i, const ParameterSet<T>& params, const Tensor<T>& x) const {
    const LayerSpec& l = layers_[i];
    const Shape& in = shapes_[i];
    const Shape& out = shapes_[i + 1];
    const std::size_t batch = x.batch();
    Shape full{batch};
    full.insert(full.end(), out.begin(), out.end());
    Tensor<T> y = Tensor<T>::zeros(full);
    const std::size_t in_n = element_count(in);
    const std::size_t out_n = element_count(out);

    switch (l.kind) {
        case LayerKind::conv2d: {
            const ConvGeometry g = conv_geometry(l, in, out);
            const std::size_t rows = l.in_channels * l.kernel * l.kernel;
            const std::size_t cols = g.out_height * g.out_width;
            ConstMatMap<T> W(params[param_slot_[i]].values.data(), l.out_channels, rows);
            const auto& b = params[param_slot_[i] + 1].values;
            std::vector<T> col(rows * cols);
            for (std::size_t n = 0; n < batch; ++n) {
                im2col(x.values.data() + n * in_n, g, col.data());
                MatMap<T> Y(y.values.data() + n * out_n, l.out_channels, cols);
                Y.noalias() = W * ConstMatMap<T>(col.data(), rows, cols);
                for (std::size_t c = 0; c < l.out_channels; ++c) Y.row(c).array() += b[c];
            }
            break;
        }
        case LayerKind::transposed_conv2d: {
            const ConvGeometry g = conv_geometry(l, in, out);
            const std::size_t rows = l.out_channels * l.kernel * l.kernel;
            const std::size_t cols = in[1] * in[2];
            ConstMatMap<T> W(params[param_slot_[i]].values.data(), l.in_channels, rows);
            const auto& b = params[param_slot_[i] + 1].values;
            std::vector<T> col(rows * cols);
            for (std::size_t n = 0; n < batch; ++n) {
                MatMap<T> C(col.data(), rows, cols);
                C.noalias() = W.transpose() * ConstMatMap<T>(x.values.data() + n * in_n, l.in_channels, cols);
                T* yn = y.values.data() + n * out_n;
                col2im(col.data(), g, yn);
                const std::size_t px = out[1] * out[2];
                for (std::size_t c = 0; c < l.out_channels; ++c)
                    for (std::size_t p = 0; p < px; ++p) yn[c * px + p] += b[c];
            }
            break;
        }
        case LayerKind::dense: {
            ConstMatMap<T> W(params[param_slot_[i]].values.data(), l.out_features, l.in_features);
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params[param_slot_[i] + 1].values.data(),
                                                                    l.out_features);
            MatMap<T> Y(y.values.data(), batch, l.out_features);
            Y.noalias() = ConstMatMap<T>(x.values.data(), batch, l.in_features) * W.transpose();
            Y.rowwise() += b;
            break;
        }
        case LayerKind::relu:
            std::transform(x.values.begin(), x.values.end(), y.values.begin(),
                           [](T v) { return v > T(0) ? v : T(0); });
            break;
        case LayerKind::sigmoid:
            std::transform(x.values.begin(), x.values.end(), y.values.begin(),
                           [](T v) { return T(1) / (T(1) + std::exp(-v)); });
            break;
        case LayerKind::flatten:
        case LayerKind::reshape:
            y.values = x.values;
            break;
    }
    return y;
}

template <typename T>
Tape<T> Network<T>::forward(const ParameterSet<T>& params, const Tensor<T>& input) const {
    check_input(input);
    check_parameters(params);
    Tape<T> tape;
    tape.activations.reserve(layers_.size() + 1);
    tape.activations.push_back(input);
    for (std::size_t i = 0; i < layers_.size(); ++i)
        tape.activations.push_back(apply(i, params, tape.activations.back()));
    return tape;
}

template <typename T>
Tensor<T> Network<T>::infer(const ParameterSet<T>& params, const Tensor<T>& input) const {
    check_input(input);
    check_parameters(params);
    Tensor<T> x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) x = apply(i, params, x);
    return x;
}

template <typename T>
Gradients<T> Network<T>::backward(const ParameterSet<T>& params, const Tape<T>& tape,
                                  const Tensor<T>& output_gradient) const {
    if (tape.activations.size() != layers_.size() + 1) throw ShapeError("tape does not belong to this network");
    if (output_gradient.shape != tape.output().shape)
        throw ShapeError("output gradient " + to_string(output_gradient.shape) + " vs output " +
                         to_string(tape.output().shape));
    check_parameters(params);

    Gradients<T> g{params.zeros_like(), output_gradient};
    const std::size_t batch = output_gradient.batch();

    for (std::size_t i = layers_.size(); i-- > 0;) {
        const LayerSpec& l = layers_[i];
        const Shape& in = shapes_[i];
        const Shape& out = shapes_[i + 1];
        const Tensor<T>& x = tape.activations[i];
        const std::size_t in_n = element_count(in);
        const std::size_t out_n = element_count(out);
        const Tensor<T>& dy = g.input;
        Tensor<T> dx = Tensor<T>::zeros(x.shape);

        switch (l.kind) {
            case LayerKind::conv2d: {
                const ConvGeometry geo = conv_geometry(l, in, out);
                const std::size_t rows = l.in_channels * l.kernel * l.kernel;
                const std::size_t cols = geo.out_height * geo.out_width;
                ConstMatMap<T> W(params[param_slot_[i]].values.data(), l.out_channels, rows);
                MatMap<T> dW(g.parameters[param_slot_[i]].values.data(), l.out_channels, rows);
                auto& db = g.parameters[param_slot_[i] + 1].values;
                std::vector<T> col(rows * cols);
                for (std::size_t n = 0; n < batch; ++n) {
                    ConstMatMap<T> dY(dy.values.data() + n * out_n, l.out_channels, cols);
                    im2col(x.values.data() + n * in_n, geo, col.data());
                    dW.noalias() += dY * ConstMatMap<T>(col.data(), rows, cols).transpose();
                    for (std::size_t c = 0; c < l.out_channels; ++c) db[c] += dY.row(c).sum();
                    MatMap<T>(col.data(), rows, cols).noalias() = W.transpose() * dY;
                    col2im(col.data(), geo, dx.values.data() + n * in_n);
                }
                break;
            }
            case LayerKind::transposed_conv2d: {
                const ConvGeometry geo = conv_geometry(l, in, out);
                const std::size_t rows = l.out_channels * l.kernel * l.kernel;
                const std::size_t cols = in[1] * in[2];
                ConstMatMap<T> W(params[param_slot_[i]].values.data(), l.in_channels, rows);
                MatMap<T> dW(g.parameters[param_slot_[i]].values.data(), l.in_channels, rows);
                auto& db = g.parameters[param_slot_[i] + 1].values;
                std::vector<T> col(rows * cols);
                const std::size_t px = out[1] * out[2];
                for (std::size_t n = 0; n < batch; ++n) {
                    const T* dyn = dy.values.data() + n * out_n;
                    for (std::size_t c = 0; c < l.out_channels; ++c)
                        for (std::size_t p = 0; p < px; ++p) db[c] += dyn[c * px + p];
                    im2col(dyn, geo, col.data());
                    ConstMatMap<T> dC(col.data(), rows, cols);
                    ConstMatMap<T> X(x.values.data() + n * in_n, l.in_channels, cols);
                    dW.noalias() += X * dC.transpose();
                    MatMap<T>(dx.values.data() + n * in_n, l.in_channels, cols).noalias() = W * dC;
                }
                break;
            }
            case LayerKind::dense: {
                ConstMatMap<T> W(params[param_slot_[i]].values.data(), l.out_features, l.in_features);
                MatMap<T> dW(g.parameters[param_slot_[i]].values.data(), l.out_features, l.in_features);
                auto& db = g.parameters[param_slot_[i] + 1].values;
                ConstMatMap<T> dY(dy.values.data(), batch, l.out_features);
                ConstMatMap<T> X(x.values.data(), batch, l.in_features);
                dW.noalias() += dY.transpose() * X;
                for (std::size_t o = 0; o < l.out_features; ++o) db[o] += dY.col(o).sum();
                MatMap<T>(dx.values.data(), batch, l.in_features).noalias() = dY * W;
                break;
            }
            case LayerKind::relu:
                for (std::size_t k = 0; k < dx.values.size(); ++k)
                    dx.values[k] = x.values[k] > T(0) ? dy.values[k] : T(0);
                break;
            case LayerKind::sigmoid: {
                const Tensor<T>& y = tape.activations[i + 1];
                for (std::size_t k = 0; k < dx.values.size(); ++k)
                    dx.values[k] = dy.values[k] * y.values[k] * (T(1) - y.values[k]);
                break;
            }
            case LayerKind::flatten:
            case LayerKind::reshape:
                dx.values = dy.values;
                break;
        }
        g.input = std::move(dx);
    }
    return g;
}

template <typename T>
GradientCheckResult gradient_check(const ParameterSet<T>& params,
                                   const std::function<LossAndGradient<T>(const ParameterSet<T>&)>& analytic,
                                   const std::function<T(const ParameterSet<T>&)>& loss,
                                   const GradientCheckOptions& options) {
    if (!(options.eps > 0.0)) throw ConfigError("gradient check eps must be positive");
    const LossAndGradient<T> reference = analytic(params);
    if (!std::isfinite(reference.loss)) throw NumericError("gradient check: non-finite loss");

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t t = 0; t < params.size(); ++t)
        for (std::size_t k = 0; k < params[t].values.size(); ++k) coords.emplace_back(t, k);
    if (options.max_coordinates > 0 && options.max_coordinates < coords.size()) {
        std::mt19937_64 rng(options.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(options.max_coordinates);
    }

    GradientCheckResult result;
    ParameterSet<T> probe = params;
    const T eps = static_cast<T>(options.eps);
    std::vector<double> diff_sq(params.size(), 0.0), numeric_sq(params.size(), 0.0);
    for (const auto& [t, k] : coords) {
        const T original = probe[t].values[k];
        probe[t].values[k] = original + eps;
        const T plus = loss(probe);
        probe[t].values[k] = original - eps;
        const T minus = loss(probe);
        probe[t].values[k] = original;
        if (!std::isfinite(plus) || !std::isfinite(minus))
            throw NumericError("gradient check: non-finite loss perturbing '" + params[t].name + "'");
        const double numeric = (static_cast<double>(plus) - static_cast<double>(minus)) / (2.0 * options.eps);
        const double diff = static_cast<double>(reference.gradient[t].values[k]) - numeric;
        diff_sq[t] += diff * diff;
        numeric_sq[t] += numeric * numeric;
        result.max_absolute_error = std::max(result.max_absolute_error, std::abs(diff));
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        const double rel = std::sqrt(diff_sq[t]) / std::max(std::sqrt(numeric_sq[t]), options.floor);
        if (rel > result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst_tensor = params[t].name;
        }
    }
    result.coordinates = coords.size();
    return result;
}

template <typename T>
GradientCheckResult gradient_check(const Network<T>& net, const ParameterSet<T>& params,
                                   const Tensor<T>& input, const OutputLoss<T>& loss_fn,
                                   const GradientCheckOptions& options) {
    auto analytic = [&](const ParameterSet<T>& p) {
        const Tape<T> tape = net.forward(p, input);
        auto [value, dout] = loss_fn(tape.output());
        return LossAndGradient<T>{value, net.backward(p, tape, dout).parameters};
    };
    auto loss = [&](const ParameterSet<T>& p) { return loss_fn(net.infer(p, input)).first; };
    return gradient_check<T>(params, analytic, loss, options);
}

template <typename T>
AdamState<T>::AdamState(const ParameterSet<T>& params, AdamConfig cfg)
    : config(cfg), first_moment(params.zeros_like()), second_moment(params.zeros_like()) {}

template <typename T>
void adam_step(ParameterSet<T>& params, const ParameterSet<T>& grads, AdamState<T>& state) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size())
        throw ShapeError("adam: parameter, gradient and state tensor counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].values.size() != params[i].values.size() ||
            state.first_moment[i].values.size() != params[i].values.size())
            throw ShapeError("adam: gradient shape differs for '" + params[i].name + "'");
    }
    grads.require_finite("gradient");

    const auto& c = state.config;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(c.beta1, t);
    const double correction2 = 1.0 - std::pow(c.beta2, t);
    const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].values;
        const auto& g = grads[i].values;
        auto& m = state.first_moment[i].values;
        auto& v = state.second_moment[i].values;
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = b1 * m[k] + (T(1) - b1) * g[k];
            v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
            const double m_hat = static_cast<double>(m[k]) / correction1;
            const double v_hat = static_cast<double>(v[k]) / correction2;
            p[k] -= static_cast<T>(c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon));
        }
    }
}

#define DEEPPBM_INSTANTIATE(T)                                                                             \
    template struct Tensor<T>;                                                                             \
    template struct ParameterSet<T>;                                                                       \
    template class Network<T>;                                                                             \
    template struct AdamState<T>;                                                                          \
    template void adam_step<T>(ParameterSet<T>&, const ParameterSet<T>&, AdamState<T>&);                 \
    template GradientCheckResult gradient_check<T>(                                                        \
        const ParameterSet<T>&, const std::function<LossAndGradient<T>(const ParameterSet<T>&)>&,          \
        const std::function<T(const ParameterSet<T>&)>&, const GradientCheckOptions&);                     \
    template GradientCheckResult gradient_check<T>(const Network<T>&, const ParameterSet<T>&,              \
                                                   const Tensor<T>&, const OutputLoss<T>&,                 \
                                                   const GradientCheckOptions&);

DEEPPBM_INSTANTIATE(float)
DEEPPBM_INSTANTIATE(double)

#undef DEEPPBM_INSTANTIATE

}  // namespace deeppbm
