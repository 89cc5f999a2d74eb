#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace deeppbm {

/// Per-sample shape: {features} or {channels, height, width}.
using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense batch tensor whose leading axis is the batch.
template <typename T>
struct Tensor {
    Shape shape;  // full shape including the batch axis
    std::vector<T> values;

    Tensor() = default;
    Tensor(Shape s, std::vector<T> v);
    static Tensor zeros(Shape s);

    std::size_t batch() const { return shape.empty() ? 0 : shape.front(); }
    std::size_t sample_size() const { return batch() == 0 ? 0 : values.size() / batch(); }
    Shape sample_shape() const { return Shape(shape.begin() + 1, shape.end()); }
};

enum class LayerKind { conv2d, transposed_conv2d, dense, relu, sigmoid, flatten, reshape };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    Shape target;  // reshape only

    static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            std::size_t padding);
    static LayerSpec transposed_conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                                       std::size_t stride, std::size_t padding);
    static LayerSpec dense(std::size_t in, std::size_t out);
    static LayerSpec relu();
    static LayerSpec sigmoid();
    static LayerSpec flatten();
    static LayerSpec reshape(Shape target);

    bool has_parameters() const {
        return kind == LayerKind::conv2d || kind == LayerKind::transposed_conv2d ||
               kind == LayerKind::dense;
    }
    bool operator==(const LayerSpec&) const = default;
};

/// Output shape of one layer; throws ShapeError when the input does not fit.
Shape layer_output_shape(const LayerSpec& layer, const Shape& input);

/// Shapes flowing through the stack, input first. Throws ShapeError on the first
/// layer that does not compose.
std::vector<Shape> infer_shapes(std::span<const LayerSpec> layers, const Shape& input);

template <typename T>
struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<T> values;
};

/// Ordered weights and biases of a network.
template <typename T>
struct ParameterSet {
    std::vector<NamedTensor<T>> tensors;

    std::size_t size() const { return tensors.size(); }
    std::size_t total_elements() const;
    ParameterSet zeros_like() const;
    NamedTensor<T>& operator[](std::size_t i) { return tensors[i]; }
    const NamedTensor<T>& operator[](std::size_t i) const { return tensors[i]; }
    /// Throws NumericError naming the first tensor holding NaN/inf.
    void require_finite(const std::string& what) const;
    bool operator==(const ParameterSet& other) const;
};

/// Activations recorded during forward: entry i is the input of layer i, the last
/// entry is the network output.
template <typename T>
struct Tape {
    std::vector<Tensor<T>> activations;
    const Tensor<T>& output() const { return activations.back(); }
};

template <typename T>
struct Gradients {
    ParameterSet<T> parameters;
    Tensor<T> input;
};

/// A fixed stack of layers with a validated per-sample input shape.
template <typename T>
class Network {
public:
    Network() = default;
    Network(std::vector<LayerSpec> layers, Shape input_shape);

    const std::vector<LayerSpec>& layers() const { return layers_; }
    const Shape& input_shape() const { return shapes_.front(); }
    const Shape& output_shape() const { return shapes_.back(); }

    /// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.
    ParameterSet<T> init_parameters(std::uint64_t seed) const;
    ParameterSet<T> zero_parameters() const;
    /// Throws ShapeError when params do not match the layer stack.
    void check_parameters(const ParameterSet<T>& params) const;

    Tape<T> forward(const ParameterSet<T>& params, const Tensor<T>& input) const;
    /// forward() without retaining intermediates.
    Tensor<T> infer(const ParameterSet<T>& params, const Tensor<T>& input) const;
    Gradients<T> backward(const ParameterSet<T>& params, const Tape<T>& tape,
                          const Tensor<T>& output_gradient) const;

private:
    Tensor<T> apply(std::size_t layer, const ParameterSet<T>& params, const Tensor<T>& x) const;
    void check_input(const Tensor<T>& input) const;

    std::vector<LayerSpec> layers_;
    std::vector<Shape> shapes_;
    std::vector<std::size_t> param_slot_;  // index of the layer's weight tensor, or npos
};

/// Loss value and gradient with respect to parameters.
template <typename T>
struct LossAndGradient {
    T loss;
    ParameterSet<T> gradient;
};

struct GradientCheckOptions {
    double eps = 1e-5;
    /// 0 checks every coordinate; otherwise a seeded random subsample of this size.
    std::size_t max_coordinates = 0;
    std::uint64_t seed = 0;
    /// Denominator floor for the relative error.
    double floor = 1e-7;
};

struct GradientCheckResult {
    /// Largest per-tensor error ||analytic - numeric||_2 / max(||numeric||_2, floor).
    double max_relative_error = 0.0;
    /// Largest single-coordinate |analytic - numeric|, for diagnostics.
    double max_absolute_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_tensor;
};

/// Compares analytic gradients against central differences of `loss` on every
/// coordinate (or a seeded subsample). Errors are measured per tensor in the 2-norm
/// over the checked coordinates; per-coordinate ratios are dominated by rounding noise
/// wherever the true gradient is near zero.
template <typename T>
GradientCheckResult gradient_check(const ParameterSet<T>& params,
                                   const std::function<LossAndGradient<T>(const ParameterSet<T>&)>& analytic,
                                   const std::function<T(const ParameterSet<T>&)>& loss,
                                   const GradientCheckOptions& options = {});

/// Scalar loss of a network output together with d loss / d output.
template <typename T>
using OutputLoss = std::function<std::pair<T, Tensor<T>>(const Tensor<T>&)>;

template <typename T>
GradientCheckResult gradient_check(const Network<T>& net, const ParameterSet<T>& params,
                                   const Tensor<T>& input, const OutputLoss<T>& loss_fn,
                                   const GradientCheckOptions& options = {});

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
    AdamConfig config;
    ParameterSet<T> first_moment;
    ParameterSet<T> second_moment;
    std::uint64_t step = 0;

    AdamState() = default;
    AdamState(const ParameterSet<T>& params, AdamConfig cfg);
};

/// One bias-corrected Adam update, in place. Throws NumericError naming the first
/// non-finite gradient tensor, leaving params and state untouched.
template <typename T>
void adam_step(ParameterSet<T>& params, const ParameterSet<T>& grads, AdamState<T>& state);

}  // namespace deeppbm
