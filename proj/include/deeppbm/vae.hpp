#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "deeppbm/diffnet.hpp"
#include "deeppbm/video_io.hpp"

namespace deeppbm {

/// Diagonal Gaussian posterior of one frame; the encoder emits log-variance.
template <typename T>
struct LatentGaussian {
    std::vector<T> mu;
    std::vector<T> log_var;

    std::size_t dim() const { return mu.size(); }
};

struct Architecture {
    std::vector<LayerSpec> encoder;
    std::vector<LayerSpec> decoder;
};

/// Three stride-2 4x4 convolutions (base, 2*base, 4*base channels) with ReLU, a dense
/// head producing 2d outputs (mu then log-variance), and a mirrored decoder of
/// transposed convolutions ending in a sigmoid. Height and width must be multiples of 8.
Architecture default_architecture(const Shape& input_shape, std::size_t latent_dim,
                                  std::size_t base_channels = 32);

/// Encoder (phi) and decoder (theta) networks with their parameters.
template <typename T>
struct VaeModel {
    Network<T> encoder;
    Network<T> decoder;
    ParameterSet<T> encoder_params;
    ParameterSet<T> decoder_params;
    std::size_t latent_dim = 0;

    VaeModel() = default;
    /// Validates that the encoder emits 2d values, the decoder takes d and
    /// reproduces input_shape. Parameters are initialized from seed.
    VaeModel(const Architecture& arch, const Shape& input_shape, std::size_t latent_dim,
             std::uint64_t seed);

    const Shape& input_shape() const { return encoder.input_shape(); }
    Architecture architecture() const { return {encoder.layers(), decoder.layers()}; }
};

/// Casts every parameter to another precision.
template <typename To, typename From>
VaeModel<To> cast_model(const VaeModel<From>& model);

/// Frames as an [N x C x H x W] network batch.
template <typename T>
Tensor<T> to_tensor(const FrameTensor& frames);

/// Network output back into frames (values clamped to [0,1]); offset is carried over.
template <typename T>
FrameTensor to_frames(const Tensor<T>& batch, std::size_t frame_index_offset = 0);

template <typename T>
std::vector<LatentGaussian<T>> encode(const VaeModel<T>& model, const Tensor<T>& frames);

/// z = mu + exp(log_var / 2) * noise
template <typename T>
std::vector<T> reparameterize(const LatentGaussian<T>& latent, std::span<const T> noise);

/// Decodes a [N x d] batch of latent vectors into frames in [0,1].
template <typename T>
Tensor<T> decode(const VaeModel<T>& model, const Tensor<T>& z);

/// -1/2 * sum_k (1 + log_var_k - mu_k^2 - exp(log_var_k))
template <typename T>
T kl_divergence(const LatentGaussian<T>& latent);

/// Sum of absolute differences over all elements of the batch.
template <typename T>
T l1_reconstruction(const Tensor<T>& f, const Tensor<T>& f_prime);

struct LossBreakdown {
    double total = 0.0;
    double reconstruction_l1 = 0.0;
    double kl = 0.0;
    std::size_t batch_size = 0;
};

template <typename T>
struct LossWithGradients {
    LossBreakdown loss;
    ParameterSet<T> encoder_grad;
    ParameterSet<T> decoder_grad;
};

/// Batch mean of per-frame L1 reconstruction (summed over pixels and channels) plus
/// per-frame KL (summed over latent dimensions). `noise` is [N x d], one standard
/// normal draw per frame. Throws NumericError naming a non-finite term.
template <typename T>
LossBreakdown total_loss(const VaeModel<T>& model, const Tensor<T>& frames, const Tensor<T>& noise);

/// total_loss plus reverse-mode gradients through the reparameterized sample.
template <typename T>
LossWithGradients<T> total_loss_with_gradients(const VaeModel<T>& model, const Tensor<T>& frames,
                                               const Tensor<T>& noise);

}  // namespace deeppbm
