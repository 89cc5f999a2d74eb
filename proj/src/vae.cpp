#include "deeppbm/vae.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deeppbm/error.hpp"

namespace deeppbm {

Architecture default_architecture(const Shape& input_shape, std::size_t latent_dim,
                                  std::size_t base_channels) {
    if (input_shape.size() != 3) throw ShapeError("VAE input must be [C x H x W]");
    const std::size_t C = input_shape[0], H = input_shape[1], W = input_shape[2];
    if (H % 8 != 0 || W % 8 != 0)
        throw ShapeError("default architecture needs height and width divisible by 8, got " +
                         to_string(input_shape));
    if (latent_dim == 0) throw ConfigError("latent dimension must be at least 1");
    if (base_channels == 0) throw ConfigError("base channel count must be at least 1");
    const std::size_t b = base_channels;
    const Shape bottleneck{4 * b, H / 8, W / 8};
    const std::size_t flat = element_count(bottleneck);

    Architecture a;
    a.encoder = {LayerSpec::conv2d(C, b, 4, 2, 1),         LayerSpec::relu(),
                 LayerSpec::conv2d(b, 2 * b, 4, 2, 1),     LayerSpec::relu(),
                 LayerSpec::conv2d(2 * b, 4 * b, 4, 2, 1), LayerSpec::relu(),
                 LayerSpec::flatten(),                     LayerSpec::dense(flat, 2 * latent_dim)};
    a.decoder = {LayerSpec::dense(latent_dim, flat),
                 LayerSpec::relu(),
                 LayerSpec::reshape(bottleneck),
                 LayerSpec::transposed_conv2d(4 * b, 2 * b, 4, 2, 1),
                 LayerSpec::relu(),
                 LayerSpec::transposed_conv2d(2 * b, b, 4, 2, 1),
                 LayerSpec::relu(),
                 LayerSpec::transposed_conv2d(b, C, 4, 2, 1),
                 LayerSpec::sigmoid()};
    return a;
}

template <typename T>
VaeModel<T>::VaeModel(const Architecture& arch, const Shape& input_shape, std::size_t d,
                      std::uint64_t seed)
    : encoder(arch.encoder, input_shape), decoder(arch.decoder, Shape{d}), latent_dim(d) {
    if (d == 0) throw ConfigError("latent dimension must be at least 1");
    if (encoder.output_shape() != Shape{2 * d})
        throw ShapeError("encoder must emit " + std::to_string(2 * d) + " values, emits " +
                         to_string(encoder.output_shape()));
    if (decoder.output_shape() != input_shape)
        throw ShapeError("decoder output " + to_string(decoder.output_shape()) + " differs from input " +
                         to_string(input_shape));
    // Separate derived seeds keep the decoder init independent of encoder size.
    encoder_params = encoder.init_parameters(seed * 2 + 0x9e3779b97f4a7c15ULL);
    decoder_params = decoder.init_parameters(seed * 2 + 1 + 0x9e3779b97f4a7c15ULL);
}

template <typename To, typename From>
VaeModel<To> cast_model(const VaeModel<From>& model) {
    auto cast = [](const ParameterSet<From>& p) {
        ParameterSet<To> out;
        for (const auto& t : p.tensors)
            out.tensors.push_back({t.name, t.shape, std::vector<To>(t.values.begin(), t.values.end())});
        return out;
    };
    VaeModel<To> m;
    m.encoder = Network<To>(model.encoder.layers(), model.encoder.input_shape());
    m.decoder = Network<To>(model.decoder.layers(), model.decoder.input_shape());
    m.encoder_params = cast(model.encoder_params);
    m.decoder_params = cast(model.decoder_params);
    m.latent_dim = model.latent_dim;
    return m;
}

template <typename T>
Tensor<T> to_tensor(const FrameTensor& frames) {
    const auto d = frames.data();
    return Tensor<T>({frames.frames(), frames.channels(), frames.height(), frames.width()},
                     std::vector<T>(d.begin(), d.end()));
}

template <typename T>
FrameTensor to_frames(const Tensor<T>& batch, std::size_t frame_index_offset) {
    if (batch.shape.size() != 4) throw ShapeError("expected an [N x C x H x W] batch, got " + to_string(batch.shape));
    std::vector<float> v(batch.values.size());
    for (std::size_t k = 0; k < v.size(); ++k)
        v[k] = std::clamp(static_cast<float>(batch.values[k]), 0.0f, 1.0f);
    return FrameTensor(batch.shape[0], batch.shape[1], batch.shape[2], batch.shape[3], std::move(v),
                       frame_index_offset);
}

namespace {

template <typename T>
std::vector<LatentGaussian<T>> split_latents(const Tensor<T>& head, std::size_t d) {
    std::vector<LatentGaussian<T>> out(head.batch());
    for (std::size_t n = 0; n < head.batch(); ++n) {
        const T* row = head.values.data() + n * 2 * d;
        out[n].mu.assign(row, row + d);
        out[n].log_var.assign(row + d, row + 2 * d);
    }
    return out;
}

template <typename T>
void check_frames(const VaeModel<T>& model, const Tensor<T>& frames) {
    if (frames.batch() == 0) throw ShapeError("empty frame batch");
    if (frames.sample_shape() != model.input_shape())
        throw ShapeError("model expects frames of " + to_string(model.input_shape()) + ", got " +
                         to_string(frames.sample_shape()));
}

template <typename T>
void check_noise(const VaeModel<T>& model, const Tensor<T>& frames, const Tensor<T>& noise) {
    if (noise.shape != Shape{frames.batch(), model.latent_dim})
        throw ShapeError("noise must be [" + std::to_string(frames.batch()) + "x" +
                         std::to_string(model.latent_dim) + "], got " + to_string(noise.shape));
}

}  // namespace

template <typename T>
std::vector<LatentGaussian<T>> encode(const VaeModel<T>& model, const Tensor<T>& frames) {
    check_frames(model, frames);
    return split_latents(model.encoder.infer(model.encoder_params, frames), model.latent_dim);
}

template <typename T>
std::vector<T> reparameterize(const LatentGaussian<T>& latent, std::span<const T> noise) {
    if (noise.size() != latent.dim()) throw ShapeError("noise width differs from latent dimension");
    std::vector<T> z(latent.dim());
    for (std::size_t k = 0; k < z.size(); ++k)
        z[k] = latent.mu[k] + std::exp(latent.log_var[k] / T(2)) * noise[k];
    return z;
}

template <typename T>
Tensor<T> decode(const VaeModel<T>& model, const Tensor<T>& z) {
    if (z.shape.size() != 2 || z.shape[1] != model.latent_dim)
        throw ShapeError("latent batch must be [N x " + std::to_string(model.latent_dim) + "], got " +
                         to_string(z.shape));
    return model.decoder.infer(model.decoder_params, z);
}

template <typename T>
T kl_divergence(const LatentGaussian<T>& latent) {
    T acc = 0;
    for (std::size_t k = 0; k < latent.dim(); ++k) {
        const T lv = latent.log_var[k];
        acc += T(1) + lv - latent.mu[k] * latent.mu[k] - std::exp(lv);
    }
    return T(-0.5) * acc;
}

template <typename T>
T l1_reconstruction(const Tensor<T>& f, const Tensor<T>& f_prime) {
    if (f.shape != f_prime.shape)
        throw ShapeError("reconstruction " + to_string(f_prime.shape) + " vs frames " + to_string(f.shape));
    T acc = 0;
    for (std::size_t k = 0; k < f.values.size(); ++k) acc += std::abs(f.values[k] - f_prime.values[k]);
    return acc;
}

namespace {

template <typename T>
struct LossPass {
    Tape<T> encoder_tape;
    Tape<T> decoder_tape;
    std::vector<LatentGaussian<T>> latents;
    LossBreakdown loss;
};

template <typename T>
LossPass<T> loss_pass(const VaeModel<T>& model, const Tensor<T>& frames, const Tensor<T>& noise) {
    check_frames(model, frames);
    check_noise(model, frames, noise);
    const std::size_t N = frames.batch(), d = model.latent_dim;

    LossPass<T> pass;
    pass.encoder_tape = model.encoder.forward(model.encoder_params, frames);
    pass.latents = split_latents(pass.encoder_tape.output(), d);

    Tensor<T> z = Tensor<T>::zeros({N, d});
    for (std::size_t n = 0; n < N; ++n) {
        const auto zn = reparameterize(pass.latents[n], std::span<const T>(noise.values).subspan(n * d, d));
        std::copy(zn.begin(), zn.end(), z.values.begin() + static_cast<std::ptrdiff_t>(n * d));
    }
    pass.decoder_tape = model.decoder.forward(model.decoder_params, z);

    const T batch = static_cast<T>(N);
    const T recon = l1_reconstruction(frames, pass.decoder_tape.output()) / batch;
    T kl = 0;
    for (const auto& lat : pass.latents) kl += kl_divergence(lat);
    kl /= batch;
    if (!std::isfinite(recon)) throw NumericError("non-finite reconstruction_l1 term in loss");
    if (!std::isfinite(kl)) throw NumericError("non-finite kl term in loss");
    const T total = recon + kl;
    pass.loss = LossBreakdown{static_cast<double>(total), static_cast<double>(recon), static_cast<double>(kl), N};
    return pass;
}

}  // namespace

template <typename T>
LossBreakdown total_loss(const VaeModel<T>& model, const Tensor<T>& frames, const Tensor<T>& noise) {
    return loss_pass(model, frames, noise).loss;
}

template <typename T>
LossWithGradients<T> total_loss_with_gradients(const VaeModel<T>& model, const Tensor<T>& frames,
                                               const Tensor<T>& noise) {
    LossPass<T> pass = loss_pass(model, frames, noise);
    const std::size_t N = frames.batch(), d = model.latent_dim;
    const T inv_n = T(1) / static_cast<T>(N);

    // d recon / d f' = sign(f' - f) / N
    const Tensor<T>& recon = pass.decoder_tape.output();
    Tensor<T> d_out = Tensor<T>::zeros(recon.shape);
    for (std::size_t k = 0; k < recon.values.size(); ++k) {
        const T diff = recon.values[k] - frames.values[k];
        d_out.values[k] = diff > T(0) ? inv_n : (diff < T(0) ? -inv_n : T(0));
    }
    Gradients<T> dec = model.decoder.backward(model.decoder_params, pass.decoder_tape, d_out);

    // Back through z = mu + exp(lv/2) eps, plus the KL term's direct dependence.
    Tensor<T> d_head = Tensor<T>::zeros({N, 2 * d});
    for (std::size_t n = 0; n < N; ++n) {
        const auto& lat = pass.latents[n];
        for (std::size_t k = 0; k < d; ++k) {
            const T dz = dec.input.values[n * d + k];
            const T sigma = std::exp(lat.log_var[k] / T(2));
            const T eps = noise.values[n * d + k];
            d_head.values[n * 2 * d + k] = dz + lat.mu[k] * inv_n;
            d_head.values[n * 2 * d + d + k] =
                dz * eps * sigma / T(2) + (std::exp(lat.log_var[k]) - T(1)) * inv_n / T(2);
        }
    }
    Gradients<T> enc = model.encoder.backward(model.encoder_params, pass.encoder_tape, d_head);
    return {pass.loss, std::move(enc.parameters), std::move(dec.parameters)};
}

#define DEEPPBM_INSTANTIATE(T)                                                                          \
    template Tensor<T> to_tensor<T>(const FrameTensor&);                                                \
    template FrameTensor to_frames<T>(const Tensor<T>&, std::size_t);                                   \
    template struct VaeModel<T>;                                                                        \
    template std::vector<LatentGaussian<T>> encode<T>(const VaeModel<T>&, const Tensor<T>&);           \
    template std::vector<T> reparameterize<T>(const LatentGaussian<T>&, std::span<const T>);           \
    template Tensor<T> decode<T>(const VaeModel<T>&, const Tensor<T>&);                                \
    template T kl_divergence<T>(const LatentGaussian<T>&);                                              \
    template T l1_reconstruction<T>(const Tensor<T>&, const Tensor<T>&);                                \
    template LossBreakdown total_loss<T>(const VaeModel<T>&, const Tensor<T>&, const Tensor<T>&);      \
    template LossWithGradients<T> total_loss_with_gradients<T>(const VaeModel<T>&, const Tensor<T>&,   \
                                                               const Tensor<T>&);

DEEPPBM_INSTANTIATE(float)
DEEPPBM_INSTANTIATE(double)

#undef DEEPPBM_INSTANTIATE

template VaeModel<float> cast_model<float, double>(const VaeModel<double>&);
template VaeModel<double> cast_model<double, float>(const VaeModel<float>&);
template VaeModel<float> cast_model<float, float>(const VaeModel<float>&);
template VaeModel<double> cast_model<double, double>(const VaeModel<double>&);

}  // namespace deeppbm
