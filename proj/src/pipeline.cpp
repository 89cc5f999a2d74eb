#include "deeppbm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "deeppbm/error.hpp"

namespace deeppbm {

void SubtractConfig::validate() const {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("threshold must lie in (0, 1]");
    if (!(long_video_fraction > 0.0 && long_video_fraction <= 1.0))
        throw ConfigError("long-video fraction must lie in (0, 1]");
}

namespace {

void check_model_input(const VaeModel<float>& model, const FrameTensor& frames) {
    const Shape got{frames.channels(), frames.height(), frames.width()};
    if (got != model.input_shape())
        throw ShapeError("model expects frames of " + to_string(model.input_shape()) + ", got " + to_string(got));
}

}  // namespace

FrameTensor estimate_background(const VaeModel<float>& model, const FrameTensor& frames, std::size_t batch_size) {
    check_model_input(model, frames);
    if (batch_size == 0) batch_size = frames.frames();
    const std::size_t d = model.latent_dim;
    std::vector<float> out;
    out.reserve(frames.data().size());
    for (std::size_t first = 0; first < frames.frames(); first += batch_size) {
        const std::size_t n = std::min(batch_size, frames.frames() - first);
        const auto latents = encode(model, to_tensor<float>(frames.slice(first, n)));
        Tensor<float> z = Tensor<float>::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i)
            std::copy(latents[i].mu.begin(), latents[i].mu.end(), z.values.begin() + static_cast<std::ptrdiff_t>(i * d));
        const Tensor<float> recon = decode(model, z);
        for (float v : recon.values) out.push_back(std::clamp(v, 0.0f, 1.0f));
    }
    return FrameTensor(frames.frames(), frames.channels(), frames.height(), frames.width(), std::move(out),
                       frames.frame_index_offset());
}

std::vector<std::uint8_t> extract_mask(std::span<const float> frame, std::span<const float> background,
                                       std::size_t channels, std::size_t height, std::size_t width,
                                       const SubtractConfig& config) {
    const std::size_t px = height * width;
    if (frame.size() != channels * px || background.size() != channels * px)
        throw ShapeError("frame and background must both be " + std::to_string(channels) + "x" +
                         std::to_string(height) + "x" + std::to_string(width));
    std::vector<std::uint8_t> mask(px, 0);
    const bool luma = config.channel_rule == ChannelRule::luma && channels == 3;
    for (std::size_t i = 0; i < px; ++i) {
        double diff = 0.0;
        if (luma) {
            diff = std::abs(0.299 * (frame[i] - background[i]) + 0.587 * (frame[px + i] - background[px + i]) +
                            0.114 * (frame[2 * px + i] - background[2 * px + i]));
        } else {
            for (std::size_t c = 0; c < channels; ++c)
                diff = std::max(diff, static_cast<double>(std::abs(frame[c * px + i] - background[c * px + i])));
        }
        mask[i] = diff > config.threshold ? 1 : 0;
    }
    return mask;
}

MaskSequence subtract(const FrameTensor& frames, FrameTensor backgrounds, const SubtractConfig& config,
                      Method method) {
    config.validate();
    if (backgrounds.frames() != frames.frames() || backgrounds.frame_size() != frames.frame_size())
        throw ShapeError("backgrounds do not match the frames");
    MaskSequence seq;
    seq.frames = frames.frames();
    seq.height = frames.height();
    seq.width = frames.width();
    seq.threshold = config.threshold;
    seq.method = method;
    seq.frame_index_offset = frames.frame_index_offset();
    seq.masks.reserve(seq.frames * frames.pixels());
    for (std::size_t n = 0; n < frames.frames(); ++n) {
        const auto m = extract_mask(frames.frame(n), backgrounds.frame(n), frames.channels(), frames.height(),
                                    frames.width(), config);
        seq.masks.insert(seq.masks.end(), m.begin(), m.end());
    }
    seq.backgrounds = std::move(backgrounds);
    return seq;
}

MaskSequence run_deeppbm(const FrameTensor& frames, const VaeModel<float>& model, const SubtractConfig& config) {
    config.validate();
    return subtract(frames, estimate_background(model, frames), config, Method::deeppbm);
}

MaskSequence run_deeppbm(const FrameTensor& frames, const TrainConfig& train_config, const SubtractConfig& config) {
    config.validate();
    const auto trained = train_model(frames, train_config);
    return run_deeppbm(frames, trained.model, config);
}

std::size_t long_video_training_count(std::size_t frames, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("long-video fraction must lie in (0, 1]");
    const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(frames)));
    if (count == 0)
        throw ConfigError("long-video fraction " + std::to_string(fraction) + " of " + std::to_string(frames) +
                          " frames leaves no training frames");
    return count;
}

LongVideoRun run_long_video(const FrameTensor& frames, const TrainConfig& train_config, const SubtractConfig& config) {
    config.validate();
    LongVideoRun run;
    run.training_frames = long_video_training_count(frames.frames(), config.long_video_fraction);
    auto trained = train_model(frames.slice(0, run.training_frames), train_config);
    run.model = std::move(trained.model);
    run.history = std::move(trained.history);
    run.masks = run_deeppbm(frames, run.model, config);
    return run;
}

RpcaRun run_rpca_bs(const FrameTensor& frames, const RpcaOptions& rpca, const SubtractConfig& config) {
    config.validate();
    const ObservationMatrix obs = ObservationMatrix::from_frames(frames);
    const RpcaResult r = rpca_decompose(obs.data, rpca);
    RpcaRun run;
    run.masks = subtract(frames, obs.to_frames(r.low_rank, frames.frame_index_offset()), config, Method::rpca);
    run.iterations = r.iterations;
    run.residual = r.residual;
    run.converged = r.converged;
    run.lambda = r.lambda;
    run.rank = r.rank;
    return run;
}

FrameTensor generate_background(const VaeModel<float>& model, const GenerateMode& mode, std::uint64_t seed) {
    const std::size_t d = model.latent_dim;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Tensor<float> z = Tensor<float>::zeros({1, d});
    for (auto& v : z.values) v = static_cast<float>(gauss(rng));

    if (const auto* p = std::get_if<Perturb>(&mode)) {
        if (p->frame.frames() != 1) throw ShapeError("perturbation needs exactly one frame");
        check_model_input(model, p->frame);
        const auto latent = encode(model, to_tensor<float>(p->frame)).front();
        const auto scale = static_cast<float>(p->scale);
        for (std::size_t k = 0; k < d; ++k) z.values[k] = latent.mu[k] + scale * z.values[k];
    }
    const Tensor<float> image = decode(model, z);
    return to_frames(image);
}

}  // namespace deeppbm
