#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "deeppbm/rpca.hpp"
#include "deeppbm/training.hpp"
#include "deeppbm/vae.hpp"
#include "deeppbm/video_io.hpp"

namespace deeppbm {

enum class ChannelRule { max_channel, luma };

struct SubtractConfig {
    double threshold = 0.1;
    ChannelRule channel_rule = ChannelRule::max_channel;
    double long_video_fraction = 0.2;

    void validate() const;
};

/// Posterior-mean reconstruction decode(encode(f).mu) for every frame, batched.
FrameTensor estimate_background(const VaeModel<float>& model, const FrameTensor& frames,
                                std::size_t batch_size = 64);

/// Foreground where the per-pixel difference exceeds the threshold. The difference is
/// the largest absolute channel difference, or the absolute luma of the difference.
std::vector<std::uint8_t> extract_mask(std::span<const float> frame, std::span<const float> background,
                                       std::size_t channels, std::size_t height, std::size_t width,
                                       const SubtractConfig& config);

/// Masks for every frame of `frames` against matching backgrounds.
MaskSequence subtract(const FrameTensor& frames, FrameTensor backgrounds, const SubtractConfig& config,
                      Method method);

/// Short-video protocol with an already trained model.
MaskSequence run_deeppbm(const FrameTensor& frames, const VaeModel<float>& model, const SubtractConfig& config);

/// Short-video protocol: trains on all frames, then subtracts.
MaskSequence run_deeppbm(const FrameTensor& frames, const TrainConfig& train_config,
                         const SubtractConfig& config);

/// floor(fraction * frames); throws ConfigError when that is zero.
std::size_t long_video_training_count(std::size_t frames, double fraction);

struct LongVideoRun {
    MaskSequence masks;
    VaeModel<float> model;
    TrainHistory history;
    std::size_t training_frames = 0;
};

/// Trains on the leading fraction of frames, then estimates backgrounds and masks
/// for all of them.
LongVideoRun run_long_video(const FrameTensor& frames, const TrainConfig& train_config,
                            const SubtractConfig& config);

struct RpcaRun {
    MaskSequence masks;
    std::size_t iterations = 0;
    double residual = 0.0;
    bool converged = false;
    double lambda = 0.0;
    std::size_t rank = 0;
};

/// Backgrounds are the columns of the low-rank part; masks use the same thresholder
/// as the DeepPBM path.
RpcaRun run_rpca_bs(const FrameTensor& frames, const RpcaOptions& rpca, const SubtractConfig& config);

struct PriorSample {};
struct Perturb {
    FrameTensor frame;  // one frame matching the model input
    double scale = 1.0;
};
using GenerateMode = std::variant<PriorSample, Perturb>;

/// Decodes z ~ N(0, I), or mu(frame) + scale * eps, into one synthetic background.
FrameTensor generate_background(const VaeModel<float>& model, const GenerateMode& mode, std::uint64_t seed);

}  // namespace deeppbm
