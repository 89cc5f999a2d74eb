#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "deeppbm/vae.hpp"
#include "deeppbm/video_io.hpp"

namespace deeppbm {

struct TrainConfig {
    std::size_t latent_dim = 8;
    std::size_t batch_size = 140;
    std::size_t epochs = 200;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    bool shuffle = true;
    int precision = 32;  // 32 or 64
    std::size_t base_channels = 32;
    /// Save to checkpoint_path every this many epochs; 0 disables.
    std::size_t checkpoint_every = 0;
    std::filesystem::path checkpoint_path;

    void validate() const;
};

struct EpochRecord {
    double total = 0.0;
    double reconstruction_l1 = 0.0;
    double kl = 0.0;
    double seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
};

/// Per-epoch frame order: identity, or a permutation drawn from the shuffle stream.
/// Batches are consecutive runs of this order; the last one may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t frames, std::size_t batch_size,
                                                    bool shuffle, std::mt19937_64& shuffle_rng);

/// Three independent seed streams (init, shuffle, noise) derived from one seed.
struct SeedStreams {
    std::uint64_t init;
    std::uint64_t shuffle;
    std::uint64_t noise;
};
SeedStreams derive_seeds(std::uint64_t seed);

/// Preprocessing that produced the training frames, replayed at inference time.
struct Preprocessing {
    std::optional<FrameSize> resize;
    bool grayscale = false;
};

using EpochCallback = std::function<void(std::size_t epoch, const EpochRecord&)>;

template <typename T>
struct TrainResult {
    VaeModel<T> model;
    TrainHistory history;
};

/// Minimizes the batch-mean L1 + KL loss with Adam. Deterministic for a fixed seed.
/// Throws NumericError carrying the epoch and batch on a non-finite loss.
template <typename T>
TrainResult<T> train(const FrameTensor& frames, const TrainConfig& config,
                     const EpochCallback& on_epoch = {}, const Preprocessing& preprocessing = {});

/// Dispatches on config.precision and returns a 32-bit model.
TrainResult<float> train_model(const FrameTensor& frames, const TrainConfig& config,
                               const EpochCallback& on_epoch = {}, const Preprocessing& preprocessing = {});

struct Checkpoint {
    VaeModel<float> model;
    TrainHistory history;
    std::optional<TrainConfig> config;
    Preprocessing preprocessing;
};

inline constexpr std::uint32_t checkpoint_version = 1;

/// "DPBM" | u32 version | u32 metadata length | JSON metadata | float32 LE tensors.
void save_checkpoint(const std::filesystem::path& path, const VaeModel<float>& model,
                     const TrainHistory& history, const std::optional<TrainConfig>& config = std::nullopt,
                     const Preprocessing& preprocessing = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deeppbm
