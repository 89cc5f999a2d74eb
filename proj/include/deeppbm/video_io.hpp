#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace deeppbm {

struct FrameSize {
    std::size_t height = 0;
    std::size_t width = 0;
    bool operator==(const FrameSize&) const = default;
};

/// A batch of video frames laid out [N x C x H x W], values in [0,1].
class FrameTensor {
public:
    FrameTensor() = default;
    /// Validates every invariant; throws ShapeError / NumericError.
    FrameTensor(std::size_t frames, std::size_t channels, std::size_t height, std::size_t width,
                std::vector<float> data, std::size_t frame_index_offset = 0);

    std::size_t frames() const { return frames_; }
    std::size_t channels() const { return channels_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t frame_size() const { return channels_ * height_ * width_; }
    std::size_t pixels() const { return height_ * width_; }
    std::size_t frame_index_offset() const { return offset_; }
    bool empty() const { return frames_ == 0; }

    std::span<const float> data() const { return data_; }
    std::span<const float> frame(std::size_t i) const;
    float at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((n * channels_ + c) * height_ + y) * width_ + x];
    }

    /// Frames [first, first + count) as a new tensor; the offset follows the slice.
    FrameTensor slice(std::size_t first, std::size_t count) const;

private:
    std::size_t frames_ = 0;
    std::size_t channels_ = 0;
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::size_t offset_ = 0;
    std::vector<float> data_;
};

/// Binary foreground masks [N x H x W] with the set of frames that carry labels.
struct GroundTruthMasks {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> masks;
    std::vector<std::size_t> labeled_indices;

    std::span<const std::uint8_t> mask(std::size_t i) const {
        return std::span<const std::uint8_t>(masks).subspan(i * height * width, height * width);
    }
    void validate() const;
};

/// 8-bit interleaved image as decoded from disk.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  // 1 or 3
    std::vector<std::uint8_t> pixels;
};

Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Image files (png/ppm/pgm) in a directory, lexicographically sorted by filename.
std::vector<std::filesystem::path> list_image_files(const std::filesystem::path& dir);

/// Trailing decimal number in a filename stem ("frame_000012" -> 12).
std::optional<std::size_t> filename_index(const std::filesystem::path& path);

struct LoadOptions {
    std::optional<FrameSize> resize;
    bool grayscale = false;
};

/// Loads a directory of frames. The channel count is 1 when grayscale is requested
/// or every source image is single-channel, otherwise 3 (R,G,B). The frame index
/// offset is taken from the first filename's trailing number when present.
FrameTensor load_frame_sequence(const std::filesystem::path& dir, const LoadOptions& options = {});

/// Single image normalized to a one-frame tensor with the same preprocessing rules.
FrameTensor load_frame(const std::filesystem::path& path, const LoadOptions& options = {});

/// Bilinear resize with corner-aligned sampling.
FrameTensor resize_bilinear(const FrameTensor& frames, FrameSize size);
FrameTensor to_grayscale(const FrameTensor& frames);

/// Writes each frame as `<prefix>%06d.png` (index = offset + i), values mapped by round(255 v).
void write_frames(const FrameTensor& frames, const std::filesystem::path& out_dir,
                  const std::string& prefix);

enum class BackgroundKind { static_scene, sinusoidal_illumination };

struct SyntheticSceneSpec {
    std::size_t frames = 100;
    FrameSize size{64, 64};
    std::size_t channels = 1;
    BackgroundKind background = BackgroundKind::static_scene;
    double illumination_amplitude = 0.08;  // <= 0.1
    double illumination_period = 25.0;     // frames
    FrameSize object{8, 8};
    int velocity_x = 1;  // pixels per frame
    int velocity_y = 0;
    std::size_t start_x = 4;
    std::size_t start_y = 28;
    /// The object stays at its start position for this many frames before moving.
    std::size_t parked_frames = 0;
    /// Intensity offset added to the background under the object.
    double contrast = 0.4;
    std::uint64_t seed = 7;

    void validate() const;
};

struct SyntheticScene {
    FrameTensor frames;
    GroundTruthMasks truth;
    /// Background without illumination modulation or object, [C x H x W].
    std::vector<float> background;
    /// Per-frame background including illumination, [N x C x H x W].
    FrameTensor backgrounds;
};

SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec);

enum class Method { deeppbm, rpca };
std::string to_string(Method method);

/// Per-frame binary foreground masks and the backgrounds they were derived from.
struct MaskSequence {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> masks;  // [N x H x W], 0 or 1
    std::optional<FrameTensor> backgrounds;
    double threshold = 0.0;
    Method method = Method::deeppbm;
    std::size_t frame_index_offset = 0;

    std::span<const std::uint8_t> mask(std::size_t i) const {
        return std::span<const std::uint8_t>(masks).subspan(i * height * width, height * width);
    }
    std::size_t foreground_pixels() const;
};

/// Writes `mask_%06d.png` (0/255) per frame into out_dir, and `bg_%06d.png` into
/// background_dir when given and backgrounds are present.
void write_mask_sequence(const MaskSequence& masks, const std::filesystem::path& out_dir,
                         const std::optional<std::filesystem::path>& background_dir = std::nullopt);

/// Writes `<prefix>%06d.png` (0/255) for every frame of a binary mask stack.
void write_binary_masks(std::span<const std::uint8_t> masks, std::size_t frames, FrameSize size,
                        std::size_t frame_index_offset, const std::filesystem::path& out_dir,
                        const std::string& prefix);

/// Binary masks read from disk, keyed by the trailing number in each filename.
struct IndexedMasks {
    FrameSize size;
    std::map<std::size_t, std::vector<std::uint8_t>> masks;
};

/// Reads every image in dir as a binary mask (gray level > 127 is foreground; color
/// images use their first channel). All masks must share one size.
IndexedMasks read_mask_directory(const std::filesystem::path& dir);

}  // namespace deeppbm
