#include "deeppbm/video_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "deeppbm/error.hpp"

namespace deeppbm {

namespace fs = std::filesystem;

FrameTensor::FrameTensor(std::size_t frames, std::size_t channels, std::size_t height,
                         std::size_t width, std::vector<float> data, std::size_t frame_index_offset)
    : frames_(frames),
      channels_(channels),
      height_(height),
      width_(width),
      offset_(frame_index_offset),
      data_(std::move(data)) {
    if (frames_ < 1) throw ShapeError("frame tensor needs at least one frame");
    if (channels_ != 1 && channels_ != 3)
        throw ShapeError("frame tensor channels must be 1 or 3, got " + std::to_string(channels_));
    if (height_ < 8 || width_ < 8)
        throw ShapeError("frames must be at least 8x8, got " + std::to_string(height_) + "x" +
                         std::to_string(width_));
    if (data_.size() != frames_ * channels_ * height_ * width_)
        throw ShapeError("frame tensor data size does not match its shape");
    for (float v : data_) {
        if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
            throw NumericError("frame tensor values must be finite and within [0,1]");
    }
}

std::span<const float> FrameTensor::frame(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * frame_size(), frame_size());
}

FrameTensor FrameTensor::slice(std::size_t first, std::size_t count) const {
    if (first + count > frames_ || count == 0) throw ShapeError("frame slice out of range");
    const auto begin = data_.begin() + static_cast<std::ptrdiff_t>(first * frame_size());
    std::vector<float> sub(begin, begin + static_cast<std::ptrdiff_t>(count * frame_size()));
    return FrameTensor(count, channels_, height_, width_, std::move(sub), offset_ + first);
}

void GroundTruthMasks::validate() const {
    if (masks.size() != frames * height * width) throw ShapeError("ground truth mask size");
    for (auto v : masks) {
        if (v > 1) throw FormatError("ground truth masks must be binary");
    }
    for (auto i : labeled_indices) {
        if (i >= frames) throw ShapeError("labeled index out of range");
    }
}

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

bool is_image_extension(const fs::path& p) {
    const auto ext = lower(p.extension().string());
    return ext == ".png" || ext == ".ppm" || ext == ".pgm";
}

Image read_png(const fs::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str()))
        throw FormatError("cannot decode PNG " + path.string() + ": " + png.message);
    const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
    png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    Image img;
    img.width = png.width;
    img.height = png.height;
    img.channels = color ? 3 : 1;
    img.pixels.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return img;
}

// Binary PPM (P6) / PGM (P5) with maxval <= 255.
Image read_pnm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    auto next_token = [&]() {
        std::string tok;
        char c;
        while (in.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(c);
        }
        return tok;
    };
    const std::string magic = next_token();
    if (magic != "P5" && magic != "P6") throw FormatError("unsupported PNM type in " + path.string());
    Image img;
    try {
        img.width = std::stoul(next_token());
        img.height = std::stoul(next_token());
        const unsigned long maxval = std::stoul(next_token());
        if (maxval == 0 || maxval > 255) throw FormatError("unsupported PNM maxval in " + path.string());
        img.channels = magic == "P6" ? 3 : 1;
        img.pixels.resize(img.width * img.height * img.channels);
        in.read(reinterpret_cast<char*>(img.pixels.data()),
                static_cast<std::streamsize>(img.pixels.size()));
        if (static_cast<std::size_t>(in.gcount()) != img.pixels.size())
            throw FormatError("truncated PNM data in " + path.string());
        if (maxval != 255) {
            for (auto& p : img.pixels)
                p = static_cast<std::uint8_t>(std::lround(255.0 * p / static_cast<double>(maxval)));
        }
    } catch (const std::invalid_argument&) {
        throw FormatError("malformed PNM header in " + path.string());
    } catch (const std::out_of_range&) {
        throw FormatError("malformed PNM header in " + path.string());
    }
    return img;
}

std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::string indexed_name(const std::string& prefix, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", index);
    return prefix + buf + ".png";
}

// Planar float frame from an interleaved byte image, channel count chosen by caller.
void append_frame(const Image& img, std::size_t channels, std::vector<float>& out) {
    const std::size_t px = img.width * img.height;
    for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t src_c = img.channels == 1 ? 0 : c;
        for (std::size_t i = 0; i < px; ++i)
            out.push_back(static_cast<float>(img.pixels[i * img.channels + src_c]) / 255.0f);
    }
}

FrameTensor apply_options(FrameTensor t, const LoadOptions& options) {
    if (options.grayscale && t.channels() == 3) t = to_grayscale(t);
    if (options.resize && !(*options.resize == FrameSize{t.height(), t.width()}))
        t = resize_bilinear(t, *options.resize);
    return t;
}

}  // namespace

Image read_image(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("no such file: " + path.string());
    const auto ext = lower(path.extension().string());
    if (ext == ".png") return read_png(path);
    if (ext == ".ppm" || ext == ".pgm") return read_pnm(path);
    throw FormatError("unsupported image format: " + path.string());
}

void write_png(const fs::path& path, const Image& image) {
    if (image.pixels.size() != image.width * image.height * image.channels)
        throw ShapeError("image buffer size does not match its dimensions");
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + png.message);
}

std::vector<fs::path> list_image_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_image_extension(entry.path())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
        return a.filename().string() < b.filename().string();
    });
    return files;
}

std::optional<std::size_t> filename_index(const fs::path& path) {
    const std::string stem = path.stem().string();
    std::size_t end = stem.size();
    std::size_t begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
    if (begin == end) return std::nullopt;
    return std::stoull(stem.substr(begin, end - begin));
}

FrameTensor load_frame_sequence(const fs::path& dir, const LoadOptions& options) {
    const auto files = list_image_files(dir);
    if (files.empty()) throw IoError("empty directory: no PNG/PPM/PGM frames in " + dir.string());

    std::vector<Image> images;
    images.reserve(files.size());
    for (const auto& f : files) images.push_back(read_image(f));

    const std::size_t channels =
        std::all_of(images.begin(), images.end(), [](const Image& i) { return i.channels == 1; })
            ? 1
            : 3;
    const std::size_t offset = filename_index(files.front()).value_or(0);

    const bool uniform = std::all_of(images.begin(), images.end(), [&](const Image& i) {
        return i.width == images.front().width && i.height == images.front().height;
    });
    if (!uniform && !options.resize)
        throw ShapeError("mixed dimensions in " + dir.string() + " and no resize requested");

    if (uniform) {
        const auto& first = images.front();
        std::vector<float> data;
        data.reserve(images.size() * channels * first.width * first.height);
        for (const auto& img : images) append_frame(img, channels, data);
        return apply_options(
            FrameTensor(images.size(), channels, first.height, first.width, std::move(data), offset),
            options);
    }

    // Mixed sizes: resize each frame on its own, then stack.
    std::vector<float> data;
    for (const auto& img : images) {
        std::vector<float> one;
        append_frame(img, channels, one);
        auto t = apply_options(FrameTensor(1, channels, img.height, img.width, std::move(one)), options);
        data.insert(data.end(), t.data().begin(), t.data().end());
    }
    const std::size_t out_c = options.grayscale ? 1 : channels;
    return FrameTensor(images.size(), out_c, options.resize->height, options.resize->width,
                       std::move(data), offset);
}

FrameTensor load_frame(const fs::path& path, const LoadOptions& options) {
    const Image img = read_image(path);
    std::vector<float> data;
    append_frame(img, img.channels, data);
    return apply_options(FrameTensor(1, img.channels, img.height, img.width, std::move(data),
                                     filename_index(path).value_or(0)),
                         options);
}

FrameTensor resize_bilinear(const FrameTensor& frames, FrameSize size) {
    const std::size_t in_h = frames.height(), in_w = frames.width();
    const std::size_t C = frames.channels();
    std::vector<float> out(frames.frames() * C * size.height * size.width);
    auto source_coord = [](std::size_t dst, std::size_t in, std::size_t out_n) {
        if (out_n <= 1) return 0.0;
        return static_cast<double>(dst) * static_cast<double>(in - 1) / static_cast<double>(out_n - 1);
    };
    std::size_t k = 0;
    for (std::size_t n = 0; n < frames.frames(); ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t y = 0; y < size.height; ++y) {
                const double sy = source_coord(y, in_h, size.height);
                const auto y0 = static_cast<std::size_t>(std::floor(sy));
                const std::size_t y1 = std::min(y0 + 1, in_h - 1);
                const double fy = sy - static_cast<double>(y0);
                for (std::size_t x = 0; x < size.width; ++x) {
                    const double sx = source_coord(x, in_w, size.width);
                    const auto x0 = static_cast<std::size_t>(std::floor(sx));
                    const std::size_t x1 = std::min(x0 + 1, in_w - 1);
                    const double fx = sx - static_cast<double>(x0);
                    const double top = (1 - fx) * frames.at(n, c, y0, x0) + fx * frames.at(n, c, y0, x1);
                    const double bottom = (1 - fx) * frames.at(n, c, y1, x0) + fx * frames.at(n, c, y1, x1);
                    out[k++] = std::clamp(static_cast<float>((1 - fy) * top + fy * bottom), 0.0f, 1.0f);
                }
            }
        }
    }
    return FrameTensor(frames.frames(), C, size.height, size.width, std::move(out),
                       frames.frame_index_offset());
}

FrameTensor to_grayscale(const FrameTensor& frames) {
    if (frames.channels() == 1) return frames;
    const std::size_t px = frames.pixels();
    std::vector<float> out(frames.frames() * px);
    for (std::size_t n = 0; n < frames.frames(); ++n) {
        const auto f = frames.frame(n);
        for (std::size_t i = 0; i < px; ++i) {
            const float v = 0.299f * f[i] + 0.587f * f[px + i] + 0.114f * f[2 * px + i];
            out[n * px + i] = std::clamp(v, 0.0f, 1.0f);
        }
    }
    return FrameTensor(frames.frames(), 1, frames.height(), frames.width(), std::move(out),
                       frames.frame_index_offset());
}

void write_frames(const FrameTensor& frames, const fs::path& out_dir, const std::string& prefix) {
    fs::create_directories(out_dir);
    const std::size_t px = frames.pixels();
    const std::size_t C = frames.channels();
    for (std::size_t n = 0; n < frames.frames(); ++n) {
        const auto f = frames.frame(n);
        Image img{frames.width(), frames.height(), C, std::vector<std::uint8_t>(px * C)};
        for (std::size_t i = 0; i < px; ++i)
            for (std::size_t c = 0; c < C; ++c) img.pixels[i * C + c] = to_byte(f[c * px + i]);
        write_png(out_dir / indexed_name(prefix, frames.frame_index_offset() + n), img);
    }
}

void SyntheticSceneSpec::validate() const {
    if (frames < 1) throw ConfigError("synthetic scene needs at least one frame");
    if (size.height < 8 || size.width < 8) throw ConfigError("synthetic frames must be at least 8x8");
    if (channels != 1 && channels != 3) throw ConfigError("synthetic scene channels must be 1 or 3");
    if (object.height < 1 || object.width < 1 || object.height > size.height || object.width > size.width)
        throw ConfigError("object must fit inside the frame");
    if (start_x >= size.width || start_y >= size.height) throw ConfigError("object start outside frame");
    if (velocity_x == 0 && velocity_y == 0) throw ConfigError("object velocity must be nonzero");
    if (illumination_amplitude < 0.0 || illumination_amplitude > 0.1)
        throw ConfigError("illumination amplitude must be within [0, 0.1]");
    if (illumination_period <= 0.0) throw ConfigError("illumination period must be positive");
    if (contrast <= 0.0 || contrast > 0.45) throw ConfigError("contrast must be within (0, 0.45]");
}

SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec) {
    spec.validate();
    const std::size_t H = spec.size.height, W = spec.size.width, C = spec.channels, N = spec.frames;
    const std::size_t px = H * W;

    // Smooth background: a handful of low-frequency cosines mapped into [0.15, 0.5].
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<float> background(C * px);
    for (std::size_t c = 0; c < C; ++c) {
        struct Wave {
            double fx, fy, phase, amp;
        };
        std::vector<Wave> waves(4);
        for (auto& w : waves) {
            w.fx = 0.5 + 2.0 * unit(rng);
            w.fy = 0.5 + 2.0 * unit(rng);
            w.phase = 2.0 * std::numbers::pi * unit(rng);
            w.amp = 0.5 + unit(rng);
        }
        std::vector<double> raw(px);
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                double v = 0.0;
                for (const auto& w : waves) {
                    v += w.amp * std::cos(2.0 * std::numbers::pi *
                                              (w.fx * static_cast<double>(x) / static_cast<double>(W) +
                                               w.fy * static_cast<double>(y) / static_cast<double>(H)) +
                                          w.phase);
                }
                raw[y * W + x] = v;
            }
        }
        const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
        const double span = std::max(*hi - *lo, 1e-12);
        for (std::size_t i = 0; i < px; ++i)
            background[c * px + i] = static_cast<float>(0.15 + 0.35 * (raw[i] - *lo) / span);
    }

    std::vector<float> frames(N * C * px);
    std::vector<float> backgrounds(N * C * px);
    GroundTruthMasks truth{N, H, W, std::vector<std::uint8_t>(N * px, 0), {}};
    const auto wrap = [](long long v, std::size_t m) {
        const auto mm = static_cast<long long>(m);
        return static_cast<std::size_t>(((v % mm) + mm) % mm);
    };
    for (std::size_t t = 0; t < N; ++t) {
        double gain = 1.0;
        if (spec.background == BackgroundKind::sinusoidal_illumination) {
            gain += spec.illumination_amplitude *
                    std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / spec.illumination_period);
        }
        const long long moving = t > spec.parked_frames ? static_cast<long long>(t - spec.parked_frames) : 0;
        const std::size_t ox = wrap(static_cast<long long>(spec.start_x) + spec.velocity_x * moving, W);
        const std::size_t oy = wrap(static_cast<long long>(spec.start_y) + spec.velocity_y * moving, H);

        auto* mask = truth.masks.data() + t * px;
        for (std::size_t dy = 0; dy < spec.object.height; ++dy)
            for (std::size_t dx = 0; dx < spec.object.width; ++dx)
                mask[((oy + dy) % H) * W + (ox + dx) % W] = 1;

        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < px; ++i) {
                const float bg = static_cast<float>(gain * background[c * px + i]);
                backgrounds[(t * C + c) * px + i] = bg;
                frames[(t * C + c) * px + i] = mask[i] ? bg + static_cast<float>(spec.contrast) : bg;
            }
        }
        truth.labeled_indices.push_back(t);
    }

    return SyntheticScene{FrameTensor(N, C, H, W, std::move(frames)), std::move(truth),
                          std::move(background), FrameTensor(N, C, H, W, std::move(backgrounds))};
}

std::string to_string(Method method) { return method == Method::deeppbm ? "deeppbm" : "rpca"; }

std::size_t MaskSequence::foreground_pixels() const {
    return static_cast<std::size_t>(std::count(masks.begin(), masks.end(), std::uint8_t{1}));
}

void write_binary_masks(std::span<const std::uint8_t> masks, std::size_t frames, FrameSize size,
                        std::size_t frame_index_offset, const fs::path& out_dir, const std::string& prefix) {
    const std::size_t px = size.height * size.width;
    if (masks.size() != frames * px) throw ShapeError("mask data size does not match its shape");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    for (std::size_t n = 0; n < frames; ++n) {
        Image img{size.width, size.height, 1, std::vector<std::uint8_t>(px)};
        for (std::size_t i = 0; i < px; ++i) img.pixels[i] = masks[n * px + i] ? 255 : 0;
        write_png(out_dir / indexed_name(prefix, frame_index_offset + n), img);
    }
}

void write_mask_sequence(const MaskSequence& masks, const fs::path& out_dir,
                         const std::optional<fs::path>& background_dir) {
    write_binary_masks(masks.masks, masks.frames, {masks.height, masks.width}, masks.frame_index_offset, out_dir,
                       "mask_");
    if (background_dir && masks.backgrounds) write_frames(*masks.backgrounds, *background_dir, "bg_");
}

IndexedMasks read_mask_directory(const fs::path& dir) {
    IndexedMasks out;
    for (const auto& file : list_image_files(dir)) {
        const auto index = filename_index(file);
        if (!index) throw FormatError("mask filename carries no frame index: " + file.string());
        const Image img = read_image(file);
        const FrameSize size{img.height, img.width};
        if (out.masks.empty())
            out.size = size;
        else if (!(size == out.size))
            throw ShapeError("mask sizes differ within " + dir.string());
        std::vector<std::uint8_t> m(img.width * img.height);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = img.pixels[i * img.channels] > 127 ? 1 : 0;
        if (!out.masks.emplace(*index, std::move(m)).second)
            throw FormatError("duplicate mask index " + std::to_string(*index) + " in " + dir.string());
    }
    return out;
}

}  // namespace deeppbm
