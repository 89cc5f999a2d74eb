#include "deeppbm/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "deeppbm/error.hpp"

namespace deeppbm {

using nlohmann::json;

void TrainConfig::validate() const {
    if (latent_dim < 1) throw ConfigError("latent_dim must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    if (base_channels < 1) throw ConfigError("base_channels must be at least 1");
    if (checkpoint_every > 0 && checkpoint_path.empty())
        throw ConfigError("checkpoint_every requires a checkpoint path");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

SeedStreams derive_seeds(std::uint64_t seed) {
    return {splitmix64(seed * 3 + 0), splitmix64(seed * 3 + 1), splitmix64(seed * 3 + 2)};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t frames, std::size_t batch_size,
                                                    bool shuffle, std::mt19937_64& shuffle_rng) {
    std::vector<std::size_t> order(frames);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle) std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t first = 0; first < frames; first += batch_size) {
        const std::size_t last = std::min(frames, first + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(first),
                             order.begin() + static_cast<std::ptrdiff_t>(last));
    }
    return batches;
}

template <typename T>
TrainResult<T> train(const FrameTensor& frames, const TrainConfig& config, const EpochCallback& on_epoch,
                     const Preprocessing& preprocessing) {
    config.validate();
    if (frames.empty()) throw ConfigError("no training frames");
    const Shape input{frames.channels(), frames.height(), frames.width()};
    const std::size_t d = config.latent_dim;
    const SeedStreams seeds = derive_seeds(config.seed);

    TrainResult<T> result{
        VaeModel<T>(default_architecture(input, d, config.base_channels), input, d, seeds.init), {}};
    VaeModel<T>& model = result.model;
    AdamState<T> enc_state(model.encoder_params, AdamConfig{config.learning_rate});
    AdamState<T> dec_state(model.decoder_params, AdamConfig{config.learning_rate});

    std::mt19937_64 shuffle_rng(seeds.shuffle);
    std::mt19937_64 noise_rng(seeds.noise);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t frame_size = frames.frame_size();
    const auto all = frames.data();

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        EpochRecord record;
        std::size_t seen = 0;
        const auto batches = epoch_batches(frames.frames(), config.batch_size, config.shuffle, shuffle_rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& idx = batches[b];
            const std::size_t n = idx.size();
            Tensor<T> x = Tensor<T>::zeros({n, input[0], input[1], input[2]});
            for (std::size_t i = 0; i < n; ++i) {
                const auto src = all.subspan(idx[i] * frame_size, frame_size);
                std::copy(src.begin(), src.end(), x.values.begin() + static_cast<std::ptrdiff_t>(i * frame_size));
            }
            Tensor<T> noise = Tensor<T>::zeros({n, d});
            for (auto& e : noise.values) e = static_cast<T>(gauss(noise_rng));

            LossWithGradients<T> step;
            try {
                step = total_loss_with_gradients(model, x, noise);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(b + 1));
            }
            adam_step(model.encoder_params, step.encoder_grad, enc_state);
            adam_step(model.decoder_params, step.decoder_grad, dec_state);

            const double w = static_cast<double>(n);
            record.total += step.loss.total * w;
            record.reconstruction_l1 += step.loss.reconstruction_l1 * w;
            record.kl += step.loss.kl * w;
            seen += n;
        }
        const double inv = 1.0 / static_cast<double>(seen);
        record.total *= inv;
        record.reconstruction_l1 *= inv;
        record.kl *= inv;
        record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.history.epochs.push_back(record);
        if (on_epoch) on_epoch(epoch, record);
        if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0)
            save_checkpoint(config.checkpoint_path, cast_model<float>(model), result.history, config, preprocessing);
    }
    return result;
}

template TrainResult<float> train<float>(const FrameTensor&, const TrainConfig&, const EpochCallback&,
                                         const Preprocessing&);
template TrainResult<double> train<double>(const FrameTensor&, const TrainConfig&, const EpochCallback&,
                                           const Preprocessing&);

TrainResult<float> train_model(const FrameTensor& frames, const TrainConfig& config, const EpochCallback& on_epoch,
                               const Preprocessing& preprocessing) {
    if (config.precision == 64) {
        auto r = train<double>(frames, config, on_epoch, preprocessing);
        return {cast_model<float>(r.model), std::move(r.history)};
    }
    return train<float>(frames, config, on_epoch, preprocessing);
}

// ---- checkpoint ------------------------------------------------------------

namespace {

constexpr char magic[4] = {'D', 'P', 'B', 'M'};

json layer_to_json(const LayerSpec& l) {
    json j{{"kind", to_string(l.kind)}};
    switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::transposed_conv2d:
            j["in_channels"] = l.in_channels;
            j["out_channels"] = l.out_channels;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
            break;
        case LayerKind::dense:
            j["in_features"] = l.in_features;
            j["out_features"] = l.out_features;
            break;
        case LayerKind::reshape:
            j["target"] = l.target;
            break;
        default:
            break;
    }
    return j;
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec l;
    l.kind = parse_layer_kind(j.at("kind").get<std::string>());
    switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::transposed_conv2d:
            l.in_channels = j.at("in_channels");
            l.out_channels = j.at("out_channels");
            l.kernel = j.at("kernel");
            l.stride = j.at("stride");
            l.padding = j.at("padding");
            break;
        case LayerKind::dense:
            l.in_features = j.at("in_features");
            l.out_features = j.at("out_features");
            break;
        case LayerKind::reshape:
            l.target = j.at("target").get<Shape>();
            break;
        default:
            break;
    }
    return l;
}

json config_to_json(const TrainConfig& c) {
    return {{"latent_dim", c.latent_dim},       {"batch_size", c.batch_size},
            {"epochs", c.epochs},               {"learning_rate", c.learning_rate},
            {"seed", c.seed},                   {"shuffle", c.shuffle},
            {"precision", c.precision},         {"base_channels", c.base_channels},
            {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig config_from_json(const json& j) {
    TrainConfig c;
    c.latent_dim = j.at("latent_dim");
    c.batch_size = j.at("batch_size");
    c.epochs = j.at("epochs");
    c.learning_rate = j.at("learning_rate");
    c.seed = j.at("seed");
    c.shuffle = j.at("shuffle");
    c.precision = j.at("precision");
    c.base_channels = j.at("base_channels");
    c.checkpoint_every = j.at("checkpoint_every");
    return c;
}

void put_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

std::uint32_t get_u32(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const VaeModel<float>& model, const TrainHistory& history,
                     const std::optional<TrainConfig>& config, const Preprocessing& preprocessing) {
    json meta;
    meta["latent_dim"] = model.latent_dim;
    meta["input_shape"] = model.input_shape();
    meta["precision"] = config ? config->precision : 32;
    meta["encoder"] = json::array();
    for (const auto& l : model.encoder.layers()) meta["encoder"].push_back(layer_to_json(l));
    meta["decoder"] = json::array();
    for (const auto& l : model.decoder.layers()) meta["decoder"].push_back(layer_to_json(l));
    meta["tensors"] = json::array();
    for (const auto* set : {&model.encoder_params, &model.decoder_params})
        for (const auto& t : set->tensors) meta["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
    meta["train_config"] = config ? config_to_json(*config) : json(nullptr);
    meta["history"] = json::array();
    // Wall-clock times stay out of the file so identical runs give identical bytes.
    for (const auto& e : history.epochs)
        meta["history"].push_back(
            {{"total", e.total}, {"reconstruction_l1", e.reconstruction_l1}, {"kl", e.kl}});
    meta["preprocess"] = {{"grayscale", preprocessing.grayscale},
                          {"resize", preprocessing.resize
                                         ? json::array({preprocessing.resize->height, preprocessing.resize->width})
                                         : json(nullptr)}};
    const std::string text = meta.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(magic, 4);
    put_u32(out, checkpoint_version);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* set : {&model.encoder_params, &model.decoder_params}) {
        for (const auto& t : set->tensors) {
            for (float v : t.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 4 || !std::equal(magic, magic + 4, bytes.begin(),
                                        [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; }))
        throw FormatError("bad magic: " + path.string() + " is not a DPBM checkpoint");
    if (bytes.size() < 12) throw FormatError("truncated checkpoint header in " + path.string());
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != checkpoint_version)
        throw FormatError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                          std::to_string(checkpoint_version));
    const std::size_t meta_len = get_u32(bytes.data() + 8);
    if (bytes.size() < 12 + meta_len) throw FormatError("truncated checkpoint metadata in " + path.string());

    json meta;
    try {
        meta = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(meta_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
    }

    Checkpoint ck;
    try {
        Architecture arch;
        for (const auto& l : meta.at("encoder")) arch.encoder.push_back(layer_from_json(l));
        for (const auto& l : meta.at("decoder")) arch.decoder.push_back(layer_from_json(l));
        const Shape input = meta.at("input_shape").get<Shape>();
        const std::size_t d = meta.at("latent_dim");
        ck.model = VaeModel<float>(arch, input, d, 0);

        const auto& listed = meta.at("tensors");
        const std::size_t expected_count = ck.model.encoder_params.size() + ck.model.decoder_params.size();
        if (listed.size() != expected_count)
            throw ShapeError("checkpoint lists " + std::to_string(listed.size()) +
                             " tensors but its architecture needs " + std::to_string(expected_count));
        std::size_t offset = 12 + meta_len;
        std::size_t k = 0;
        for (auto* set : {&ck.model.encoder_params, &ck.model.decoder_params}) {
            for (auto& t : set->tensors) {
                const auto& entry = listed[k++];
                if (entry.at("name").get<std::string>() != t.name || entry.at("shape").get<Shape>() != t.shape)
                    throw ShapeError("tensor '" + entry.at("name").get<std::string>() +
                                     "' does not match the embedded architecture (expected '" + t.name + "' " +
                                     to_string(t.shape) + ")");
                const std::size_t need = t.values.size() * 4;
                if (bytes.size() < offset + need) throw FormatError("truncated checkpoint tensor data in " + path.string());
                for (auto& v : t.values) {
                    v = std::bit_cast<float>(get_u32(bytes.data() + offset));
                    offset += 4;
                }
            }
        }
        if (offset != bytes.size()) throw FormatError("trailing bytes after checkpoint tensor data");

        for (const auto& e : meta.at("history"))
            ck.history.epochs.push_back({e.at("total"), e.at("reconstruction_l1"), e.at("kl"), 0.0});
        if (!meta.at("train_config").is_null()) ck.config = config_from_json(meta.at("train_config"));
        const auto& pre = meta.at("preprocess");
        ck.preprocessing.grayscale = pre.at("grayscale");
        if (!pre.at("resize").is_null())
            ck.preprocessing.resize = FrameSize{pre.at("resize").at(0), pre.at("resize").at(1)};
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
    }
    return ck;
}

}  // namespace deeppbm
