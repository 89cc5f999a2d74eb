// deeppbm: command-line front end for training, background subtraction, the RPCA
// baseline, mask evaluation, background generation and synthetic scene creation.
//
// Every subcommand accepts --config <file> holding flat `key = value` lines whose keys
// are the long option names (e.g. `latent-dim = 4`). Command-line flags win over the
// file, which wins over built-in defaults. Unknown keys are rejected.
//
// Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "deeppbm/error.hpp"
#include "deeppbm/evaluation.hpp"
#include "deeppbm/pipeline.hpp"
#include "deeppbm/training.hpp"
#include "deeppbm/video_io.hpp"

namespace fs = std::filesystem;
using namespace deeppbm;

namespace {

constexpr int exit_usage = 2;
constexpr int exit_runtime = 1;

FrameSize parse_size(const std::string& text) {
    const auto x = text.find_first_of("xX");
    if (x == std::string::npos) throw ConfigError("size must look like WxH, got '" + text + "'");
    try {
        const std::size_t w = std::stoul(text.substr(0, x));
        const std::size_t h = std::stoul(text.substr(x + 1));
        return FrameSize{h, w};
    } catch (const std::exception&) {
        throw ConfigError("size must look like WxH, got '" + text + "'");
    }
}

struct TrainFlags {
    TrainConfig config;
    std::string resize;
    bool grayscale = false;
    bool no_shuffle = false;

    void add_to(CLI::App* app) {
        app->add_option("--latent-dim", config.latent_dim, "Latent dimension d")->check(CLI::PositiveNumber);
        app->add_option("--epochs", config.epochs, "Training epochs")->check(CLI::PositiveNumber);
        app->add_option("--batch-size", config.batch_size, "Frames per batch")->check(CLI::PositiveNumber);
        app->add_option("--lr", config.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
        app->add_option("--seed", config.seed, "Seed for init, shuffling and sampling noise");
        app->add_option("--base-channels", config.base_channels, "Channels of the first conv layer")
            ->check(CLI::PositiveNumber);
        app->add_option("--precision", config.precision, "Arithmetic precision (32 or 64)")
            ->check(CLI::IsMember({32, 64}));
        app->add_option("--checkpoint-every", config.checkpoint_every, "Save the model every k epochs");
        app->add_flag("--no-shuffle", no_shuffle, "Keep frames in order within each epoch");
        app->add_option("--resize", resize, "Resize frames to WxH before training");
        app->add_flag("--grayscale", grayscale, "Convert color frames to luma");
    }

    Preprocessing preprocessing() const {
        Preprocessing p;
        p.grayscale = grayscale;
        if (!resize.empty()) p.resize = parse_size(resize);
        return p;
    }

    TrainConfig resolved() const {
        TrainConfig c = config;
        c.shuffle = !no_shuffle;
        return c;
    }
};

LoadOptions load_options(const Preprocessing& p) { return LoadOptions{p.resize, p.grayscale}; }

void print_epoch(std::size_t epoch, const EpochRecord& r) {
    std::printf("epoch %zu total %.6f recon %.6f kl %.6f\n", epoch, r.total, r.reconstruction_l1, r.kl);
    std::fflush(stdout);
}

SubtractConfig subtract_config(double threshold, const std::string& rule, double fraction) {
    SubtractConfig c;
    c.threshold = threshold;
    c.channel_rule = rule == "luma" ? ChannelRule::luma : ChannelRule::max_channel;
    c.long_video_fraction = fraction;
    c.validate();
    return c;
}

void add_config_file(CLI::App* app) {
    // Consumed by apply_config_file before parsing; registered for --help and validation.
    app->add_option("--config", "Flat key = value configuration file");
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
    for (const auto& a : args) {
        if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
}

// Expands `--config file` into explicit flags for keys not already on the command line.
std::vector<std::string> apply_config_file(CLI::App& app, std::vector<std::string> args) {
    if (args.size() < 2) return args;
    CLI::App* sub = app.get_subcommand_no_throw(args[1]);
    if (sub == nullptr) return args;

    std::optional<std::string> path;
    std::vector<std::string> rest{args[0], args[1]};
    for (std::size_t i = 2; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (!path) return args;

    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot read config file " + *path);
    std::vector<std::string> injected;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(*path + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        const std::string flag = "--" + key;
        const CLI::Option* opt = key == "config" ? nullptr : sub->get_option_no_throw(flag);
        if (opt == nullptr)
            throw ConfigError(*path + ":" + std::to_string(line_no) + ": unknown key '" + key + "' for " + args[1]);
        if (given_on_command_line(rest, flag)) continue;
        if (opt->get_expected_min() == 0) {
            if (value == "true" || value == "1" || value == "yes" || value == "on")
                injected.push_back(flag);
            else if (!(value == "false" || value == "0" || value == "no" || value == "off"))
                throw ConfigError(*path + ":" + std::to_string(line_no) + ": '" + key + "' expects true or false");
        } else {
            injected.push_back(flag);
            injected.push_back(value);
        }
    }
    rest.insert(rest.begin() + 2, injected.begin(), injected.end());
    return rest;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DeepPBM background subtraction toolkit", "deeppbm"};
    app.require_subcommand(1);

    // train ------------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Train a background model on a frame directory");
    std::string train_input, train_out;
    TrainFlags train_flags;
    add_config_file(train_cmd);
    train_cmd->add_option("--input", train_input, "Directory of frames")->required();
    train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
    train_flags.add_to(train_cmd);

    // subtract ---------------------------------------------------------------
    auto* sub_cmd = app.add_subcommand("subtract", "Estimate backgrounds and write foreground masks");
    std::string sub_model, sub_input, sub_masks, sub_backgrounds, sub_save_model, sub_rule = "max-channel";
    double sub_threshold = 0.1;
    std::optional<double> sub_long_video;
    TrainFlags sub_flags;
    add_config_file(sub_cmd);
    sub_cmd->add_option("--model", sub_model, "Trained checkpoint; trains in-call when omitted");
    sub_cmd->add_option("--input", sub_input, "Directory of frames")->required();
    sub_cmd->add_option("--out-masks", sub_masks, "Output directory for mask_%06d.png")->required();
    sub_cmd->add_option("--out-backgrounds", sub_backgrounds, "Output directory for bg_%06d.png");
    sub_cmd->add_option("--threshold", sub_threshold, "Difference threshold in (0,1]")->check(CLI::Range(0.0, 1.0));
    sub_cmd->add_option("--channel-rule", sub_rule, "max-channel or luma")
        ->check(CLI::IsMember({"max-channel", "luma"}));
    sub_cmd->add_option("--long-video", sub_long_video, "Train on this leading fraction of frames")
        ->check(CLI::Range(0.0, 1.0));
    sub_cmd->add_option("--save-model", sub_save_model, "Write the in-call trained model here");
    sub_flags.add_to(sub_cmd);

    // rpca -------------------------------------------------------------------
    auto* rpca_cmd = app.add_subcommand("rpca", "RPCA (principal component pursuit) baseline subtraction");
    std::string rpca_input, rpca_masks, rpca_backgrounds, rpca_resize, rpca_rule = "max-channel";
    std::optional<double> rpca_lambda;
    double rpca_tol = 1e-7, rpca_threshold = 0.1;
    std::size_t rpca_max_iter = 500;
    bool rpca_gray = false;
    add_config_file(rpca_cmd);
    rpca_cmd->add_option("--input", rpca_input, "Directory of frames")->required();
    rpca_cmd->add_option("--out-masks", rpca_masks, "Output directory for mask_%06d.png")->required();
    rpca_cmd->add_option("--out-backgrounds", rpca_backgrounds, "Output directory for bg_%06d.png");
    rpca_cmd->add_option("--lambda", rpca_lambda, "Sparsity weight (default 1/sqrt(max(P,N)))")
        ->check(CLI::PositiveNumber);
    rpca_cmd->add_option("--tol", rpca_tol, "Relative residual tolerance")->check(CLI::PositiveNumber);
    rpca_cmd->add_option("--max-iter", rpca_max_iter, "Iteration cap")->check(CLI::PositiveNumber);
    rpca_cmd->add_option("--threshold", rpca_threshold, "Difference threshold in (0,1]")
        ->check(CLI::Range(0.0, 1.0));
    rpca_cmd->add_option("--channel-rule", rpca_rule, "max-channel or luma")
        ->check(CLI::IsMember({"max-channel", "luma"}));
    rpca_cmd->add_option("--resize", rpca_resize, "Resize frames to WxH");
    rpca_cmd->add_flag("--grayscale", rpca_gray, "Convert color frames to luma");

    // eval -------------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "Precision/recall/F-measure of masks against ground truth");
    std::string eval_masks, eval_gt, eval_report;
    add_config_file(eval_cmd);
    eval_cmd->add_option("--masks", eval_masks, "Directory of predicted masks")->required();
    eval_cmd->add_option("--gt", eval_gt, "Directory of ground-truth masks")->required();
    eval_cmd->add_option("--report", eval_report, "JSON report path")->required();

    // generate ---------------------------------------------------------------
    auto* gen_cmd = app.add_subcommand("generate", "Decode synthetic backgrounds from the latent space");
    std::string gen_model, gen_perturb, gen_out;
    std::size_t gen_num = 1;
    std::uint64_t gen_seed = 0;
    double gen_scale = 1.0;
    add_config_file(gen_cmd);
    gen_cmd->add_option("--model", gen_model, "Trained checkpoint")->required();
    gen_cmd->add_option("--num", gen_num, "Number of images")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--seed", gen_seed, "Sampling seed");
    gen_cmd->add_option("--perturb", gen_perturb, "Perturb the latent mean of this frame instead of sampling");
    gen_cmd->add_option("--scale", gen_scale, "Perturbation scale")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--out", gen_out, "Output directory for gen_%06d.png")->required();

    // synth ------------------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic moving-object scene with ground truth");
    std::string synth_out, synth_background = "static";
    SyntheticSceneSpec synth;
    add_config_file(synth_cmd);
    synth_cmd->add_option("--out", synth_out, "Output directory (frames/ and gt/ are created)")->required();
    synth_cmd->add_option("--frames", synth.frames, "Frame count")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--seed", synth.seed, "Background seed");
    synth_cmd->add_option("--width", synth.size.width, "Frame width");
    synth_cmd->add_option("--height", synth.size.height, "Frame height");
    synth_cmd->add_option("--channels", synth.channels, "1 or 3")->check(CLI::IsMember({1, 3}));
    synth_cmd->add_option("--rect-width", synth.object.width, "Object width");
    synth_cmd->add_option("--rect-height", synth.object.height, "Object height");
    synth_cmd->add_option("--vx", synth.velocity_x, "Horizontal velocity (pixels/frame)");
    synth_cmd->add_option("--vy", synth.velocity_y, "Vertical velocity (pixels/frame)");
    synth_cmd->add_option("--start-x", synth.start_x, "Initial object column");
    synth_cmd->add_option("--start-y", synth.start_y, "Initial object row");
    synth_cmd->add_option("--parked-frames", synth.parked_frames, "Frames the object waits before moving");
    synth_cmd->add_option("--contrast", synth.contrast, "Object intensity offset");
    synth_cmd->add_option("--background", synth_background, "static or sinusoidal")
        ->check(CLI::IsMember({"static", "sinusoidal"}));
    synth_cmd->add_option("--amplitude", synth.illumination_amplitude, "Illumination amplitude (<= 0.1)");

    try {
        std::vector<std::string> args = apply_config_file(app, std::vector<std::string>(argv, argv + argc));
        args.erase(args.begin());
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_usage;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_usage;
    }

    try {
        if (*train_cmd) {
            const Preprocessing pre = train_flags.preprocessing();
            TrainConfig cfg = train_flags.resolved();
            if (cfg.checkpoint_every > 0) cfg.checkpoint_path = train_out;
            cfg.validate();
            const FrameTensor frames = load_frame_sequence(train_input, load_options(pre));
            std::cerr << "training on " << frames.frames() << " frames of " << frames.channels() << "x"
                      << frames.height() << "x" << frames.width() << ", d=" << cfg.latent_dim << "\n";
            const auto result = train_model(frames, cfg, print_epoch, pre);
            save_checkpoint(train_out, result.model, result.history, cfg, pre);
            std::cerr << "wrote " << train_out << "\n";
        } else if (*sub_cmd) {
            const SubtractConfig sc = subtract_config(sub_threshold, sub_rule, sub_long_video.value_or(1.0));
            MaskSequence masks;
            if (!sub_model.empty()) {
                const Checkpoint ck = load_checkpoint(sub_model);
                const FrameTensor frames = load_frame_sequence(sub_input, load_options(ck.preprocessing));
                masks = run_deeppbm(frames, ck.model, sc);
            } else {
                const Preprocessing pre = sub_flags.preprocessing();
                const TrainConfig cfg = sub_flags.resolved();
                cfg.validate();
                const FrameTensor frames = load_frame_sequence(sub_input, load_options(pre));
                const std::size_t n_train = long_video_training_count(frames.frames(), sc.long_video_fraction);
                std::cerr << "training on the first " << n_train << " of " << frames.frames() << " frames\n";
                auto trained = train_model(frames.slice(0, n_train), cfg,
                                           [](std::size_t e, const EpochRecord& r) {
                                               std::fprintf(stderr, "epoch %zu total %.6f\n", e, r.total);
                                           });
                if (!sub_save_model.empty())
                    save_checkpoint(sub_save_model, trained.model, trained.history, cfg, pre);
                masks = run_deeppbm(frames, trained.model, sc);
            }
            write_mask_sequence(masks, sub_masks,
                                sub_backgrounds.empty() ? std::nullopt : std::optional<fs::path>(sub_backgrounds));
            std::printf("masks %zu method %s threshold %g foreground_pixels %zu\n", masks.frames,
                        to_string(masks.method).c_str(), masks.threshold, masks.foreground_pixels());
        } else if (*rpca_cmd) {
            const SubtractConfig sc = subtract_config(rpca_threshold, rpca_rule, 1.0);
            Preprocessing pre;
            pre.grayscale = rpca_gray;
            if (!rpca_resize.empty()) pre.resize = parse_size(rpca_resize);
            const FrameTensor frames = load_frame_sequence(rpca_input, load_options(pre));
            RpcaOptions opts;
            opts.lambda = rpca_lambda;
            opts.tol = rpca_tol;
            opts.max_iter = rpca_max_iter;
            const RpcaRun run = run_rpca_bs(frames, opts, sc);
            if (!run.converged)
                std::cerr << "warning: RPCA not converged after " << run.iterations << " iterations (residual "
                          << run.residual << ")\n";
            write_mask_sequence(run.masks, rpca_masks,
                                rpca_backgrounds.empty() ? std::nullopt : std::optional<fs::path>(rpca_backgrounds));
            std::printf("rpca lambda %.9g iterations %zu residual %.3e converged %s rank %zu masks %zu\n", run.lambda,
                        run.iterations, run.residual, run.converged ? "yes" : "no", run.rank, run.masks.frames);
        } else if (*eval_cmd) {
            const IndexedMasks pred = read_mask_directory(eval_masks);
            const IndexedMasks truth = read_mask_directory(eval_gt);
            if (truth.masks.empty()) throw ConfigError("no ground-truth masks in " + eval_gt);
            if (pred.masks.empty()) throw ConfigError("no predicted masks in " + eval_masks);
            if (!(pred.size == truth.size)) throw ShapeError("predicted and ground-truth masks differ in size");
            const std::size_t first = std::min(pred.masks.begin()->first, truth.masks.begin()->first);
            const std::size_t last = std::max(pred.masks.rbegin()->first, truth.masks.rbegin()->first);
            const std::size_t n = last - first + 1;
            const std::size_t px = truth.size.height * truth.size.width;

            MaskSequence seq;
            seq.frames = n;
            seq.height = truth.size.height;
            seq.width = truth.size.width;
            seq.frame_index_offset = first;
            seq.masks.assign(n * px, 0);
            for (const auto& [i, m] : pred.masks) std::copy(m.begin(), m.end(), seq.masks.begin() + (i - first) * px);
            GroundTruthMasks gt{n, truth.size.height, truth.size.width, std::vector<std::uint8_t>(n * px, 0), {}};
            for (const auto& [i, m] : truth.masks) {
                if (!pred.masks.contains(i))
                    throw IoError("no predicted mask for ground-truth frame " + std::to_string(i));
                std::copy(m.begin(), m.end(), gt.masks.begin() + (i - first) * px);
                gt.labeled_indices.push_back(i - first);
            }
            const MetricReport report = evaluate_sequence(seq, gt);
            std::ofstream out(eval_report);
            if (!out) throw IoError("cannot write report " + eval_report);
            out << report.to_json().dump(2) << "\n";
            std::printf("frames %zu precision %.6f recall %.6f f_measure %.6f\n", report.frames,
                        report.aggregate.precision, report.aggregate.recall, report.aggregate.f_measure);
        } else if (*gen_cmd) {
            const Checkpoint ck = load_checkpoint(gen_model);
            GenerateMode mode = PriorSample{};
            if (!gen_perturb.empty()) mode = Perturb{load_frame(gen_perturb, load_options(ck.preprocessing)), gen_scale};
            std::vector<float> data;
            FrameTensor first;
            for (std::size_t k = 0; k < gen_num; ++k) {
                const FrameTensor img = generate_background(ck.model, mode, gen_seed + k);
                data.insert(data.end(), img.data().begin(), img.data().end());
                if (k == 0) first = img;
            }
            write_frames(FrameTensor(gen_num, first.channels(), first.height(), first.width(), std::move(data)),
                         gen_out, "gen_");
            std::printf("generated %zu\n", gen_num);
        } else if (*synth_cmd) {
            synth.background =
                synth_background == "sinusoidal" ? BackgroundKind::sinusoidal_illumination : BackgroundKind::static_scene;
            const SyntheticScene scene = generate_synthetic_scene(synth);
            write_frames(scene.frames, fs::path(synth_out) / "frames", "frame_");
            write_binary_masks(scene.truth.masks, scene.truth.frames, synth.size, 0, fs::path(synth_out) / "gt", "gt_");
            std::printf("frames %zu gt %zu\n", scene.frames.frames(), scene.truth.frames);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    return 0;
}
