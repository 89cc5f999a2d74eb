#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "deeppbm/training.hpp"
#include "deeppbm/video_io.hpp"
#include "test_support.hpp"

using namespace deeppbm;
using deeppbm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Run cli(const std::string& args, const TempDir& scratch) {
    const auto out = scratch / "stdout.txt";
    const auto err = scratch / "stderr.txt";
    const std::string cmd = std::string("\"") + DEEPPBM_CLI_PATH + "\" " + args + " > \"" + out.string() +
                            "\" 2> \"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::size_t count_files(const fs::path& dir, const std::string& prefix) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename().string().rfind(prefix, 0) == 0) ++n;
    return n;
}

const std::string tiny_scene = "--frames 10 --width 16 --height 16 --rect-width 4 --rect-height 4 --start-y 6";
const std::string tiny_train = "--latent-dim 2 --epochs 1 --batch-size 5 --base-channels 4";

}  // namespace

TEST_CASE("synth writes frames and ground truth deterministically") {
    TempDir dir("synth");
    auto r = cli("synth --out " + (dir / "a").string() + " --seed 3 " + tiny_scene, dir);
    REQUIRE(r.code == 0);
    CHECK(count_files(dir / "a" / "frames", "frame_") == 10);
    CHECK(count_files(dir / "a" / "gt", "gt_") == 10);
    const auto gt = read_mask_directory(dir / "a" / "gt");
    for (const auto& [i, m] : gt.masks) CHECK(std::count(m.begin(), m.end(), 1) == 16);

    r = cli("synth --out " + (dir / "b").string() + " --seed 3 " + tiny_scene, dir);
    REQUIRE(r.code == 0);
    for (int i : {0, 4, 9}) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%06d.png", i);
        CHECK(slurp(dir / "a" / "frames" / name) == slurp(dir / "b" / "frames" / name));
    }
    CHECK(cli("synth --out " + (dir / "c").string() + " --channels 2", dir).code == 2);
    CHECK(cli("synth --out " + (dir / "c").string() + " --vx 0", dir).code == 2);
}

TEST_CASE("train usage errors and a tiny run") {
    TempDir dir("train");
    REQUIRE(cli("synth --out " + dir.path().string() + " --frames 5 --width 16 --height 16 --rect-width 4 "
                 "--rect-height 4 --start-y 6", dir)
                .code == 0);
    const auto frames = (dir / "frames").string();
    CHECK(cli("train --out " + (dir / "m.dpbm").string(), dir).code == 2);
    CHECK(cli("train --input " + frames + " --out " + (dir / "m.dpbm").string() + " --epochs 0", dir).code == 2);
    CHECK(cli("train --input " + (dir / "nowhere").string() + " --out " + (dir / "m.dpbm").string(), dir).code == 1);

    const auto r = cli("train --input " + frames + " --out " + (dir / "m.dpbm").string() + " " + tiny_train, dir);
    REQUIRE(r.code == 0);
    CHECK(r.out.rfind("epoch 1 total ", 0) == 0);
    CHECK(r.out.find(" recon ") != std::string::npos);
    CHECK(r.out.find(" kl ") != std::string::npos);
    const auto ck = load_checkpoint(dir / "m.dpbm");
    CHECK(ck.history.epochs.size() == 1);
    CHECK(ck.model.latent_dim == 2);
}

TEST_CASE("command-line flags beat the config file, which beats defaults") {
    TempDir dir("precedence");
    REQUIRE(cli("synth --out " + dir.path().string() + " " + tiny_scene + " --channels 3", dir).code == 0);
    const auto frames = (dir / "frames").string();
    const auto model = (dir / "m.dpbm").string();
    const auto cfg = dir / "run.cfg";
    const std::string base = "train --input " + frames + " --out " + model + " --base-channels 4 --epochs 1 ";

    struct Key {
        std::string name;
        std::string file_value;
        std::string flag_value;
        std::function<std::string(const Checkpoint&)> read;
        std::string default_value;
    };
    const std::vector<Key> keys{
        {"latent-dim", "3", "5", [](const Checkpoint& c) { return std::to_string(c.config->latent_dim); }, "8"},
        {"batch-size", "4", "6", [](const Checkpoint& c) { return std::to_string(c.config->batch_size); }, "140"},
        {"seed", "11", "12", [](const Checkpoint& c) { return std::to_string(c.config->seed); }, "0"},
        {"lr", "0.002", "0.003",
         [](const Checkpoint& c) {
             std::ostringstream s;
             s << c.config->learning_rate;
             return s.str();
         },
         "0.001"},
        {"resize", "24x16", "32x8",
         [](const Checkpoint& c) {
             return c.preprocessing.resize ? std::to_string(c.preprocessing.resize->width) + "x" +
                                                 std::to_string(c.preprocessing.resize->height)
                                           : std::string("none");
         },
         "none"},
    };
    for (const auto& k : keys) {
        INFO("key " << k.name);
        std::ofstream(cfg) << "# precedence check\n" << k.name << " = " << k.file_value << "\n";
        REQUIRE(cli(base, dir).code == 0);
        CHECK(k.read(load_checkpoint(model)) == k.default_value);
        REQUIRE(cli(base + "--config " + cfg.string(), dir).code == 0);
        CHECK(k.read(load_checkpoint(model)) == k.file_value);
        REQUIRE(cli(base + "--config " + cfg.string() + " --" + k.name + " " + k.flag_value, dir).code == 0);
        CHECK(k.read(load_checkpoint(model)) == k.flag_value);
    }

    std::ofstream(cfg) << "grayscale = true\n";
    REQUIRE(cli(base + "--config " + cfg.string(), dir).code == 0);
    CHECK(load_checkpoint(model).preprocessing.grayscale);
    CHECK(load_checkpoint(model).model.input_shape().front() == 1);
    std::ofstream(cfg) << "grayscale = false\n";
    REQUIRE(cli(base + "--config " + cfg.string(), dir).code == 0);
    CHECK(load_checkpoint(model).model.input_shape().front() == 3);

    std::ofstream(cfg) << "latent-dim = 3\nbogus = 1\n";
    auto r = cli(base + "--config " + cfg.string(), dir);
    CHECK(r.code == 2);
    CHECK(r.err.find("bogus") != std::string::npos);
    std::ofstream(cfg) << "latent-dim 3\n";
    CHECK(cli(base + "--config " + cfg.string(), dir).code == 2);
    CHECK(cli(base + "--config " + (dir / "missing.cfg").string(), dir).code == 2);
}

TEST_CASE("subtract, generate and eval end to end") {
    TempDir dir("e2e");
    REQUIRE(cli("synth --out " + dir.path().string() + " " + tiny_scene, dir).code == 0);
    const auto frames = (dir / "frames").string();
    const auto model = (dir / "m.dpbm").string();
    REQUIRE(cli("train --input " + frames + " --out " + model + " " + tiny_train, dir).code == 0);

    auto r = cli("subtract --model " + model + " --input " + frames + " --out-masks " + (dir / "lo").string() +
                     " --out-backgrounds " + (dir / "bg").string() + " --threshold 0.1",
                 dir);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("masks 10 method deeppbm") != std::string::npos);
    CHECK(count_files(dir / "lo", "mask_") == 10);
    CHECK(count_files(dir / "bg", "bg_") == 10);
    REQUIRE(cli("subtract --model " + model + " --input " + frames + " --out-masks " + (dir / "hi").string() +
                    " --threshold 0.9",
                dir)
                .code == 0);
    const auto lo = read_mask_directory(dir / "lo");
    const auto hi = read_mask_directory(dir / "hi");
    for (const auto& [i, m] : hi.masks)
        for (std::size_t p = 0; p < m.size(); ++p) CHECK(m[p] <= lo.masks.at(i)[p]);

    // Scale 0 perturbation reproduces the subtract background of that frame.
    r = cli("generate --model " + model + " --perturb " + (dir / "frames" / "frame_000004.png").string() +
                " --scale 0 --out " + (dir / "gen0").string(),
            dir);
    REQUIRE(r.code == 0);
    CHECK(read_image(dir / "gen0" / "gen_000000.png").pixels == read_image(dir / "bg" / "bg_000004.png").pixels);

    REQUIRE(cli("generate --model " + model + " --num 3 --seed 5 --out " + (dir / "g1").string(), dir).code == 0);
    REQUIRE(cli("generate --model " + model + " --num 3 --seed 5 --out " + (dir / "g2").string(), dir).code == 0);
    CHECK(count_files(dir / "g1", "gen_") == 3);
    CHECK(slurp(dir / "g1" / "gen_000002.png") == slurp(dir / "g2" / "gen_000002.png"));

    r = cli("eval --masks " + (dir / "gt").string() + " --gt " + (dir / "gt").string() + " --report " +
                (dir / "same.json").string(),
            dir);
    REQUIRE(r.code == 0);
    const auto same = nlohmann::json::parse(slurp(dir / "same.json"));
    CHECK(same["f_measure"].get<double>() == 1.0);
    CHECK(same["frames"] == 10);
    CHECK(r.out.find("f_measure 1.000000") != std::string::npos);

    r = cli("eval --masks " + (dir / "lo").string() + " --gt " + (dir / "gt").string() + " --report " +
                (dir / "run.json").string(),
            dir);
    CHECK(r.code == 0);

    // Shifted masks against the truth share no foreground.
    fs::create_directories(dir / "shifted");
    for (const auto& [i, m] : read_mask_directory(dir / "gt").masks) {
        std::vector<std::uint8_t> moved(m.size(), 0);
        for (std::size_t p = 0; p < m.size(); ++p) moved[(p + 8) % m.size()] = m[p];
        write_binary_masks(moved, 1, FrameSize{16, 16}, i, dir / "shifted", "mask_");
    }
    REQUIRE(cli("eval --masks " + (dir / "shifted").string() + " --gt " + (dir / "gt").string() + " --report " +
                    (dir / "disjoint.json").string(),
                dir)
                .code == 0);
    CHECK(nlohmann::json::parse(slurp(dir / "disjoint.json"))["f_measure"].get<double>() == 0.0);

    // Ground truth for a subset of frames: only those are evaluated.
    fs::create_directories(dir / "subset");
    for (int i : {2, 5, 7}) {
        char name[32];
        std::snprintf(name, sizeof name, "gt_%06d.png", i);
        fs::copy_file(dir / "gt" / name, dir / "subset" / name);
    }
    r = cli("eval --masks " + (dir / "gt").string() + " --gt " + (dir / "subset").string() + " --report " +
                (dir / "subset.json").string(),
            dir);
    REQUIRE(r.code == 0);
    const auto subset = nlohmann::json::parse(slurp(dir / "subset.json"));
    CHECK(subset["frames"] == 3);
    CHECK(subset["per_frame"][1]["frame"] == 5);
    CHECK(r.out.rfind("frames 3 ", 0) == 0);

    CHECK(cli("eval --masks " + (dir / "subset").string() + " --gt " + (dir / "gt").string() + " --report " +
                  (dir / "x.json").string(),
              dir)
              .code == 1);
}

TEST_CASE("subtract trains in-call and rejects mismatched checkpoints") {
    TempDir dir("sub");
    REQUIRE(cli("synth --out " + (dir / "big").string() + " " + tiny_scene, dir).code == 0);
    REQUIRE(cli("synth --out " + (dir / "small").string() + " --frames 4 --width 8 --height 8 --rect-width 2 "
                "--rect-height 2 --start-y 3",
                dir)
                .code == 0);
    const auto model = (dir / "m.dpbm").string();
    auto r = cli("subtract --input " + (dir / "big" / "frames").string() + " --out-masks " + (dir / "m1").string() +
                     " --long-video 0.5 --save-model " + model + " " + tiny_train,
                 dir);
    REQUIRE(r.code == 0);
    CHECK(r.err.find("first 5 of 10") != std::string::npos);
    CHECK(count_files(dir / "m1", "mask_") == 10);

    r = cli("subtract --model " + model + " --input " + (dir / "small" / "frames").string() + " --out-masks " +
                (dir / "m2").string(),
            dir);
    CHECK(r.code == 1);
    CHECK(r.err.find("shape mismatch") != std::string::npos);

    CHECK(cli("subtract --model " + model + " --input " + (dir / "big" / "frames").string() + " --out-masks " +
                  (dir / "m3").string() + " --threshold 0",
              dir)
              .code == 2);
    CHECK(cli("subtract --input " + (dir / "big" / "frames").string() + " --out-masks " + (dir / "m3").string() +
                  " --long-video 0.05 " + tiny_train,
              dir)
              .code == 2);
}

TEST_CASE("rpca command") {
    TempDir dir("rpca");
    REQUIRE(cli("synth --out " + dir.path().string() + " " + tiny_scene, dir).code == 0);
    const auto frames = (dir / "frames").string();
    auto r = cli("rpca --input " + frames + " --out-masks " + (dir / "m").string(), dir);
    REQUIRE(r.code == 0);
    CHECK(count_files(dir / "m", "mask_") == 10);
    std::ostringstream lambda;
    lambda << "rpca lambda " << 1.0 / 16.0 << " ";
    CHECK(r.out.rfind(lambda.str(), 0) == 0);
    CHECK(r.out.find("converged yes") != std::string::npos);

    r = cli("rpca --input " + frames + " --out-masks " + (dir / "m1").string() + " --max-iter 1", dir);
    CHECK(r.code == 0);
    CHECK(r.err.find("not converged") != std::string::npos);
    CHECK(r.out.find("converged no") != std::string::npos);

    r = cli("rpca --input " + frames + " --out-masks " + (dir / "m2").string() + " --lambda 0.2", dir);
    CHECK(r.out.rfind("rpca lambda 0.2 ", 0) == 0);
}

TEST_CASE("train and subtract are byte reproducible") {
    TempDir dir("repro");
    REQUIRE(cli("synth --out " + dir.path().string() + " " + tiny_scene, dir).code == 0);
    const auto frames = (dir / "frames").string();
    for (const char* tag : {"a", "b"}) {
        const auto m = (dir / (std::string(tag) + ".dpbm")).string();
        REQUIRE(cli("train --input " + frames + " --out " + m + " --seed 9 " + tiny_train, dir).code == 0);
        REQUIRE(cli("subtract --model " + m + " --input " + frames + " --out-masks " + (dir / tag).string() +
                        " --out-backgrounds " + (dir / (std::string(tag) + "_bg")).string(),
                    dir)
                    .code == 0);
    }
    CHECK(slurp(dir / "a.dpbm") == slurp(dir / "b.dpbm"));
    CHECK(slurp(dir / "a" / "mask_000003.png") == slurp(dir / "b" / "mask_000003.png"));
    CHECK(slurp(dir / "a_bg" / "bg_000007.png") == slurp(dir / "b_bg" / "bg_000007.png"));
}

TEST_CASE("help exits cleanly and unknown subcommands are usage errors") {
    TempDir dir("help");
    const auto r = cli("--help", dir);
    CHECK(r.code == 0);
    CHECK(r.out.find("deeppbm") != std::string::npos);
    CHECK(cli("train --help", dir).code == 0);
    CHECK(cli("frobnicate", dir).code == 2);
    CHECK(cli("", dir).code == 2);
}
