#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "deeppbm/error.hpp"
#include "deeppbm/vae.hpp"

using namespace deeppbm;

namespace {

LatentGaussian<double> latent(std::vector<double> mu, std::vector<double> lv) { return {std::move(mu), std::move(lv)}; }

std::uint64_t fnv1a(const std::vector<float>& values) {
    std::uint64_t h = 1469598103934665603ull;
    for (float v : values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int k = 0; k < 4; ++k) {
            h ^= (bits >> (8 * k)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

Tensor<float> pattern_frame() {
    std::vector<float> x(64);
    for (int i = 0; i < 64; ++i) x[static_cast<std::size_t>(i)] = static_cast<float>((i * 37) % 64) / 63.0f;
    return Tensor<float>({1, 1, 8, 8}, x);
}

template <typename T>
Tensor<T> random_frames(std::size_t n, const Shape& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    Shape full{n};
    full.insert(full.end(), s.begin(), s.end());
    std::vector<T> v(element_count(full));
    for (auto& x : v) x = static_cast<T>(u(rng));
    return Tensor<T>(full, v);
}

template <typename T>
Tensor<T> normal_noise(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<T> v(n * d);
    for (auto& x : v) x = static_cast<T>(g(rng));
    return Tensor<T>({n, d}, v);
}

}  // namespace

TEST_CASE("closed-form KL values") {
    CHECK(kl_divergence(latent({0.0}, {0.0})) == 0.0);
    CHECK(kl_divergence(latent({1.0}, {0.0})) == 0.5);
    CHECK(kl_divergence(latent({0.0}, {1.0})) == doctest::Approx((std::numbers::e - 2.0) / 2.0).epsilon(1e-14));
    CHECK(kl_divergence(latent({0.0}, {1.0})) == doctest::Approx(0.35914).epsilon(1e-5));
}

TEST_CASE("KL is non-negative for random inputs") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> mu(-5.0, 5.0), lv(-8.0, 4.0);
    for (int i = 0; i < 2000; ++i) {
        LatentGaussian<double> z;
        for (int k = 0; k < 4; ++k) {
            z.mu.push_back(mu(rng));
            z.log_var.push_back(lv(rng));
        }
        CHECK(kl_divergence(z) >= 0.0);
    }
}

TEST_CASE("closed-form KL agrees with a Monte Carlo estimate") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> mu(-1.5, 1.5), lv(-1.5, 1.0);
    std::normal_distribution<double> g;
    const std::size_t samples = 1'000'000;
    for (int trial = 0; trial < 3; ++trial) {
        const auto q = latent({mu(rng), mu(rng)}, {lv(rng), lv(rng)});
        double sum = 0.0, sum_sq = 0.0;
        for (std::size_t s = 0; s < samples; ++s) {
            double log_ratio = 0.0;
            for (std::size_t k = 0; k < q.dim(); ++k) {
                const double sigma = std::exp(0.5 * q.log_var[k]);
                const double eps = g(rng);
                const double z = q.mu[k] + sigma * eps;
                log_ratio += -0.5 * q.log_var[k] - 0.5 * eps * eps + 0.5 * z * z;
            }
            sum += log_ratio;
            sum_sq += log_ratio * log_ratio;
        }
        const double n = static_cast<double>(samples);
        const double mean = sum / n;
        const double se = std::sqrt((sum_sq / n - mean * mean) / n);
        CHECK(std::abs(mean - kl_divergence(q)) <= 3.0 * se);
    }
}

TEST_CASE("reparameterization examples") {
    CHECK(reparameterize<double>(latent({1.0, 2.0}, {0.0, 0.0}), std::vector<double>{0.0, 0.0}) ==
          std::vector<double>{1.0, 2.0});
    CHECK(reparameterize<double>(latent({0.0}, {0.0}), std::vector<double>{-0.7}) == std::vector<double>{-0.7});
    const auto z = reparameterize<double>(latent({1.0, 2.0}, {0.0, std::log(4.0)}), std::vector<double>{1.0, 1.0});
    CHECK(z[0] == doctest::Approx(2.0));
    CHECK(z[1] == doctest::Approx(4.0));
    CHECK_THROWS_AS(reparameterize<double>(latent({1.0}, {0.0}), std::vector<double>{1.0, 1.0}), ShapeError);
}

TEST_CASE("reparameterized samples have the posterior moments") {
    const auto q = latent({0.7, -1.3}, {std::log(0.25), std::log(2.0)});
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    const std::size_t n = 100'000;
    std::vector<double> sum(2, 0.0), sum_sq(2, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        const std::vector<double> eps{g(rng), g(rng)};
        const auto z = reparameterize<double>(q, eps);
        for (std::size_t k = 0; k < 2; ++k) {
            sum[k] += z[k];
            sum_sq[k] += z[k] * z[k];
        }
    }
    for (std::size_t k = 0; k < 2; ++k) {
        const double var = std::exp(q.log_var[k]);
        const double mean = sum[k] / n;
        const double sample_var = (sum_sq[k] - n * mean * mean) / (n - 1);
        CHECK(std::abs(mean - q.mu[k]) <= 3.0 * std::sqrt(var / n));
        CHECK(std::abs(sample_var - var) <= 3.0 * var * std::sqrt(2.0 / (n - 1)));
    }
}

TEST_CASE("L1 reconstruction") {
    const Tensor<double> a({1, 1, 2, 2}, std::vector<double>(4, 0.5));
    const Tensor<double> b({1, 1, 2, 2}, std::vector<double>(4, 0.25));
    CHECK(l1_reconstruction(a, a) == 0.0);
    CHECK(l1_reconstruction(a, b) == 1.0);
    CHECK(l1_reconstruction(b, a) == l1_reconstruction(a, b));
    CHECK_THROWS_AS(l1_reconstruction(a, Tensor<double>({1, 1, 1, 4}, std::vector<double>(4))), ShapeError);
}

TEST_CASE("default architecture shapes") {
    const Shape in{3, 64, 64};
    const auto arch = default_architecture(in, 4);
    VaeModel<float> m(arch, in, 4, 0);
    CHECK(m.encoder.output_shape() == Shape{8});
    CHECK(m.decoder.input_shape() == Shape{4});
    CHECK(m.decoder.output_shape() == in);
    CHECK(arch.encoder.front() == LayerSpec::conv2d(3, 32, 4, 2, 1));
    CHECK(arch.decoder.back().kind == LayerKind::sigmoid);
    CHECK_THROWS_AS(default_architecture({1, 60, 64}, 4), ShapeError);

    auto bad = arch;
    bad.encoder.back() = LayerSpec::dense(128 * 8 * 8, 6);
    CHECK_THROWS_AS(VaeModel<float>(bad, in, 4, 0), ShapeError);
}

TEST_CASE("encode and decode contracts") {
    const Shape in{1, 16, 16};
    VaeModel<float> m(default_architecture(in, 3, 8), in, 3, 2);
    auto frames = random_frames<float>(4, in, 1);
    std::copy_n(frames.values.begin(), 256, frames.values.begin() + 256);
    const auto lat = encode(m, frames);
    REQUIRE(lat.size() == 4);
    CHECK(lat[0].dim() == 3);
    CHECK(lat[0].mu == lat[1].mu);
    CHECK(lat[0].log_var == lat[1].log_var);

    std::vector<float> zv;
    for (const auto& l : lat) zv.insert(zv.end(), l.mu.begin(), l.mu.end());
    const auto rec = decode(m, Tensor<float>({4, 3}, zv));
    CHECK(rec.shape == frames.shape);

    const auto wild = decode(m, normal_noise<float>(8, 3, 9));
    for (float v : wild.values) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK_THROWS_AS(encode(m, random_frames<float>(1, {1, 8, 8}, 0)), ShapeError);
    CHECK_THROWS_AS(decode(m, Tensor<float>({1, 2}, {0.0f, 0.0f})), ShapeError);
}

TEST_CASE("golden encoder output and decoder hash") {
    const Shape in{1, 8, 8};
    VaeModel<float> m(default_architecture(in, 2, 4), in, 2, 1);
    const auto lat = encode(m, pattern_frame());
    CHECK(lat[0].mu[0] == doctest::Approx(0.0946355611).epsilon(1e-6));
    CHECK(lat[0].mu[1] == doctest::Approx(-0.0418866165).epsilon(1e-6));
    CHECK(lat[0].log_var[0] == doctest::Approx(-0.0306823757).epsilon(1e-6));
    CHECK(lat[0].log_var[1] == doctest::Approx(-0.054065939).epsilon(1e-6));

    const auto out = decode(m, Tensor<float>({2, 2}, {0.5f, -1.0f, 1.5f, 0.25f}));
    CHECK(fnv1a(out.values) == 10483830436622252500ull);
}

TEST_CASE("zero posterior with perfect reconstruction has zero loss") {
    const Shape in{1, 8, 8};
    VaeModel<double> m(default_architecture(in, 2, 4), in, 2, 0);
    for (auto& t : m.encoder_params.tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
    for (auto& t : m.decoder_params.tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
    const Tensor<double> frames({3, 1, 8, 8}, std::vector<double>(192, 0.5));
    const auto loss = total_loss(m, frames, normal_noise<double>(3, 2, 1));
    CHECK(loss.total == 0.0);
    CHECK(loss.kl == 0.0);
    CHECK(loss.reconstruction_l1 == 0.0);
    CHECK(loss.batch_size == 3);
}

TEST_CASE("total loss decomposes into independently computed terms") {
    const Shape in{1, 16, 16};
    VaeModel<double> m(default_architecture(in, 3, 8), in, 3, 4);
    const auto frames = random_frames<double>(5, in, 2);
    const auto noise = normal_noise<double>(5, 3, 3);
    const auto loss = total_loss(m, frames, noise);
    CHECK(loss.total == loss.reconstruction_l1 + loss.kl);
    CHECK(loss.kl >= 0.0);
    CHECK(loss.reconstruction_l1 >= 0.0);

    const auto lat = encode(m, frames);
    std::vector<double> zv;
    double kl = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        const auto zi = reparameterize<double>(
            lat[i], std::span<const double>(noise.values).subspan(i * 3, 3));
        zv.insert(zv.end(), zi.begin(), zi.end());
        kl += kl_divergence(lat[i]);
    }
    const double recon = l1_reconstruction(frames, decode(m, Tensor<double>({5, 3}, zv)));
    CHECK(loss.reconstruction_l1 == doctest::Approx(recon / 5.0).epsilon(1e-12));
    CHECK(loss.kl == doctest::Approx(kl / 5.0).epsilon(1e-12));

    CHECK_THROWS_AS(total_loss(m, frames, normal_noise<double>(4, 3, 3)), ShapeError);
}

TEST_CASE("full loss gradient matches finite differences at 64-bit") {
    const Shape in{1, 8, 8};
    VaeModel<double> model(default_architecture(in, 2, 4), in, 2, 3);
    const auto frames = random_frames<double>(3, in, 4);
    const auto noise = normal_noise<double>(3, 2, 5);
    const std::size_t ne = model.encoder_params.size();

    ParameterSet<double> joint = model.encoder_params;
    joint.tensors.insert(joint.tensors.end(), model.decoder_params.tensors.begin(), model.decoder_params.tensors.end());
    auto unpack = [&](const ParameterSet<double>& p) {
        VaeModel<double> m = model;
        m.encoder_params.tensors.assign(p.tensors.begin(), p.tensors.begin() + static_cast<std::ptrdiff_t>(ne));
        m.decoder_params.tensors.assign(p.tensors.begin() + static_cast<std::ptrdiff_t>(ne), p.tensors.end());
        return m;
    };
    auto analytic = [&](const ParameterSet<double>& p) {
        const auto r = total_loss_with_gradients(unpack(p), frames, noise);
        ParameterSet<double> g = r.encoder_grad;
        g.tensors.insert(g.tensors.end(), r.decoder_grad.tensors.begin(), r.decoder_grad.tensors.end());
        return LossAndGradient<double>{r.loss.total, g};
    };
    auto value = [&](const ParameterSet<double>& p) { return total_loss(unpack(p), frames, noise).total; };
    const auto r = gradient_check<double>(joint, analytic, value);
    INFO("worst tensor " << r.worst_tensor);
    CHECK(r.coordinates == joint.total_elements());
    CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("cast between precisions preserves architecture") {
    const Shape in{1, 8, 8};
    VaeModel<float> m(default_architecture(in, 2, 4), in, 2, 1);
    const auto d = cast_model<double>(m);
    const auto back = cast_model<float>(d);
    CHECK(back.encoder_params == m.encoder_params);
    CHECK(back.decoder_params == m.decoder_params);
    CHECK(d.latent_dim == 2);
}
