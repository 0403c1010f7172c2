#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "disc/model.hpp"
#include "disc/model_io.hpp"
#include "disc/rng.hpp"
#include "oracles.hpp"

using namespace disc;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.in_channels = 2;
    c.in_height = 8;
    c.in_width = 8;
    c.blocks = {{4, 3, 1, 1, true}, {6, 3, 1, 1, true}};
    c.n_classes = 3;
    c.seed = seed;
    return c;
}

template <typename T>
TensorT<T> random_input(Rng& rng, const ModelConfig& c, int n) {
    TensorT<T> x({n, c.in_channels, c.in_height, c.in_width});
    for (T& v : x.data) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return x;
}

// max over parameters of |analytic - central difference| with a scale-aware
// denominator; everything in double, h = 1e-5
double max_grad_rel_error(const ModelConfig& cfg, int batch, std::uint64_t data_seed) {
    ModelT<double> m = build_model<double>(cfg);
    Rng rng(data_seed);
    TensorT<double> x = random_input<double>(rng, cfg, batch);
    std::vector<int> labels(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i)
        labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(cfg.n_classes));

    ModelT<double> probe = m;
    auto [loss, grads] = loss_and_backward(probe, x, labels);
    (void)loss;

    const double h = 1e-5;
    double worst = 0.0;
    m.for_each_param([&](const std::string& key, std::vector<double>& param) {
        const std::vector<double>& g = grads.at(key);
        for (std::size_t i = 0; i < param.size(); ++i) {
            auto loss_at = [&](double delta) {
                ModelT<double> mm = m;
                std::vector<double>* p = mm.param_by_key(key);
                (*p)[i] += delta;
                auto [l, gg] = loss_and_backward(mm, x, labels);
                (void)gg;
                return static_cast<double>(l);
            };
            const double fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            const double a = g[i];
            // central differences cannot resolve relative error below the
            // O(h^2) truncation floor for vanishing gradients, so tiny
            // components pass on absolute agreement instead
            if (std::abs(a - fd) < 1e-10) continue;
            const double denom = std::max(std::abs(a), std::abs(fd));
            worst = std::max(worst, std::abs(a - fd) / denom);
        }
    });
    return worst;
}

}  // namespace

TEST_CASE("build is deterministic per seed") {
    ModelConfig c = tiny_config(7);
    Model a = build_model<float>(c);
    Model b = build_model<float>(c);
    CHECK(a.full_fingerprint() == b.full_fingerprint());
    c.seed = 8;
    Model d = build_model<float>(c);
    CHECK(a.full_fingerprint() != d.full_fingerprint());
    CHECK(a.mode == Mode::train);
}

TEST_CASE("default config produces (batch, n_classes) logits") {
    ModelConfig c;  // 3 blocks on 32x32x3, 8 classes
    c.seed = 3;
    Model m = build_model<float>(c);
    m.set_mode(Mode::eval);
    Rng rng(5);
    Tensor x = random_input<float>(rng, c, 4);
    Tensor logits = forward(m, x);
    CHECK(logits.ndim() == 2);
    CHECK(logits.dim(0) == 4);
    CHECK(logits.dim(1) == 8);
}

TEST_CASE("fresh BN layers act as the identity-statistics affine") {
    ModelConfig c = tiny_config();
    Model m = build_model<float>(c);
    // mu = 0, var = 1 at init: eval BN is x / sqrt(1 + eps) * gamma + beta
    const auto& bn = m.blocks[0].bn;
    Tensor x({1, bn.channels, 2, 2});
    Rng rng(9);
    for (float& v : x.data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    Tensor y = bn_forward_eval(x, bn);
    for (std::size_t i = 0; i < x.data.size(); ++i)
        CHECK(y.data[i] ==
              doctest::Approx(x.data[i] / std::sqrt(1.0 + bn.eps)).epsilon(1e-6));
}

TEST_CASE("config validation rejects bad shapes") {
    ModelConfig c = tiny_config();
    c.blocks.clear();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.blocks[0].kernel = 99;
    CHECK_THROWS_AS(build_model<float>(c), ConfigError);
    c = tiny_config();
    c.n_classes = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.head_width = 5;  // last block has 6 channels
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("eval forward is pure and repeatable") {
    ModelConfig c = tiny_config(2);
    Model m = build_model<float>(c);
    m.set_mode(Mode::eval);
    Rng rng(21);
    Tensor x = random_input<float>(rng, c, 3);
    const std::uint64_t before = m.full_fingerprint();
    Tensor y1 = forward(m, x);
    Tensor y2 = forward(m, x);
    CHECK(m.full_fingerprint() == before);
    CHECK(y1.data == y2.data);
}

TEST_CASE("train forward updates BN statistics as a side effect") {
    ModelConfig c = tiny_config(2);
    Model m = build_model<float>(c);
    Rng rng(22);
    Tensor x = random_input<float>(rng, c, 4);
    const std::uint64_t params_before = m.param_fingerprint();
    const std::uint64_t full_before = m.full_fingerprint();
    forward(m, x);
    CHECK(m.param_fingerprint() == params_before);
    CHECK(m.full_fingerprint() != full_before);
}

TEST_CASE("train forward rejects batch size 1") {
    ModelConfig c = tiny_config(2);
    Model m = build_model<float>(c);
    Tensor x({1, c.in_channels, c.in_height, c.in_width});
    CHECK_THROWS_AS(forward(m, x), DegenerateBatchError);
}

TEST_CASE("forward rejects shape mismatch") {
    ModelConfig c = tiny_config(2);
    Model m = build_model<float>(c);
    m.set_mode(Mode::eval);
    Tensor x({2, c.in_channels, c.in_height + 1, c.in_width});
    CHECK_THROWS_AS(forward(m, x), ShapeError);
}

TEST_CASE("zero-weight head yields bias logits") {
    ModelConfig c = tiny_config(4);
    Model m = build_model<float>(c);
    m.set_mode(Mode::eval);
    std::fill(m.head.weight.begin(), m.head.weight.end(), 0.0f);
    m.head.bias = {0.5f, -1.0f, 2.0f};
    Rng rng(31);
    Tensor x = random_input<float>(rng, c, 2);
    Tensor y = forward(m, x);
    for (int n = 0; n < 2; ++n)
        for (int k = 0; k < 3; ++k)
            CHECK(y.data[static_cast<std::size_t>(n) * 3 + k] == m.head.bias[k]);
}

TEST_CASE("forward matches the direct-convolution oracle") {
    Rng rng(37);
    for (int trial = 0; trial < 5; ++trial) {
        ModelConfig c = tiny_config(100 + static_cast<std::uint64_t>(trial));
        Model m = build_model<float>(c);
        m.set_mode(Mode::eval);
        // shift running stats away from identity so the oracle covers them
        for (auto& block : m.blocks)
            for (int ch = 0; ch < block.bn.channels; ++ch) {
                block.bn.running_mean[ch] = static_cast<float>(rng.uniform(-0.5, 0.5));
                block.bn.running_var[ch] = static_cast<float>(rng.uniform(0.3, 2.0));
            }
        Tensor x = random_input<float>(rng, c, 3);
        Tensor y = forward(m, x);
        TensorT<double> ref = oracle::model_forward_eval(m, x);
        double worst = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(y.data[i]) - ref.data[i]));
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("uniform logits give ln(n_classes) loss") {
    ModelConfig c = tiny_config(4);
    c.n_classes = 4;
    Model m = build_model<float>(c);
    std::fill(m.head.weight.begin(), m.head.weight.end(), 0.0f);
    std::fill(m.head.bias.begin(), m.head.bias.end(), 0.0f);
    Rng rng(41);
    Tensor x = random_input<float>(rng, c, 4);
    auto [loss, grads] = loss_and_backward(m, x, {0, 1, 2, 3});
    (void)grads;
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-5));
}

TEST_CASE("labels outside the class range are rejected") {
    ModelConfig c = tiny_config(4);
    Model m = build_model<float>(c);
    Rng rng(43);
    Tensor x = random_input<float>(rng, c, 2);
    CHECK_THROWS_AS(loss_and_backward(m, x, {0, 3}), LabelError);
    CHECK_THROWS_AS(loss_and_backward(m, x, {-1, 0}), LabelError);
}

TEST_CASE("running statistics receive no gradient") {
    ModelConfig c = tiny_config(4);
    Model m = build_model<float>(c);
    Rng rng(47);
    Tensor x = random_input<float>(rng, c, 3);
    auto [loss, grads] = loss_and_backward(m, x, {0, 1, 2});
    (void)loss;
    CHECK(grads.count("block0.bn.running_mean") == 0);
    CHECK(grads.count("block0.bn.running_var") == 0);
    // every trainable parameter does get one
    m.for_each_param([&](const std::string& key, std::vector<float>&) {
        CHECK(grads.count(key) == 1);
    });
}

TEST_CASE("analytic gradients match central finite differences") {
    // batch-stat BN path, all layer types on the menu
    const double err = max_grad_rel_error(tiny_config(51), 3, 52);
    CHECK(err < 1e-6);
}

TEST_CASE("gradients stay correct with frozen BN statistics") {
    ModelConfig cfg = tiny_config(53);
    ModelT<double> m = build_model<double>(cfg);
    // shift stats off identity to exercise the affine path
    for (auto& block : m.blocks)
        for (int ch = 0; ch < block.bn.channels; ++ch) {
            block.bn.running_mean[ch] = 0.3 * (ch + 1);
            block.bn.running_var[ch] = 0.5 + 0.1 * ch;
        }
    Rng rng(54);
    TensorT<double> x({3, cfg.in_channels, cfg.in_height, cfg.in_width});
    for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
    std::vector<int> labels = {0, 1, 2};

    ModelT<double> probe = m;
    auto [loss, grads] = loss_and_backward(probe, x, labels, /*bn_frozen=*/true);
    (void)loss;
    const double h = 1e-5;
    double worst = 0.0;
    m.for_each_param([&](const std::string& key, std::vector<double>& param) {
        const std::vector<double>& g = grads.at(key);
        for (std::size_t i = 0; i < param.size(); i += std::max<std::size_t>(1, param.size() / 7)) {
            auto loss_at = [&](double delta) {
                ModelT<double> mm = m;
                (*mm.param_by_key(key))[i] += delta;
                return static_cast<double>(
                    loss_and_backward(mm, x, labels, /*bn_frozen=*/true).first);
            };
            const double fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            const double denom = std::max({std::abs(g[i]), std::abs(fd), 1e-7});
            if (std::max(std::abs(g[i]), std::abs(fd)) < 1e-7) continue;
            worst = std::max(worst, std::abs(g[i] - fd) / denom);
        }
    });
    CHECK(worst < 1e-6);
}

TEST_CASE("sgd update rule arithmetic") {
    ModelConfig c = tiny_config(55);
    Model m = build_model<float>(c);
    m.head.bias[0] = 1.0f;
    GradMap<float> grads;
    grads["head.bias"] = std::vector<float>(static_cast<std::size_t>(c.n_classes), 0.0f);
    grads["head.bias"][0] = 0.5f;
    sgd_step(m, grads, 0.01f);
    CHECK(m.head.bias[0] == doctest::Approx(0.995).epsilon(1e-7));
}

TEST_CASE("sgd rejects non-positive learning rates") {
    ModelConfig c = tiny_config(55);
    Model m = build_model<float>(c);
    GradMap<float> grads;
    grads["head.bias"] = std::vector<float>(static_cast<std::size_t>(c.n_classes), 1.0f);
    CHECK_THROWS_AS(sgd_step(m, grads, 0.0f), ConfigError);
    CHECK_THROWS_AS(sgd_step(m, grads, -0.1f), ConfigError);
}

TEST_CASE("an empty trainable filter freezes everything") {
    ModelConfig c = tiny_config(56);
    Model m = build_model<float>(c);
    Rng rng(57);
    Tensor x = random_input<float>(rng, c, 3);
    auto [loss, grads] = loss_and_backward(m, x, {0, 1, 2});
    (void)loss;
    const std::uint64_t before = m.param_fingerprint();
    for (int i = 0; i < 5; ++i)
        sgd_step(m, grads, 0.1f, [](const std::string&) { return false; });
    CHECK(m.param_fingerprint() == before);
}

TEST_CASE("head-only filter trains just the head") {
    ModelConfig c = tiny_config(58);
    Model m = build_model<float>(c);
    Rng rng(59);
    Tensor x = random_input<float>(rng, c, 3);
    auto [loss, grads] = loss_and_backward(m, x, {0, 1, 2});
    (void)loss;
    const auto conv_before = m.blocks[0].conv.weight;
    const auto head_before = m.head.weight;
    sgd_step(m, grads, 0.1f, head_only_filter());
    CHECK(m.blocks[0].conv.weight == conv_before);
    CHECK(m.head.weight != head_before);
}

TEST_CASE("forward and backward keep values finite") {
    Rng rng(61);
    for (int trial = 0; trial < 10; ++trial) {
        ModelConfig c = tiny_config(200 + static_cast<std::uint64_t>(trial));
        Model m = build_model<float>(c);
        Tensor x = random_input<float>(rng, c, 4);
        auto [loss, grads] = loss_and_backward(m, x, {0, 1, 2, 0});
        CHECK(std::isfinite(loss));
        for (const auto& [key, g] : grads)
            for (float v : g) CHECK(std::isfinite(v));
        Tensor y = forward(m, x);
        CHECK(y.all_finite());
    }
}

TEST_CASE("checkpoint round trip is bit-exact") {
    ModelConfig c = tiny_config(63);
    Model m = build_model<float>(c);
    // dirty the stats so buffers are non-trivial
    Rng rng(64);
    Tensor x = random_input<float>(rng, c, 4);
    forward(m, x);

    const std::string path =
        (std::filesystem::temp_directory_path() / "disc_test_model.ckpt").string();
    save_model(m, path);
    Model loaded = load_model(path);
    CHECK(loaded.full_fingerprint() == m.full_fingerprint());
    CHECK(loaded.config.seed == c.seed);
    CHECK(loaded.mode == Mode::eval);
    // serialized form identical too
    CHECK(serialize_model(loaded) == serialize_model(m));
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects corruption with an offset") {
    ModelConfig c = tiny_config(65);
    Model m = build_model<float>(c);
    auto buf = serialize_model(m);

    auto expect_format_error = [](std::vector<char> bytes) {
        ByteReader r(std::move(bytes));
        CHECK_THROWS_AS(deserialize_model(r), FormatError);
    };

    auto flipped = buf;
    flipped[0] ^= 0x1;
    expect_format_error(flipped);

    auto truncated = buf;
    truncated.resize(buf.size() / 2);
    expect_format_error(truncated);

    auto trailing = buf;
    trailing.push_back(0);
    expect_format_error(trailing);
}
