#include "doctest.h"

#include <cmath>

#include "disc/domain_forge.hpp"
#include "disc/trainer.hpp"

using namespace disc;

namespace {

// two-class toy: class 0 images are dim, class 1 bright; linearly separable
Split toy_split(int n, float lo = 0.1f, float hi = 0.9f) {
    Split s;
    s.images = Tensor({n, 3, 16, 16});
    s.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int label = i % 2;
        s.labels[static_cast<std::size_t>(i)] = label;
        const float v = label == 0 ? lo : hi;
        const std::size_t img = 3 * 16 * 16;
        for (std::size_t j = 0; j < img; ++j)
            s.images.data[static_cast<std::size_t>(i) * img + j] = v;
    }
    return s;
}

ModelConfig toy_model_config(int classes = 2, std::uint64_t seed = 1) {
    ModelConfig c;
    c.in_channels = 3;
    c.in_height = 16;
    c.in_width = 16;
    c.blocks = {{4}};
    c.n_classes = classes;
    c.seed = seed;
    return c;
}

// hand-built classifier that thresholds mean brightness; exact on the toy
Model perfect_toy_model() {
    ModelConfig c = toy_model_config();
    Model m = build_model<float>(c);
    m.set_mode(Mode::eval);
    // conv: single effective channel summing the input, others dead
    std::fill(m.blocks[0].conv.weight.begin(), m.blocks[0].conv.weight.end(), 0.0f);
    for (int ci = 0; ci < 3; ++ci) {
        // center tap of channel 0's kernel over each input channel
        const int k = m.blocks[0].conv.kernel;
        m.blocks[0].conv.weight[(static_cast<std::size_t>(0) * 3 + ci) * k * k + 4] = 1.0f;
    }
    std::fill(m.blocks[0].conv.bias.begin(), m.blocks[0].conv.bias.end(), 0.0f);
    // identity normalization
    for (int ch = 0; ch < 4; ++ch) {
        m.blocks[0].bn.running_mean[ch] = 0.0f;
        m.blocks[0].bn.running_var[ch] = 1.0f;
        m.blocks[0].bn.gamma[ch] = 1.0f;
        m.blocks[0].bn.beta[ch] = 0.0f;
    }
    // head: logit1 - logit0 = feat0 - threshold
    std::fill(m.head.weight.begin(), m.head.weight.end(), 0.0f);
    m.head.weight[0] = -1.0f;              // class 0 reads -feat0
    m.head.weight[m.head.in_features] = 1.0f;  // class 1 reads +feat0
    // feat0 ~ 0.3 for class 0, 2.7 for class 1 (sum of 3 channels)
    m.head.bias = {1.5f, -1.5f};
    return m;
}

}  // namespace

TEST_CASE("early stopping follows the drop protocol exactly") {
    // improvements through epoch 7, then stagnation: drops at 12, 20, 31
    EarlyStopping es(0.01, 5, 3.0, 3);
    std::vector<double> lr_trace;
    std::vector<double> val;
    for (int e = 1; e <= 7; ++e) val.push_back(0.1 * e);         // improve
    for (int e = 8; e <= 12; ++e) val.push_back(0.0);            // stagnate -> drop @12
    for (int e = 13; e <= 15; ++e) val.push_back(0.7 + 0.01 * e);  // improve
    for (int e = 16; e <= 20; ++e) val.push_back(0.0);           // stagnate -> drop @20
    for (int e = 21; e <= 26; ++e) val.push_back(0.9 + 0.001 * e);  // improve
    for (int e = 27; e <= 31; ++e) val.push_back(0.0);           // stagnate -> drop @31
    for (int e = 32; e <= 40; ++e) val.push_back(0.0);           // stagnate -> stop

    int stop_epoch = -1;
    for (std::size_t i = 0; i < val.size(); ++i) {
        lr_trace.push_back(es.lr());
        const auto d = es.observe(val[i]);
        if (d.stop) {
            stop_epoch = static_cast<int>(i) + 1;
            break;
        }
    }
    REQUIRE(stop_epoch == 36);
    REQUIRE(lr_trace.size() == 36);
    for (int e = 1; e <= 12; ++e) CHECK(lr_trace[e - 1] == doctest::Approx(0.01));
    for (int e = 13; e <= 20; ++e) CHECK(lr_trace[e - 1] == doctest::Approx(0.01 / 3));
    for (int e = 21; e <= 31; ++e) CHECK(lr_trace[e - 1] == doctest::Approx(0.01 / 9));
    for (int e = 32; e <= 36; ++e) CHECK(lr_trace[e - 1] == doctest::Approx(0.01 / 27));
    CHECK(es.drops() == 3);
}

TEST_CASE("early stopping requires strict improvement") {
    EarlyStopping es(0.01, 2, 3.0, 1);
    CHECK(es.observe(0.5).improved);
    CHECK_FALSE(es.observe(0.5).improved);  // equal is not an improvement
    auto d = es.observe(0.5);
    CHECK(d.dropped);  // two stagnant epochs at patience 2
    CHECK(es.lr() == doctest::Approx(0.01 / 3));
    es.observe(0.5);
    d = es.observe(0.5);
    CHECK(d.stop);
}

TEST_CASE("offline training is deterministic and selects the best model") {
    Split train = toy_split(32);
    Split val = toy_split(16);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.max_epochs = 12;
    cfg.patience = 2;
    cfg.max_lr_drops = 1;
    cfg.seed = 5;
    Model init = build_model<float>(toy_model_config());

    auto [m1, log1] = train_offline(init, train, val, cfg);
    auto [m2, log2] = train_offline(init, train, val, cfg);
    REQUIRE(log1.epochs.size() == log2.epochs.size());
    for (std::size_t i = 0; i < log1.epochs.size(); ++i) {
        CHECK(log1.epochs[i].train_loss == log2.epochs[i].train_loss);
        CHECK(log1.epochs[i].val_acc == log2.epochs[i].val_acc);
        CHECK(log1.epochs[i].lr == log2.epochs[i].lr);
    }
    CHECK(m1.full_fingerprint() == m2.full_fingerprint());

    // returned model's val accuracy equals the max of the val trace
    double best = 0.0;
    for (const auto& e : log1.epochs) best = std::max(best, e.val_acc);
    CHECK(evaluate(m1, val).accuracy == doctest::Approx(best));
    CHECK(log1.best_val_acc == doctest::Approx(best));
}

TEST_CASE("offline lr trace is piecewise constant with recorded drops") {
    Split train = toy_split(16, 0.4f, 0.6f);  // hard to separate quickly
    Split val = toy_split(8, 0.4f, 0.6f);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.patience = 2;
    cfg.max_lr_drops = 2;
    cfg.max_epochs = 50;
    cfg.seed = 7;
    Model init = build_model<float>(toy_model_config(2, 2));
    auto [m, log] = train_offline(init, train, val, cfg);
    (void)m;
    int drops = 0;
    for (std::size_t i = 1; i < log.epochs.size(); ++i) {
        const double ratio = log.epochs[i - 1].lr / log.epochs[i].lr;
        if (ratio != 1.0) {
            CHECK(ratio == doctest::Approx(3.0));
            ++drops;
        }
    }
    CHECK(drops <= 2);
    CHECK(log.terminal_lr == doctest::Approx(0.01 / std::pow(3.0, drops)));
}

TEST_CASE("online training runs exactly one epoch") {
    Split train = toy_split(40);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.regime = Regime::online;
    cfg.lr0 = 0.001;
    cfg.seed = 9;
    Model init = build_model<float>(toy_model_config());
    auto [m, log] = train_online(init, train, cfg);
    (void)m;
    CHECK(log.sgd_steps == 3);  // ceil(40 / 16)
    CHECK(log.epochs.size() == 1);
    CHECK(log.stop_reason == "online_epoch");
}

TEST_CASE("empty splits are rejected") {
    TrainConfig cfg;
    Model init = build_model<float>(toy_model_config());
    Split empty;
    Split ok = toy_split(8);
    CHECK_THROWS_AS(train_offline(init, empty, ok, cfg), DataError);
    CHECK_THROWS_AS(train_online(init, empty, cfg), DataError);
    CHECK_THROWS_AS(evaluate(init, empty), DataError);
}

TEST_CASE("a perfect model scores accuracy 1 with a diagonal confusion matrix") {
    Model m = perfect_toy_model();
    Split test = toy_split(32);
    EvalResult r = evaluate(m, test);
    CHECK(r.accuracy == doctest::Approx(1.0));
    CHECK(r.confusion[0][0] == 16);
    CHECK(r.confusion[1][1] == 16);
    CHECK(r.confusion[0][1] == 0);
    CHECK(r.confusion[1][0] == 0);
    CHECK(r.per_class[0] == doctest::Approx(1.0));
    CHECK(r.per_class[1] == doctest::Approx(1.0));
}

TEST_CASE("a constant-prediction model scores 1/n_classes on a balanced split") {
    ModelConfig c = toy_model_config(8, 3);
    Model m = build_model<float>(c);
    m.set_mode(Mode::eval);
    std::fill(m.head.weight.begin(), m.head.weight.end(), 0.0f);
    std::fill(m.head.bias.begin(), m.head.bias.end(), 0.0f);
    m.head.bias[2] = 1.0f;  // always predicts class 2

    Split s;
    s.images = Tensor({64, 3, 16, 16});
    s.labels.resize(64);
    for (int i = 0; i < 64; ++i) {
        s.labels[static_cast<std::size_t>(i)] = i % 8;
        for (std::size_t j = 0; j < 3 * 16 * 16; ++j)
            s.images.data[static_cast<std::size_t>(i) * 3 * 16 * 16 + j] = 0.5f;
    }
    EvalResult r = evaluate(m, s);
    CHECK(r.accuracy == doctest::Approx(0.125));
}

TEST_CASE("accuracy equals the mean per-class accuracy on balanced splits") {
    Model m = build_model<float>(toy_model_config(2, 11));
    m.set_mode(Mode::eval);
    Split test = toy_split(64);
    EvalResult r = evaluate(m, test);
    const double mean_pc = (r.per_class[0] + r.per_class[1]) / 2.0;
    CHECK(r.accuracy == doctest::Approx(mean_pc).epsilon(1e-12));
}

TEST_CASE("evaluation never mutates the model and shards deterministically") {
    Model m = build_model<float>(toy_model_config(2, 13));
    m.set_mode(Mode::eval);
    Split test = toy_split(64);
    const std::uint64_t before = m.full_fingerprint();
    EvalResult serial = evaluate(m, test, 16, 1);
    EvalResult sharded = evaluate(m, test, 16, 4);
    EvalResult odd_batches = evaluate(m, test, 7, 3);
    CHECK(m.full_fingerprint() == before);
    CHECK(serial.accuracy == sharded.accuracy);
    CHECK(serial.accuracy == odd_batches.accuracy);
    CHECK(serial.confusion == sharded.confusion);
    CHECK(serial.confusion == odd_batches.confusion);
}

TEST_CASE("bn-frozen training leaves statistics untouched") {
    Split train = toy_split(32);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.regime = Regime::online;
    cfg.lr0 = 0.01;
    cfg.bn_frozen = true;
    Model init = build_model<float>(toy_model_config(2, 17));
    const auto mean_before = init.blocks[0].bn.running_mean;
    auto [m, log] = train_online(init, train, cfg, head_only_filter());
    (void)log;
    CHECK(m.blocks[0].bn.running_mean == mean_before);
    // backbone untouched, head moved
    CHECK(m.blocks[0].conv.weight == init.blocks[0].conv.weight);
    CHECK(m.head.weight != init.head.weight);
}
