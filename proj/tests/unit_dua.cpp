#include "doctest.h"

#include <cmath>

#include "disc/dua.hpp"
#include "disc/rng.hpp"
#include "oracles.hpp"

using namespace disc;

namespace {

ModelConfig adapt_config_model(std::uint64_t seed = 1) {
    ModelConfig c;
    c.in_channels = 2;
    c.in_height = 8;
    c.in_width = 8;
    c.blocks = {{4}, {6}};
    c.n_classes = 3;
    c.seed = seed;
    return c;
}

Tensor random_images(Rng& rng, const ModelConfig& c, int n, double shift = 0.0) {
    Tensor x({n, c.in_channels, c.in_height, c.in_width});
    for (float& v : x.data) v = static_cast<float>(rng.uniform(-1.0, 1.0) + shift);
    return x;
}

}  // namespace

TEST_CASE("momentum schedule endpoints") {
    AdaptConfig cfg;
    CHECK(momentum_schedule(0, cfg) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(momentum_schedule(1, cfg) == doctest::Approx(0.1 * 0.94 + 0.005).epsilon(1e-12));
    CHECK(momentum_schedule(1, cfg) == doctest::Approx(0.099).epsilon(1e-12));
    // fixed point of the affine map
    CHECK(momentum_schedule(2000, cfg) == doctest::Approx(0.005 / 0.06).epsilon(1e-9));
}

TEST_CASE("momentum schedule matches the closed form and decreases monotonically") {
    AdaptConfig cfg;
    double prev = momentum_schedule(0, cfg);
    for (int k = 1; k <= 200; ++k) {
        const double rho = momentum_schedule(k, cfg);
        CHECK(rho < prev);
        CHECK(rho > cfg.momentum_floor() - 1e-12);
        CHECK(rho ==
              doctest::Approx(oracle::momentum_closed_form(k, cfg.rho0, cfg.omega, cfg.zeta))
                  .epsilon(1e-9));
        prev = rho;
    }
}

TEST_CASE("adapt config invariants are enforced") {
    AdaptConfig cfg;
    cfg.rho0 = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AdaptConfig{};
    cfg.omega = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AdaptConfig{};
    cfg.zeta = 0.01;  // floor 0.01/0.06 > rho0 = 0.1? 0.1667 > 0.1 -> invalid
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = AdaptConfig{};
    cfg.window = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("convergence check windowing") {
    CHECK(convergence_check({0.5, 0.0005, 0.0004, 0.0003}, 1e-3, 3));
    CHECK_FALSE(convergence_check({0.0005, 0.5, 0.0004}, 1e-3, 2));
    CHECK_FALSE(convergence_check({0.0005, 0.0004}, 1e-3, 3));  // too short
    CHECK(convergence_check({0.0005}, 1e-3, 1));
}

TEST_CASE("constant batch statistics converge within window + 1 updates at the fixed point") {
    AdaptConfig cfg;
    // statistics already at the stream's values: every change is zero
    auto tr = oracle::simulate_constant_stream(0.7, 0.7, cfg.rho0, cfg.omega, cfg.zeta, 10);
    for (int k = cfg.window; k <= 10; ++k)
        CHECK(convergence_check({tr.changes.begin(), tr.changes.begin() + k}, cfg.tol, cfg.window));
    CHECK(convergence_check({tr.changes.begin(), tr.changes.begin() + cfg.window}, cfg.tol,
                            cfg.window));
}

TEST_CASE("convergence step on a constant stream matches the recurrence oracle") {
    AdaptConfig cfg;
    auto tr = oracle::simulate_constant_stream(0.0, 2.0, cfg.rho0, cfg.omega, cfg.zeta, 200);
    int oracle_step = -1;
    for (int k = cfg.window; k <= 200; ++k) {
        if (convergence_check({tr.changes.begin(), tr.changes.begin() + k}, cfg.tol, cfg.window)) {
            oracle_step = k;
            break;
        }
    }
    REQUIRE(oracle_step > 0);
    // the change sequence decays like (momentum) * prod(1 - rho_j): strictly
    // decreasing after step 0, so the first window of sub-tol entries is
    // exactly the window ending at the first index where all are sub-tol
    for (int k = oracle_step - cfg.window; k < oracle_step; ++k)
        CHECK(tr.changes[static_cast<std::size_t>(k)] < cfg.tol);
    CHECK(tr.changes[static_cast<std::size_t>(oracle_step - cfg.window - 1)] >= cfg.tol);
}

TEST_CASE("adapt is deterministic for a seeded stream") {
    ModelConfig mc = adapt_config_model(3);
    Rng rng(5);
    Tensor pool = random_images(rng, mc, 128, 0.5);
    AdaptConfig cfg;
    cfg.batch_size = 8;
    cfg.max_batches = 10;

    auto run = [&] {
        Model m = build_model<float>(mc);
        BatchStream stream = make_batch_stream(pool, cfg.batch_size, cfg.max_batches, 99);
        return adapt(m, stream, cfg, "fog");
    };
    auto [snap1, rep1] = run();
    auto [snap2, rep2] = run();
    CHECK(rep1.batches_used == rep2.batches_used);
    for (std::size_t i = 0; i < snap1.entries.size(); ++i) {
        CHECK(snap1.entries[i].mean == snap2.entries[i].mean);
        CHECK(snap1.entries[i].var == snap2.entries[i].var);
    }
}

TEST_CASE("adapt freezes all non-buffer parameters") {
    ModelConfig mc = adapt_config_model(7);
    Model m = build_model<float>(mc);
    const std::uint64_t params = m.param_fingerprint();
    Rng rng(11);
    Tensor pool = random_images(rng, mc, 64, 1.0);
    AdaptConfig cfg;
    cfg.batch_size = 8;
    cfg.max_batches = 8;
    BatchStream stream = make_batch_stream(pool, cfg.batch_size, cfg.max_batches, 1);
    auto [snap, rep] = adapt(m, stream, cfg, "fog");
    CHECK(m.param_fingerprint() == params);
    CHECK(snap.model_fingerprint == params);
    CHECK(rep.batches_used > 0);
}

TEST_CASE("adapt rejects an empty stream") {
    Model m = build_model<float>(adapt_config_model(13));
    AdaptConfig cfg;
    BatchStream empty = [] { return std::optional<Tensor>(); };
    CHECK_THROWS_AS(adapt(m, empty, cfg, "fog"), InsufficientDataError);
}

TEST_CASE("adapt stops at max_batches when the data keeps shifting") {
    ModelConfig mc = adapt_config_model(17);
    Model m = build_model<float>(mc);
    AdaptConfig cfg;
    cfg.batch_size = 4;
    cfg.max_batches = 6;
    cfg.tol = 1e-12;  // unreachable
    Rng rng(19);
    int k = 0;
    BatchStream stream = [&]() -> std::optional<Tensor> {
        return random_images(rng, mc, 4, 0.2 * k++);
    };
    auto [snap, rep] = adapt(m, stream, cfg, "fog");
    (void)snap;
    CHECK(rep.batches_used == 6);
    CHECK_FALSE(rep.converged);
    CHECK(rep.momentum_trace.size() == 6);
    CHECK(rep.change_trace.size() == 6);
    for (std::size_t i = 1; i < rep.momentum_trace.size(); ++i)
        CHECK(rep.momentum_trace[i] < rep.momentum_trace[i - 1]);
}

TEST_CASE("adapt report traces a constant stream into convergence") {
    ModelConfig mc = adapt_config_model(23);
    Model m = build_model<float>(mc);
    Rng rng(29);
    Tensor one_batch = random_images(rng, mc, 8, 0.3);
    AdaptConfig cfg;
    cfg.batch_size = 8;
    cfg.max_batches = 100;
    BatchStream constant = [&]() -> std::optional<Tensor> { return one_batch; };
    auto [snap, rep] = adapt(m, constant, cfg, "fog");
    (void)snap;
    CHECK(rep.converged);
    CHECK(rep.batches_used < 100);
    // statistics settle onto the stream's batch statistics
    const int last = rep.batches_used - 1;
    CHECK(rep.change_trace[static_cast<std::size_t>(last)] < cfg.tol);
}

TEST_CASE("batch streams enforce batch size and count") {
    ModelConfig mc = adapt_config_model(31);
    Rng rng(37);
    Tensor pool = random_images(rng, mc, 20, 0.0);
    BatchStream s = make_batch_stream(pool, 8, 100, 7);
    int batches = 0;
    while (auto b = s()) {
        CHECK(b->dim(0) == 8);
        ++batches;
    }
    CHECK(batches == 2);  // 20 images / 8 -> 2 full batches, remainder dropped
}
