#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "disc/model.hpp"
#include "disc/stats_bank.hpp"

namespace disc {

struct AdaptConfig {
    double rho0 = 0.1;    // momentum for the first batch
    double omega = 0.94;  // decay factor per batch
    double zeta = 0.005;  // additive floor term
    int batch_size = 16;
    int max_batches = 100;
    double tol = 1e-3;  // relative-change convergence tolerance
    int window = 3;     // consecutive converged batches required

    void validate() const {
        if (!(rho0 > 0.0 && rho0 <= 1.0)) throw ConfigError("adapt config: rho0 must be in (0, 1]");
        if (!(omega > 0.0 && omega < 1.0)) throw ConfigError("adapt config: omega must be in (0, 1)");
        if (zeta < 0.0) throw ConfigError("adapt config: zeta must be >= 0");
        if (zeta / (1.0 - omega) > rho0)
            throw ConfigError("adapt config: momentum floor zeta/(1-omega) must not exceed rho0");
        if (batch_size < 2) throw ConfigError("adapt config: batch size must be >= 2");
        if (max_batches < 1) throw ConfigError("adapt config: max batches must be >= 1");
        if (!(tol > 0.0)) throw ConfigError("adapt config: tolerance must be > 0");
        if (window < 1) throw ConfigError("adapt config: window must be >= 1");
    }

    double momentum_floor() const { return zeta / (1.0 - omega); }
};

struct AdaptReport {
    int batches_used = 0;
    std::vector<double> momentum_trace;  // rho_k actually applied at batch k
    std::vector<double> change_trace;    // max relative statistic change at batch k
    bool converged = false;
};

// rho_0 = rho0; rho_k = rho_{k-1} * omega + zeta, clamped to (0, 1].
double momentum_schedule(int k, const AdaptConfig& cfg);

// True iff the last `window` entries are all below `tol`.
bool convergence_check(const std::vector<double>& change_trace, double tol, int window);

// Pulls batches until exhausted; nullopt ends the stream.
using BatchStream = std::function<std::optional<Tensor>()>;

// Builds a deterministic stream over a pool of images: seeded shuffled order,
// consecutive batches of cfg.batch_size, at most max_batches batches.
// `images` must outlive the returned stream.
BatchStream make_batch_stream(const Tensor& images, int batch_size, int max_batches,
                              std::uint64_t seed);

// Forward-only statistics estimation on unlabeled batches. Updates every BN
// layer's running statistics with momentum rho_k per batch; stops once the
// statistics are stable (windowed criterion) or max_batches is reached. No
// gradients, no parameter updates.
std::pair<StatsSnapshot, AdaptReport> adapt(Model& m, BatchStream& stream, const AdaptConfig& cfg,
                                            const std::string& task_id);

void write_adapt_trace_csv(const AdaptReport& report, const std::string& path);

}  // namespace disc
