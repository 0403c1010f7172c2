#include "disc/dua.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>

#include "disc/rng.hpp"

namespace disc {

double momentum_schedule(int k, const AdaptConfig& cfg) {
    cfg.validate();
    if (k < 0) throw ConfigError("momentum_schedule: batch index must be >= 0");
    double rho = cfg.rho0;
    for (int i = 1; i <= k; ++i) rho = rho * cfg.omega + cfg.zeta;
    if (rho > 1.0) rho = 1.0;
    if (rho <= 0.0) rho = std::numeric_limits<double>::min();
    return rho;
}

bool convergence_check(const std::vector<double>& change_trace, double tol, int window) {
    if (static_cast<int>(change_trace.size()) < window) return false;
    for (std::size_t i = change_trace.size() - static_cast<std::size_t>(window);
         i < change_trace.size(); ++i)
        if (!(change_trace[i] < tol)) return false;
    return true;
}

BatchStream make_batch_stream(const Tensor& images, int batch_size, int max_batches,
                              std::uint64_t seed) {
    const int n = images.dim(0);
    const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
    auto order = std::make_shared<std::vector<int>>(n);
    for (int i = 0; i < n; ++i) (*order)[i] = i;
    Rng rng(mix_seed(seed, 0x61646170ull));  // "adap"
    shuffle(*order, rng);
    auto pos = std::make_shared<int>(0);
    auto emitted = std::make_shared<int>(0);
    const Tensor* src = &images;
    return [src, order, pos, emitted, batch_size, max_batches, C, H, W]() -> std::optional<Tensor> {
        const int n_total = static_cast<int>(order->size());
        if (*emitted >= max_batches) return std::nullopt;
        if (n_total - *pos < batch_size) return std::nullopt;
        Tensor batch({batch_size, C, H, W});
        const std::size_t img = static_cast<std::size_t>(C) * H * W;
        for (int b = 0; b < batch_size; ++b) {
            const int idx = (*order)[*pos + b];
            std::copy_n(src->data.data() + static_cast<std::size_t>(idx) * img, img,
                        batch.data.data() + static_cast<std::size_t>(b) * img);
        }
        *pos += batch_size;
        ++*emitted;
        return batch;
    };
}

namespace {

// max over BN layers and channels of |d mean| / (|mean| + 1) and
// |d var| / (var + 1), between consecutive batches.
double max_relative_change(const std::vector<std::vector<float>>& prev_means,
                           const std::vector<std::vector<float>>& prev_vars, const Model& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const auto& bn = m.blocks[i].bn;
        for (int c = 0; c < bn.channels; ++c) {
            const double dm = std::abs(static_cast<double>(bn.running_mean[c]) - prev_means[i][c]) /
                              (std::abs(static_cast<double>(bn.running_mean[c])) + 1.0);
            const double dv = std::abs(static_cast<double>(bn.running_var[c]) - prev_vars[i][c]) /
                              (static_cast<double>(bn.running_var[c]) + 1.0);
            worst = std::max(worst, std::max(dm, dv));
        }
    }
    return worst;
}

}  // namespace

std::pair<StatsSnapshot, AdaptReport> adapt(Model& m, BatchStream& stream, const AdaptConfig& cfg,
                                            const std::string& task_id) {
    cfg.validate();
    const std::uint64_t params_before = m.param_fingerprint();

    AdaptReport report;
    double rho = cfg.rho0;
    std::vector<std::vector<float>> prev_means(m.blocks.size()), prev_vars(m.blocks.size());
    for (int k = 0; k < cfg.max_batches; ++k) {
        std::optional<Tensor> batch = stream();
        if (!batch) {
            if (k == 0) throw InsufficientDataError("adapt: the batch stream yielded no batches");
            break;
        }
        if (batch->dim(0) < 2) throw DegenerateBatchError("adapt: batches must have size >= 2");

        for (std::size_t i = 0; i < m.blocks.size(); ++i) {
            prev_means[i] = m.blocks[i].bn.running_mean;
            prev_vars[i] = m.blocks[i].bn.running_var;
        }
        forward_adapt(m, *batch, static_cast<float>(rho));

        report.momentum_trace.push_back(rho);
        report.change_trace.push_back(max_relative_change(prev_means, prev_vars, m));
        ++report.batches_used;
        rho = std::min(1.0, rho * cfg.omega + cfg.zeta);

        if (convergence_check(report.change_trace, cfg.tol, cfg.window)) {
            report.converged = true;
            break;
        }
    }

    if (m.param_fingerprint() != params_before)
        throw NumericError("adapt: non-buffer parameters changed during adaptation");

    SnapshotMeta meta;
    meta.adapt_batches = static_cast<std::uint32_t>(report.batches_used);
    meta.note = "adapt";
    StatsSnapshot snap = capture(m, task_id, std::move(meta));
    return {std::move(snap), std::move(report)};
}

void write_adapt_trace_csv(const AdaptReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << "batch_index,momentum,max_rel_change\n";
    char line[128];
    for (int i = 0; i < report.batches_used; ++i) {
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g\n", i, report.momentum_trace[i],
                      report.change_trace[i]);
        f << line;
    }
}

}  // namespace disc
