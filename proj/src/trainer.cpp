#include "disc/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "disc/rng.hpp"

namespace disc {

std::string regime_name(Regime r) { return r == Regime::offline ? "offline" : "online"; }

Regime regime_from_name(const std::string& name) {
    if (name == "offline") return Regime::offline;
    if (name == "online") return Regime::online;
    throw ConfigError("unknown regime '" + name + "'");
}

namespace {

Tensor gather_batch(const Split& split, const std::vector<int>& order, std::size_t start,
                    std::size_t count, std::vector<int>* labels) {
    const int C = split.images.dim(1), H = split.images.dim(2), W = split.images.dim(3);
    const std::size_t img = static_cast<std::size_t>(C) * H * W;
    Tensor batch({static_cast<int>(count), C, H, W});
    if (labels) labels->resize(count);
    for (std::size_t b = 0; b < count; ++b) {
        const int idx = order[start + b];
        std::copy_n(split.images.data.data() + static_cast<std::size_t>(idx) * img, img,
                    batch.data.data() + b * img);
        if (labels) (*labels)[b] = split.labels[static_cast<std::size_t>(idx)];
    }
    return batch;
}

// One pass over the training split; returns the mean loss.
double run_epoch(Model& m, const Split& train, const TrainConfig& cfg, double lr,
                 const TrainableFilter& filter, std::uint64_t epoch_seed, std::uint64_t* steps) {
    std::vector<int> order(static_cast<std::size_t>(train.count()));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(epoch_seed);
    shuffle(order, rng);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::vector<int> labels;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t count =
            std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - start);
        Tensor batch = gather_batch(train, order, start, count, &labels);
        auto [loss, grads] = loss_and_backward(m, batch, labels, cfg.bn_frozen);
        sgd_step(m, grads, static_cast<float>(lr), filter);
        loss_sum += static_cast<double>(loss) * static_cast<double>(count);
        seen += count;
        if (steps) ++*steps;
    }
    return loss_sum / static_cast<double>(seen);
}

}  // namespace

std::pair<Model, TrainLog> train_offline(const Model& init, const Split& train, const Split& val,
                                         const TrainConfig& cfg, const TrainableFilter& filter) {
    cfg.validate();
    if (train.count() == 0 || val.count() == 0) throw DataError("train_offline: empty split");

    Model m = init;
    m.set_mode(Mode::train);
    Model best = m;
    TrainLog log;
    EarlyStopping stopper(cfg.lr0, cfg.patience, cfg.lr_factor, cfg.max_lr_drops);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const double lr = stopper.lr();
        const double loss =
            run_epoch(m, train, cfg, lr, filter, mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)),
                      &log.sgd_steps);
        const double val_acc = evaluate(m, val, 256).accuracy;
        log.epochs.push_back({epoch, loss, val_acc, lr});

        const EarlyStopping::Decision d = stopper.observe(val_acc);
        if (d.improved) {
            best = m;
            log.best_val_acc = val_acc;
            log.best_epoch = epoch;
        }
        if (d.stop) {
            log.stop_reason = "early_stop";
            break;
        }
    }
    if (log.stop_reason.empty()) log.stop_reason = "max_epochs";
    log.terminal_lr = stopper.lr();
    best.set_mode(Mode::eval);
    return {std::move(best), std::move(log)};
}

std::pair<Model, TrainLog> train_online(const Model& init, const Split& train,
                                        const TrainConfig& cfg, const TrainableFilter& filter) {
    cfg.validate();
    if (train.count() == 0) throw DataError("train_online: empty split");

    Model m = init;
    m.set_mode(Mode::train);
    TrainLog log;
    const double loss =
        run_epoch(m, train, cfg, cfg.lr0, filter, mix_seed(cfg.seed, 1), &log.sgd_steps);
    log.epochs.push_back({1, loss, 0.0, cfg.lr0});
    log.stop_reason = "online_epoch";
    log.terminal_lr = cfg.lr0;
    m.set_mode(Mode::eval);
    return {std::move(m), std::move(log)};
}

EvalResult evaluate(const Model& m, const Split& split, int batch_size, int threads) {
    if (split.count() == 0) throw DataError("evaluate: empty split");
    const int n = split.count();
    const int k = m.config.n_classes;
    std::vector<int> preds(static_cast<std::size_t>(n), -1);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    auto eval_range = [&](int lo, int hi) {
        for (int start = lo; start < hi; start += batch_size) {
            const std::size_t count = static_cast<std::size_t>(std::min(batch_size, hi - start));
            Tensor batch = gather_batch(split, order, static_cast<std::size_t>(start), count, nullptr);
            Tensor logits = forward_eval(m, batch);
            for (std::size_t b = 0; b < count; ++b) {
                const float* row = logits.data.data() + b * static_cast<std::size_t>(k);
                int arg = 0;
                for (int c = 1; c < k; ++c)
                    if (row[c] > row[arg]) arg = c;
                preds[static_cast<std::size_t>(start) + b] = arg;
            }
        }
    };

    int n_threads = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    if (n_threads < 1) n_threads = 1;
    n_threads = std::min(n_threads, (n + batch_size - 1) / batch_size);
    if (n_threads <= 1) {
        eval_range(0, n);
    } else {
        // shard on batch boundaries; per-image logits do not depend on
        // batch composition in eval mode, so the result matches serial
        std::vector<std::thread> pool;
        const int batches = (n + batch_size - 1) / batch_size;
        const int per = (batches + n_threads - 1) / n_threads;
        for (int t = 0; t < n_threads; ++t) {
            const int lo = std::min(n, t * per * batch_size);
            const int hi = std::min(n, (t + 1) * per * batch_size);
            if (lo < hi) pool.emplace_back(eval_range, lo, hi);
        }
        for (auto& th : pool) th.join();
    }

    EvalResult res;
    res.total = n;
    res.confusion.assign(static_cast<std::size_t>(k), std::vector<int>(static_cast<std::size_t>(k), 0));
    std::vector<int> class_total(static_cast<std::size_t>(k), 0);
    std::vector<int> class_hit(static_cast<std::size_t>(k), 0);
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        const int y = split.labels[static_cast<std::size_t>(i)];
        const int p = preds[static_cast<std::size_t>(i)];
        res.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)]++;
        class_total[static_cast<std::size_t>(y)]++;
        if (p == y) {
            ++hits;
            class_hit[static_cast<std::size_t>(y)]++;
        }
    }
    res.accuracy = static_cast<double>(hits) / n;
    res.per_class.resize(static_cast<std::size_t>(k), 0.0);
    for (int c = 0; c < k; ++c)
        res.per_class[static_cast<std::size_t>(c)] =
            class_total[static_cast<std::size_t>(c)] > 0
                ? static_cast<double>(class_hit[static_cast<std::size_t>(c)]) /
                      class_total[static_cast<std::size_t>(c)]
                : 0.0;
    return res;
}

void write_train_log_csv(const TrainLog& log, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f << "epoch,loss,val_acc,lr\n";
    char line[160];
    for (const EpochRecord& e : log.epochs) {
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_acc,
                      e.lr);
        f << line;
    }
}

}  // namespace disc
