#pragma once

#include <string>
#include <utility>
#include <vector>

#include "disc/domain_forge.hpp"
#include "disc/model.hpp"

namespace disc {

enum class Regime { offline, online };

std::string regime_name(Regime r);
Regime regime_from_name(const std::string& name);

struct TrainConfig {
    double lr0 = 0.01;
    int batch_size = 16;
    int patience = 5;         // epochs without improvement before an lr drop
    double lr_factor = 3.0;   // divide lr by this at each drop
    int max_lr_drops = 3;     // stop once the post-drop patience expires
    int max_epochs = 200;     // safety cap
    Regime regime = Regime::offline;
    std::uint64_t seed = 0;
    bool bn_frozen = false;   // keep BN statistics fixed during training

    void validate() const {
        if (!(lr0 > 0.0)) throw ConfigError("train config: lr0 must be positive");
        if (batch_size < 2) throw ConfigError("train config: batch size must be >= 2");
        if (patience < 1 || max_lr_drops < 0 || max_epochs < 1 || !(lr_factor > 1.0))
            throw ConfigError("train config: invalid early-stopping parameters");
    }
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_acc = 0.0;
    double lr = 0.0;  // lr used during this epoch
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::string stop_reason;  // "early_stop", "max_epochs", "online_epoch"
    double best_val_acc = 0.0;
    int best_epoch = 0;
    double terminal_lr = 0.0;  // lr in effect when training stopped
    std::uint64_t sgd_steps = 0;
};

// Early-stopping protocol: when validation accuracy does not strictly
// improve for `patience` epochs, divide the lr by `factor`; stop once the
// patience after the `max_drops`-th change expires.
class EarlyStopping {
public:
    EarlyStopping(double lr0, int patience, double factor, int max_drops)
        : lr_(lr0), patience_(patience), factor_(factor), max_drops_(max_drops) {}

    struct Decision {
        bool improved = false;
        bool stop = false;
        bool dropped = false;  // lr changed after this observation
    };

    Decision observe(double val_acc) {
        Decision d;
        if (val_acc > best_) {
            best_ = val_acc;
            bad_epochs_ = 0;
            d.improved = true;
            return d;
        }
        if (++bad_epochs_ >= patience_) {
            if (drops_ == max_drops_) {
                d.stop = true;
                return d;
            }
            lr_ /= factor_;
            ++drops_;
            bad_epochs_ = 0;
            d.dropped = true;
        }
        return d;
    }

    double lr() const { return lr_; }
    int drops() const { return drops_; }
    double best() const { return best_; }

private:
    double lr_;
    int patience_;
    double factor_;
    int max_drops_;
    double best_ = -1.0;
    int bad_epochs_ = 0;
    int drops_ = 0;
};

// Offline protocol: seeded shuffling per epoch, validation in eval mode
// after each epoch, lr drops per EarlyStopping, returns the model state with
// the best validation accuracy.
std::pair<Model, TrainLog> train_offline(const Model& init, const Split& train, const Split& val,
                                         const TrainConfig& cfg,
                                         const TrainableFilter& filter = trainable_all);

// Online protocol: exactly one seeded epoch at cfg.lr0.
std::pair<Model, TrainLog> train_online(const Model& init, const Split& train,
                                        const TrainConfig& cfg,
                                        const TrainableFilter& filter = trainable_all);

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class;  // recall per class
    std::vector<std::vector<int>> confusion;  // [true][predicted]
    int total = 0;
};

// Deterministic eval-mode evaluation; per-image results are independent of
// batching, so sharding across threads reproduces the serial result exactly.
EvalResult evaluate(const Model& m, const Split& split, int batch_size = 256, int threads = 0);

void write_train_log_csv(const TrainLog& log, const std::string& path);

}  // namespace disc
