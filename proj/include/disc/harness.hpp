#pragma once

#include <string>
#include <vector>

#include "disc/domain_forge.hpp"
#include "disc/dua.hpp"
#include "disc/model.hpp"
#include "disc/stats_bank.hpp"
#include "disc/trainer.hpp"

namespace disc {

enum class Method { source_only, freezing, disjoint, fine_tuning, joint_training, disc };

std::string method_name(Method m);
Method method_from_name(const std::string& name);
std::vector<Method> parse_method_list(const std::string& csv);

// The task-0 artifact every run starts from.
struct InitialModel {
    Model model;
    double terminal_lr = 0.01;  // lr at which task-0 training stopped
};

struct HarnessConfig {
    TrainConfig train;  // protocol for supervised phases (lr0, early stopping)
    AdaptConfig adapt;
    std::uint64_t seed = 0;
    int eval_batch = 256;
    int eval_threads = 0;  // 0 = hardware concurrency
};

// Accuracies at one sequence step, task-aware: entry t is the accuracy on
// task t's test split using that task's model/snapshot/head.
struct StepResult {
    std::vector<double> task_acc;                // size step+1
    double seen_mean = 0.0;                      // unweighted arithmetic mean
    std::vector<std::vector<double>> per_class;  // [task][class] recall
};

struct MethodAccounting {
    std::uint64_t stored_bytes = 0;  // task-aware inference artifacts
    std::uint64_t sgd_steps = 0;
    std::uint64_t adapt_batches = 0;
    double wall_seconds = 0.0;
};

struct SequenceResult {
    Method method = Method::source_only;
    Regime regime = Regime::offline;
    std::vector<StepResult> steps;
    MethodAccounting accounting;
    // Per-method artifacts kept for reuse (cross-task evaluation, probes).
    StatsBank bank;                  // DISC
    std::vector<Model> task_models;  // Disjoint
};

// Trains the initial model on task 0 with the offline protocol.
InitialModel prepare_initial(const TaskSequence& seq, const HarnessConfig& cfg);

// Runs one method through the whole sequence with task-aware evaluation.
SequenceResult run_sequence(Method method, Regime regime, const TaskSequence& seq,
                            const InitialModel& init, const HarnessConfig& cfg);

// Mean/stddev over repeated seeded runs. Repeat r reseeds everything after
// task 0 (training shuffles, adaptation streams, per-task inits).
struct RepeatedResult {
    Method method = Method::source_only;
    Regime regime = Regime::offline;
    int repeats = 1;
    std::vector<std::vector<double>> acc_mean;  // [step][task]
    std::vector<std::vector<double>> acc_std;
    std::vector<double> seen_mean;  // [step]
    std::vector<double> seen_std;
    std::vector<std::vector<std::vector<double>>> per_class_mean;  // [step][task][class]
    MethodAccounting accounting;    // from the first run
    SequenceResult first_run;
};

RepeatedResult run_repeated(Method method, Regime regime, const TaskSequence& seq,
                            const InitialModel& init, const HarnessConfig& cfg, int repeats,
                            int jobs = 1);

struct CrossTaskMatrix {
    std::vector<std::string> row_labels;  // "source-only", then one per task
    std::vector<std::string> col_labels;  // task ids
    std::vector<std::vector<double>> acc;

    double at(const std::string& row, const std::string& col) const;
};

// Every stored statistics snapshot evaluated on every domain's test split.
CrossTaskMatrix cross_task_disc(const InitialModel& init, const StatsBank& bank,
                                const TaskSequence& seq, const HarnessConfig& cfg);

// Every per-domain model evaluated on every domain's test split.
CrossTaskMatrix cross_task_disjoint(const InitialModel& init, const std::vector<Model>& models,
                                    const TaskSequence& seq, const HarnessConfig& cfg);

struct ReportInputs {
    std::vector<RepeatedResult> sequences;
    std::vector<std::pair<std::string, CrossTaskMatrix>> cross_matrices;
    std::vector<std::string> task_ids;
    std::vector<int> per_class_subset;  // empty = first 3 classes
    std::string config_echo;
    bool unequal_task_sizes = false;
};

// Writes sequence.csv, table2.md, per_class.csv, cross_task.csv,
// accounting.csv, config_echo.txt and timing.txt under `dir`. Every CSV is
// byte-deterministic for a fixed run configuration; wall-clock times go to
// timing.txt only.
void render_report(const ReportInputs& inputs, const std::string& dir);

}  // namespace disc
