#include "disc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include "disc/model_io.hpp"
#include "disc/rng.hpp"

namespace fs = std::filesystem;

namespace disc {

std::string method_name(Method m) {
    switch (m) {
        case Method::source_only: return "source-only";
        case Method::freezing: return "freezing";
        case Method::disjoint: return "disjoint";
        case Method::fine_tuning: return "fine-tuning";
        case Method::joint_training: return "joint-training";
        case Method::disc: return "disc";
    }
    throw ConfigError("unknown method");
}

Method method_from_name(const std::string& name) {
    if (name == "source-only") return Method::source_only;
    if (name == "freezing") return Method::freezing;
    if (name == "disjoint") return Method::disjoint;
    if (name == "fine-tuning") return Method::fine_tuning;
    if (name == "joint-training") return Method::joint_training;
    if (name == "disc") return Method::disc;
    throw ConfigError("unknown method '" + name + "'");
}

std::vector<Method> parse_method_list(const std::string& csv) {
    std::vector<Method> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(method_from_name(item));
    }
    if (out.empty()) throw ConfigError("empty method list");
    return out;
}

double CrossTaskMatrix::at(const std::string& row, const std::string& col) const {
    for (std::size_t i = 0; i < row_labels.size(); ++i) {
        if (row_labels[i] != row) continue;
        for (std::size_t j = 0; j < col_labels.size(); ++j)
            if (col_labels[j] == col) return acc[i][j];
    }
    throw ProtocolError("cross-task matrix has no cell (" + row + ", " + col + ")");
}

namespace {

Split concat_splits(const std::vector<const Split*>& parts) {
    int total = 0;
    for (const Split* p : parts) total += p->count();
    const Split& first = *parts.front();
    const int C = first.images.dim(1), H = first.images.dim(2), W = first.images.dim(3);
    Split out;
    out.images = Tensor({total, C, H, W});
    out.labels.reserve(static_cast<std::size_t>(total));
    std::size_t offset = 0;
    for (const Split* p : parts) {
        std::copy(p->images.data.begin(), p->images.data.end(), out.images.data.begin() + offset);
        offset += p->images.data.size();
        out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    }
    return out;
}

struct TaskEval {
    double accuracy;
    std::vector<double> per_class;
};

TaskEval eval_on(const Model& m, const Split& test, const HarnessConfig& cfg) {
    EvalResult r = evaluate(m, test, cfg.eval_batch, cfg.eval_threads);
    return {r.accuracy, r.per_class};
}

void finish_step(StepResult& step) {
    double sum = 0.0;
    for (double a : step.task_acc) sum += a;
    step.seen_mean = sum / static_cast<double>(step.task_acc.size());
}

std::uint64_t head_bytes(const Model& m) {
    return static_cast<std::uint64_t>(m.head.weight.size() + m.head.bias.size()) * sizeof(float);
}

}  // namespace

InitialModel prepare_initial(const TaskSequence& seq, const HarnessConfig& cfg) {
    if (seq.tasks.empty() || seq.tasks.front().domain.kind != Weather::clear)
        throw ProtocolError("task 0 must be the clear domain");
    TrainConfig tc = cfg.train;
    tc.regime = Regime::offline;
    tc.seed = mix_seed(cfg.seed, 0x696e6974ull);  // "init"
    Model fresh = build_model<float>([&] {
        ModelConfig mc;
        mc.in_channels = seq.tasks[0].train.images.dim(1);
        mc.in_height = seq.tasks[0].train.images.dim(2);
        mc.in_width = seq.tasks[0].train.images.dim(3);
        mc.n_classes = seq.n_classes;
        mc.seed = cfg.seed;
        return mc;
    }());
    auto [model, log] = train_offline(fresh, seq.tasks[0].train, seq.tasks[0].val, tc);
    return {std::move(model), log.terminal_lr};
}

SequenceResult run_sequence(Method method, Regime regime, const TaskSequence& seq,
                            const InitialModel& init, const HarnessConfig& cfg) {
    if (seq.tasks.empty()) throw ProtocolError("run_sequence: empty task sequence");
    if (seq.tasks.front().domain.kind != Weather::clear)
        throw ProtocolError("run_sequence: task 0 must be clear");
    if (!init.model.all_finite()) throw ProtocolError("run_sequence: missing or invalid initial model");
    cfg.adapt.validate();

    const auto t_start = std::chrono::steady_clock::now();
    const int T = static_cast<int>(seq.tasks.size());
    SequenceResult result;
    result.method = method;
    result.regime = regime;

    // online supervised phases run at the lr where task-0 training stopped
    TrainConfig online_cfg = cfg.train;
    online_cfg.regime = Regime::online;
    online_cfg.lr0 = init.terminal_lr;

    const std::uint64_t ckpt_bytes = serialize_model(init.model).size();

    switch (method) {
        case Method::source_only: {
            // frozen initial model everywhere; regime-invariant
            std::vector<TaskEval> per_task;
            for (int t = 0; t < T; ++t) per_task.push_back(eval_on(init.model, seq.tasks[t].test, cfg));
            for (int s = 0; s < T; ++s) {
                StepResult step;
                for (int t = 0; t <= s; ++t) {
                    step.task_acc.push_back(per_task[t].accuracy);
                    step.per_class.push_back(per_task[t].per_class);
                }
                finish_step(step);
                result.steps.push_back(std::move(step));
            }
            result.accounting.stored_bytes = ckpt_bytes;
            break;
        }

        case Method::disc: {
            Model work = init.model;
            StatsBank bank;
            bank.add(capture(work, seq.tasks[0].task_id,
                             {0, "train"}));
            for (int t = 1; t < T; ++t) {
                // each adaptation starts from the initial-task statistics
                plug(work, bank.at(seq.tasks[0].task_id));
                AdaptConfig ac = cfg.adapt;
                BatchStream stream =
                    make_batch_stream(seq.tasks[t].train.images, ac.batch_size, ac.max_batches,
                                      mix_seed(cfg.seed, 0xd15c0000ull + static_cast<std::uint64_t>(t)));
                auto [snap, report] = adapt(work, stream, ac, seq.tasks[t].task_id);
                result.accounting.adapt_batches += static_cast<std::uint64_t>(report.batches_used);
                bank.add(std::move(snap));
            }
            // task-aware evaluation: plug the snapshot, then eval
            for (int s = 0; s < T; ++s) {
                StepResult step;
                for (int t = 0; t <= s; ++t) {
                    Model eval_model = init.model;
                    plug(eval_model, bank.at(seq.tasks[t].task_id));
                    TaskEval e = eval_on(eval_model, seq.tasks[t].test, cfg);
                    step.task_acc.push_back(e.accuracy);
                    step.per_class.push_back(e.per_class);
                }
                finish_step(step);
                result.steps.push_back(std::move(step));
            }
            result.accounting.stored_bytes = ckpt_bytes + serialize_bank(bank).size();
            result.bank = std::move(bank);
            break;
        }

        case Method::freezing: {
            // per-task head copies over a fully frozen backbone (BN
            // statistics included)
            std::vector<LinearLayerT<float>> heads(static_cast<std::size_t>(T));
            heads[0] = init.model.head;
            for (int t = 1; t < T; ++t) {
                TrainConfig tc = cfg.train;
                tc.bn_frozen = true;
                tc.seed = mix_seed(cfg.seed, 0xf8ee0000ull + static_cast<std::uint64_t>(t));
                tc.lr0 = init.terminal_lr;
                if (regime == Regime::online) {
                    tc.regime = Regime::online;
                    auto [m2, log] = train_online(init.model, seq.tasks[t].train, tc, head_only_filter());
                    result.accounting.sgd_steps += log.sgd_steps;
                    heads[t] = m2.head;
                } else {
                    tc.regime = Regime::offline;
                    auto [m2, log] =
                        train_offline(init.model, seq.tasks[t].train, seq.tasks[t].val, tc,
                                      head_only_filter());
                    result.accounting.sgd_steps += log.sgd_steps;
                    heads[t] = m2.head;
                }
            }
            for (int s = 0; s < T; ++s) {
                StepResult step;
                for (int t = 0; t <= s; ++t) {
                    Model eval_model = init.model;
                    eval_model.head = heads[t];
                    TaskEval e = eval_on(eval_model, seq.tasks[t].test, cfg);
                    step.task_acc.push_back(e.accuracy);
                    step.per_class.push_back(e.per_class);
                }
                finish_step(step);
                result.steps.push_back(std::move(step));
            }
            std::uint64_t hb = 0;
            for (const auto& h : heads)
                hb += static_cast<std::uint64_t>(h.weight.size() + h.bias.size()) * sizeof(float);
            result.accounting.stored_bytes = ckpt_bytes + hb - head_bytes(init.model);
            break;
        }

        case Method::disjoint: {
            // an independent model per task; task 0 keeps the shared
            // initial model
            std::vector<Model> models;
            models.push_back(init.model);
            for (int t = 1; t < T; ++t) {
                ModelConfig mc = init.model.config;
                mc.seed = mix_seed(cfg.seed, 0xd1530000ull + static_cast<std::uint64_t>(t));
                Model fresh = build_model<float>(mc);
                if (regime == Regime::online) {
                    TrainConfig tc = online_cfg;
                    tc.seed = mix_seed(cfg.seed, 0xd1531000ull + static_cast<std::uint64_t>(t));
                    auto [m2, log] = train_online(fresh, seq.tasks[t].train, tc);
                    result.accounting.sgd_steps += log.sgd_steps;
                    models.push_back(std::move(m2));
                } else {
                    TrainConfig tc = cfg.train;
                    tc.regime = Regime::offline;
                    tc.seed = mix_seed(cfg.seed, 0xd1531000ull + static_cast<std::uint64_t>(t));
                    auto [m2, log] = train_offline(fresh, seq.tasks[t].train, seq.tasks[t].val, tc);
                    result.accounting.sgd_steps += log.sgd_steps;
                    models.push_back(std::move(m2));
                }
            }
            for (int s = 0; s < T; ++s) {
                StepResult step;
                for (int t = 0; t <= s; ++t) {
                    TaskEval e = eval_on(models[t], seq.tasks[t].test, cfg);
                    step.task_acc.push_back(e.accuracy);
                    step.per_class.push_back(e.per_class);
                }
                finish_step(step);
                result.steps.push_back(std::move(step));
            }
            result.accounting.stored_bytes = 0;
            for (const Model& m : models)
                result.accounting.stored_bytes += serialize_model(m).size();
            result.task_models = std::move(models);
            break;
        }

        case Method::fine_tuning:
        case Method::joint_training: {
            const bool joint = method == Method::joint_training;
            Model current = init.model;
            for (int s = 0; s < T; ++s) {
                if (s > 0) {
                    if (joint) {
                        // restart from the task-0 checkpoint on the union of
                        // everything seen so far
                        current = init.model;
                        std::vector<const Split*> train_parts, val_parts;
                        for (int t = 0; t <= s; ++t) {
                            train_parts.push_back(&seq.tasks[t].train);
                            val_parts.push_back(&seq.tasks[t].val);
                        }
                        const Split train_union = concat_splits(train_parts);
                        const Split val_union = concat_splits(val_parts);
                        if (regime == Regime::online) {
                            TrainConfig tc = online_cfg;
                            tc.seed = mix_seed(cfg.seed, 0x10140000ull + static_cast<std::uint64_t>(s));
                            auto [m2, log] = train_online(current, train_union, tc);
                            result.accounting.sgd_steps += log.sgd_steps;
                            current = std::move(m2);
                        } else {
                            TrainConfig tc = cfg.train;
                            tc.regime = Regime::offline;
                            tc.seed = mix_seed(cfg.seed, 0x10140000ull + static_cast<std::uint64_t>(s));
                            auto [m2, log] = train_offline(current, train_union, val_union, tc);
                            result.accounting.sgd_steps += log.sgd_steps;
                            current = std::move(m2);
                        }
                    } else {
                        // sequential fine-tuning at the lr where task-0
                        // training terminated
                        if (regime == Regime::online) {
                            TrainConfig tc = online_cfg;
                            tc.seed = mix_seed(cfg.seed, 0xf17e0000ull + static_cast<std::uint64_t>(s));
                            auto [m2, log] = train_online(current, seq.tasks[s].train, tc);
                            result.accounting.sgd_steps += log.sgd_steps;
                            current = std::move(m2);
                        } else {
                            TrainConfig tc = cfg.train;
                            tc.regime = Regime::offline;
                            tc.lr0 = init.terminal_lr;
                            tc.seed = mix_seed(cfg.seed, 0xf17e0000ull + static_cast<std::uint64_t>(s));
                            auto [m2, log] =
                                train_offline(current, seq.tasks[s].train, seq.tasks[s].val, tc);
                            result.accounting.sgd_steps += log.sgd_steps;
                            current = std::move(m2);
                        }
                    }
                }
                StepResult step;
                for (int t = 0; t <= s; ++t) {
                    TaskEval e = eval_on(current, seq.tasks[t].test, cfg);
                    step.task_acc.push_back(e.accuracy);
                    step.per_class.push_back(e.per_class);
                }
                finish_step(step);
                result.steps.push_back(std::move(step));
            }
            result.accounting.stored_bytes = ckpt_bytes;
            break;
        }
    }

    result.accounting.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

RepeatedResult run_repeated(Method method, Regime regime, const TaskSequence& seq,
                            const InitialModel& init, const HarnessConfig& cfg, int repeats,
                            int jobs) {
    if (repeats < 1) throw ConfigError("run_repeated: repeats must be >= 1");
    std::vector<SequenceResult> runs(static_cast<std::size_t>(repeats));

    auto run_one = [&](int r) {
        HarnessConfig c = cfg;
        c.seed = mix_seed(cfg.seed, 0x72657065ull + static_cast<std::uint64_t>(r));  // "repe"
        c.train.seed = c.seed;
        if (jobs > 1) c.eval_threads = 1;
        runs[static_cast<std::size_t>(r)] = run_sequence(method, regime, seq, init, c);
    };

    if (jobs <= 1 || repeats == 1) {
        for (int r = 0; r < repeats; ++r) run_one(r);
    } else {
        std::vector<std::thread> pool;
        std::atomic_int next{0};
        const int workers = std::min(jobs, repeats);
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (int r = next.fetch_add(1); r < repeats; r = next.fetch_add(1)) run_one(r);
            });
        for (auto& th : pool) th.join();
    }

    const int T = static_cast<int>(seq.tasks.size());
    RepeatedResult agg;
    agg.method = method;
    agg.regime = regime;
    agg.repeats = repeats;
    agg.acc_mean.assign(static_cast<std::size_t>(T), {});
    agg.acc_std.assign(static_cast<std::size_t>(T), {});
    agg.seen_mean.assign(static_cast<std::size_t>(T), 0.0);
    agg.seen_std.assign(static_cast<std::size_t>(T), 0.0);
    agg.per_class_mean.assign(static_cast<std::size_t>(T), {});

    auto mean_std = [&](auto getter) {
        double mean = 0.0;
        for (const auto& run : runs) mean += getter(run);
        mean /= repeats;
        double var = 0.0;
        if (repeats > 1) {
            for (const auto& run : runs) {
                const double d = getter(run) - mean;
                var += d * d;
            }
            var /= (repeats - 1);
        }
        return std::pair<double, double>(mean, std::sqrt(var));
    };

    for (int s = 0; s < T; ++s) {
        for (int t = 0; t <= s; ++t) {
            auto [m, sd] = mean_std([&](const SequenceResult& r) {
                return r.steps[static_cast<std::size_t>(s)].task_acc[static_cast<std::size_t>(t)];
            });
            agg.acc_mean[static_cast<std::size_t>(s)].push_back(m);
            agg.acc_std[static_cast<std::size_t>(s)].push_back(sd);
        }
        auto [m, sd] =
            mean_std([&](const SequenceResult& r) { return r.steps[static_cast<std::size_t>(s)].seen_mean; });
        agg.seen_mean[static_cast<std::size_t>(s)] = m;
        agg.seen_std[static_cast<std::size_t>(s)] = sd;

        const std::size_t n_classes = runs[0].steps[0].per_class[0].size();
        auto& pc = agg.per_class_mean[static_cast<std::size_t>(s)];
        pc.assign(static_cast<std::size_t>(s) + 1, std::vector<double>(n_classes, 0.0));
        for (int t = 0; t <= s; ++t)
            for (std::size_t c = 0; c < n_classes; ++c) {
                double m2 = 0.0;
                for (const auto& run : runs)
                    m2 += run.steps[static_cast<std::size_t>(s)].per_class[static_cast<std::size_t>(t)][c];
                pc[static_cast<std::size_t>(t)][c] = m2 / repeats;
            }
    }
    agg.accounting = runs[0].accounting;
    agg.first_run = std::move(runs[0]);
    return agg;
}

namespace {

CrossTaskMatrix cross_matrix_common(const InitialModel& init, const TaskSequence& seq,
                                    const HarnessConfig& cfg,
                                    const std::function<Model(const std::string&)>& model_for) {
    CrossTaskMatrix m;
    m.col_labels.clear();
    for (const Task& t : seq.tasks) m.col_labels.push_back(t.task_id);
    m.row_labels.push_back("source-only");
    for (const Task& t : seq.tasks) m.row_labels.push_back(t.task_id);

    std::vector<double> src_row;
    for (const Task& t : seq.tasks)
        src_row.push_back(eval_on(init.model, t.test, cfg).accuracy);
    m.acc.push_back(src_row);
    for (const Task& row_task : seq.tasks) {
        Model em = model_for(row_task.task_id);
        std::vector<double> row;
        for (const Task& col_task : seq.tasks)
            row.push_back(eval_on(em, col_task.test, cfg).accuracy);
        m.acc.push_back(std::move(row));
    }
    return m;
}

}  // namespace

CrossTaskMatrix cross_task_disc(const InitialModel& init, const StatsBank& bank,
                                const TaskSequence& seq, const HarnessConfig& cfg) {
    for (const Task& t : seq.tasks)
        if (!bank.find(t.task_id))
            throw ProtocolError("cross_task_disc: bank is missing a snapshot for '" + t.task_id + "'");
    return cross_matrix_common(init, seq, cfg, [&](const std::string& task_id) {
        Model m = init.model;
        plug(m, bank.at(task_id));
        return m;
    });
}

CrossTaskMatrix cross_task_disjoint(const InitialModel& init, const std::vector<Model>& models,
                                    const TaskSequence& seq, const HarnessConfig& cfg) {
    if (models.size() != seq.tasks.size())
        throw ProtocolError("cross_task_disjoint: need one model per task");
    return cross_matrix_common(init, seq, cfg, [&](const std::string& task_id) {
        return models[static_cast<std::size_t>(seq.index_of(task_id))];
    });
}

// ---------------------------------------------------------------------------
// reports

namespace {

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_pct(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
    return buf;
}

}  // namespace

void render_report(const ReportInputs& inputs, const std::string& dir) {
    if (inputs.sequences.empty() && inputs.cross_matrices.empty())
        throw ProtocolError("render_report: nothing to report");
    fs::create_directories(dir);
    const fs::path root(dir);

    // sequence.csv: raw per-step per-task accuracies plus the seen-task mean
    {
        std::ofstream f(root / "sequence.csv", std::ios::trunc);
        f << "method,regime,repeats,step,task,acc_mean,acc_std\n";
        for (const RepeatedResult& r : inputs.sequences) {
            for (std::size_t s = 0; s < r.acc_mean.size(); ++s) {
                for (std::size_t t = 0; t < r.acc_mean[s].size(); ++t)
                    f << method_name(r.method) << "," << regime_name(r.regime) << "," << r.repeats
                      << "," << s << "," << inputs.task_ids[t] << "," << fmt(r.acc_mean[s][t]) << ","
                      << fmt(r.acc_std[s][t]) << "\n";
                f << method_name(r.method) << "," << regime_name(r.regime) << "," << r.repeats << ","
                  << s << ",seen_mean," << fmt(r.seen_mean[s]) << "," << fmt(r.seen_std[s]) << "\n";
            }
        }
    }

    // table2.md: arrow-format seen-task means
    {
        std::ofstream f(root / "table2.md", std::ios::trunc);
        std::string arrows;
        for (std::size_t t = 0; t < inputs.task_ids.size(); ++t) {
            if (t) arrows += " \xe2\x86\x92 ";
            arrows += inputs.task_ids[t];
        }
        if (inputs.unequal_task_sizes)
            f << "note: task sizes are unequal; simple (unweighted) averaging retained\n\n";
        f << "| Method | " << arrows << " |\n";
        f << "|---|---|\n";
        for (const RepeatedResult& r : inputs.sequences) {
            f << "| " << method_name(r.method) << " (" << regime_name(r.regime) << ") | ";
            for (std::size_t s = 0; s < r.seen_mean.size(); ++s) {
                if (s) f << " \xe2\x86\x92 ";
                f << fmt_pct(r.seen_mean[s]);
                if (r.repeats > 1) f << "\xc2\xb1" << fmt_pct(r.seen_std[s]);
            }
            f << " |\n";
        }
    }

    // per_class.csv: per-class means over seen tasks, for a class subset
    {
        std::vector<int> subset = inputs.per_class_subset;
        if (subset.empty()) subset = {0, 1, 2};
        std::ofstream f(root / "per_class.csv", std::ios::trunc);
        f << "method,regime,step,class,acc_mean_over_seen\n";
        for (const RepeatedResult& r : inputs.sequences) {
            for (std::size_t s = 0; s < r.per_class_mean.size(); ++s) {
                for (int cls : subset) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t <= s; ++t)
                        acc += r.per_class_mean[s][t][static_cast<std::size_t>(cls)];
                    acc /= static_cast<double>(s + 1);
                    f << method_name(r.method) << "," << regime_name(r.regime) << "," << s << ","
                      << cls << "," << fmt(acc) << "\n";
                }
            }
        }
    }

    // cross_task.csv
    {
        std::ofstream f(root / "cross_task.csv", std::ios::trunc);
        f << "matrix,stats_or_model";
        for (const std::string& c :
             (inputs.cross_matrices.empty() ? inputs.task_ids
                                            : inputs.cross_matrices.front().second.col_labels))
            f << "," << c;
        f << "\n";
        for (const auto& [label, m] : inputs.cross_matrices) {
            for (std::size_t i = 0; i < m.row_labels.size(); ++i) {
                f << label << "," << m.row_labels[i];
                for (double v : m.acc[i]) f << "," << fmt(v);
                f << "\n";
            }
        }
    }

    // accounting.csv (wall-clock goes to timing.txt to keep this
    // byte-deterministic)
    {
        std::ofstream f(root / "accounting.csv", std::ios::trunc);
        f << "method,regime,stored_bytes,sgd_steps,adapt_batches\n";
        for (const RepeatedResult& r : inputs.sequences)
            f << method_name(r.method) << "," << regime_name(r.regime) << ","
              << r.accounting.stored_bytes << "," << r.accounting.sgd_steps << ","
              << r.accounting.adapt_batches << "\n";
    }
    {
        std::ofstream f(root / "timing.txt", std::ios::trunc);
        for (const RepeatedResult& r : inputs.sequences)
            f << method_name(r.method) << " " << regime_name(r.regime) << " "
              << fmt(r.accounting.wall_seconds) << "s\n";
    }
    {
        std::ofstream f(root / "config_echo.txt", std::ios::trunc);
        f << inputs.config_echo;
    }
}

}  // namespace disc
