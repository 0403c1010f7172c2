// Command-line driver: dataset generation, training, statistics adaptation,
// plug-and-play probing, sequence experiments and reports.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "disc/domain_forge.hpp"
#include "disc/dua.hpp"
#include "disc/harness.hpp"
#include "disc/model_io.hpp"
#include "disc/stats_bank.hpp"
#include "disc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::uint64_t seed = 0;
};

void add_seed_option(CLI::App* cmd, std::uint64_t& seed) {
    cmd->add_option("--seed", seed, "global seed")->envname("DISC_SEED");
}

std::map<std::string, float> parse_severities(const std::vector<std::string>& items) {
    std::map<std::string, float> out = {{"fog", 0.8f}, {"rain", 0.8f}, {"snow", 0.8f}};
    for (const std::string& s : items) {
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw disc::ConfigError("severity override must look like fog=0.8, got '" + s + "'");
        const std::string kind = s.substr(0, eq);
        if (!out.count(kind) && kind != "clear")
            throw disc::ConfigError("unknown corruption kind '" + kind + "'");
        const float v = std::stof(s.substr(eq + 1));
        if (kind != "clear") out[kind] = v;
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw disc::DataError("cannot open for writing: " + path.string());
    f << text;
}

void save_model_with_meta(const disc::Model& m, const disc::TrainLog& log, const std::string& path) {
    disc::save_model(m, path);
    std::ostringstream meta;
    meta << "terminal_lr = " << log.terminal_lr << "\n"
         << "best_val_acc = " << log.best_val_acc << "\n"
         << "stop_reason = " << log.stop_reason << "\n"
         << "epochs = " << log.epochs.size() << "\n";
    write_text(path + ".meta.txt", meta.str());
}

double load_terminal_lr(const std::string& ckpt_path, const disc::TrainConfig& tc) {
    const fs::path meta = ckpt_path + ".meta.txt";
    if (fs::exists(meta)) {
        std::ifstream f(meta);
        std::string line;
        while (std::getline(f, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            if (line.substr(0, eq).find("terminal_lr") != std::string::npos)
                return std::stod(line.substr(eq + 1));
        }
    }
    // nominal terminal lr after the full drop schedule
    double lr = tc.lr0;
    for (int i = 0; i < tc.max_lr_drops; ++i) lr /= tc.lr_factor;
    std::fprintf(stderr, "note: no %s, assuming terminal lr %.6g\n",
                 (ckpt_path + ".meta.txt").c_str(), lr);
    return lr;
}

void add_train_options(CLI::App* cmd, disc::TrainConfig& tc) {
    cmd->add_option("--lr0", tc.lr0, "initial learning rate");
    cmd->add_option("--batch-size", tc.batch_size, "training batch size");
    cmd->add_option("--patience", tc.patience, "epochs without improvement before an lr drop");
    cmd->add_option("--lr-factor", tc.lr_factor, "lr division factor per drop");
    cmd->add_option("--max-drops", tc.max_lr_drops, "lr drops before stopping");
    cmd->add_option("--max-epochs", tc.max_epochs, "epoch safety cap");
}

void add_adapt_options(CLI::App* cmd, disc::AdaptConfig& ac) {
    cmd->add_option("--rho0", ac.rho0, "initial adaptation momentum");
    cmd->add_option("--omega", ac.omega, "momentum decay factor");
    cmd->add_option("--zeta", ac.zeta, "momentum floor term");
    cmd->add_option("--adapt-batch-size", ac.batch_size, "adaptation batch size");
    cmd->add_option("--max-batches", ac.max_batches, "adaptation batch cap");
    cmd->add_option("--tol", ac.tol, "convergence tolerance");
    cmd->add_option("--window", ac.window, "consecutive converged batches required");
}

std::string echo_kv(const std::map<std::string, std::string>& kv) {
    std::ostringstream out;
    for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
    return out.str();
}

std::string fmt_g(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, std::uint64_t seed, int classes, int image_size,
                 int train_count, int val_count, int test_count,
                 const std::vector<std::string>& severities, bool force, int export_png) {
    disc::DatasetSpec spec;
    spec.n_classes = classes;
    spec.height = spec.width = image_size;
    spec.train_count = train_count;
    spec.val_count = val_count;
    spec.test_count = test_count;
    spec.seed = seed;
    spec.validate();

    const auto sv = parse_severities(severities);
    std::vector<disc::DomainSpec> domains = {
        {disc::Weather::clear, 0.0f, seed},
        {disc::Weather::fog, sv.at("fog"), seed},
        {disc::Weather::rain, sv.at("rain"), seed},
        {disc::Weather::snow, sv.at("snow"), seed},
    };

    disc::Dataset base = disc::gen_base(spec);
    disc::TaskSequence seq = disc::make_sequence(base, domains);
    disc::save_sequence(seq, spec, out_dir, force);

    // 64-image probe: 16 test images from each task
    {
        disc::Split probe;
        const int per_task = 16;
        const auto& t0 = seq.tasks[0].test.images;
        probe.images = disc::Tensor(
            {static_cast<int>(seq.tasks.size()) * per_task, t0.dim(1), t0.dim(2), t0.dim(3)});
        const std::size_t img = static_cast<std::size_t>(t0.dim(1)) * t0.dim(2) * t0.dim(3);
        std::size_t off = 0;
        for (const disc::Task& t : seq.tasks) {
            for (int i = 0; i < per_task; ++i) {
                std::copy_n(t.test.images.data.data() + static_cast<std::size_t>(i) * img, img,
                            probe.images.data.data() + off);
                off += img;
                probe.labels.push_back(t.test.labels[static_cast<std::size_t>(i)]);
            }
        }
        disc::save_split(probe, (fs::path(out_dir) / "probe.bin").string());
    }

    if (export_png > 0) {
        const fs::path png_dir = fs::path(out_dir) / "png";
        fs::create_directories(png_dir);
        for (const disc::Task& t : seq.tasks)
            for (int i = 0; i < std::min(export_png, t.test.count()); ++i)
                disc::write_png_rgb(
                    disc::image_at(t.test.images, i),
                    (png_dir / (t.task_id + "_" + std::to_string(i) + ".png")).string());
    }

    std::cout << "dataset written to " << out_dir << "\n";
    for (const disc::Task& t : seq.tasks)
        std::cout << "  " << t.task_id << ": severity " << t.domain.severity << ", train "
                  << t.train.count() << ", val " << t.val.count() << ", test " << t.test.count()
                  << "\n";
    std::cout << "  probe.bin: " << 16 * seq.tasks.size() << " images\n";
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& task, const std::string& regime_name_,
              const std::string& out_path, const std::string& init_path,
              const std::string& log_path, disc::TrainConfig tc, std::uint64_t seed) {
    tc.seed = seed;
    tc.regime = disc::regime_from_name(regime_name_);
    disc::TaskSequence seq = disc::load_sequence(data_dir);
    const disc::Task& t = seq.at(task);

    disc::Model model = [&] {
        if (!init_path.empty()) return disc::load_model(init_path);
        disc::ModelConfig mc;
        mc.in_channels = t.train.images.dim(1);
        mc.in_height = t.train.images.dim(2);
        mc.in_width = t.train.images.dim(3);
        mc.n_classes = seq.n_classes;
        mc.seed = seed;
        return disc::build_model<float>(mc);
    }();

    disc::TrainLog log;
    disc::Model trained = model;
    if (tc.regime == disc::Regime::offline) {
        std::tie(trained, log) = disc::train_offline(model, t.train, t.val, tc);
    } else {
        std::tie(trained, log) = disc::train_online(model, t.train, tc);
    }
    save_model_with_meta(trained, log, out_path);
    if (!log_path.empty()) disc::write_train_log_csv(log, log_path);

    const double test_acc = disc::evaluate(trained, t.test).accuracy;
    std::cout << "trained on " << task << " (" << regime_name_ << "): epochs " << log.epochs.size()
              << ", best val acc " << fmt_g(log.best_val_acc) << ", terminal lr "
              << fmt_g(log.terminal_lr) << ", test acc " << fmt_g(test_acc) << "\n";
    std::cout << "checkpoint: " << out_path << "\n";
    return 0;
}

int cmd_adapt(const std::string& data_dir, const std::string& task, const std::string& model_path,
              const std::string& bank_path, const std::string& trace_path, disc::AdaptConfig ac,
              std::uint64_t seed) {
    ac.validate();
    disc::TaskSequence seq = disc::load_sequence(data_dir);
    const disc::Task& t = seq.at(task);
    disc::Model model = disc::load_model(model_path);

    disc::StatsBank bank;
    if (fs::exists(bank_path)) {
        bank = disc::load_bank(bank_path);
        if (bank.fingerprint() != model.param_fingerprint())
            throw disc::WrongModelError("bank '" + bank_path + "' belongs to a different model");
    } else {
        // a fresh bank starts with the model's own (initial-task) statistics
        bank.add(disc::capture(model, seq.tasks[0].task_id, {0, "train"}));
    }
    if (bank.find(task)) throw disc::DataError("bank already holds a snapshot for '" + task + "'");

    // adaptation starts from the initial-task statistics
    disc::plug(model, bank.at(seq.tasks[0].task_id));
    disc::BatchStream stream = disc::make_batch_stream(
        t.train.images, ac.batch_size, ac.max_batches,
        disc::mix_seed(seed, 0xd15c0000ull + static_cast<std::uint64_t>(seq.index_of(task))));
    auto [snap, report] = disc::adapt(model, stream, ac, task);
    bank.add(std::move(snap));
    disc::save_bank(bank, bank_path);
    if (!trace_path.empty()) disc::write_adapt_trace_csv(report, trace_path);

    std::cout << "adapted to " << task << ": " << report.batches_used << " batches, "
              << (report.converged ? "converged" : "hit max batches") << "\n";
    std::cout << "bank: " << bank_path << " (" << bank.size() << " snapshots)\n";
    return 0;
}

int cmd_plug(const std::string& model_path, const std::string& bank_path, const std::string& task,
             const std::string& probe_path) {
    disc::Model model = disc::load_model(model_path);
    disc::StatsBank bank = disc::load_bank(bank_path);
    disc::plug(model, bank.at(task));
    std::cout << "plugged statistics for '" << task << "'\n";
    if (!probe_path.empty()) {
        disc::Split probe = disc::load_split(probe_path);
        disc::Tensor logits = disc::forward_eval(model, probe.images);
        const int k = logits.dim(1);
        for (int i = 0; i < logits.dim(0); ++i) {
            std::cout << "probe " << i << ":";
            for (int c = 0; c < k; ++c) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), " %.8e",
                              static_cast<double>(logits.data[static_cast<std::size_t>(i) * k + c]));
                std::cout << buf;
            }
            std::cout << "\n";
        }
    }
    return 0;
}

json repeated_to_json(const disc::RepeatedResult& r) {
    json j;
    j["method"] = disc::method_name(r.method);
    j["regime"] = disc::regime_name(r.regime);
    j["repeats"] = r.repeats;
    j["acc_mean"] = r.acc_mean;
    j["acc_std"] = r.acc_std;
    j["seen_mean"] = r.seen_mean;
    j["seen_std"] = r.seen_std;
    j["per_class_mean"] = r.per_class_mean;
    j["accounting"] = {{"stored_bytes", r.accounting.stored_bytes},
                       {"sgd_steps", r.accounting.sgd_steps},
                       {"adapt_batches", r.accounting.adapt_batches}};
    return j;
}

disc::RepeatedResult repeated_from_json(const json& j) {
    disc::RepeatedResult r;
    r.method = disc::method_from_name(j.at("method"));
    r.regime = disc::regime_from_name(j.at("regime"));
    r.repeats = j.at("repeats");
    r.acc_mean = j.at("acc_mean").get<std::vector<std::vector<double>>>();
    r.acc_std = j.at("acc_std").get<std::vector<std::vector<double>>>();
    r.seen_mean = j.at("seen_mean").get<std::vector<double>>();
    r.seen_std = j.at("seen_std").get<std::vector<double>>();
    r.per_class_mean = j.at("per_class_mean").get<std::vector<std::vector<std::vector<double>>>>();
    r.accounting.stored_bytes = j.at("accounting").at("stored_bytes");
    r.accounting.sgd_steps = j.at("accounting").at("sgd_steps");
    r.accounting.adapt_batches = j.at("accounting").at("adapt_batches");
    return r;
}

json cross_to_json(const std::string& label, const disc::CrossTaskMatrix& m) {
    return json{{"label", label},
                {"row_labels", m.row_labels},
                {"col_labels", m.col_labels},
                {"acc", m.acc}};
}

void write_results_json(const disc::ReportInputs& inputs, const fs::path& path) {
    json j;
    j["task_ids"] = inputs.task_ids;
    j["config_echo"] = inputs.config_echo;
    j["unequal_task_sizes"] = inputs.unequal_task_sizes;
    j["per_class_subset"] = inputs.per_class_subset;
    j["sequences"] = json::array();
    for (const auto& r : inputs.sequences) j["sequences"].push_back(repeated_to_json(r));
    j["cross"] = json::array();
    for (const auto& [label, m] : inputs.cross_matrices) j["cross"].push_back(cross_to_json(label, m));
    write_text(path, j.dump(2) + "\n");
}

disc::InitialModel obtain_initial(const disc::TaskSequence& seq, const std::string& init_path,
                                  const disc::HarnessConfig& cfg, const fs::path& save_dir) {
    if (!init_path.empty()) {
        disc::Model m = disc::load_model(init_path);
        return {std::move(m), load_terminal_lr(init_path, cfg.train)};
    }
    std::cout << "training initial model on " << seq.tasks[0].task_id << "...\n";
    disc::InitialModel init = disc::prepare_initial(seq, cfg);
    fs::create_directories(save_dir);
    disc::TrainLog stub;
    stub.terminal_lr = init.terminal_lr;
    save_model_with_meta(init.model, stub, (save_dir / "task0.ckpt").string());
    std::cout << "initial model saved to " << (save_dir / "task0.ckpt").string() << "\n";
    return init;
}

bool splits_unequal(const disc::TaskSequence& seq) {
    for (const disc::Task& t : seq.tasks)
        if (t.train.count() != seq.tasks[0].train.count() ||
            t.test.count() != seq.tasks[0].test.count())
            return true;
    return false;
}

int cmd_sequence(const std::string& data_dir, const std::string& methods_csv,
                 const std::string& regime_str, const std::string& init_path,
                 const std::string& report_dir, const std::string& run_id, int repeats, int jobs,
                 disc::HarnessConfig cfg) {
    disc::TaskSequence seq = disc::load_sequence(data_dir);
    const disc::Regime regime = disc::regime_from_name(regime_str);
    const std::vector<disc::Method> methods = disc::parse_method_list(methods_csv);

    std::map<std::string, std::string> echo = {
        {"command", "sequence"},
        {"data", data_dir},
        {"methods", methods_csv},
        {"regime", regime_str},
        {"seed", std::to_string(cfg.seed)},
        {"repeats", std::to_string(repeats)},
        {"jobs", std::to_string(jobs)},
        {"lr0", fmt_g(cfg.train.lr0)},
        {"batch_size", std::to_string(cfg.train.batch_size)},
        {"patience", std::to_string(cfg.train.patience)},
        {"lr_factor", fmt_g(cfg.train.lr_factor)},
        {"max_lr_drops", std::to_string(cfg.train.max_lr_drops)},
        {"max_epochs", std::to_string(cfg.train.max_epochs)},
        {"rho0", fmt_g(cfg.adapt.rho0)},
        {"omega", fmt_g(cfg.adapt.omega)},
        {"zeta", fmt_g(cfg.adapt.zeta)},
        {"adapt_batch_size", std::to_string(cfg.adapt.batch_size)},
        {"max_batches", std::to_string(cfg.adapt.max_batches)},
        {"tol", fmt_g(cfg.adapt.tol)},
        {"window", std::to_string(cfg.adapt.window)},
        {"init", init_path.empty() ? "(trained in-run)" : init_path},
    };

    const fs::path run_dir = fs::path(report_dir) / (run_id.empty() ? "run" : run_id);
    fs::create_directories(run_dir);
    disc::InitialModel init = obtain_initial(seq, init_path, cfg, run_dir);

    disc::ReportInputs inputs;
    for (const disc::Task& t : seq.tasks) inputs.task_ids.push_back(t.task_id);
    inputs.config_echo = echo_kv(echo);
    inputs.unequal_task_sizes = splits_unequal(seq);

    for (disc::Method m : methods) {
        std::cout << "running " << disc::method_name(m) << " (" << regime_str << ", " << repeats
                  << " repeat" << (repeats == 1 ? "" : "s") << ")...\n";
        inputs.sequences.push_back(disc::run_repeated(m, regime, seq, init, cfg, repeats, jobs));
        const auto& r = inputs.sequences.back();
        std::cout << "  seen-task mean:";
        for (double v : r.seen_mean) std::cout << " " << fmt_g(v);
        std::cout << "\n";
    }

    disc::render_report(inputs, run_dir.string());
    write_results_json(inputs, run_dir / "results.json");
    std::cout << "report written to " << run_dir.string() << "\n";
    return 0;
}

int cmd_cross_eval(const std::string& data_dir, const std::string& init_path,
                   const std::string& bank_path, const std::string& report_dir,
                   const std::string& run_id, disc::HarnessConfig cfg) {
    disc::TaskSequence seq = disc::load_sequence(data_dir);
    const fs::path run_dir = fs::path(report_dir) / (run_id.empty() ? "cross" : run_id);
    fs::create_directories(run_dir);
    disc::InitialModel init = obtain_initial(seq, init_path, cfg, run_dir);

    // DISC statistics: from the bank when given, otherwise adapt in-run
    disc::StatsBank bank;
    if (!bank_path.empty()) {
        bank = disc::load_bank(bank_path);
    } else {
        std::cout << "adapting statistics per task...\n";
        disc::SequenceResult r =
            disc::run_sequence(disc::Method::disc, disc::Regime::online, seq, init, cfg);
        bank = std::move(r.bank);
    }
    disc::CrossTaskMatrix mdisc = disc::cross_task_disc(init, bank, seq, cfg);

    std::cout << "training disjoint models...\n";
    disc::SequenceResult dj =
        disc::run_sequence(disc::Method::disjoint, disc::Regime::offline, seq, init, cfg);
    disc::CrossTaskMatrix mdisjoint = disc::cross_task_disjoint(init, dj.task_models, seq, cfg);

    disc::ReportInputs inputs;
    for (const disc::Task& t : seq.tasks) inputs.task_ids.push_back(t.task_id);
    inputs.config_echo = echo_kv({{"command", "cross-eval"},
                                  {"data", data_dir},
                                  {"seed", std::to_string(cfg.seed)},
                                  {"init", init_path.empty() ? "(trained in-run)" : init_path},
                                  {"bank", bank_path.empty() ? "(adapted in-run)" : bank_path}});
    inputs.cross_matrices = {{"disc", mdisc}, {"disjoint", mdisjoint}};
    disc::render_report(inputs, run_dir.string());
    write_results_json(inputs, run_dir / "results.json");

    auto print_matrix = [&](const std::string& label, const disc::CrossTaskMatrix& m) {
        std::cout << label << " cross-task accuracy:\n";
        std::cout << "  " << std::string(14, ' ');
        for (const auto& c : m.col_labels) std::printf("%8s", c.c_str());
        std::cout << "\n";
        for (std::size_t i = 0; i < m.row_labels.size(); ++i) {
            std::printf("  %-14s", m.row_labels[i].c_str());
            for (double v : m.acc[i]) std::printf("%8.3f", v);
            std::cout << "\n";
        }
    };
    print_matrix("disc", mdisc);
    print_matrix("disjoint", mdisjoint);
    std::cout << "report written to " << run_dir.string() << "\n";
    return 0;
}

int cmd_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    std::ifstream f(dir / "results.json");
    if (!f) throw disc::DataError("no results.json under " + run_dir);
    json j = json::parse(f);

    disc::ReportInputs inputs;
    inputs.task_ids = j.at("task_ids").get<std::vector<std::string>>();
    inputs.config_echo = j.at("config_echo");
    inputs.unequal_task_sizes = j.at("unequal_task_sizes");
    inputs.per_class_subset = j.at("per_class_subset").get<std::vector<int>>();
    for (const json& s : j.at("sequences")) inputs.sequences.push_back(repeated_from_json(s));
    for (const json& c : j.at("cross")) {
        disc::CrossTaskMatrix m;
        m.row_labels = c.at("row_labels").get<std::vector<std::string>>();
        m.col_labels = c.at("col_labels").get<std::vector<std::string>>();
        m.acc = c.at("acc").get<std::vector<std::vector<double>>>();
        inputs.cross_matrices.emplace_back(c.at("label"), std::move(m));
    }
    disc::render_report(inputs, run_dir);
    std::cout << "report re-rendered under " << run_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"domain-incremental learning with pluggable normalization statistics"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key = value config file; explicit flags win");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the 4-task dataset");
    std::string gen_out;
    std::uint64_t gen_seed = 0;
    int gen_classes = 8, gen_size = 32, gen_train = 4000, gen_val = 400, gen_test = 2000;
    int gen_png = 0;
    bool gen_force = false;
    std::vector<std::string> gen_severity;
    gen->add_option("--out", gen_out, "output directory")->required();
    add_seed_option(gen, gen_seed);
    gen->add_option("--classes", gen_classes, "number of classes (2-8)");
    gen->add_option("--image-size", gen_size, "square image size");
    gen->add_option("--train-count", gen_train, "train split size");
    gen->add_option("--val-count", gen_val, "val split size");
    gen->add_option("--test-count", gen_test, "test split size");
    gen->add_option("--severity", gen_severity, "per-kind severity override, e.g. fog=0.8")
        ->take_all();
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");
    gen->add_option("--export-png", gen_png, "also write N PNGs per task");

    // train
    auto* train = app.add_subcommand("train", "supervised training on one task");
    std::string tr_data, tr_task = "clear", tr_regime = "offline", tr_out, tr_init, tr_log;
    std::uint64_t tr_seed = 0;
    disc::TrainConfig tr_cfg;
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--task", tr_task, "task id");
    train->add_option("--regime", tr_regime, "offline|online");
    train->add_option("--out", tr_out, "checkpoint output path")->required();
    train->add_option("--init", tr_init, "start from this checkpoint");
    train->add_option("--log", tr_log, "write the epoch log CSV here");
    add_seed_option(train, tr_seed);
    add_train_options(train, tr_cfg);

    // adapt
    auto* adapt_cmd = app.add_subcommand("adapt", "statistics adaptation on one task");
    std::string ad_data, ad_task, ad_model, ad_bank, ad_trace;
    std::uint64_t ad_seed = 0;
    disc::AdaptConfig ad_cfg;
    adapt_cmd->add_option("--data", ad_data, "dataset directory")->required();
    adapt_cmd->add_option("--task", ad_task, "task id")->required();
    adapt_cmd->add_option("--model", ad_model, "frozen model checkpoint")->required();
    adapt_cmd->add_option("--bank", ad_bank, "statistics bank path (created if absent)")->required();
    adapt_cmd->add_option("--trace", ad_trace, "write the adaptation trace CSV here");
    add_seed_option(adapt_cmd, ad_seed);
    add_adapt_options(adapt_cmd, ad_cfg);

    // plug
    auto* plug_cmd = app.add_subcommand("plug", "plug task statistics and print probe logits");
    std::string pl_model, pl_bank, pl_task, pl_probe;
    plug_cmd->add_option("--model", pl_model, "frozen model checkpoint")->required();
    plug_cmd->add_option("--bank", pl_bank, "statistics bank")->required();
    plug_cmd->add_option("--task", pl_task, "task id")->required();
    plug_cmd->add_option("--probe", pl_probe, "probe split file; logits are printed");

    // sequence
    auto* seq_cmd = app.add_subcommand("sequence", "run methods through the task sequence");
    std::string sq_data, sq_methods = "source-only,freezing,disjoint,fine-tuning,joint-training,disc";
    std::string sq_regime = "online", sq_init, sq_report = "reports", sq_run_id;
    int sq_repeats = 5, sq_jobs = 1;
    disc::HarnessConfig sq_cfg;
    seq_cmd->add_option("--data", sq_data, "dataset directory")->required();
    seq_cmd->add_option("--methods", sq_methods, "comma-separated method list");
    seq_cmd->add_option("--regime", sq_regime, "offline|online");
    seq_cmd->add_option("--init", sq_init, "task-0 checkpoint (trained in-run when omitted)");
    seq_cmd->add_option("--report", sq_report, "report root directory");
    seq_cmd->add_option("--run-id", sq_run_id, "report subdirectory name");
    seq_cmd->add_option("--repeats", sq_repeats, "seeded repeats per method");
    seq_cmd->add_option("--jobs", sq_jobs, "parallel repeat workers");
    add_seed_option(seq_cmd, sq_cfg.seed);
    add_train_options(seq_cmd, sq_cfg.train);
    add_adapt_options(seq_cmd, sq_cfg.adapt);

    // cross-eval
    auto* cross_cmd = app.add_subcommand("cross-eval", "cross-task statistics/model matrix");
    std::string cr_data, cr_init, cr_bank, cr_report = "reports", cr_run_id;
    disc::HarnessConfig cr_cfg;
    cross_cmd->add_option("--data", cr_data, "dataset directory")->required();
    cross_cmd->add_option("--init", cr_init, "task-0 checkpoint (trained in-run when omitted)");
    cross_cmd->add_option("--bank", cr_bank, "statistics bank (adapted in-run when omitted)");
    cross_cmd->add_option("--report", cr_report, "report root directory");
    cross_cmd->add_option("--run-id", cr_run_id, "report subdirectory name");
    add_seed_option(cross_cmd, cr_cfg.seed);
    add_train_options(cross_cmd, cr_cfg.train);
    add_adapt_options(cross_cmd, cr_cfg.adapt);

    // report
    auto* rep_cmd = app.add_subcommand("report", "re-render report files from results.json");
    std::string rp_dir;
    rep_cmd->add_option("--run-dir", rp_dir, "run directory holding results.json")->required();

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_seed, gen_classes, gen_size, gen_train, gen_val,
                                gen_test, gen_severity, gen_force, gen_png);
        if (train->parsed())
            return cmd_train(tr_data, tr_task, tr_regime, tr_out, tr_init, tr_log, tr_cfg, tr_seed);
        if (adapt_cmd->parsed())
            return cmd_adapt(ad_data, ad_task, ad_model, ad_bank, ad_trace, ad_cfg, ad_seed);
        if (plug_cmd->parsed()) return cmd_plug(pl_model, pl_bank, pl_task, pl_probe);
        if (seq_cmd->parsed()) {
            sq_cfg.train.seed = sq_cfg.seed;
            return cmd_sequence(sq_data, sq_methods, sq_regime, sq_init, sq_report, sq_run_id,
                                sq_repeats, sq_jobs, sq_cfg);
        }
        if (cross_cmd->parsed()) {
            cr_cfg.train.seed = cr_cfg.seed;
            return cmd_cross_eval(cr_data, cr_init, cr_bank, cr_report, cr_run_id, cr_cfg);
        }
        if (rep_cmd->parsed()) return cmd_report(rp_dir);
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const disc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
