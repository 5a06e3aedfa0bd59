// Command-line front end for experiments, toy training and data generation.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bicl/batchicl.hpp"
#include "bicl/bench.hpp"
#include "bicl/errors.hpp"
#include "bicl/model.hpp"
#include "bicl/tasks.hpp"
#include "bicl/train.hpp"

namespace {

using nlohmann::json;

struct ExperimentArgs {
    std::string ckpt, task, out = ".", k = "auto";
    std::size_t n = 4, epochs = 1, test_size = 500, validation_size = 100, tokens = 1, max_n = 64;
    std::vector<std::uint64_t> seeds{0};
    std::vector<std::size_t> n_values{1, 2, 3, 4, 8, 16};
    bool linear_mode = false;
};

std::optional<std::size_t> parse_k(const std::string& k) {
    if (k == "auto") return std::nullopt;
    std::size_t used = 0;
    unsigned long v = 0;
    try {
        v = std::stoul(k, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != k.size() || k.empty()) throw bicl::ConfigError("--k must be a layer index or 'auto', got '" + k + "'");
    return static_cast<std::size_t>(v);
}

bicl::bench::ExperimentConfig to_config(bicl::bench::Mode mode, const ExperimentArgs& a) {
    bicl::bench::ExperimentConfig c;
    c.mode = mode;
    c.checkpoint = a.ckpt;
    c.task = a.task;
    c.n = a.n;
    c.k = parse_k(a.k);
    c.epochs = a.epochs;
    c.seeds = a.seeds;
    c.out = a.out;
    c.linear_mode = a.linear_mode;
    c.test_size = a.test_size;
    c.validation_size = a.validation_size;
    c.n_values = a.n_values;
    c.cost_tokens = a.tokens;
    c.cost_max_n = a.max_n;
    return c;
}

void add_experiment_flags(CLI::App* cmd, ExperimentArgs& a, bicl::bench::Mode mode) {
    using bicl::bench::Mode;
    if (mode == Mode::CostModel) {
        cmd->add_option("--tokens", a.tokens, "tokens per demonstration (T)");
        cmd->add_option("--max-n", a.max_n, "largest N in the table");
    } else {
        cmd->add_option("--ckpt", a.ckpt, "checkpoint file")->required();
        cmd->add_option("--task", a.task, "dataset file (header-only files regenerate data per seed)")->required();
        cmd->add_option("--n", a.n, "demonstrations per prompt");
        cmd->add_option("--k", a.k, "injection layer or 'auto'");
        cmd->add_option("--epochs", a.epochs, "aggregation rounds");
        cmd->add_option("--seeds", a.seeds, "evaluation seeds")->delimiter(',');
        cmd->add_flag("--linear-mode", a.linear_mode, "evaluate with linear attention");
        cmd->add_option("--test-size", a.test_size);
        cmd->add_option("--validation-size", a.validation_size);
        if (mode == Mode::NSweep) cmd->add_option("--n-values", a.n_values)->delimiter(',');
    }
    cmd->add_option("--out", a.out, "output directory for report.json and report.csv");
}

void print_summary(const bicl::bench::ExperimentReport& r) {
    for (const auto& row : r.summary) {
        std::printf("%-12s %-11s n=%-3zu k=%-4s e=%-2zu runs=%zu mean=%.4f sd=%.4f\n", row.mode.c_str(),
                    row.variant.c_str(), row.n, row.k ? std::to_string(*row.k).c_str() : "-", row.epochs, row.runs,
                    row.mean, row.stddev);
    }
}

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const bicl::ConfigError*>(&e)) return "config";
    if (dynamic_cast<const bicl::LoadError*>(&e)) return "load";
    if (dynamic_cast<const bicl::IoError*>(&e)) return "io";
    if (dynamic_cast<const bicl::HookError*>(&e)) return "hook";
    if (dynamic_cast<const bicl::DimensionError*>(&e)) return "dimension";
    if (dynamic_cast<const bicl::TrainingError*>(&e)) return "training";
    if (dynamic_cast<const bicl::ContextOverflowError*>(&e)) return "context-overflow";
    if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid-argument";
    return "runtime";
}

int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    using bicl::bench::Mode;
    CLI::App app{"Batch-ICL experiments on toy decoder checkpoints"};
    app.require_subcommand(1);

    const std::vector<std::pair<std::string, Mode>> modes{
        {"baseline", Mode::Baseline},   {"batch-icl", Mode::BatchIcl},      {"multi-epoch", Mode::MultiEpoch},
        {"perm-study", Mode::PermutationStudy}, {"sweep-k", Mode::KSweep}, {"sweep-n", Mode::NSweep},
        {"sweep-epochs", Mode::EpochSweep}, {"cost-model", Mode::CostModel}};
    ExperimentArgs exp;
    std::optional<Mode> chosen;
    for (const auto& [name, mode] : modes) {
        CLI::App* cmd = app.add_subcommand(name, "run the " + bicl::bench::to_string(mode) + " experiment");
        add_experiment_flags(cmd, exp, mode);
        cmd->callback([&chosen, m = mode] { chosen = m; });
    }

    std::string train_out = "toy.bicl", train_task;
    std::size_t train_steps = 0;
    std::uint64_t train_seed = 0;
    bool train_seed_set = false;
    CLI::App* train = app.add_subcommand("train-toy", "train the reference toy checkpoint");
    train->add_option("--out", train_out, "checkpoint path to write");
    train->add_option("--steps", train_steps, "override the reference step count");
    train->add_option("--seed", train_seed, "override the reference seed")->each([&](const std::string&) {
        train_seed_set = true;
    });
    train->add_option("--task", train_task, "also write a header-only dataset file for the reference task");

    std::string sel_ckpt, sel_task;
    std::size_t sel_n = 4, sel_size = 100;
    std::uint64_t sel_seed = 0;
    CLI::App* select = app.add_subcommand("select-k", "choose the injection layer on a validation split");
    select->add_option("--ckpt", sel_ckpt)->required();
    select->add_option("--task", sel_task)->required();
    select->add_option("--n", sel_n);
    select->add_option("--validation-size", sel_size);
    select->add_option("--seed", sel_seed);

    std::string gen_out;
    std::size_t gen_val = 100, gen_test = 500, gen_n = 4;
    std::uint64_t gen_seed = 0;
    bool gen_header_only = false;
    CLI::App* gen = app.add_subcommand("gen-data", "write a dataset file for the reference task");
    gen->add_option("--out", gen_out)->required();
    gen->add_option("--n", gen_n, "demonstrations per prompt set");
    gen->add_option("--validation-size", gen_val);
    gen->add_option("--test-size", gen_test);
    gen->add_option("--seed", gen_seed);
    gen->add_flag("--header-only", gen_header_only, "write only the task header");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        if (chosen) {
            const auto config = to_config(*chosen, exp);
            const auto report = bicl::bench::run_experiment(config);
            bicl::bench::write_report(report, config.out);
            print_summary(report);
            if (*chosen == Mode::CostModel) {
                for (const auto& r : report.records)
                    std::printf("N=%-3zu standard=%llu batch_total=%llu batch_latency=%llu\n", r.n,
                                static_cast<unsigned long long>(r.cost_standard.value_or(0)),
                                static_cast<unsigned long long>(r.cost_batch_total.value_or(0)),
                                static_cast<unsigned long long>(r.cost_batch_latency.value_or(0)));
            }
            return 0;
        }
        if (train->parsed()) {
            const bicl::TaskSpec spec = bicl::reference_task_spec();
            bicl::TrainConfig cfg = bicl::reference_train_config();
            if (train_steps) cfg.steps = train_steps;
            if (train_seed_set) cfg.seed = train_seed;
            double acc = 0.0;
            const auto result = bicl::train_toy_model(cfg, spec, [&](const bicl::TrainProgress& p) {
                acc += p.loss;
                if ((p.step + 1) % 500 == 0) {
                    std::printf("step %zu loss %.4f\n", p.step + 1, acc / 500.0);
                    std::fflush(stdout);
                    acc = 0.0;
                }
            });
            bicl::save_checkpoint(result.checkpoint, train_out);
            if (!train_task.empty()) bicl::write_dataset(train_task, spec, {});
            std::printf("gate accuracy %.3f, wrote %s\n", result.gate_accuracy, train_out.c_str());
            return 0;
        }
        if (select->parsed()) {
            const auto ckpt = bicl::load_checkpoint(sel_ckpt);
            const auto file = bicl::read_dataset(sel_task, ckpt.tokenizer);
            std::vector<bicl::PromptSet> val = file.splits.validation;
            if (val.empty()) {
                bicl::TaskSpec spec = file.spec;
                spec.n_demos = std::max(spec.n_demos, sel_n);
                val = bicl::generate_splits(spec, ckpt.tokenizer, sel_seed, 0, sel_size, 0).validation;
            }
            for (auto& ps : val) ps = bicl::bench::take_demos(ps, sel_n);
            const auto layers = bicl::batchicl::all_layers(ckpt);
            const auto sweep = bicl::batchicl::sweep_layers(ckpt, val, layers);
            std::cout << json{{"k", sweep.best_layer}, {"layers", sweep.layers}, {"accuracies", sweep.accuracies}}.dump()
                      << "\n";
            return 0;
        }
        if (gen->parsed()) {
            bicl::TaskSpec spec = bicl::reference_task_spec();
            spec.n_demos = gen_n;
            bicl::DatasetSplits splits;
            if (!gen_header_only)
                splits = bicl::generate_splits(spec, bicl::toy_tokenizer(spec), gen_seed, 0, gen_val, gen_test);
            bicl::write_dataset(gen_out, spec, splits);
            return 0;
        }
    } catch (const std::exception& e) {
        return fail(error_kind(e), e.what(), 1);
    }
    return 0;
}
