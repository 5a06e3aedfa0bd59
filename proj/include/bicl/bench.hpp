#pragma once

// Experiment harness: attention cost accounting, permutation studies, layer /
// shot-count / epoch sweeps, and JSON + CSV report emission.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bicl/model.hpp"
#include "bicl/prompt.hpp"
#include "bicl/tasks.hpp"

namespace bicl::bench {

// ---------------------------------------------------------------------------
// Cost model, in attention token-pair units (query-key interactions).

// One forward over N demos of length 2T plus a query of length T.
std::uint64_t cost_standard(std::uint64_t n, std::uint64_t t);

struct BatchCost {
    std::uint64_t total = 0;    // all N 1-shot forwards plus the zero-shot forward
    std::uint64_t latency = 0;  // one 1-shot forward plus the zero-shot forward
    friend bool operator==(const BatchCost&, const BatchCost&) = default;
};

// Throws std::invalid_argument for n == 0 or t == 0.
BatchCost cost_batch(std::uint64_t n, std::uint64_t t);

// ---------------------------------------------------------------------------
// Permutation study

inline constexpr std::size_t kMaxEnumeratedShots = 6;

struct PermutationResult {
    std::vector<std::size_t> order;  // demo indices in prompt order
    std::size_t correct = 0;
    double accuracy = 0.0;
};

struct PermutationStudy {
    std::size_t n = 0;
    std::size_t layer = 0;
    std::size_t queries = 0;
    std::vector<PermutationResult> permutations;  // lexicographic order, n! entries
    // correct[q][p]: standard prompting under permutation p got query q right.
    std::vector<std::vector<bool>> correct;
    std::vector<bool> batch_correct;
    double best = 0.0, worst = 0.0, average = 0.0;
    double batch_icl_accuracy = 0.0;
    // Share of permutations whose accuracy is strictly below Batch-ICL's.
    double outperformed_fraction = 0.0;
};

// Uses the first n demos of every prompt set. Throws ConfigError when n is 0,
// above kMaxEnumeratedShots, or above a set's demo count.
PermutationStudy permutation_study(const ModelCheckpoint& ckpt, std::span<const PromptSet> dataset, std::size_t n,
                                   std::size_t layer);

// Copy of the prompt set keeping its first n demos.
PromptSet take_demos(const PromptSet& ps, std::size_t n);

// Accuracy helpers over labelled prompt sets.
double standard_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data);
double zero_shot_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data);
double batch_icl_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data, std::size_t layer);
double multi_epoch_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data, std::size_t layer,
                            std::size_t epochs);

// ---------------------------------------------------------------------------
// Experiments

enum class Mode { Baseline, BatchIcl, MultiEpoch, PermutationStudy, KSweep, NSweep, EpochSweep, CostModel };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& s);

struct ExperimentConfig {
    Mode mode = Mode::BatchIcl;
    std::filesystem::path checkpoint;
    std::filesystem::path task;
    std::size_t n = 4;
    std::optional<std::size_t> k;  // empty: select on the validation split
    std::size_t epochs = 1;
    std::vector<std::uint64_t> seeds{0};
    std::filesystem::path out;  // directory for report.json / report.csv
    bool linear_mode = false;   // evaluate the checkpoint's weights with linear attention

    std::size_t test_size = 500;
    std::size_t validation_size = 100;
    std::vector<std::size_t> n_values{1, 2, 3, 4, 8, 16};  // n-sweep
    std::size_t cost_tokens = 1;                           // cost-model T
    std::size_t cost_max_n = 64;                           // cost-model N range [0, cost_max_n]

    // Throws ConfigError naming the offending field.
    void validate() const;
};

struct RunRecord {
    std::string mode;
    std::string variant;  // standard, zero-shot, batch-icl, multi-epoch, cost
    std::uint64_t seed = 0;
    std::size_t n = 0;
    std::optional<std::size_t> k;
    std::size_t epochs = 1;
    std::size_t queries = 0;
    std::optional<double> accuracy;
    std::optional<std::string> note;  // e.g. why a value is missing

    // permutation study
    std::vector<double> permutation_accuracies;
    std::optional<double> best, worst, average, outperformed_fraction;

    // epoch sweep in linear mode: max-abs gap between the epoch-2 aggregate
    // and the mean over ordered demo pairs
    std::optional<double> pair_oracle_gap;

    // cost model
    std::optional<std::uint64_t> tokens, cost_standard, cost_batch_total, cost_batch_latency;

    double wall_seconds = 0.0;  // kept out of report.json
};

struct SummaryRow {
    std::string mode, variant;
    std::size_t n = 0;
    std::optional<std::size_t> k;
    std::size_t epochs = 1;
    std::size_t runs = 0;
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation across seeds, 0 for one run
};

struct ExperimentReport {
    ExperimentConfig config;
    std::optional<TaskSpec> task;
    double chance = 0.0;
    std::vector<RunRecord> records;
    std::vector<SummaryRow> summary;
};

// Loads the checkpoint and task file named in the config.
ExperimentReport run_experiment(const ExperimentConfig& config);

// Same, with the checkpoint and evaluation data supplied directly. `splits`
// maps a seed to its validation and test sets.
struct SeedData {
    std::vector<PromptSet> validation;
    std::vector<PromptSet> test;
};
ExperimentReport run_experiment(const ExperimentConfig& config, const ModelCheckpoint& ckpt,
                                const std::function<SeedData(std::uint64_t seed, std::size_t n)>& splits,
                                double chance);

std::vector<SummaryRow> summarize(std::span<const RunRecord> records);

std::string report_json(const ExperimentReport& report);
std::string report_csv(const ExperimentReport& report);
std::string timing_json(const ExperimentReport& report);

// Writes report.json, report.csv and report.timing.json into dir.
void write_report(const ExperimentReport& report, const std::filesystem::path& dir);

}  // namespace bicl::bench
