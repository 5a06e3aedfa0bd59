#include "bicl/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "json.hpp"

#include "bicl/batchicl.hpp"
#include "bicl/errors.hpp"

namespace bicl::bench {

using nlohmann::json;

namespace {

constexpr std::uint64_t kMaxCostInput = 1ull << 20;

bool hit(const Prediction& p, const PromptSet& ps) { return p.label_index == ps.gold_index(); }

double fraction(std::size_t correct, std::size_t total) {
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

template <class F>
double accuracy_of(std::span<const PromptSet> data, F&& predict) {
    std::size_t correct = 0;
    for (const PromptSet& ps : data)
        if (hit(predict(ps), ps)) ++correct;
    return fraction(correct, data.size());
}

std::vector<PromptSet> take_all(std::span<const PromptSet> data, std::size_t n) {
    std::vector<PromptSet> out;
    out.reserve(data.size());
    for (const PromptSet& ps : data) out.push_back(take_demos(ps, n));
    return out;
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace

// ---------------------------------------------------------------------------

std::uint64_t cost_standard(std::uint64_t n, std::uint64_t t) {
    if (t == 0) throw std::invalid_argument("cost_standard: T must be at least 1");
    if (n > kMaxCostInput || t > kMaxCostInput) throw std::invalid_argument("cost_standard: arguments too large");
    const std::uint64_t len = (2 * n + 1) * t;
    return len * len;
}

BatchCost cost_batch(std::uint64_t n, std::uint64_t t) {
    if (n == 0) throw std::invalid_argument("cost_batch: N must be at least 1");
    if (t == 0) throw std::invalid_argument("cost_batch: T must be at least 1");
    if (n > kMaxCostInput || t > kMaxCostInput) throw std::invalid_argument("cost_batch: arguments too large");
    const std::uint64_t one_shot = (3 * t) * (3 * t);
    const std::uint64_t zero_shot = t * t;
    return {n * one_shot + zero_shot, one_shot + zero_shot};
}

// ---------------------------------------------------------------------------

PromptSet take_demos(const PromptSet& ps, std::size_t n) {
    if (n > ps.demos.size()) {
        throw ConfigError("prompt set has " + std::to_string(ps.demos.size()) + " demos, " + std::to_string(n) +
                          " requested");
    }
    PromptSet out = ps;
    out.demos.resize(n);
    return out;
}

double standard_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data) {
    return accuracy_of(data, [&](const PromptSet& ps) { return batchicl::run_standard_icl(ckpt, ps); });
}

double zero_shot_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data) {
    return accuracy_of(data, [&](const PromptSet& ps) { return batchicl::run_zero_shot(ckpt, ps); });
}

double batch_icl_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data, std::size_t layer) {
    return accuracy_of(data, [&](const PromptSet& ps) { return batchicl::batch_icl(ckpt, ps, layer); });
}

double multi_epoch_accuracy(const ModelCheckpoint& ckpt, std::span<const PromptSet> data, std::size_t layer,
                            std::size_t epochs) {
    return accuracy_of(data,
                       [&](const PromptSet& ps) { return batchicl::multi_epoch_batch_icl(ckpt, ps, layer, epochs); });
}

PermutationStudy permutation_study(const ModelCheckpoint& ckpt, std::span<const PromptSet> dataset, std::size_t n,
                                   std::size_t layer) {
    if (n == 0) throw ConfigError("permutation study needs at least one demo");
    if (n > kMaxEnumeratedShots) {
        throw ConfigError("permutation study enumerates n! orders; n=" + std::to_string(n) + " exceeds the limit of " +
                          std::to_string(kMaxEnumeratedShots));
    }
    if (dataset.empty()) throw ConfigError("permutation study needs a non-empty dataset");

    PermutationStudy st;
    st.n = n;
    st.layer = layer;
    st.queries = dataset.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    do st.permutations.push_back({order, 0, 0.0});
    while (std::next_permutation(order.begin(), order.end()));

    std::size_t batch_hits = 0;
    for (const PromptSet& full : dataset) {
        const PromptSet ps = take_demos(full, n);
        std::vector<bool> row;
        for (PermutationResult& pr : st.permutations) {
            PromptSet permuted = ps;
            for (std::size_t i = 0; i < n; ++i) permuted.demos[i] = ps.demos[pr.order[i]];
            const bool ok = hit(batchicl::run_standard_icl(ckpt, permuted), ps);
            row.push_back(ok);
            if (ok) ++pr.correct;
        }
        st.correct.push_back(std::move(row));
        const bool ok = hit(batchicl::batch_icl(ckpt, ps, layer), ps);
        st.batch_correct.push_back(ok);
        if (ok) ++batch_hits;
    }

    st.batch_icl_accuracy = fraction(batch_hits, st.queries);
    st.best = 0.0;
    st.worst = 1.0;
    double sum = 0.0;
    std::size_t below = 0;
    for (PermutationResult& pr : st.permutations) {
        pr.accuracy = fraction(pr.correct, st.queries);
        st.best = std::max(st.best, pr.accuracy);
        st.worst = std::min(st.worst, pr.accuracy);
        sum += pr.accuracy;
        if (pr.correct < batch_hits) ++below;
    }
    st.average = sum / static_cast<double>(st.permutations.size());
    st.outperformed_fraction = fraction(below, st.permutations.size());
    return st;
}

// ---------------------------------------------------------------------------

std::string to_string(Mode mode) {
    switch (mode) {
        case Mode::Baseline: return "baseline";
        case Mode::BatchIcl: return "batch-icl";
        case Mode::MultiEpoch: return "multi-epoch";
        case Mode::PermutationStudy: return "perm-study";
        case Mode::KSweep: return "sweep-k";
        case Mode::NSweep: return "sweep-n";
        case Mode::EpochSweep: return "sweep-epochs";
        case Mode::CostModel: return "cost-model";
    }
    return "?";
}

Mode mode_from_string(const std::string& s) {
    for (Mode m : {Mode::Baseline, Mode::BatchIcl, Mode::MultiEpoch, Mode::PermutationStudy, Mode::KSweep,
                   Mode::NSweep, Mode::EpochSweep, Mode::CostModel}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown mode '" + s + "'");
}

void ExperimentConfig::validate() const {
    if (mode == Mode::CostModel) {
        if (cost_tokens == 0) throw ConfigError("cost_tokens must be at least 1");
        if (cost_max_n < 1 || cost_max_n > 4096) throw ConfigError("cost_max_n must be in [1, 4096]");
        return;
    }
    if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    if (test_size == 0) throw ConfigError("test_size must be at least 1");
    if (!k && validation_size == 0) throw ConfigError("validation_size must be positive when k is auto");
    if (mode != Mode::NSweep && n == 0) throw ConfigError("n must be at least 1");
    if (mode == Mode::PermutationStudy && n > kMaxEnumeratedShots) {
        throw ConfigError("n=" + std::to_string(n) + " exceeds the permutation enumeration limit of " +
                          std::to_string(kMaxEnumeratedShots));
    }
    if (mode == Mode::MultiEpoch && epochs == 0) throw ConfigError("epochs must be at least 1");
    if (mode == Mode::NSweep && (n_values.empty() || std::count(n_values.begin(), n_values.end(), 0u)))
        throw ConfigError("n_values must be non-empty and positive");
}

namespace {

struct Runner {
    const ExperimentConfig& cfg;
    const ModelCheckpoint& ckpt;
    const std::function<SeedData(std::uint64_t, std::size_t)>& splits;
    std::vector<RunRecord> records;

    RunRecord base(std::uint64_t seed, std::size_t n, const std::string& variant) const {
        RunRecord r;
        r.mode = to_string(cfg.mode);
        r.variant = variant;
        r.seed = seed;
        r.n = n;
        return r;
    }

    // Candidate layers that leave room for `epochs` rounds.
    std::vector<std::size_t> candidates(std::size_t epochs) const {
        std::vector<std::size_t> out;
        for (std::size_t l = 0; l + epochs - 1 < ckpt.config.n_layers; ++l) out.push_back(l);
        if (out.empty()) throw ConfigError("no layer admits " + std::to_string(epochs) + " epochs");
        return out;
    }

    std::size_t resolve_k(const SeedData& data, std::size_t n, std::size_t epochs) const {
        if (cfg.k) {
            if (*cfg.k + epochs - 1 >= ckpt.config.n_layers) {
                throw ConfigError("k=" + std::to_string(*cfg.k) + " with " + std::to_string(epochs) +
                                  " epochs exceeds the model's " + std::to_string(ckpt.config.n_layers) + " layers");
            }
            return *cfg.k;
        }
        const auto val = take_all(data.validation, n);
        return batchicl::select_k(ckpt, val, candidates(epochs));
    }

    void run_seed(std::uint64_t seed) {
        const std::size_t n_needed =
            cfg.mode == Mode::NSweep ? *std::max_element(cfg.n_values.begin(), cfg.n_values.end()) : cfg.n;
        const SeedData data = splits(seed, n_needed);
        if (data.test.empty()) throw ConfigError("test split is empty");

        switch (cfg.mode) {
            case Mode::Baseline: {
                Stopwatch sw;
                const auto test = take_all(data.test, cfg.n);
                RunRecord r = base(seed, cfg.n, "standard");
                r.queries = test.size();
                r.accuracy = standard_accuracy(ckpt, test);
                r.wall_seconds = sw.seconds();
                records.push_back(r);
                break;
            }
            case Mode::BatchIcl:
            case Mode::MultiEpoch: {
                Stopwatch sw;
                const std::size_t epochs = cfg.mode == Mode::BatchIcl ? 1 : cfg.epochs;
                const std::size_t k = resolve_k(data, cfg.n, epochs);
                const auto test = take_all(data.test, cfg.n);
                RunRecord r = base(seed, cfg.n, epochs == 1 ? "batch-icl" : "multi-epoch");
                r.k = k;
                r.epochs = epochs;
                r.queries = test.size();
                r.accuracy = multi_epoch_accuracy(ckpt, test, k, epochs);
                r.wall_seconds = sw.seconds();
                records.push_back(r);
                break;
            }
            case Mode::PermutationStudy: {
                Stopwatch sw;
                const std::size_t k = resolve_k(data, cfg.n, 1);
                const PermutationStudy st = permutation_study(ckpt, data.test, cfg.n, k);
                RunRecord r = base(seed, cfg.n, "batch-icl");
                r.k = k;
                r.queries = st.queries;
                r.accuracy = st.batch_icl_accuracy;
                for (const auto& p : st.permutations) r.permutation_accuracies.push_back(p.accuracy);
                r.best = st.best;
                r.worst = st.worst;
                r.average = st.average;
                r.outperformed_fraction = st.outperformed_fraction;
                r.wall_seconds = sw.seconds();
                records.push_back(r);
                break;
            }
            case Mode::KSweep: {
                const auto test = take_all(data.test, cfg.n);
                {
                    Stopwatch sw;
                    RunRecord z = base(seed, cfg.n, "zero-shot");
                    z.queries = test.size();
                    z.accuracy = zero_shot_accuracy(ckpt, test);
                    z.wall_seconds = sw.seconds();
                    records.push_back(z);
                }
                for (std::size_t k : batchicl::all_layers(ckpt)) {
                    Stopwatch sw;
                    RunRecord r = base(seed, cfg.n, "batch-icl");
                    r.k = k;
                    r.queries = test.size();
                    r.accuracy = batch_icl_accuracy(ckpt, test, k);
                    r.wall_seconds = sw.seconds();
                    records.push_back(r);
                }
                break;
            }
            case Mode::NSweep: {
                for (std::size_t n : cfg.n_values) {
                    const auto test = take_all(data.test, n);
                    {
                        Stopwatch sw;
                        RunRecord r = base(seed, n, "standard");
                        r.queries = test.size();
                        try {
                            r.accuracy = standard_accuracy(ckpt, test);
                        } catch (const ContextOverflowError& e) {
                            r.note = "n-shot prompt exceeds the context: " + std::string(e.what());
                        }
                        r.wall_seconds = sw.seconds();
                        records.push_back(r);
                    }
                    Stopwatch sw;
                    const std::size_t k = resolve_k(data, n, 1);
                    RunRecord r = base(seed, n, "batch-icl");
                    r.k = k;
                    r.queries = test.size();
                    r.accuracy = batch_icl_accuracy(ckpt, test, k);
                    r.wall_seconds = sw.seconds();
                    records.push_back(r);
                }
                break;
            }
            case Mode::EpochSweep: {
                const std::size_t k = resolve_k(data, cfg.n, 1);
                const auto test = take_all(data.test, cfg.n);
                for (std::size_t e = 1; k + e - 1 < ckpt.config.n_layers; ++e) {
                    Stopwatch sw;
                    RunRecord r = base(seed, cfg.n, e == 1 ? "batch-icl" : "multi-epoch");
                    r.k = k;
                    r.epochs = e;
                    r.queries = test.size();
                    r.accuracy = multi_epoch_accuracy(ckpt, test, k, e);
                    if (e == 2 && ckpt.config.linear_mode) {
                        double gap = 0.0;
                        for (const PromptSet& ps : test) {
                            const Tensor epoch2 = batchicl::multi_epoch_aggregate(ckpt, ps, k, 2).vector;
                            gap = std::max<double>(gap, max_abs_diff(epoch2, batchicl::ordered_pair_mean(ckpt, ps, k)));
                        }
                        r.pair_oracle_gap = gap;
                    }
                    r.wall_seconds = sw.seconds();
                    records.push_back(r);
                }
                break;
            }
            case Mode::CostModel: break;
        }
    }
};

std::vector<RunRecord> cost_records(const ExperimentConfig& cfg) {
    std::vector<RunRecord> out;
    const std::uint64_t t = cfg.cost_tokens;
    for (std::uint64_t n = 0; n <= cfg.cost_max_n; ++n) {
        RunRecord r;
        r.mode = to_string(Mode::CostModel);
        r.variant = "cost";
        r.n = n;
        r.tokens = t;
        r.cost_standard = cost_standard(n, t);
        if (n >= 1) {
            const BatchCost b = cost_batch(n, t);
            r.cost_batch_total = b.total;
            r.cost_batch_latency = b.latency;
        } else {
            r.note = "batch cost needs at least one demo";
        }
        out.push_back(r);
    }
    return out;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json optional_json(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }
json optional_json(const std::optional<std::uint64_t>& v, int) { return v ? json(*v) : json(nullptr); }

std::string csv_cell(const json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) {
        std::string s = v.get<std::string>();
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        return q + "\"";
    }
    return v.dump();
}

json config_json(const ExperimentConfig& c) {
    json j;
    j["mode"] = to_string(c.mode);
    if (c.mode == Mode::CostModel) {
        j["cost_tokens"] = c.cost_tokens;
        j["cost_max_n"] = c.cost_max_n;
        return j;
    }
    j["checkpoint"] = c.checkpoint.string();
    j["task"] = c.task.string();
    j["n"] = c.n;
    j["k"] = c.k ? json(*c.k) : json("auto");
    j["epochs"] = c.epochs;
    j["seeds"] = c.seeds;
    j["linear_mode"] = c.linear_mode;
    j["test_size"] = c.test_size;
    j["validation_size"] = c.validation_size;
    if (c.mode == Mode::NSweep) j["n_values"] = c.n_values;
    return j;
}

json record_json(const RunRecord& r) {
    json j;
    j["mode"] = r.mode;
    j["variant"] = r.variant;
    j["n"] = r.n;
    if (r.mode == to_string(Mode::CostModel)) {
        j["tokens"] = optional_json(r.tokens, 0);
        j["cost_standard"] = optional_json(r.cost_standard, 0);
        j["cost_batch_total"] = optional_json(r.cost_batch_total, 0);
        j["cost_batch_latency"] = optional_json(r.cost_batch_latency, 0);
    } else {
        j["seed"] = r.seed;
        j["k"] = optional_json(r.k);
        j["epochs"] = r.epochs;
        j["queries"] = r.queries;
        j["accuracy"] = optional_json(r.accuracy);
        if (!r.permutation_accuracies.empty()) {
            j["permutation_accuracies"] = r.permutation_accuracies;
            j["best"] = optional_json(r.best);
            j["worst"] = optional_json(r.worst);
            j["average"] = optional_json(r.average);
            j["outperformed_fraction"] = optional_json(r.outperformed_fraction);
        }
        if (r.pair_oracle_gap) j["pair_oracle_gap"] = *r.pair_oracle_gap;
    }
    if (r.note) j["note"] = *r.note;
    return j;
}

}  // namespace

std::vector<SummaryRow> summarize(std::span<const RunRecord> records) {
    using Key = std::tuple<std::string, std::string, std::size_t, std::optional<std::size_t>, std::size_t>;
    std::vector<Key> order;
    std::map<Key, std::vector<double>> groups;
    for (const RunRecord& r : records) {
        if (!r.accuracy) continue;
        // Auto-selected k may differ across seeds; group on the fixed fields only.
        const Key key{r.mode, r.variant, r.n, r.mode == to_string(Mode::KSweep) ? r.k : std::nullopt, r.epochs};
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(*r.accuracy);
    }
    std::vector<SummaryRow> out;
    for (const Key& key : order) {
        const auto& v = groups[key];
        SummaryRow s;
        std::tie(s.mode, s.variant, s.n, s.k, s.epochs) = key;
        s.runs = v.size();
        s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        if (v.size() > 1) {
            double ss = 0.0;
            for (double x : v) ss += (x - s.mean) * (x - s.mean);
            s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
        out.push_back(s);
    }
    return out;
}

ExperimentReport run_experiment(const ExperimentConfig& config, const ModelCheckpoint& ckpt,
                                const std::function<SeedData(std::uint64_t, std::size_t)>& splits, double chance) {
    config.validate();
    ExperimentReport report;
    report.config = config;
    report.chance = chance;
    if (config.mode == Mode::CostModel) {
        report.records = cost_records(config);
        return report;
    }
    Runner runner{config, ckpt, splits, {}};
    for (std::uint64_t seed : config.seeds) runner.run_seed(seed);
    report.records = std::move(runner.records);
    report.summary = summarize(report.records);
    return report;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
    config.validate();
    if (config.mode == Mode::CostModel) return run_experiment(config, ModelCheckpoint{}, {}, 0.0);
    if (config.checkpoint.empty()) throw ConfigError("checkpoint path is required");
    if (config.task.empty()) throw ConfigError("task file is required");
    ModelCheckpoint ckpt = load_checkpoint(config.checkpoint);
    if (config.linear_mode) ckpt.config.linear_mode = true;
    const DatasetFile file = read_dataset(config.task, ckpt.tokenizer);
    const bool has_records = !file.splits.test.empty();

    // Records in the file: seed 0 keeps them as written, other seeds shuffle
    // each set's demo order. Header only: every seed draws fresh splits.
    auto splits = [&](std::uint64_t seed, std::size_t n) {
        SeedData data;
        if (has_records) {
            data.validation = file.splits.validation;
            data.test = file.splits.test;
            if (seed != 0) {
                std::mt19937_64 rng(seed);
                for (auto* part : {&data.validation, &data.test})
                    for (PromptSet& ps : *part)
                        for (std::size_t i = ps.demos.size(); i > 1; --i)
                            std::swap(ps.demos[i - 1], ps.demos[static_cast<std::size_t>(rng() % i)]);
            }
            return data;
        }
        TaskSpec spec = file.spec;
        spec.n_demos = std::max(spec.n_demos, n);
        DatasetSplits s = generate_splits(spec, ckpt.tokenizer, seed, 0, config.k ? 0 : config.validation_size,
                                          config.test_size);
        data.validation = std::move(s.validation);
        data.test = std::move(s.test);
        return data;
    };
    ExperimentReport report = run_experiment(config, ckpt, splits, 1.0 / static_cast<double>(file.spec.n_classes));
    report.task = file.spec;
    return report;
}

std::string report_json(const ExperimentReport& report) {
    json j;
    j["format"] = "bicl-report";
    j["version"] = 1;
    j["config"] = config_json(report.config);
    if (report.task) j["task"] = json::parse(task_spec_to_json(*report.task));
    if (report.config.mode != Mode::CostModel) j["chance"] = report.chance;
    j["records"] = json::array();
    for (const RunRecord& r : report.records) j["records"].push_back(record_json(r));
    j["summary"] = json::array();
    for (const SummaryRow& s : report.summary) {
        j["summary"].push_back({{"mode", s.mode},
                                {"variant", s.variant},
                                {"n", s.n},
                                {"k", optional_json(s.k)},
                                {"epochs", s.epochs},
                                {"runs", s.runs},
                                {"mean_accuracy", s.mean},
                                {"stddev_accuracy", s.stddev}});
    }
    return j.dump(2) + "\n";
}

std::string report_csv(const ExperimentReport& report) {
    static const std::vector<std::string> columns{
        "row", "mode", "variant", "seed", "n", "k", "epochs", "queries", "accuracy", "stddev", "runs", "best",
        "worst", "average", "outperformed_fraction", "pair_oracle_gap", "tokens", "cost_standard",
        "cost_batch_total", "cost_batch_latency", "note"};
    std::ostringstream os;
    for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << "\n";
    auto emit = [&](const json& row) {
        for (std::size_t i = 0; i < columns.size(); ++i) {
            os << (i ? "," : "");
            if (row.contains(columns[i])) os << csv_cell(row[columns[i]]);
        }
        os << "\n";
    };
    for (const RunRecord& r : report.records) {
        json row = record_json(r);
        row["row"] = "run";
        emit(row);
    }
    for (const SummaryRow& s : report.summary) {
        emit({{"row", "summary"},
              {"mode", s.mode},
              {"variant", s.variant},
              {"n", s.n},
              {"k", optional_json(s.k)},
              {"epochs", s.epochs},
              {"runs", s.runs},
              {"accuracy", s.mean},
              {"stddev", s.stddev}});
    }
    return os.str();
}

std::string timing_json(const ExperimentReport& report) {
    json j = json::array();
    double total = 0.0;
    for (std::size_t i = 0; i < report.records.size(); ++i) {
        j.push_back({{"record", i}, {"wall_seconds", report.records[i].wall_seconds}});
        total += report.records[i].wall_seconds;
    }
    return json{{"records", j}, {"total_wall_seconds", total}}.dump(2) + "\n";
}

void write_report(const ExperimentReport& report, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create report directory " + dir.string() + ": " + ec.message());
    auto put = [&](const std::string& name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::binary);
        out << text;
        if (!out) throw IoError("cannot write " + (dir / name).string());
    };
    put("report.json", report_json(report));
    put("report.csv", report_csv(report));
    put("report.timing.json", timing_json(report));
}

}  // namespace bicl::bench
