#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

#include "bicl/batchicl.hpp"
#include "bicl/bench.hpp"
#include "bicl/errors.hpp"
#include "bicl/tasks.hpp"

using namespace bicl;
using namespace bicl::bench;

namespace {

TaskSpec bench_task() {
    TaskSpec s;
    s.n_inputs = 12;
    s.n_demos = 4;
    s.rule_seed = 2;
    return s;
}

ModelCheckpoint bench_model(std::size_t layers = 3) {
    const TaskSpec s = bench_task();
    const Tokenizer tok = toy_tokenizer(s);
    ModelConfig c = testutil::small_config(layers, tok.size(), false, 40);
    return make_random_checkpoint(c, tok, 12, {0.4f, 0.1f});
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Writes a checkpoint and a dataset into a fresh directory.
std::filesystem::path make_workspace(const std::string& name, bool header_only) {
    const auto dir = std::filesystem::temp_directory_path() / ("bicl_bench_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const auto ck = bench_model();
    save_checkpoint(ck, dir / "model.bicl");
    const TaskSpec s = bench_task();
    DatasetSplits sp;
    if (!header_only) sp = generate_splits(s, ck.tokenizer, 3, 0, 12, 20);
    write_dataset(dir / "task.jsonl", s, sp);
    return dir;
}

ExperimentConfig workspace_config(const std::filesystem::path& dir, Mode mode) {
    ExperimentConfig c;
    c.mode = mode;
    c.checkpoint = dir / "model.bicl";
    c.task = dir / "task.jsonl";
    c.n = 3;
    c.test_size = 20;
    c.validation_size = 12;
    c.out = dir / "out";
    return c;
}

}  // namespace

TEST_CASE("cost model: closed forms") {
    CHECK(cost_standard(4, 1) == 81);
    CHECK(cost_standard(0, 1) == 1);
    CHECK(cost_standard(2, 3) == 225);
    CHECK(cost_batch(4, 1) == BatchCost{37, 10});
    CHECK(cost_batch(1, 1) == BatchCost{10, 10});
    CHECK_THROWS_AS(cost_batch(0, 1), std::invalid_argument);
    CHECK_THROWS_AS(cost_batch(1, 0), std::invalid_argument);
    CHECK_THROWS_AS(cost_standard(1, 0), std::invalid_argument);
    for (std::uint64_t t = 1; t <= 5; ++t)
        for (std::uint64_t n = 1; n <= 64; ++n) {
            const auto b = cost_batch(n, t);
            CHECK(b.latency == 10 * t * t);
            CHECK(b.total == n * 9 * t * t + t * t);
            if (n > 2) CHECK(b.latency < cost_standard(n, t));
        }
}

TEST_CASE("permutation study: enumeration and bookkeeping") {
    const auto ck = bench_model();
    const auto data = generate_dataset(bench_task(), ck.tokenizer, 1, 12);
    const auto one = permutation_study(ck, data, 1, 1);
    REQUIRE(one.permutations.size() == 1);
    CHECK(one.best == one.worst);
    CHECK(one.average == one.best);

    const auto st = permutation_study(ck, data, 3, 1);
    CHECK(st.permutations.size() == 6);
    CHECK(st.queries == data.size());
    CHECK(st.correct.size() == data.size());
    for (const auto& row : st.correct) CHECK(row.size() == 6);
    CHECK(st.permutations.front().order == std::vector<std::size_t>{0, 1, 2});
    CHECK(st.permutations.back().order == std::vector<std::size_t>{2, 1, 0});
    double sum = 0.0;
    std::size_t below = 0;
    for (std::size_t p = 0; p < 6; ++p) {
        std::size_t correct = 0;
        for (std::size_t q = 0; q < data.size(); ++q) {
            PromptSet ps = take_demos(data[q], 3);
            PromptSet perm = ps;
            for (std::size_t i = 0; i < 3; ++i) perm.demos[i] = ps.demos[st.permutations[p].order[i]];
            const bool ok = batchicl::run_standard_icl(ck, perm).label_index == ps.gold_index();
            CHECK(st.correct[q][p] == ok);
            correct += ok;
        }
        CHECK(st.permutations[p].correct == correct);
        sum += st.permutations[p].accuracy;
        below += st.permutations[p].accuracy < st.batch_icl_accuracy;
    }
    CHECK(st.average == doctest::Approx(sum / 6));
    CHECK(st.outperformed_fraction == doctest::Approx(below / 6.0));
    CHECK(st.batch_icl_accuracy == batch_icl_accuracy(ck, std::vector<PromptSet>(data.begin(), data.end()), 1));
    CHECK_THROWS_AS(permutation_study(ck, data, 7, 1), ConfigError);
    CHECK_THROWS_AS(permutation_study(ck, data, 5, 1), ConfigError);
    CHECK_THROWS_AS(permutation_study(ck, data, 0, 1), ConfigError);
}

TEST_CASE("experiment config validation") {
    ExperimentConfig c;
    c.mode = Mode::PermutationStudy;
    c.n = 7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.n = 3;
    c.seeds.clear();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.seeds = {0};
    CHECK_NOTHROW(c.validate());
    c.mode = Mode::MultiEpoch;
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(mode_from_string("perm-study") == Mode::PermutationStudy);
    CHECK_THROWS_AS(mode_from_string("nope"), ConfigError);
    for (Mode m : {Mode::Baseline, Mode::BatchIcl, Mode::MultiEpoch, Mode::PermutationStudy, Mode::KSweep,
                   Mode::NSweep, Mode::EpochSweep, Mode::CostModel})
        CHECK(mode_from_string(to_string(m)) == m);
}

TEST_CASE("run_experiment: missing files and bad k") {
    const auto dir = make_workspace("missing", false);
    ExperimentConfig c = workspace_config(dir, Mode::BatchIcl);
    c.checkpoint = dir / "absent.bicl";
    CHECK_THROWS_AS(run_experiment(c), LoadError);
    c = workspace_config(dir, Mode::BatchIcl);
    c.task = dir / "absent.jsonl";
    CHECK_THROWS_AS(run_experiment(c), IoError);
    c = workspace_config(dir, Mode::MultiEpoch);
    c.k = 2;
    c.epochs = 2;
    CHECK_THROWS_AS(run_experiment(c), ConfigError);
}

TEST_CASE("run_experiment: deterministic reports, CSV recomputable from JSON") {
    for (bool header_only : {false, true}) {
        const auto dir = make_workspace(header_only ? "det_h" : "det_f", header_only);
        ExperimentConfig c = workspace_config(dir, Mode::KSweep);
        c.seeds = {0, 1, 2};
        const auto a = run_experiment(c);
        const auto b = run_experiment(c);
        CHECK(report_json(a) == report_json(b));
        CHECK(report_csv(a) == report_csv(b));

        write_report(a, c.out);
        const auto j = nlohmann::json::parse(slurp(c.out / "report.json"));
        CHECK(j["format"] == "bicl-report");
        CHECK(j["records"].size() == 3 * (1 + 3));
        CHECK(std::filesystem::exists(c.out / "report.csv"));
        CHECK(std::filesystem::exists(c.out / "report.timing.json"));
        CHECK(slurp(c.out / "report.json").find("wall") == std::string::npos);

        for (const auto& s : j["summary"]) {
            std::vector<double> xs;
            for (const auto& r : j["records"])
                if (r["variant"] == s["variant"] && r["k"] == s["k"] && r["n"] == s["n"])
                    xs.push_back(r["accuracy"].get<double>());
            REQUIRE(xs.size() == 3);
            const double mean = (xs[0] + xs[1] + xs[2]) / 3;
            double ss = 0;
            for (double x : xs) ss += (x - mean) * (x - mean);
            CHECK(s["mean_accuracy"].get<double>() == doctest::Approx(mean));
            CHECK(s["stddev_accuracy"].get<double>() == doctest::Approx(std::sqrt(ss / 2)));
        }
        const std::string csv = slurp(c.out / "report.csv");
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + j["records"].size() + j["summary"].size());
    }
}

TEST_CASE("run_experiment: auto k is chosen on the validation split") {
    const auto dir = make_workspace("autok", false);
    ExperimentConfig c = workspace_config(dir, Mode::BatchIcl);
    const auto rep = run_experiment(c);
    REQUIRE(rep.records.size() == 1);
    const auto ck = load_checkpoint(c.checkpoint);
    const auto file = read_dataset(c.task, ck.tokenizer);
    std::vector<PromptSet> val;
    for (const auto& ps : file.splits.validation) val.push_back(take_demos(ps, 3));
    const std::size_t k = batchicl::select_k(ck, val, batchicl::all_layers(ck));
    CHECK(rep.records[0].k == k);
    std::vector<PromptSet> test;
    for (const auto& ps : file.splits.test) test.push_back(take_demos(ps, 3));
    CHECK(rep.records[0].accuracy == batch_icl_accuracy(ck, test, k));
}

TEST_CASE("run_experiment: every mode produces records") {
    const auto dir = make_workspace("modes", false);
    for (Mode m : {Mode::Baseline, Mode::MultiEpoch, Mode::PermutationStudy, Mode::NSweep, Mode::EpochSweep}) {
        CAPTURE(to_string(m));
        ExperimentConfig c = workspace_config(dir, m);
        c.k = 0;
        c.epochs = 2;
        c.n_values = {1, 2, 4};
        c.linear_mode = m == Mode::EpochSweep;
        const auto rep = run_experiment(c);
        CHECK(!rep.records.empty());
        if (m == Mode::PermutationStudy) CHECK(rep.records[0].permutation_accuracies.size() == 6);
        if (m == Mode::NSweep) CHECK(rep.records.size() == 6);
        if (m == Mode::EpochSweep) {
            REQUIRE(rep.records.size() == 3);
            REQUIRE(rep.records[1].pair_oracle_gap);
            CHECK(std::isfinite(*rep.records[1].pair_oracle_gap));
        }
    }
    ExperimentConfig cost;
    cost.mode = Mode::CostModel;
    cost.cost_max_n = 8;
    const auto rep = run_experiment(cost);
    CHECK(rep.records.size() == 9);
    CHECK(rep.records[4].cost_standard == 81u);
    CHECK(rep.records[4].cost_batch_latency == 10u);
}

TEST_CASE("n-sweep records overflow instead of failing") {
    const auto dir = make_workspace("overflow", true);
    ExperimentConfig c = workspace_config(dir, Mode::NSweep);
    c.k = 1;
    c.n_values = {1, 16};
    const auto rep = run_experiment(c);
    REQUIRE(rep.records.size() == 4);
    CHECK(rep.records[2].variant == "standard");
    CHECK(!rep.records[2].accuracy);
    CHECK(rep.records[2].note);
    CHECK(rep.records[3].accuracy);
}
