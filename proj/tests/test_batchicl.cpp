#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"

#include "bicl/batchicl.hpp"
#include "bicl/errors.hpp"

using namespace bicl;
using namespace bicl::batchicl;

namespace {

Tensor manual_capture(const ModelCheckpoint& ck, const PromptSet& ps, ShotLayout layout, std::size_t layer) {
    const auto tokens = render_prompt(ck.tokenizer, ps, layout, ck.config.max_positions);
    const int last = static_cast<int>(tokens.size()) - 1;
    const std::vector<HookSpec> hooks{HookSpec::capture(static_cast<int>(layer), last)};
    return forward(ck, tokens, hooks).captures.at({static_cast<int>(layer), last});
}

CaptureRecord record(std::size_t layer, std::string text, std::uint64_t key, Tensor v) {
    return {layer, 0, std::move(text), key, std::move(v)};
}

std::vector<std::vector<std::size_t>> all_orders(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::vector<std::vector<std::size_t>> out;
    do out.push_back(p);
    while (std::next_permutation(p.begin(), p.end()));
    return out;
}

PromptSet reorder(const PromptSet& ps, const std::vector<std::size_t>& order) {
    PromptSet out = ps;
    for (std::size_t i = 0; i < order.size(); ++i) out.demos[i] = ps.demos[order[i]];
    return out;
}

}  // namespace

TEST_CASE("standard icl: zero demos is the zero-shot run, n-shot is one forward") {
    const auto ck = testutil::small_model(2, 1);
    const PromptSet none = testutil::small_prompt(0, 1);
    CHECK(run_standard_icl(ck, none) == run_zero_shot(ck, none));
    const PromptSet two = testutil::small_prompt(2, 2);
    const auto tokens = render_prompt(ck.tokenizer, two, ShotLayout::n_shot(), ck.config.max_positions);
    CHECK(run_standard_icl(ck, two) == score_labels(forward(ck, tokens), two.verbalizers));
}

TEST_CASE("capture_one_shot: records equal manual runs") {
    const auto ck = testutil::small_model(3, 0);
    PromptSet ps = testutil::small_prompt(4, 0);
    const auto recs = capture_one_shot(ck, ps, 1);
    REQUIRE(recs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(recs[i].vector == manual_capture(ck, ps, ShotLayout::one_shot(i), 1));
        CHECK(recs[i].layer == 1);
        CHECK(recs[i].key == demo_key(ps.tmpl, ps.demos[i]));
        CHECK(recs[i].demo_text == render_demo(ps.tmpl, ps.demos[i]));
    }
    ps.demos[1] = ps.demos[0];
    const auto dup = capture_one_shot(ck, ps, 2);
    CHECK(dup[0].vector == dup[1].vector);
    CHECK_THROWS_AS(capture_one_shot(ck, testutil::small_prompt(0, 0), 1), std::invalid_argument);
    CHECK_THROWS_AS(capture_one_shot(ck, ps, 3), HookError);
}

TEST_CASE("capture_one_shot: a single over-long demo overflows") {
    const auto ck = testutil::small_model(2, 0, false, 0.3f, 6);
    PromptSet ps = testutil::small_prompt(1, 0);
    ps.demos[0].input = "w1 w2 w3";
    CHECK_THROWS_AS(capture_one_shot(ck, ps, 0), ContextOverflowError);
}

TEST_CASE("aggregate: mean in canonical order") {
    const std::vector<CaptureRecord> one{record(1, "a", 5, Tensor::vector({1.5f, 2.0f}))};
    const auto a1 = aggregate(one);
    CHECK(a1.vector == one[0].vector);
    CHECK(a1.layer == 1);
    CHECK(a1.source_count == 1);
    const std::vector<CaptureRecord> two{record(0, "a", 1, Tensor::vector({1, 3})),
                                         record(0, "b", 2, Tensor::vector({3, 5}))};
    CHECK(aggregate(two).vector == Tensor::vector({2, 4}));

    std::mt19937_64 rng(4);
    std::vector<CaptureRecord> many;
    for (int i = 0; i < 6; ++i)
        many.push_back(record(2, "d" + std::to_string(i), rng(), testutil::random_tensor({8}, rng, -50, 50)));
    const auto base = aggregate(many);
    for (int t = 0; t < 10; ++t) {
        std::shuffle(many.begin(), many.end(), rng);
        CHECK(aggregate(many) == base);
    }
    CHECK_THROWS_AS(aggregate(std::vector<CaptureRecord>{}), std::invalid_argument);
    many[0].layer = 3;
    CHECK_THROWS_AS(aggregate(many), std::invalid_argument);
}

TEST_CASE("zero-shot injection: self-substitution and one-demo pipeline") {
    const auto ck = testutil::small_model(3, 2);
    const PromptSet ps = testutil::small_prompt(1, 5);
    for (std::size_t k = 0; k < 3; ++k) {
        const Tensor own = manual_capture(ck, ps, ShotLayout::zero_shot(), k);
        const AggregateState self{k, own, 1, 1};
        const auto a = run_zero_shot_injected(ck, ps, self);
        const auto b = run_zero_shot(ck, ps);
        CHECK(a.label == b.label);
        for (std::size_t i = 0; i < a.scores.size(); ++i) CHECK(std::abs(a.scores[i] - b.scores[i]) <= 1e-6f);

        const AggregateState from_demo{k, manual_capture(ck, ps, ShotLayout::one_shot(0), k), 1, 1};
        CHECK(batch_icl(ck, ps, k) == run_zero_shot_injected(ck, ps, from_demo));
    }
    CHECK_THROWS_AS(run_zero_shot_injected(ck, ps, AggregateState{3, Tensor({8}), 1, 1}), HookError);
}

TEST_CASE("batch icl: bit-exact under every demo order") {
    for (bool linear : {false, true}) {
        const auto ck = testutil::small_model(4, 3, linear, linear ? 0.15f : 0.3f);
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const PromptSet ps = testutil::small_prompt(3, 100 + seed);
            const auto base = batch_icl(ck, ps, 1);
            const auto base2 = multi_epoch_batch_icl(ck, ps, 1, 3);
            for (const auto& order : all_orders(3)) {
                const PromptSet p = reorder(ps, order);
                CHECK(batch_icl(ck, p, 1) == base);
                CHECK(multi_epoch_batch_icl(ck, p, 1, 3) == base2);
            }
        }
    }
}

TEST_CASE("multi epoch: reductions, caching and range") {
    const auto ck = testutil::small_model(4, 4);
    const PromptSet ps = testutil::small_prompt(3, 9);
    for (std::size_t k = 0; k < 4; ++k) CHECK(multi_epoch_batch_icl(ck, ps, k, 1) == batch_icl(ck, ps, k));

    for (std::size_t epochs = 1; epochs <= 4; ++epochs) {
        const auto cached = multi_epoch_aggregate(ck, ps, 0, epochs, {true});
        const auto fresh = multi_epoch_aggregate(ck, ps, 0, epochs, {false});
        CHECK(cached == fresh);
        CHECK(cached.epoch == epochs);
        CHECK(cached.layer == epochs - 1);
        CHECK(cached.source_count == 3);
    }
    try {
        multi_epoch_aggregate(ck, ps, 2, 3);
        FAIL("expected HookError");
    } catch (const HookError& e) {
        CHECK(std::string(e.what()).find("at most 2 epochs") != std::string::npos);
    }
    CHECK_THROWS_AS(multi_epoch_aggregate(ck, ps, 0, 0), std::invalid_argument);
}

TEST_CASE("multi epoch: one demo collapses to the uninterrupted 1-shot pass") {
    const auto ck = testutil::small_model(4, 5, true, 0.15f);
    const PromptSet ps = testutil::small_prompt(1, 2);
    for (std::size_t k = 0; k + 1 < 4; ++k) {
        const auto agg = multi_epoch_aggregate(ck, ps, k, 2);
        CHECK(max_abs_diff(agg.vector, manual_capture(ck, ps, ShotLayout::one_shot(0), k + 1)) <= 1e-5f);
    }
}

TEST_CASE("multi epoch: two-epoch aggregate against the ordered-pair mean (linear)") {
    const auto ck = testutil::small_model(3, 6, true, 0.15f);
    for (std::size_t n = 2; n <= 4; ++n) {
        const PromptSet ps = testutil::small_prompt(n, 40 + n);
        const auto agg = multi_epoch_aggregate(ck, ps, 0, 2);
        CHECK(max_abs_diff(agg.vector, ordered_pair_mean(ck, ps, 0)) <= 1e-4f);
    }
    CHECK_THROWS_AS(ordered_pair_mean(ck, testutil::small_prompt(2, 1), 2), HookError);
}

TEST_CASE("unbounded N: batch icl runs where the n-shot prompt overflows") {
    const auto ck = testutil::small_model(2, 7, false, 0.3f, 12);
    const PromptSet ps = testutil::small_prompt(16, 7);
    CHECK_THROWS_AS(run_standard_icl(ck, ps), ContextOverflowError);
    const auto p = batch_icl(ck, ps, 1);
    CHECK(p.scores.size() == 2);
}

TEST_CASE("select_k: smallest best layer, ties and errors") {
    const auto single = testutil::small_model(1, 8);
    std::vector<PromptSet> val;
    for (std::uint64_t s = 0; s < 20; ++s) {
        PromptSet p = testutil::small_prompt(2, 200 + s);
        p.gold = s % 2 ? "A" : "B";
        val.push_back(p);
    }
    CHECK(select_k(single, val, all_layers(single)) == 0);

    const auto ck = testutil::small_model(4, 9);
    const auto layers = all_layers(ck);
    CHECK(layers == std::vector<std::size_t>{0, 1, 2, 3});
    std::vector<double> acc;
    for (std::size_t k : layers) {
        std::size_t correct = 0;
        for (const auto& p : val) correct += batch_icl(ck, p, k).label_index == p.gold_index();
        acc.push_back(static_cast<double>(correct) / val.size());
    }
    const std::size_t best = static_cast<std::size_t>(std::max_element(acc.begin(), acc.end()) - acc.begin());
    const auto sweep = sweep_layers(ck, val, layers);
    CHECK(sweep.accuracies == acc);
    CHECK(sweep.best_layer == best);
    CHECK(select_k(ck, val, layers) == best);

    ModelCheckpoint flat = ck;
    for_each_tensor(flat.weights, [](const std::string&, Tensor& t) {
        for (float& v : t.data()) v = 0.0f;
    });
    const std::vector<std::size_t> rev{3, 1, 2};
    CHECK(select_k(flat, val, rev) == 1);
    CHECK_THROWS_AS(select_k(ck, val, std::vector<std::size_t>{}), std::invalid_argument);
    CHECK_THROWS_AS(select_k(ck, std::vector<PromptSet>{}, layers), std::invalid_argument);
}

TEST_CASE("zero-shot drift is reported per demo in linear mode") {
    const auto lin = testutil::small_model(2, 10, true, 0.15f);
    const PromptSet ps = testutil::small_prompt(3, 3);
    const auto drift = zero_shot_drift(lin, ps, 1);
    CHECK(drift.size() == 3);
    for (float d : drift) CHECK(std::isfinite(d));
    CHECK_THROWS_AS(zero_shot_drift(testutil::small_model(2, 10), ps, 1), ConfigError);
}
