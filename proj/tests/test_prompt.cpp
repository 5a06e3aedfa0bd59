#include <algorithm>
#include <fstream>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

#include "bicl/errors.hpp"
#include "bicl/prompt.hpp"
#include "bicl/tasks.hpp"

using namespace bicl;

namespace {

// Spec behind the frozen token-id fixture. Changing it invalidates the fixture.
TaskSpec fixture_spec() {
    TaskSpec s;
    s.n_inputs = 12;
    s.max_prefix = 1;
    s.n_demos = 3;
    s.rule_seed = 3;
    return s;
}

std::size_t token_count(const Tokenizer& tok, const std::string& text) { return tok.encode(text).size(); }

}  // namespace

TEST_CASE("render: layouts") {
    const Tokenizer tok = testutil::small_tokenizer();
    PromptSet ps = testutil::small_prompt(3, 1);
    const auto zero = render_prompt(tok, ps, ShotLayout::zero_shot(), 64);
    CHECK(zero == tok.encode(render_query(ps.tmpl, ps.query)));
    CHECK(zero == tok.encode(ps.query + " ="));

    const auto one = render_prompt(tok, ps, ShotLayout::one_shot(1), 64);
    CHECK(one == tok.encode(render_demo(ps.tmpl, ps.demos[1]) + render_query(ps.tmpl, ps.query)));

    PromptSet single = ps;
    single.demos.resize(1);
    CHECK(render_prompt(tok, single, ShotLayout::one_shot(0), 64) == render_prompt(tok, single, ShotLayout::n_shot(), 64));
    CHECK(render_demo(ps.tmpl, {"w1", "A"}) == "w1 = A\n");
}

TEST_CASE("render: overflow is an explicit error") {
    const Tokenizer tok = testutil::small_tokenizer();
    const PromptSet ps = testutil::small_prompt(4, 2);
    try {
        render_prompt(tok, ps, ShotLayout::n_shot(), 10);
        FAIL("expected overflow");
    } catch (const ContextOverflowError& e) {
        CHECK(e.length == 18);
        CHECK(e.limit == 10);
    }
    CHECK(render_prompt(tok, ps, ShotLayout::one_shot(0), 10).size() == 6);
}

TEST_CASE("render: n-shot length is the sum of segment lengths") {
    const Tokenizer tok = testutil::small_tokenizer();
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const PromptSet ps = testutil::small_prompt(seed % 6, seed);
        std::size_t expected = token_count(tok, render_query(ps.tmpl, ps.query));
        for (const Demo& d : ps.demos) expected += token_count(tok, render_demo(ps.tmpl, d));
        CHECK(render_prompt(tok, ps, ShotLayout::n_shot(), 64).size() == expected);
    }
}

TEST_CASE("render: permuting demos reorders segments only") {
    const Tokenizer tok = testutil::small_tokenizer();
    PromptSet ps = testutil::small_prompt(4, 3);
    std::mt19937_64 rng(3);
    const std::string base = render_text(ps.tmpl, ps.demos, ps.query, ShotLayout::n_shot());
    std::vector<std::string> segs;
    for (const Demo& d : ps.demos) segs.push_back(render_demo(ps.tmpl, d));
    std::vector<std::size_t> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Demo> permuted;
    std::string expected;
    for (std::size_t i : order) {
        permuted.push_back(ps.demos[i]);
        expected += segs[i];
    }
    expected += render_query(ps.tmpl, ps.query);
    CHECK(render_text(ps.tmpl, permuted, ps.query, ShotLayout::n_shot()) == expected);
    CHECK(base.size() == expected.size());
}

TEST_CASE("demo_key: FNV-1a over the rendered demo") {
    PromptTemplate t;
    t.demo_pattern = "{input}";
    t.separator = "";
    CHECK(demo_key(t, {"", "A"}) == 0xcbf29ce484222325ull);
    CHECK(demo_key(t, {"a", "A"}) == 0xaf63dc4c8601ec8cull);
    const PromptTemplate d;
    CHECK(demo_key(d, {"w1", "A"}) != demo_key(d, {"w1", "B"}));
}

TEST_CASE("verbalizers: one token per label") {
    const Tokenizer tok = testutil::small_tokenizer();
    const auto v = make_verbalizers(tok, std::vector<std::string>{"A", "B"});
    REQUIRE(v.size() == 2);
    CHECK(v[0].token == tok.id("A"));
    CHECK(v[1].token == tok.id("B"));
    CHECK_THROWS(make_verbalizers(tok, std::vector<std::string>{"A", "A"}));
    CHECK_THROWS(make_verbalizers(tok, std::vector<std::string>{"A", "missing"}));
}

TEST_CASE("render: golden token ids") {
    const TaskSpec spec = fixture_spec();
    const Tokenizer tok = toy_tokenizer(spec);
    const auto data = generate_dataset(spec, tok, 42, 2);
    std::ifstream in(std::string(BICL_FIXTURE_DIR) + "/render_golden.json");
    REQUIRE(in.good());
    const auto golden = nlohmann::json::parse(in);
    CHECK(golden["tokenizer"].get<std::vector<std::string>>() == tok.table());
    REQUIRE(golden["prompts"].size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& g = golden["prompts"][i];
        CHECK(g["n_shot"].get<std::vector<TokenId>>() == render_prompt(tok, data[i], ShotLayout::n_shot(), 256));
        CHECK(g["one_shot_1"].get<std::vector<TokenId>>() ==
              render_prompt(tok, data[i], ShotLayout::one_shot(1), 256));
        CHECK(g["zero_shot"].get<std::vector<TokenId>>() == render_prompt(tok, data[i], ShotLayout::zero_shot(), 256));
    }
}
