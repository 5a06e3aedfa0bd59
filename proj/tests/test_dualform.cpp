#include <random>

#include "doctest.h"
#include "helpers.hpp"

#include "bicl/dualform.hpp"
#include "bicl/errors.hpp"

using namespace bicl;
using namespace bicl::dualform;

namespace {

LinearLayerState scalar_layer() { return {Tensor::matrix({{0.0f}}), 0.1f}; }

std::vector<Sample> scalar_samples() {
    return {{Tensor::vector({1}), Tensor::vector({1})}, {Tensor::vector({2}), Tensor::vector({0})}};
}

}  // namespace

TEST_CASE("gd_update: hand cases") {
    const LinearLayerState zero{Tensor({2, 2}), 0.1f};
    const std::vector<TrainExample> one{{Tensor::vector({0, 1}), Tensor::vector({1, 0})}};
    CHECK(gd_update(zero, one) == Tensor::matrix({{0, 1}, {0, 0}}));
    const LinearLayerState w{Tensor::matrix({{1, 2}, {3, 4}}), 0.1f};
    const std::vector<TrainExample> none_moving{{Tensor::vector({5, 6}), Tensor::vector({0, 0})}};
    CHECK(gd_update(w, none_moving) == w.W0);
    const std::vector<TrainExample> bad{{Tensor::vector({1, 2, 3}), Tensor::vector({1, 0})}};
    CHECK_THROWS_AS(gd_update(w, bad), DimensionError);
}

TEST_CASE("gd_update: matches elementwise loop exactly") {
    std::mt19937_64 rng(0);
    const LinearLayerState layer{testutil::random_tensor({3, 4}, rng), 0.1f};
    std::vector<TrainExample> ex;
    for (int i = 0; i < 3; ++i) ex.push_back({testutil::random_tensor({4}, rng), testutil::random_tensor({3}, rng)});
    const Tensor got = gd_update(layer, ex);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) {
            float v = layer.W0.at(r, c);
            for (const auto& e : ex) v += e.e[r] * e.x[c];
            CHECK(got.at(r, c) == v);
        }
}

TEST_CASE("linear_attention: hand cases and matrix form") {
    CHECK(linear_attention(Tensor({3, 0}), Tensor({2, 0}), Tensor::vector({1, 1})) == Tensor::vector({0, 0, 0}));
    CHECK(linear_attention(Tensor::matrix({{2}}), Tensor::matrix({{3}}), Tensor::vector({4})) == Tensor::vector({24}));
    std::mt19937_64 rng(0);
    const Tensor V = testutil::random_tensor({4, 5}, rng);
    const Tensor K = testutil::random_tensor({4, 5}, rng);
    const Tensor q = testutil::random_tensor({4}, rng);
    const Tensor want = matvec(V, matvec(transpose(K), q));
    CHECK(max_abs_diff(linear_attention(V, K, q), want) <= 1e-6f);
    CHECK_THROWS_AS(linear_attention(V, Tensor({4, 4}), q), DimensionError);
}

TEST_CASE("dual_form_residual: hand cases") {
    const LinearLayerState id{Tensor::identity(2), 0.1f};
    CHECK(dual_form_residual(id, std::vector<TrainExample>{}, Tensor::vector({2, 3})) == 0.0f);
    const std::vector<TrainExample> one{{Tensor::vector({0, 1}), Tensor::vector({1, 0})}};
    CHECK(matvec(gd_update(id, one), Tensor::vector({2, 3})) == Tensor::vector({5, 3}));
    CHECK(dual_form_residual(id, one, Tensor::vector({2, 3})) == 0.0f);
}

TEST_CASE("dual_form_residual: random instances stay below 1e-5") {
    float worst = 0.0f;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t din = 1 + rng() % 16, dout = 1 + rng() % 16, n = rng() % 9;
        const LinearLayerState layer{testutil::random_tensor({dout, din}, rng), 0.1f};
        std::vector<TrainExample> ex;
        for (std::size_t i = 0; i < n; ++i)
            ex.push_back({testutil::random_tensor({din}, rng), testutil::random_tensor({dout}, rng)});
        worst = std::max(worst, dual_form_residual(layer, ex, testutil::random_tensor({din}, rng)));
    }
    CHECK(worst <= 1e-5f);
}

TEST_CASE("icl_decomposition: zero demonstrations reduce to the zero-shot output") {
    const auto ck = testutil::small_model(2, 0, true, 0.2f);
    const PromptSet ps = testutil::small_prompt(0, 3);
    const auto dec = icl_decomposition(ck, ps, 1);
    CHECK(dec.demo_tokens == 0);
    CHECK(dec.zero_shot_term == dec.attention_output);
    CHECK(dec.residual == 0.0f);
}

TEST_CASE("icl_decomposition: residual below 1e-5") {
    const auto ck0 = testutil::small_model(3, 0, true, 0.2f);
    CHECK(icl_decomposition_check(ck0, testutil::small_prompt(1, 0), 1) <= 1e-5f);
    const auto ck1 = testutil::small_model(3, 1, true, 0.2f);
    for (std::size_t layer = 0; layer < 3; ++layer)
        CHECK(icl_decomposition_check(ck1, testutil::small_prompt(4, 1), layer) <= 1e-5f);
    const auto soft = testutil::small_model(2, 0, false);
    CHECK_THROWS_AS(icl_decomposition(soft, testutil::small_prompt(1, 0), 0), ConfigError);
}

TEST_CASE("sgd: order matters for batch size one") {
    const auto layer = scalar_layer();
    const auto s = scalar_samples();
    const std::vector<std::size_t> fwd{0, 1}, rev{1, 0};
    const Tensor a = sgd_sequential(layer, s, fwd);
    const Tensor b = sgd_sequential(layer, s, rev);
    CHECK(a[0] == 0.06f);
    CHECK(b[0] == 0.1f);
    CHECK(std::abs(a[0] - b[0]) > 1e-3f);
    const std::vector<Sample> single{s[0]};
    const std::vector<std::size_t> only{0};
    CHECK(sgd_sequential(layer, single, only)[0] == 0.1f);
    const std::vector<std::size_t> not_perm{0, 0};
    CHECK_THROWS(sgd_sequential(layer, s, not_perm));
}

TEST_CASE("gd_batched: mean gradient, order-free") {
    const auto layer = scalar_layer();
    auto s = scalar_samples();
    CHECK(gd_batched(layer, s)[0] == 0.05f);
    std::swap(s[0], s[1]);
    CHECK(gd_batched(layer, s)[0] == 0.05f);

    const LinearLayerState w{Tensor::matrix({{1, 2}}), 0.1f};
    const std::vector<Sample> fitted{{Tensor::vector({1, 0}), Tensor::vector({1})},
                                     {Tensor::vector({0, 1}), Tensor::vector({2})}};
    CHECK(gd_batched(w, fitted) == w.W0);

    std::mt19937_64 rng(7);
    const LinearLayerState r{testutil::random_tensor({3, 4}, rng), 0.05f};
    std::vector<Sample> many;
    for (int i = 0; i < 5; ++i) many.push_back({testutil::random_tensor({4}, rng), testutil::random_tensor({3}, rng)});
    const Tensor base = gd_batched(r, many);
    for (int t = 0; t < 2; ++t) {
        std::shuffle(many.begin(), many.end(), rng);
        CHECK(gd_batched(r, many) == base);
    }
    const std::vector<Sample> bad{{Tensor::vector({1}), Tensor::vector({1})}};
    CHECK_THROWS_AS(gd_batched(r, bad), DimensionError);
}
