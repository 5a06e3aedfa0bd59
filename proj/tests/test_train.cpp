#include <cmath>

#include "doctest.h"

#include "bicl/batchicl.hpp"
#include "bicl/bench.hpp"
#include "bicl/errors.hpp"
#include "bicl/train.hpp"

using namespace bicl;

namespace {

TaskSpec tiny_task() {
    TaskSpec s;
    s.n_inputs = 8;
    s.n_demos = 4;
    s.max_prefix = 1;
    s.anchor_rate = 0.5;
    return s;
}

TrainConfig tiny_config(const TaskSpec& s) {
    TrainConfig c;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.d_model = 8;
    c.model.d_head = 4;
    c.model.d_ff = 16;
    c.model.vocab_size = toy_tokenizer(s).size();
    c.model.max_positions = 32;
    c.steps = 10;
    c.batch_size = 2;
    c.warmup_steps = 3;
    c.accuracy_gate = 0.0;
    c.seed = 4;
    return c;
}

}  // namespace

TEST_CASE("train: analytic gradient matches central differences") {
    const TaskSpec s = tiny_task();
    const Tokenizer tok = toy_tokenizer(s);
    auto ck = make_random_checkpoint(tiny_config(s).model, tok, 3, {0.3f, 0.1f});
    std::mt19937_64 rng(5);
    const auto seq = sample_training_sequence(s, tok, rng, 24);
    ModelWeights grad = make_weights(ck.config);
    for_each_tensor(grad, [](const std::string&, Tensor& t) {
        for (float& v : t.data()) v = 0.0f;
    });
    const float loss = sequence_loss_and_grad(ck, seq.tokens, seq.label_positions, &grad);
    CHECK(std::isfinite(loss));

    std::vector<Tensor*> params, grads;
    std::vector<std::string> names;
    for_each_tensor(ck.weights, [&](const std::string& n, Tensor& t) {
        params.push_back(&t);
        names.push_back(n);
    });
    for_each_tensor(grad, [&](const std::string&, Tensor& t) { grads.push_back(&t); });
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::size_t bad = 0;
        for (std::size_t j = 0; j < params[i]->size(); j += 3) {
            const float orig = params[i]->data()[j];
            const float h = 1e-2f;
            params[i]->data()[j] = orig + h;
            const float up = sequence_loss_and_grad(ck, seq.tokens, seq.label_positions, nullptr);
            params[i]->data()[j] = orig - h;
            const float down = sequence_loss_and_grad(ck, seq.tokens, seq.label_positions, nullptr);
            params[i]->data()[j] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = grads[i]->data()[j];
            bad += std::abs(fd - an) > 1e-3 + 2e-2 * std::abs(an);
        }
        CAPTURE(names[i]);
        CHECK(bad == 0);
    }
}

TEST_CASE("train: loss matches the inference forward") {
    const TaskSpec s = tiny_task();
    const Tokenizer tok = toy_tokenizer(s);
    const auto ck = make_random_checkpoint(tiny_config(s).model, tok, 8, {0.3f, 0.1f});
    std::mt19937_64 rng(2);
    const auto seq = sample_training_sequence(s, tok, rng, 24);
    const auto out = forward(ck, seq.tokens);
    double total = 0.0;
    for (std::size_t p : seq.label_positions) {
        const auto row = out.logits.row(p);
        double mx = row[0], z = 0.0;
        for (float v : row) mx = std::max<double>(mx, v);
        for (float v : row) z += std::exp(v - mx);
        total += std::log(z) + mx - row[seq.tokens[p + 1]];
    }
    CHECK(std::abs(sequence_loss_and_grad(ck, seq.tokens, seq.label_positions, nullptr) -
                   total / seq.label_positions.size()) <= 1e-5);
}

TEST_CASE("train: same seed gives identical checkpoint bytes") {
    const TaskSpec s = tiny_task();
    const TrainConfig c = tiny_config(s);
    const auto a = train_toy_model(c, s);
    const auto b = train_toy_model(c, s);
    CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));
    CHECK(a.losses.size() == c.steps);
    TrainConfig other = c;
    other.seed = 5;
    CHECK(serialize_checkpoint(train_toy_model(other, s).checkpoint) != serialize_checkpoint(a.checkpoint));
}

TEST_CASE("train: zero steps leaves an untrained model at chance") {
    TaskSpec s = tiny_task();
    TrainConfig c = tiny_config(s);
    c.steps = 0;
    c.accuracy_gate = 0.9;  // not applied without training
    const auto r = train_toy_model(c, s);
    const auto data = generate_dataset(s, toy_tokenizer(s), 1, 400);
    const double acc = bench::standard_accuracy(r.checkpoint, data);
    CHECK(std::abs(acc - 0.5) <= 3.0 * std::sqrt(0.25 / 400));
}

TEST_CASE("train: failures are loud") {
    const TaskSpec s = tiny_task();
    TrainConfig c = tiny_config(s);
    c.model.n_layers = 9;
    CHECK_THROWS_AS(train_toy_model(c, s), ConfigError);
    c = tiny_config(s);
    c.model.d_model = 256;
    c.model.d_head = 128;
    CHECK_THROWS_AS(train_toy_model(c, s), ConfigError);

    c = tiny_config(s);
    c.steps = 3;
    c.accuracy_gate = 1.01;
    CHECK_THROWS_AS(train_toy_model(c, s), TrainingError);

    c = tiny_config(s);
    c.lr = 1e30f;
    c.weight_decay = 0.0f;
    c.steps = 20;
    CHECK_THROWS_AS(train_toy_model(c, s), TrainingError);

    const auto ck = make_random_checkpoint([&] {
        auto m = tiny_config(s).model;
        m.linear_mode = true;
        return m;
    }(), toy_tokenizer(s), 1);
    const std::vector<TokenId> toks{0, 1, 2};
    const std::vector<std::size_t> pos{0};
    CHECK_THROWS_AS(sequence_loss_and_grad(ck, toks, pos, nullptr), ConfigError);
}
