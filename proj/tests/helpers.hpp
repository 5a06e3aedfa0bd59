#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bicl/model.hpp"
#include "bicl/prompt.hpp"
#include "bicl/tensor.hpp"
#include "bicl/tokenizer.hpp"

namespace testutil {

inline bicl::Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, float lo = -1.0f,
                                  float hi = 1.0f) {
    bicl::Tensor t(std::move(shape));
    std::uniform_real_distribution<float> u(lo, hi);
    for (float& v : t.data()) v = u(rng);
    return t;
}

// Word vocabulary used by the hand-built prompts below.
inline bicl::Tokenizer small_tokenizer() {
    std::vector<std::string> table{"\n", "=", "A", "B"};
    for (int i = 0; i < 12; ++i) table.push_back("w" + std::to_string(i));
    return bicl::Tokenizer(table);
}

inline bicl::ModelConfig small_config(std::size_t layers, std::size_t vocab, bool linear = false,
                                      std::size_t max_positions = 48) {
    bicl::ModelConfig c;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_head = 4;
    c.d_ff = 16;
    c.vocab_size = vocab;
    c.max_positions = max_positions;
    c.linear_mode = linear;
    return c;
}

inline bicl::ModelCheckpoint small_model(std::size_t layers, std::uint64_t seed, bool linear = false,
                                         float std = 0.3f, std::size_t max_positions = 48) {
    auto tok = small_tokenizer();
    return bicl::make_random_checkpoint(small_config(layers, tok.size(), linear, max_positions), tok, seed,
                                        {std, std * 0.5f});
}

// Prompt set over small_tokenizer words with labels A/B.
inline bicl::PromptSet small_prompt(std::size_t n_demos, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto tok = small_tokenizer();
    bicl::PromptSet ps;
    for (std::size_t i = 0; i < n_demos; ++i) {
        ps.demos.push_back({"w" + std::to_string(rng() % 12), rng() % 2 ? "A" : "B"});
    }
    ps.query = "w" + std::to_string(rng() % 12);
    const std::vector<std::string> labels{"A", "B"};
    ps.verbalizers = bicl::make_verbalizers(tok, labels);
    ps.gold = "A";
    return ps;
}

}  // namespace testutil
