#pragma once

// Decoder-only transformer (pre-LN, GPT-2 block order, learned absolute
// positions) with a hook bus on the attention-block output.
//
// The hook site of layer L at position t is the attention output after the
// head concatenation and output projection, before it is added to the residual
// stream. A capture hook copies that vector out; an inject hook overwrites it
// and the forward pass continues from the replaced value.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bicl/tensor.hpp"
#include "bicl/tokenizer.hpp"

namespace bicl {

enum class PositionKind : std::uint32_t { LearnedAbsolute = 0 };

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t d_model = 0;
    std::size_t d_head = 0;
    std::size_t d_ff = 0;
    std::size_t vocab_size = 0;
    std::size_t max_positions = 0;
    PositionKind position_kind = PositionKind::LearnedAbsolute;
    // Linear-attention mode: raw scaled dot products instead of softmax, the
    // feed-forward sublayer contributes nothing (identity block), layer norms
    // are the identity.
    bool linear_mode = false;

    // Throws ConfigError when the fields are inconsistent.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv;  // projections stored [d_in x d_out]
    Tensor wo, bo;
    Tensor ln2_gamma, ln2_beta;
    Tensor w1, b1, w2, b2;

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
    Tensor tok_emb;  // [vocab x d_model]
    Tensor pos_emb;  // [max_positions x d_model]
    std::vector<LayerWeights> layers;
    Tensor lnf_gamma, lnf_beta;
    Tensor unembed;  // [d_model x vocab]

    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

// Visits every tensor in the canonical checkpoint order.
template <class Weights, class Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
    fn(std::string("tok_emb"), w.tok_emb);
    fn(std::string("pos_emb"), w.pos_emb);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& L = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "ln1.gamma", L.ln1_gamma);
        fn(p + "ln1.beta", L.ln1_beta);
        fn(p + "attn.wq", L.wq);
        fn(p + "attn.bq", L.bq);
        fn(p + "attn.wk", L.wk);
        fn(p + "attn.bk", L.bk);
        fn(p + "attn.wv", L.wv);
        fn(p + "attn.bv", L.bv);
        fn(p + "attn.wo", L.wo);
        fn(p + "attn.bo", L.bo);
        fn(p + "ln2.gamma", L.ln2_gamma);
        fn(p + "ln2.beta", L.ln2_beta);
        fn(p + "mlp.w1", L.w1);
        fn(p + "mlp.b1", L.b1);
        fn(p + "mlp.w2", L.w2);
        fn(p + "mlp.b2", L.b2);
    }
    fn(std::string("ln_f.gamma"), w.lnf_gamma);
    fn(std::string("ln_f.beta"), w.lnf_beta);
    fn(std::string("unembed"), w.unembed);
}

// Name and shape of every tensor a checkpoint with this config must carry.
std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_tensors(const ModelConfig& cfg);

// Zero-initialised weights with the right shapes (LN gammas set to 1).
ModelWeights make_weights(const ModelConfig& cfg);

struct ModelCheckpoint {
    ModelConfig config;
    Tokenizer tokenizer;
    ModelWeights weights;

    // Shapes consistent with config, all values finite. Throws LoadError
    // naming the offending tensor.
    void validate() const;

    friend bool operator==(const ModelCheckpoint&, const ModelCheckpoint&) = default;
};

struct InitOptions {
    float weight_std = 0.02f;
    float bias_std = 0.0f;
};

ModelCheckpoint make_random_checkpoint(const ModelConfig& cfg, Tokenizer tokenizer,
                                       std::uint64_t seed, InitOptions init = {});

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

// In-memory forms of the on-disk layout.
std::vector<std::uint8_t> serialize_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Hooks

struct HookSite {
    int layer = 0;
    int position = 0;
    friend auto operator<=>(const HookSite&, const HookSite&) = default;
};

enum class HookMode { Capture, Inject };

struct HookSpec {
    HookSite site;
    HookMode mode = HookMode::Capture;
    Tensor payload;  // [d_model], inject only

    static HookSpec capture(int layer, int position) { return {{layer, position}, HookMode::Capture, {}}; }
    static HookSpec inject(int layer, int position, Tensor payload) {
        return {{layer, position}, HookMode::Inject, std::move(payload)};
    }
};

// Residual stream entering a layer, for all positions of one sequence.
struct LayerSnapshot {
    std::size_t layer = 0;
    Tensor residual;  // [seq_len x d_model]
};

struct ForwardOptions {
    // Record the residual stream entering each listed layer.
    std::vector<std::size_t> snapshot_layers;
    // Resume from a snapshot of the same token sequence instead of embedding.
    const LayerSnapshot* resume = nullptr;
};

struct ForwardResult {
    Tensor logits;  // [seq_len x vocab]
    std::map<HookSite, Tensor> captures;
    std::map<std::size_t, LayerSnapshot> snapshots;

    std::span<const float> final_logits() const { return logits.row(logits.rows() - 1); }
};

ForwardResult forward(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                      std::span<const HookSpec> hooks = {}, const ForwardOptions& options = {});

// ---------------------------------------------------------------------------
// Classification readout

struct Verbalizer {
    std::string label;
    TokenId token = 0;
    friend bool operator==(const Verbalizer&, const Verbalizer&) = default;
};

struct Prediction {
    std::size_t label_index = 0;
    std::string label;
    std::vector<float> scores;  // verbalizer logits at the final position, label order

    friend bool operator==(const Prediction&, const Prediction&) = default;
};

// Argmax over verbalizer logits at the final position; ties go to the lower index.
Prediction score_labels(const ForwardResult& result, std::span<const Verbalizer> verbalizers);
Prediction score_labels(std::span<const float> final_logits, std::span<const Verbalizer> verbalizers);

// ---------------------------------------------------------------------------
// Golden logits: reference final-position logits produced outside the engine.
// File layout (u32 / binary32 little-endian): count, then per prompt the id
// count, the ids and vocab_size logits. vocab_size comes from the checkpoint.

struct GoldenRecord {
    std::vector<TokenId> ids;
    std::vector<float> logits;  // [vocab_size]

    friend bool operator==(const GoldenRecord&, const GoldenRecord&) = default;
};

void write_golden_logits(const std::filesystem::path& path, std::span<const GoldenRecord> records);
std::vector<GoldenRecord> read_golden_logits(const std::filesystem::path& path, std::size_t vocab_size);

struct GoldenComparison {
    std::size_t prompts = 0;
    double max_abs_diff = 0.0;
    std::size_t top1_agreements = 0;

    // 1e-3 max-abs and every argmax equal.
    bool passes(double tolerance = 1e-3) const { return max_abs_diff <= tolerance && top1_agreements == prompts; }
};

GoldenComparison compare_golden_logits(const ModelCheckpoint& ckpt, std::span<const GoldenRecord> records);

}  // namespace bicl
