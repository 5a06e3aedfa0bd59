#pragma once

// Order-agnostic in-context inference. Each demonstration is run on its own
// as a 1-shot prompt; the attention outputs at the query's last position are
// captured at one layer, averaged in a canonical order, and written into the
// zero-shot run of the query at the same layer.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bicl/model.hpp"
#include "bicl/prompt.hpp"
#include "bicl/tensor.hpp"

namespace bicl::batchicl {

struct CaptureRecord {
    std::size_t layer = 0;
    std::size_t position = 0;
    std::string demo_text;  // rendered demo segment
    std::uint64_t key = 0;  // demo_key of the demo
    Tensor vector;          // [d_model]
};

struct AggregateState {
    std::size_t layer = 0;
    Tensor vector;  // [d_model]
    std::size_t epoch = 1;
    std::size_t source_count = 0;

    friend bool operator==(const AggregateState&, const AggregateState&) = default;
};

// One forward over the full n-shot prompt. Throws ContextOverflowError when it
// does not fit; never truncates.
Prediction run_standard_icl(const ModelCheckpoint& ckpt, const PromptSet& prompts);

// Query alone under the template.
Prediction run_zero_shot(const ModelCheckpoint& ckpt, const PromptSet& prompts);

// One record per demo, in demo order.
std::vector<CaptureRecord> capture_one_shot(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer);

// Mean of the capture vectors, summed in (key, demo_text) order. Throws
// std::invalid_argument on an empty list or mixed layers.
AggregateState aggregate(std::span<const CaptureRecord> captures);

Prediction run_zero_shot_injected(const ModelCheckpoint& ckpt, const PromptSet& prompts, const AggregateState& agg);

Prediction batch_icl(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer);

struct EpochOptions {
    // Reuse each 1-shot run's residual below the injection layer instead of
    // recomputing it. Results are identical either way.
    bool cache_lower_layers = true;
};

// Aggregate after `epochs` rounds. Round 1 captures at `layer`; round e >= 2
// reruns every 1-shot prompt with the previous aggregate injected at
// layer + e - 2 and captures at layer + e - 1.
AggregateState multi_epoch_aggregate(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer,
                                     std::size_t epochs, EpochOptions options = {});

// Injects the final aggregate into the zero-shot run at layer + epochs - 1.
Prediction multi_epoch_batch_icl(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer,
                                 std::size_t epochs, EpochOptions options = {});

// Mean over all N^2 ordered demo pairs (i, j) of the layer + 1 capture of
// demo i's 1-shot run with demo j's layer capture injected at `layer`. In
// linear mode this is the pairwise expansion of the 2-epoch aggregate, exact
// up to terms of second order in the injected vectors.
Tensor ordered_pair_mean(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer);

struct LayerSweep {
    std::vector<std::size_t> layers;
    std::vector<double> accuracies;  // parallel to layers
    std::size_t best_layer = 0;      // smallest layer with the highest accuracy
};

// Batch-ICL accuracy on a labelled set for each candidate layer.
LayerSweep sweep_layers(const ModelCheckpoint& ckpt, std::span<const PromptSet> validation,
                        std::span<const std::size_t> candidates);

std::size_t select_k(const ModelCheckpoint& ckpt, std::span<const PromptSet> validation,
                     std::span<const std::size_t> candidates);

// Every layer of the model as candidates.
std::vector<std::size_t> all_layers(const ModelCheckpoint& ckpt);

// Linear mode only: for each demo, max-abs gap between the query-position
// term of its 1-shot run at `layer` and the zero-shot attention output. Both
// see the same query tokens, but at shifted positions, so the gap is the
// drift between the per-demo and the true zero-shot initial weights.
std::vector<float> zero_shot_drift(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer);

}  // namespace bicl::batchicl
