#pragma once

// Closed-form links between gradient descent on a linear layer and linear
// attention, plus the scalar SGD order-sensitivity demonstration.
//
// Conventions: weights are [d_out x d_in] and act on column vectors, so a
// layer maps x to W x. Error signals are already scaled by the learning rate.

#include <span>
#include <vector>

#include "bicl/model.hpp"
#include "bicl/prompt.hpp"
#include "bicl/tensor.hpp"

namespace bicl::dualform {

struct LinearLayerState {
    Tensor W0;        // [d_out x d_in]
    float lr = 0.1f;  // only used by the SGD helpers

    void validate() const;
};

struct TrainExample {
    Tensor x;  // [d_in]
    Tensor e;  // [d_out], error signal
};

// W0 + sum_i outer(e_i, x_i), summed in list order.
Tensor gd_update(const LinearLayerState& layer, std::span<const TrainExample> examples);

// sum_i V[:, i] * (K[:, i] . q) * score_scale, columns visited in order.
// V is [d_out x n], K is [d_in x n]; n may be zero.
Tensor linear_attention(const Tensor& V, const Tensor& K, const Tensor& q, float score_scale = 1.0f);

// Max-abs gap between the updated layer applied to x_query and the initial
// layer plus linear attention over (errors, inputs).
float dual_form_residual(const LinearLayerState& layer, std::span<const TrainExample> examples,
                         const Tensor& x_query);

// Split of the last-position attention output of a linear-mode checkpoint
// into the part driven by the query's own tokens and the part driven by the
// demonstration tokens.
struct Decomposition {
    Tensor attention_output;  // captured from the forward pass
    Tensor zero_shot_term;    // query positions, plus output bias
    Tensor demo_term;         // demonstration positions
    float residual = 0.0f;    // max-abs(attention_output - zero_shot_term - demo_term)
    std::size_t demo_tokens = 0;
};

// Throws ConfigError unless ckpt is in linear mode.
Decomposition icl_decomposition(const ModelCheckpoint& ckpt, const PromptSet& prompt, std::size_t layer);
float icl_decomposition_check(const ModelCheckpoint& ckpt, const PromptSet& prompt, std::size_t layer);

// Squared loss 0.5 * |W x - y|^2.
struct Sample {
    Tensor x;  // [d_in]
    Tensor y;  // [d_out]
};

// Batch-size-1 gradient steps in the given order (a permutation of sample
// indices). Arithmetic runs in double and is rounded once at the end.
Tensor sgd_sequential(const LinearLayerState& layer, std::span<const Sample> samples,
                      std::span<const std::size_t> order);

// One step with the mean gradient. Per-sample gradients are summed in a
// canonical order (lexicographic on the sample bytes), so any permutation of
// the input gives the same bits.
Tensor gd_batched(const LinearLayerState& layer, std::span<const Sample> samples);

}  // namespace bicl::dualform
