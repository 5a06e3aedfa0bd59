#pragma once

// Desk-scale training for toy checkpoints: next-token cross-entropy on the
// demonstration-label positions of concatenated demonstration streams,
// AdamW with linear warmup and cosine decay. Single-threaded and
// deterministic: the same config and seed give the same checkpoint bytes.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "bicl/model.hpp"
#include "bicl/tasks.hpp"

namespace bicl {

inline constexpr std::size_t kAnchorAlways = static_cast<std::size_t>(-1);

struct TrainConfig {
    ModelConfig model;
    std::size_t steps = 0;
    std::size_t batch_size = 8;
    std::size_t seq_tokens = 0;  // 0: use max_positions
    float lr = 3e-3f;
    float min_lr_ratio = 0.1f;
    std::size_t warmup_steps = 200;
    float weight_decay = 0.01f;
    float grad_clip = 1.0f;
    float init_std = 0.02f;
    std::uint64_t seed = 0;
    // Streams use the task's anchor_rate only for the first anchor_steps
    // steps, then start from a random map. The early anchor lets the hidden
    // classes be learned; dropping it removes the resulting label prior.
    std::size_t anchor_steps = kAnchorAlways;

    // After training (steps > 0), best-order n-shot accuracy on clean held-out
    // instances must reach this or training throws TrainingError.
    double accuracy_gate = 0.9;
    std::size_t gate_shots = 4;
    std::size_t gate_instances = 100;
};

struct TrainProgress {
    std::size_t step = 0;
    float loss = 0.0f;
};

struct TrainResult {
    ModelCheckpoint checkpoint;
    std::vector<float> losses;   // mean batch loss per step
    double gate_accuracy = 0.0;  // best-order clean n-shot accuracy
};

// Frozen reference setup used by the acceptance suite and `bicl train-toy`:
// the task its stream is drawn from, and the model / optimizer settings sized
// for a single CPU core.
TaskSpec reference_task_spec();
TrainConfig reference_train_config();

TrainResult train_toy_model(const TrainConfig& config, const TaskSpec& stream,
                            const std::function<void(const TrainProgress&)>& on_progress = {});

// Mean cross-entropy over label_positions and its gradient, accumulated
// (scaled by grad_scale) into grads. Exposed for gradient checking.
float sequence_loss_and_grad(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                             std::span<const std::size_t> label_positions, ModelWeights* grads,
                             float grad_scale = 1.0f);

// Best accuracy over all demo orders (same order index for every instance) of
// standard n-shot prompting on noise-free instances of the stream's task.
double best_order_accuracy(const ModelCheckpoint& ckpt, const TaskSpec& stream, std::size_t shots,
                           std::size_t instances, std::uint64_t seed);

}  // namespace bicl
