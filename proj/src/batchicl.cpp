#include "bicl/batchicl.hpp"

#include <algorithm>
#include <optional>
#include <stdexcept>

#include "bicl/dualform.hpp"
#include "bicl/errors.hpp"

namespace bicl::batchicl {

namespace {

void check_layer(const ModelCheckpoint& ckpt, std::size_t layer) {
    if (layer >= ckpt.config.n_layers) {
        throw HookError("layer " + std::to_string(layer) + " out of range for a " +
                        std::to_string(ckpt.config.n_layers) + "-layer model");
    }
}

std::vector<TokenId> one_shot_tokens(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t i) {
    return render_prompt(ckpt.tokenizer, prompts, ShotLayout::one_shot(i), ckpt.config.max_positions);
}

std::vector<TokenId> zero_shot_tokens(const ModelCheckpoint& ckpt, const PromptSet& prompts) {
    return render_prompt(ckpt.tokenizer, prompts, ShotLayout::zero_shot(), ckpt.config.max_positions);
}

CaptureRecord make_record(const PromptSet& prompts, std::size_t i, std::size_t layer, std::size_t position,
                          Tensor vector) {
    return {layer, position, render_demo(prompts.tmpl, prompts.demos[i]), demo_key(prompts.tmpl, prompts.demos[i]),
            std::move(vector)};
}

}  // namespace

Prediction run_standard_icl(const ModelCheckpoint& ckpt, const PromptSet& prompts) {
    const auto ids = render_prompt(ckpt.tokenizer, prompts, ShotLayout::n_shot(), ckpt.config.max_positions);
    return score_labels(forward(ckpt, ids), prompts.verbalizers);
}

Prediction run_zero_shot(const ModelCheckpoint& ckpt, const PromptSet& prompts) {
    return score_labels(forward(ckpt, zero_shot_tokens(ckpt, prompts)), prompts.verbalizers);
}

std::vector<CaptureRecord> capture_one_shot(const ModelCheckpoint& ckpt, const PromptSet& prompts,
                                            std::size_t layer) {
    check_layer(ckpt, layer);
    if (prompts.demos.empty()) throw std::invalid_argument("capture_one_shot: prompt set has no demos");
    std::vector<CaptureRecord> out;
    out.reserve(prompts.demos.size());
    for (std::size_t i = 0; i < prompts.demos.size(); ++i) {
        const auto ids = one_shot_tokens(ckpt, prompts, i);
        const HookSpec hook = HookSpec::capture(static_cast<int>(layer), static_cast<int>(ids.size() - 1));
        ForwardResult fr = forward(ckpt, ids, std::span<const HookSpec>(&hook, 1));
        out.push_back(make_record(prompts, i, layer, ids.size() - 1, std::move(fr.captures.at(hook.site))));
    }
    return out;
}

AggregateState aggregate(std::span<const CaptureRecord> captures) {
    if (captures.empty()) throw std::invalid_argument("aggregate: no captures");
    const std::size_t layer = captures.front().layer;
    std::vector<const CaptureRecord*> order;
    for (const CaptureRecord& c : captures) {
        if (c.layer != layer) {
            throw std::invalid_argument("aggregate: captures from layers " + std::to_string(layer) + " and " +
                                        std::to_string(c.layer));
        }
        order.push_back(&c);
    }
    std::stable_sort(order.begin(), order.end(), [](const CaptureRecord* a, const CaptureRecord* b) {
        if (a->key != b->key) return a->key < b->key;
        return a->demo_text < b->demo_text;
    });
    std::vector<Tensor> rows;
    rows.reserve(order.size());
    for (const CaptureRecord* c : order) rows.push_back(c->vector);
    AggregateState agg;
    agg.layer = layer;
    agg.vector = mean_rows(rows);
    agg.epoch = 1;
    agg.source_count = captures.size();
    if (!agg.vector.all_finite()) throw std::invalid_argument("aggregate: non-finite capture vector");
    return agg;
}

Prediction run_zero_shot_injected(const ModelCheckpoint& ckpt, const PromptSet& prompts, const AggregateState& agg) {
    check_layer(ckpt, agg.layer);
    const auto ids = zero_shot_tokens(ckpt, prompts);
    const HookSpec hook =
        HookSpec::inject(static_cast<int>(agg.layer), static_cast<int>(ids.size() - 1), agg.vector);
    return score_labels(forward(ckpt, ids, std::span<const HookSpec>(&hook, 1)), prompts.verbalizers);
}

Prediction batch_icl(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer) {
    const auto captures = capture_one_shot(ckpt, prompts, layer);
    return run_zero_shot_injected(ckpt, prompts, aggregate(captures));
}

AggregateState multi_epoch_aggregate(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer,
                                     std::size_t epochs, EpochOptions options) {
    const std::size_t n_layers = ckpt.config.n_layers;
    if (epochs == 0) throw std::invalid_argument("multi_epoch: epochs must be at least 1");
    check_layer(ckpt, layer);
    if (layer + epochs - 1 >= n_layers) {
        throw HookError("multi_epoch: layer " + std::to_string(layer) + " with " + std::to_string(epochs) +
                        " epochs needs layer " + std::to_string(layer + epochs - 1) + "; at most " +
                        std::to_string(n_layers - layer) + " epochs fit from this layer");
    }
    if (prompts.demos.empty()) throw std::invalid_argument("multi_epoch: prompt set has no demos");
    const std::size_t n = prompts.demos.size();

    std::vector<std::vector<TokenId>> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = one_shot_tokens(ckpt, prompts, i);

    // Round 1, keeping the residual entering every later injection layer.
    ForwardOptions first;
    if (options.cache_lower_layers)
        for (std::size_t e = 2; e <= epochs; ++e) first.snapshot_layers.push_back(layer + e - 2);
    std::vector<std::map<std::size_t, LayerSnapshot>> cache(n);
    std::vector<CaptureRecord> records;
    for (std::size_t i = 0; i < n; ++i) {
        const HookSpec hook = HookSpec::capture(static_cast<int>(layer), static_cast<int>(ids[i].size() - 1));
        ForwardResult fr = forward(ckpt, ids[i], std::span<const HookSpec>(&hook, 1), first);
        cache[i] = std::move(fr.snapshots);
        records.push_back(make_record(prompts, i, layer, ids[i].size() - 1, std::move(fr.captures.at(hook.site))));
    }
    AggregateState agg = aggregate(records);

    for (std::size_t e = 2; e <= epochs; ++e) {
        const std::size_t inject_at = layer + e - 2, capture_at = layer + e - 1;
        records.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const int last = static_cast<int>(ids[i].size() - 1);
            const HookSpec hooks[2] = {HookSpec::inject(static_cast<int>(inject_at), last, agg.vector),
                                       HookSpec::capture(static_cast<int>(capture_at), last)};
            ForwardOptions opts;
            if (options.cache_lower_layers) opts.resume = &cache[i].at(inject_at);
            ForwardResult fr = forward(ckpt, ids[i], hooks, opts);
            records.push_back(make_record(prompts, i, capture_at, ids[i].size() - 1,
                                          std::move(fr.captures.at(hooks[1].site))));
        }
        agg = aggregate(records);
        agg.epoch = e;
    }
    return agg;
}

Prediction multi_epoch_batch_icl(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer,
                                 std::size_t epochs, EpochOptions options) {
    return run_zero_shot_injected(ckpt, prompts, multi_epoch_aggregate(ckpt, prompts, layer, epochs, options));
}

Tensor ordered_pair_mean(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer) {
    check_layer(ckpt, layer);
    if (layer + 1 >= ckpt.config.n_layers) throw HookError("ordered_pair_mean: needs a layer above " + std::to_string(layer));
    const auto first = capture_one_shot(ckpt, prompts, layer);
    const std::size_t n = prompts.demos.size();
    std::vector<Tensor> terms;
    terms.reserve(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ids = one_shot_tokens(ckpt, prompts, i);
        const int last = static_cast<int>(ids.size() - 1);
        for (std::size_t j = 0; j < n; ++j) {
            const HookSpec hooks[2] = {HookSpec::inject(static_cast<int>(layer), last, first[j].vector),
                                       HookSpec::capture(static_cast<int>(layer + 1), last)};
            terms.push_back(forward(ckpt, ids, hooks).captures.at(hooks[1].site));
        }
    }
    return mean_rows(terms);
}

LayerSweep sweep_layers(const ModelCheckpoint& ckpt, std::span<const PromptSet> validation,
                        std::span<const std::size_t> candidates) {
    if (candidates.empty()) throw std::invalid_argument("select_k: empty candidate range");
    if (validation.empty()) throw std::invalid_argument("select_k: empty validation set");
    LayerSweep sweep;
    double best = -1.0;
    for (std::size_t k : candidates) {
        check_layer(ckpt, k);
        std::size_t correct = 0;
        for (const PromptSet& ps : validation)
            if (batch_icl(ckpt, ps, k).label_index == ps.gold_index()) ++correct;
        const double acc = static_cast<double>(correct) / static_cast<double>(validation.size());
        sweep.layers.push_back(k);
        sweep.accuracies.push_back(acc);
        if (acc > best || (acc == best && k < sweep.best_layer)) {
            best = acc;
            sweep.best_layer = k;
        }
    }
    return sweep;
}

std::size_t select_k(const ModelCheckpoint& ckpt, std::span<const PromptSet> validation,
                     std::span<const std::size_t> candidates) {
    return sweep_layers(ckpt, validation, candidates).best_layer;
}

std::vector<std::size_t> all_layers(const ModelCheckpoint& ckpt) {
    std::vector<std::size_t> out(ckpt.config.n_layers);
    for (std::size_t l = 0; l < out.size(); ++l) out[l] = l;
    return out;
}

std::vector<float> zero_shot_drift(const ModelCheckpoint& ckpt, const PromptSet& prompts, std::size_t layer) {
    if (!ckpt.config.linear_mode) throw ConfigError("zero_shot_drift needs a linear-mode checkpoint");
    check_layer(ckpt, layer);
    const auto ids = zero_shot_tokens(ckpt, prompts);
    const HookSpec hook = HookSpec::capture(static_cast<int>(layer), static_cast<int>(ids.size() - 1));
    const Tensor zero_shot = forward(ckpt, ids, std::span<const HookSpec>(&hook, 1)).captures.at(hook.site);
    std::vector<float> out;
    for (std::size_t i = 0; i < prompts.demos.size(); ++i) {
        PromptSet single = prompts;
        single.demos = {prompts.demos[i]};
        out.push_back(max_abs_diff(dualform::icl_decomposition(ckpt, single, layer).zero_shot_term, zero_shot));
    }
    return out;
}

}  // namespace bicl::batchicl
