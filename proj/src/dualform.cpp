#include "bicl/dualform.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "bicl/errors.hpp"
#include "kernels.hpp"

namespace bicl::dualform {

namespace {

void check_vector(const Tensor& t, std::size_t n, const char* what) {
    if (t.rank() != 1 || t.size() != n) {
        throw DimensionError(std::string(what) + ": expected [" + std::to_string(n) + "], got " + t.shape_string());
    }
}

void check_examples(const LinearLayerState& layer, std::span<const TrainExample> examples) {
    layer.validate();
    for (const TrainExample& ex : examples) {
        check_vector(ex.x, layer.W0.cols(), "example input");
        check_vector(ex.e, layer.W0.rows(), "example error");
    }
}

void check_samples(const LinearLayerState& layer, std::span<const Sample> samples) {
    layer.validate();
    if (samples.empty()) throw DimensionError("no samples");
    for (const Sample& s : samples) {
        check_vector(s.x, layer.W0.cols(), "sample input");
        check_vector(s.y, layer.W0.rows(), "sample target");
    }
}

// Gradient of 0.5 |W x - y|^2 with respect to W, added into grad.
void add_gradient(const std::vector<double>& w, std::size_t rows, std::size_t cols, const Sample& s,
                  std::vector<double>& grad) {
    for (std::size_t r = 0; r < rows; ++r) {
        double pred = 0.0;
        for (std::size_t c = 0; c < cols; ++c) pred += w[r * cols + c] * static_cast<double>(s.x[c]);
        const double err = pred - static_cast<double>(s.y[r]);
        for (std::size_t c = 0; c < cols; ++c) grad[r * cols + c] += err * static_cast<double>(s.x[c]);
    }
}

std::vector<double> widen(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor narrow(const std::vector<double>& w, std::size_t rows, std::size_t cols) {
    std::vector<float> out(w.size());
    std::transform(w.begin(), w.end(), out.begin(), [](double v) { return static_cast<float>(v); });
    return Tensor::matrix(rows, cols, std::move(out));
}

std::vector<std::uint8_t> sample_bytes(const Sample& s) {
    std::vector<std::uint8_t> b((s.x.size() + s.y.size()) * sizeof(float));
    std::memcpy(b.data(), s.x.values().data(), s.x.size() * sizeof(float));
    std::memcpy(b.data() + s.x.size() * sizeof(float), s.y.values().data(), s.y.size() * sizeof(float));
    return b;
}

}  // namespace

void LinearLayerState::validate() const {
    if (W0.rank() != 2) throw DimensionError("layer weights must be a matrix, got " + W0.shape_string());
    if (!W0.all_finite()) throw DimensionError("layer weights must be finite");
    if (!(lr > 0.0f) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive and finite");
}

Tensor gd_update(const LinearLayerState& layer, std::span<const TrainExample> examples) {
    check_examples(layer, examples);
    Tensor w = layer.W0;
    const std::size_t rows = w.rows(), cols = w.cols();
    for (const TrainExample& ex : examples)
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) w.at(r, c) += ex.e[r] * ex.x[c];
    return w;
}

Tensor linear_attention(const Tensor& V, const Tensor& K, const Tensor& q, float score_scale) {
    if (V.rank() != 2 || K.rank() != 2) throw DimensionError("linear_attention: V and K must be matrices");
    if (V.cols() != K.cols()) {
        throw DimensionError("linear_attention: V has " + std::to_string(V.cols()) + " columns, K has " +
                             std::to_string(K.cols()));
    }
    check_vector(q, K.rows(), "linear_attention query");
    Tensor out({V.rows()});
    for (std::size_t i = 0; i < V.cols(); ++i) {
        float dot = 0.0f;
        for (std::size_t j = 0; j < K.rows(); ++j) dot += q[j] * K.at(j, i);
        const float score = dot * score_scale;
        for (std::size_t r = 0; r < V.rows(); ++r) out[r] += score * V.at(r, i);
    }
    return out;
}

float dual_form_residual(const LinearLayerState& layer, std::span<const TrainExample> examples,
                         const Tensor& x_query) {
    check_examples(layer, examples);
    check_vector(x_query, layer.W0.cols(), "query");
    const Tensor updated = matvec(gd_update(layer, examples), x_query);

    Tensor E({layer.W0.rows(), examples.size()});
    Tensor X({layer.W0.cols(), examples.size()});
    for (std::size_t i = 0; i < examples.size(); ++i) {
        for (std::size_t r = 0; r < E.rows(); ++r) E.at(r, i) = examples[i].e[r];
        for (std::size_t r = 0; r < X.rows(); ++r) X.at(r, i) = examples[i].x[r];
    }
    const Tensor dual = add(matvec(layer.W0, x_query), linear_attention(E, X, x_query));
    return max_abs_diff(updated, dual);
}

Decomposition icl_decomposition(const ModelCheckpoint& ckpt, const PromptSet& prompt, std::size_t layer) {
    const ModelConfig& cfg = ckpt.config;
    if (!cfg.linear_mode) throw ConfigError("icl_decomposition needs a linear-mode checkpoint");
    if (layer >= cfg.n_layers) {
        throw HookError("layer " + std::to_string(layer) + " out of range for " + std::to_string(cfg.n_layers) +
                        "-layer model");
    }
    const auto tokens = render_prompt(ckpt.tokenizer, prompt, ShotLayout::n_shot(), cfg.max_positions);
    const auto query_tokens = ckpt.tokenizer.encode(render_query(prompt.tmpl, prompt.query));
    const std::size_t T = tokens.size();
    const std::size_t n_demo = T - query_tokens.size();
    const int last = static_cast<int>(T - 1);

    ForwardOptions opts;
    opts.snapshot_layers = {layer};
    const HookSpec hook = HookSpec::capture(static_cast<int>(layer), last);
    const ForwardResult fr = forward(ckpt, tokens, std::span<const HookSpec>(&hook, 1), opts);

    // Linear mode: no normalization, so the projections read the residual directly.
    const LayerWeights& L = ckpt.weights.layers[layer];
    const Tensor& x = fr.snapshots.at(layer).residual;
    const Tensor q = kernels::affine(x, L.wq, L.bq);
    const Tensor k = kernels::affine(x, L.wk, L.bk);
    const Tensor v = kernels::affine(x, L.wv, L.bv);
    const std::size_t d = cfg.d_model, dh = cfg.d_head;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Tensor zs_heads({1, d}), demo_heads({1, d});
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
        const std::size_t off = hd * dh;
        auto columns = [&](const Tensor& m, std::size_t from, std::size_t to) {
            Tensor out({dh, to - from});
            for (std::size_t s = from; s < to; ++s)
                for (std::size_t i = 0; i < dh; ++i) out.at(i, s - from) = m.at(s, off + i);
            return out;
        };
        Tensor qh({dh});
        for (std::size_t i = 0; i < dh; ++i) qh[i] = q.at(T - 1, off + i);
        const Tensor zs = linear_attention(columns(v, n_demo, T), columns(k, n_demo, T), qh, scale);
        const Tensor dm = linear_attention(columns(v, 0, n_demo), columns(k, 0, n_demo), qh, scale);
        for (std::size_t i = 0; i < dh; ++i) {
            zs_heads.at(0, off + i) = zs[i];
            demo_heads.at(0, off + i) = dm[i];
        }
    }
    // With no demo tokens this repeats the forward arithmetic step for step.
    Decomposition out;
    out.demo_tokens = n_demo;
    out.attention_output = fr.captures.at(hook.site);
    out.zero_shot_term = Tensor({d}, kernels::affine(zs_heads, L.wo, L.bo).values());
    out.demo_term = Tensor({d}, matmul(demo_heads, L.wo).values());
    out.residual = max_abs_diff(out.attention_output, add(out.zero_shot_term, out.demo_term));
    return out;
}

float icl_decomposition_check(const ModelCheckpoint& ckpt, const PromptSet& prompt, std::size_t layer) {
    return icl_decomposition(ckpt, prompt, layer).residual;
}

Tensor sgd_sequential(const LinearLayerState& layer, std::span<const Sample> samples,
                      std::span<const std::size_t> order) {
    check_samples(layer, samples);
    std::vector<bool> seen(samples.size(), false);
    if (order.size() != samples.size()) throw DimensionError("order must list every sample once");
    for (std::size_t i : order) {
        if (i >= samples.size() || seen[i]) throw DimensionError("order is not a permutation of the samples");
        seen[i] = true;
    }
    const std::size_t rows = layer.W0.rows(), cols = layer.W0.cols();
    std::vector<double> w = widen(layer.W0);
    std::vector<double> grad(w.size());
    for (std::size_t i : order) {
        std::fill(grad.begin(), grad.end(), 0.0);
        add_gradient(w, rows, cols, samples[i], grad);
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= static_cast<double>(layer.lr) * grad[j];
    }
    return narrow(w, rows, cols);
}

Tensor gd_batched(const LinearLayerState& layer, std::span<const Sample> samples) {
    check_samples(layer, samples);
    std::vector<std::vector<std::uint8_t>> keys;
    for (const Sample& s : samples) keys.push_back(sample_bytes(s));
    std::vector<std::size_t> canonical(samples.size());
    std::iota(canonical.begin(), canonical.end(), std::size_t{0});
    std::stable_sort(canonical.begin(), canonical.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });

    const std::size_t rows = layer.W0.rows(), cols = layer.W0.cols();
    std::vector<double> w = widen(layer.W0);
    std::vector<double> grad(w.size(), 0.0);
    for (std::size_t i : canonical) add_gradient(w, rows, cols, samples[i], grad);
    const double n = static_cast<double>(samples.size());
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= static_cast<double>(layer.lr) * grad[j] / n;
    return narrow(w, rows, cols);
}

}  // namespace bicl::dualform
