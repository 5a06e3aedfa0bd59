#include "bicl/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "bicl/errors.hpp"
#include "kernels.hpp"

namespace bicl {

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_head == 0 || vocab_size == 0 ||
        max_positions == 0) {
        throw ConfigError("model config: all dimensions must be positive");
    }
    if (n_heads * d_head != d_model) {
        throw ConfigError("model config: n_heads * d_head != d_model (" + std::to_string(n_heads) +
                          " * " + std::to_string(d_head) + " != " + std::to_string(d_model) + ")");
    }
    if (d_ff == 0) throw ConfigError("model config: d_ff must be positive");
    if (position_kind != PositionKind::LearnedAbsolute) {
        throw ConfigError("model config: unsupported position kind");
    }
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_tensors(const ModelConfig& cfg) {
    ModelWeights w = make_weights(cfg);
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    for_each_tensor(w, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t.shape()); });
    return out;
}

ModelWeights make_weights(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model, f = cfg.d_ff;
    auto ones = [](std::size_t n) {
        Tensor t({n});
        for (float& v : t.data()) v = 1.0f;
        return t;
    };
    ModelWeights w;
    w.tok_emb = Tensor({cfg.vocab_size, d});
    w.pos_emb = Tensor({cfg.max_positions, d});
    w.layers.resize(cfg.n_layers);
    for (auto& L : w.layers) {
        L.ln1_gamma = ones(d);
        L.ln1_beta = Tensor({d});
        L.wq = Tensor({d, d});
        L.bq = Tensor({d});
        L.wk = Tensor({d, d});
        L.bk = Tensor({d});
        L.wv = Tensor({d, d});
        L.bv = Tensor({d});
        L.wo = Tensor({d, d});
        L.bo = Tensor({d});
        L.ln2_gamma = ones(d);
        L.ln2_beta = Tensor({d});
        L.w1 = Tensor({d, f});
        L.b1 = Tensor({f});
        L.w2 = Tensor({f, d});
        L.b2 = Tensor({d});
    }
    w.lnf_gamma = ones(d);
    w.lnf_beta = Tensor({d});
    w.unembed = Tensor({d, cfg.vocab_size});
    return w;
}

void ModelCheckpoint::validate() const {
    try {
        config.validate();
    } catch (const ConfigError& e) {
        throw LoadError(e.what());
    }
    if (tokenizer.size() != config.vocab_size) {
        throw LoadError("tokenizer table has " + std::to_string(tokenizer.size()) +
                        " entries, config declares vocab_size " + std::to_string(config.vocab_size));
    }
    if (weights.layers.size() != config.n_layers) {
        throw LoadError("checkpoint has " + std::to_string(weights.layers.size()) + " layers, config declares " +
                        std::to_string(config.n_layers));
    }
    const auto expected = expected_tensors(config);
    std::size_t i = 0;
    for_each_tensor(weights, [&](const std::string& name, const Tensor& t) {
        if (t.shape() != expected[i].second) {
            throw LoadError("tensor '" + name + "' has shape " + t.shape_string() + ", expected " +
                            Tensor(expected[i].second).shape_string());
        }
        if (!t.all_finite()) throw LoadError("tensor '" + name + "' contains non-finite values");
        ++i;
    });
}

ModelCheckpoint make_random_checkpoint(const ModelConfig& cfg, Tokenizer tokenizer, std::uint64_t seed,
                                       InitOptions init) {
    cfg.validate();
    if (tokenizer.size() != cfg.vocab_size) {
        throw ConfigError("tokenizer size does not match vocab_size");
    }
    ModelCheckpoint ckpt{cfg, std::move(tokenizer), make_weights(cfg)};
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> weight(0.0f, init.weight_std);
    std::normal_distribution<float> bias(0.0f, init.bias_std > 0.0f ? init.bias_std : 1.0f);
    for_each_tensor(ckpt.weights, [&](const std::string& name, Tensor& t) {
        const bool is_norm = name.find("ln") != std::string::npos;
        const bool is_bias = t.rank() == 1;
        if (is_norm) return;
        if (is_bias) {
            if (init.bias_std > 0.0f)
                for (float& v : t.data()) v = bias(rng);
            return;
        }
        for (float& v : t.data()) v = weight(rng);
    });
    return ckpt;
}

// ---------------------------------------------------------------------------

namespace {

void validate_hooks(const ModelConfig& cfg, std::size_t seq_len, std::span<const HookSpec> hooks) {
    std::set<std::pair<HookSite, HookMode>> seen;
    std::map<HookSite, HookMode> modes;
    for (const HookSpec& h : hooks) {
        if (h.site.layer < 0 || static_cast<std::size_t>(h.site.layer) >= cfg.n_layers) {
            throw HookError("hook layer " + std::to_string(h.site.layer) + " outside [0, " +
                            std::to_string(cfg.n_layers) + ")");
        }
        if (h.site.position < 0 || static_cast<std::size_t>(h.site.position) >= seq_len) {
            throw HookError("hook position " + std::to_string(h.site.position) + " outside [0, " +
                            std::to_string(seq_len) + ")");
        }
        if (h.mode == HookMode::Inject && h.payload.shape() != std::vector<std::size_t>{cfg.d_model}) {
            throw HookError("inject payload has shape " + h.payload.shape_string() + ", expected [" +
                            std::to_string(cfg.d_model) + "]");
        }
        if (!seen.insert({h.site, h.mode}).second) {
            throw HookError("duplicate hook at layer " + std::to_string(h.site.layer) + ", position " +
                            std::to_string(h.site.position));
        }
        auto [it, inserted] = modes.emplace(h.site, h.mode);
        if (!inserted && it->second != h.mode) {
            throw HookError("capture and inject at the same site (layer " + std::to_string(h.site.layer) +
                            ", position " + std::to_string(h.site.position) + ")");
        }
    }
}

float gelu(float x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

}  // namespace

ForwardResult forward(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                      std::span<const HookSpec> hooks, const ForwardOptions& options) {
    const ModelConfig& cfg = ckpt.config;
    const ModelWeights& W = ckpt.weights;
    const std::size_t T = tokens.size();
    const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head;
    if (T == 0) throw DimensionError("forward: empty token sequence");
    if (T > cfg.max_positions) {
        throw ContextOverflowError("forward: sequence of " + std::to_string(T) + " tokens exceeds max_positions " +
                                       std::to_string(cfg.max_positions),
                                   T, cfg.max_positions);
    }
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw DimensionError("forward: token id " + std::to_string(t) + " out of range");
        }
    }
    validate_hooks(cfg, T, hooks);

    ForwardResult result;
    Tensor x({T, d});
    std::size_t start_layer = 0;
    if (options.resume) {
        if (options.resume->layer > cfg.n_layers || options.resume->residual.shape() != x.shape()) {
            throw DimensionError("forward: resume snapshot does not match this sequence");
        }
        start_layer = options.resume->layer;
        x = options.resume->residual;
    } else {
        for (std::size_t t = 0; t < T; ++t) {
            auto e = W.tok_emb.row(static_cast<std::size_t>(tokens[t]));
            auto p = W.pos_emb.row(t);
            auto xr = x.row(t);
            for (std::size_t i = 0; i < d; ++i) xr[i] = e[i] + p[i];
        }
    }
    for (const HookSpec& h : hooks) {
        if (static_cast<std::size_t>(h.site.layer) < start_layer) {
            throw HookError("hook at layer " + std::to_string(h.site.layer) + " precedes resume layer " +
                            std::to_string(start_layer));
        }
    }
    auto wants_snapshot = [&](std::size_t l) {
        return std::find(options.snapshot_layers.begin(), options.snapshot_layers.end(), l) !=
               options.snapshot_layers.end();
    };

    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    constexpr float kEps = 1e-5f;
    Tensor h({T, d});
    std::vector<float> scores(T);

    for (std::size_t l = start_layer; l < cfg.n_layers; ++l) {
        if (wants_snapshot(l)) result.snapshots[l] = LayerSnapshot{l, x};
        const LayerWeights& L = W.layers[l];

        if (cfg.linear_mode) {
            h = x;
        } else {
            for (std::size_t t = 0; t < T; ++t)
                layer_norm_into(x.row(t), L.ln1_gamma.data(), L.ln1_beta.data(), kEps, h.row(t));
        }
        Tensor q = kernels::affine(h, L.wq, L.bq);
        Tensor k = kernels::affine(h, L.wk, L.bk);
        Tensor v = kernels::affine(h, L.wv, L.bv);

        Tensor o({T, d});
        for (std::size_t hd = 0; hd < H; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t t = 0; t < T; ++t) {
                const float* qt = &q.at(t, off);
                for (std::size_t s = 0; s <= t; ++s) {
                    const float* ks = &k.at(s, off);
                    float dot = 0.0f;
                    for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * ks[i];
                    scores[s] = dot;
                }
                std::span<float> row(scores.data(), t + 1);
                if (cfg.linear_mode) {
                    for (float& sc : row) sc *= scale;
                } else {
                    softmax_inplace(row, scale);
                }
                float* ot = &o.at(t, off);
                for (std::size_t s = 0; s <= t; ++s) {
                    const float p = row[s];
                    const float* vs = &v.at(s, off);
                    for (std::size_t i = 0; i < dh; ++i) ot[i] += p * vs[i];
                }
            }
        }
        Tensor a = kernels::affine(o, L.wo, L.bo);

        for (const HookSpec& hk : hooks) {
            if (static_cast<std::size_t>(hk.site.layer) != l) continue;
            auto row = a.row(static_cast<std::size_t>(hk.site.position));
            if (hk.mode == HookMode::Capture) {
                result.captures[hk.site] = Tensor({d}, std::vector<float>(row.begin(), row.end()));
            } else {
                std::copy(hk.payload.data().begin(), hk.payload.data().end(), row.begin());
            }
        }
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += a[i];

        if (!cfg.linear_mode) {
            for (std::size_t t = 0; t < T; ++t)
                layer_norm_into(x.row(t), L.ln2_gamma.data(), L.ln2_beta.data(), kEps, h.row(t));
            Tensor u = kernels::affine(h, L.w1, L.b1);
            for (float& val : u.data()) val = gelu(val);
            Tensor m = kernels::affine(u, L.w2, L.b2);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += m[i];
        }
    }
    if (wants_snapshot(cfg.n_layers)) result.snapshots[cfg.n_layers] = LayerSnapshot{cfg.n_layers, x};

    if (cfg.linear_mode) {
        h = x;
    } else {
        for (std::size_t t = 0; t < T; ++t)
            layer_norm_into(x.row(t), W.lnf_gamma.data(), W.lnf_beta.data(), kEps, h.row(t));
    }
    result.logits = matmul(h, W.unembed);
    return result;
}

// ---------------------------------------------------------------------------

Prediction score_labels(std::span<const float> final_logits, std::span<const Verbalizer> verbalizers) {
    if (verbalizers.empty()) throw std::invalid_argument("score_labels: empty verbalizer list");
    std::set<TokenId> ids;
    for (const Verbalizer& v : verbalizers) {
        if (!ids.insert(v.token).second) {
            throw std::invalid_argument("score_labels: duplicate verbalizer token id " + std::to_string(v.token));
        }
        if (v.token < 0 || static_cast<std::size_t>(v.token) >= final_logits.size()) {
            throw std::invalid_argument("score_labels: verbalizer token id out of range");
        }
    }
    Prediction p;
    p.scores.reserve(verbalizers.size());
    for (const Verbalizer& v : verbalizers) p.scores.push_back(final_logits[static_cast<std::size_t>(v.token)]);
    for (std::size_t i = 1; i < p.scores.size(); ++i) {
        if (p.scores[i] > p.scores[p.label_index]) p.label_index = i;
    }
    p.label = verbalizers[p.label_index].label;
    return p;
}

Prediction score_labels(const ForwardResult& result, std::span<const Verbalizer> verbalizers) {
    return score_labels(result.final_logits(), verbalizers);
}

}  // namespace bicl
