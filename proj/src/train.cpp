#include "bicl/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "bicl/errors.hpp"
#include "kernels.hpp"

namespace bicl {

namespace {

constexpr float kLnEps = 1e-5f;
constexpr float kGeluK = 0.7978845608028654f;

float gelu(float x) { return 0.5f * x * (1.0f + std::tanh(kGeluK * (x + 0.044715f * x * x * x))); }

float gelu_grad(float x) {
    const float inner = kGeluK * (x + 0.044715f * x * x * x);
    const float t = std::tanh(inner);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * kGeluK * (1.0f + 3.0f * 0.044715f * x * x);
}

struct Norm {
    std::vector<float> xhat;  // [T x d]
    std::vector<float> rstd;  // [T]
    std::vector<float> out;   // [T x d]
};

void norm_forward(const std::vector<float>& x, std::size_t T, std::size_t d, const Tensor& gamma,
                  const Tensor& beta, Norm& n) {
    n.xhat.assign(T * d, 0.0f);
    n.rstd.assign(T, 0.0f);
    n.out.assign(T * d, 0.0f);
    for (std::size_t t = 0; t < T; ++t) {
        const float* xr = &x[t * d];
        float mean = 0.0f;
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<float>(d);
        const float rstd = 1.0f / std::sqrt(var + kLnEps);
        n.rstd[t] = rstd;
        for (std::size_t i = 0; i < d; ++i) {
            const float xh = (xr[i] - mean) * rstd;
            n.xhat[t * d + i] = xh;
            n.out[t * d + i] = xh * gamma[i] + beta[i];
        }
    }
}

// dx += layer-norm backward of dy; accumulates dgamma / dbeta.
void norm_backward(const std::vector<float>& dy, const Norm& n, std::size_t T, std::size_t d, const Tensor& gamma,
                   Tensor& dgamma, Tensor& dbeta, std::vector<float>& dx) {
    std::vector<float> dxhat(d);
    for (std::size_t t = 0; t < T; ++t) {
        const float* dyr = &dy[t * d];
        const float* xh = &n.xhat[t * d];
        float mean_dxhat = 0.0f, mean_dxhat_xhat = 0.0f;
        for (std::size_t i = 0; i < d; ++i) {
            dgamma[i] += dyr[i] * xh[i];
            dbeta[i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= static_cast<float>(d);
        mean_dxhat_xhat /= static_cast<float>(d);
        for (std::size_t i = 0; i < d; ++i)
            dx[t * d + i] += n.rstd[t] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
    }
}

void add_bias(std::vector<float>& y, const Tensor& b, std::size_t T) {
    const std::size_t n = b.size();
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < n; ++j) y[t * n + j] += b[j];
}

void colsum_into(const std::vector<float>& g, std::size_t T, Tensor& db) {
    const std::size_t n = db.size();
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < n; ++j) db[j] += g[t * n + j];
}

struct LayerCache {
    Norm ln1, ln2;
    std::vector<float> q, k, v, probs, o, u, g;
};

std::vector<Tensor*> tensor_list(ModelWeights& w) {
    std::vector<Tensor*> out;
    for_each_tensor(w, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

}  // namespace

float sequence_loss_and_grad(const ModelCheckpoint& ckpt, std::span<const TokenId> tokens,
                             std::span<const std::size_t> label_positions, ModelWeights* grads, float grad_scale) {
    const ModelConfig& cfg = ckpt.config;
    if (cfg.linear_mode) throw ConfigError("training is only supported for softmax-attention checkpoints");
    const ModelWeights& W = ckpt.weights;
    const std::size_t T = tokens.size(), d = cfg.d_model, f = cfg.d_ff, H = cfg.n_heads, dh = cfg.d_head;
    const std::size_t V = cfg.vocab_size;
    if (T == 0 || T > cfg.max_positions) throw DimensionError("training sequence length out of range");
    if (label_positions.empty()) throw DimensionError("training sequence has no label positions");
    for (std::size_t p : label_positions)
        if (p + 1 >= T) throw DimensionError("label position without a target token");
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    // Forward.
    std::vector<float> x(T * d);
    for (std::size_t t = 0; t < T; ++t) {
        auto e = W.tok_emb.row(static_cast<std::size_t>(tokens[t]));
        auto p = W.pos_emb.row(t);
        for (std::size_t i = 0; i < d; ++i) x[t * d + i] = e[i] + p[i];
    }
    std::vector<LayerCache> cache(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& L = W.layers[l];
        LayerCache& c = cache[l];
        norm_forward(x, T, d, L.ln1_gamma, L.ln1_beta, c.ln1);
        c.q.assign(T * d, 0.0f);
        c.k.assign(T * d, 0.0f);
        c.v.assign(T * d, 0.0f);
        kernels::gemm_nn(c.ln1.out.data(), L.wq.data().data(), c.q.data(), T, d, d);
        kernels::gemm_nn(c.ln1.out.data(), L.wk.data().data(), c.k.data(), T, d, d);
        kernels::gemm_nn(c.ln1.out.data(), L.wv.data().data(), c.v.data(), T, d, d);
        add_bias(c.q, L.bq, T);
        add_bias(c.k, L.bk, T);
        add_bias(c.v, L.bv, T);
        c.probs.assign(H * T * T, 0.0f);
        c.o.assign(T * d, 0.0f);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t t = 0; t < T; ++t) {
                float* pr = &c.probs[(h * T + t) * T];
                const float* qt = &c.q[t * d + off];
                for (std::size_t s = 0; s <= t; ++s) {
                    const float* ks = &c.k[s * d + off];
                    float dot = 0.0f;
                    for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * ks[i];
                    pr[s] = dot;
                }
                softmax_inplace(std::span<float>(pr, t + 1), scale);
                float* ot = &c.o[t * d + off];
                for (std::size_t s = 0; s <= t; ++s) {
                    const float* vs = &c.v[s * d + off];
                    for (std::size_t i = 0; i < dh; ++i) ot[i] += pr[s] * vs[i];
                }
            }
        }
        std::vector<float> a(T * d, 0.0f);
        kernels::gemm_nn(c.o.data(), L.wo.data().data(), a.data(), T, d, d);
        add_bias(a, L.bo, T);
        for (std::size_t i = 0; i < T * d; ++i) x[i] += a[i];

        norm_forward(x, T, d, L.ln2_gamma, L.ln2_beta, c.ln2);
        c.u.assign(T * f, 0.0f);
        kernels::gemm_nn(c.ln2.out.data(), L.w1.data().data(), c.u.data(), T, d, f);
        add_bias(c.u, L.b1, T);
        c.g.resize(T * f);
        for (std::size_t i = 0; i < T * f; ++i) c.g[i] = gelu(c.u[i]);
        std::vector<float> m(T * d, 0.0f);
        kernels::gemm_nn(c.g.data(), L.w2.data().data(), m.data(), T, f, d);
        add_bias(m, L.b2, T);
        for (std::size_t i = 0; i < T * d; ++i) x[i] += m[i];
    }
    Norm lnf;
    norm_forward(x, T, d, W.lnf_gamma, W.lnf_beta, lnf);

    // Loss on label positions only.
    const std::size_t P = label_positions.size();
    std::vector<float> dlogits(P * V, 0.0f);
    double loss = 0.0;
    const float inv_p = 1.0f / static_cast<float>(P);
    for (std::size_t i = 0; i < P; ++i) {
        const std::size_t pos = label_positions[i];
        float* lg = &dlogits[i * V];
        kernels::gemm_nn(&lnf.out[pos * d], W.unembed.data().data(), lg, 1, d, V);
        const auto target = static_cast<std::size_t>(tokens[pos + 1]);
        float mx = lg[0];
        for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, lg[j]);
        float sum = 0.0f;
        for (std::size_t j = 0; j < V; ++j) sum += std::exp(lg[j] - mx);
        loss += static_cast<double>(std::log(sum) + mx - lg[target]);
        for (std::size_t j = 0; j < V; ++j) lg[j] = std::exp(lg[j] - mx) / sum * inv_p * grad_scale;
        lg[target] -= inv_p * grad_scale;
    }
    const float mean_loss = static_cast<float>(loss / static_cast<double>(P));
    if (!grads) return mean_loss;

    // Backward.
    ModelWeights& G = *grads;
    std::vector<float> dhf(T * d, 0.0f);
    for (std::size_t i = 0; i < P; ++i) {
        const std::size_t pos = label_positions[i];
        kernels::gemm_tn(&lnf.out[pos * d], &dlogits[i * V], G.unembed.data().data(), 1, d, V);
        kernels::gemm_nt(&dlogits[i * V], W.unembed.data().data(), &dhf[pos * d], 1, V, d);
    }
    std::vector<float> dx(T * d, 0.0f);
    norm_backward(dhf, lnf, T, d, W.lnf_gamma, G.lnf_gamma, G.lnf_beta, dx);

    std::vector<float> dg(T * f), du(T * f), dnorm(T * d), dout(T * d), dq(T * d), dk(T * d), dv(T * d);
    std::vector<float> dp(T);
    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerWeights& L = W.layers[li];
        LayerWeights& GL = G.layers[li];
        const LayerCache& c = cache[li];

        // Feed-forward branch.
        kernels::gemm_tn(c.g.data(), dx.data(), GL.w2.data().data(), T, f, d);
        colsum_into(dx, T, GL.b2);
        std::fill(dg.begin(), dg.end(), 0.0f);
        kernels::gemm_nt(dx.data(), L.w2.data().data(), dg.data(), T, d, f);
        for (std::size_t i = 0; i < T * f; ++i) du[i] = dg[i] * gelu_grad(c.u[i]);
        kernels::gemm_tn(c.ln2.out.data(), du.data(), GL.w1.data().data(), T, d, f);
        colsum_into(du, T, GL.b1);
        std::fill(dnorm.begin(), dnorm.end(), 0.0f);
        kernels::gemm_nt(du.data(), L.w1.data().data(), dnorm.data(), T, f, d);
        norm_backward(dnorm, c.ln2, T, d, L.ln2_gamma, GL.ln2_gamma, GL.ln2_beta, dx);

        // Attention branch.
        kernels::gemm_tn(c.o.data(), dx.data(), GL.wo.data().data(), T, d, d);
        colsum_into(dx, T, GL.bo);
        std::fill(dout.begin(), dout.end(), 0.0f);
        kernels::gemm_nt(dx.data(), L.wo.data().data(), dout.data(), T, d, d);
        std::fill(dq.begin(), dq.end(), 0.0f);
        std::fill(dk.begin(), dk.end(), 0.0f);
        std::fill(dv.begin(), dv.end(), 0.0f);
        for (std::size_t hd = 0; hd < H; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t t = 0; t < T; ++t) {
                const float* pr = &c.probs[(hd * T + t) * T];
                const float* dot_ = &dout[t * d + off];
                float weighted = 0.0f;
                for (std::size_t s = 0; s <= t; ++s) {
                    const float* vs = &c.v[s * d + off];
                    float acc = 0.0f;
                    for (std::size_t i = 0; i < dh; ++i) acc += dot_[i] * vs[i];
                    dp[s] = acc;
                    weighted += pr[s] * acc;
                    float* dvs = &dv[s * d + off];
                    for (std::size_t i = 0; i < dh; ++i) dvs[i] += pr[s] * dot_[i];
                }
                const float* qt = &c.q[t * d + off];
                float* dqt = &dq[t * d + off];
                for (std::size_t s = 0; s <= t; ++s) {
                    const float ds = pr[s] * (dp[s] - weighted) * scale;
                    const float* ks = &c.k[s * d + off];
                    float* dks = &dk[s * d + off];
                    for (std::size_t i = 0; i < dh; ++i) {
                        dqt[i] += ds * ks[i];
                        dks[i] += ds * qt[i];
                    }
                }
            }
        }
        kernels::gemm_tn(c.ln1.out.data(), dq.data(), GL.wq.data().data(), T, d, d);
        kernels::gemm_tn(c.ln1.out.data(), dk.data(), GL.wk.data().data(), T, d, d);
        kernels::gemm_tn(c.ln1.out.data(), dv.data(), GL.wv.data().data(), T, d, d);
        colsum_into(dq, T, GL.bq);
        colsum_into(dk, T, GL.bk);
        colsum_into(dv, T, GL.bv);
        std::fill(dnorm.begin(), dnorm.end(), 0.0f);
        kernels::gemm_nt(dq.data(), L.wq.data().data(), dnorm.data(), T, d, d);
        kernels::gemm_nt(dk.data(), L.wk.data().data(), dnorm.data(), T, d, d);
        kernels::gemm_nt(dv.data(), L.wv.data().data(), dnorm.data(), T, d, d);
        norm_backward(dnorm, c.ln1, T, d, L.ln1_gamma, GL.ln1_gamma, GL.ln1_beta, dx);
    }
    for (std::size_t t = 0; t < T; ++t) {
        auto te = G.tok_emb.row(static_cast<std::size_t>(tokens[t]));
        auto pe = G.pos_emb.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            te[i] += dx[t * d + i];
            pe[i] += dx[t * d + i];
        }
    }
    return mean_loss;
}

double best_order_accuracy(const ModelCheckpoint& ckpt, const TaskSpec& stream, std::size_t shots,
                           std::size_t instances, std::uint64_t seed) {
    TaskSpec clean = stream;
    clean.clear_noise = 0.0;
    clean.vague_noise = 0.0;
    clean.drift = 0.0;
    clean.n_demos = shots;
    clean.mirror = true;
    const auto sets = generate_dataset(clean, ckpt.tokenizer, seed, instances);

    std::vector<std::size_t> order(shots);
    std::iota(order.begin(), order.end(), std::size_t{0});
    double best = 0.0;
    do {
        std::size_t correct = 0;
        for (const PromptSet& ps : sets) {
            std::vector<Demo> demos;
            for (std::size_t i : order) demos.push_back(ps.demos[i]);
            const auto ids = render_prompt(ckpt.tokenizer, ps.tmpl, demos, ps.query, ShotLayout::n_shot(),
                                           ckpt.config.max_positions);
            const Prediction pred = score_labels(forward(ckpt, ids), ps.verbalizers);
            if (pred.label_index == ps.gold_index()) ++correct;
        }
        best = std::max(best, static_cast<double>(correct) / static_cast<double>(sets.size()));
    } while (std::next_permutation(order.begin(), order.end()));
    return best;
}

TrainResult train_toy_model(const TrainConfig& config, const TaskSpec& stream,
                            const std::function<void(const TrainProgress&)>& on_progress) {
    const ModelConfig& mc = config.model;
    mc.validate();
    if (mc.linear_mode) throw ConfigError("train: linear-attention mode checkpoints are analytic, not trained");
    if (mc.n_layers > 8 || mc.d_model > 128) throw ConfigError("train: toy configs are limited to 8 layers, d_model 128");
    if (config.batch_size == 0) throw ConfigError("train: batch_size must be positive");
    Tokenizer tok = toy_tokenizer(stream);
    TaskSpec unanchored = stream;
    if (config.anchor_steps != kAnchorAlways) unanchored.anchor_rate = 0.0;
    if (tok.size() != mc.vocab_size) {
        throw ConfigError("train: vocab_size " + std::to_string(mc.vocab_size) + " but task vocabulary has " +
                          std::to_string(tok.size()) + " tokens");
    }
    const std::size_t seq_tokens = config.seq_tokens ? config.seq_tokens : mc.max_positions;
    if (seq_tokens > mc.max_positions) throw ConfigError("train: seq_tokens exceeds max_positions");

    TrainResult result;
    result.checkpoint = make_random_checkpoint(mc, tok, config.seed, {config.init_std, 0.0f});
    ModelCheckpoint& ckpt = result.checkpoint;

    ModelWeights grads = make_weights(mc);
    ModelWeights m1 = make_weights(mc);
    ModelWeights m2 = make_weights(mc);
    auto params = tensor_list(ckpt.weights);
    auto gl = tensor_list(grads);
    auto ml = tensor_list(m1);
    auto vl = tensor_list(m2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::fill(gl[i]->data().begin(), gl[i]->data().end(), 0.0f);
        std::fill(ml[i]->data().begin(), ml[i]->data().end(), 0.0f);
        std::fill(vl[i]->data().begin(), vl[i]->data().end(), 0.0f);
    }

    std::mt19937_64 data_rng(config.seed * 0x9e3779b97f4a7c15ull + 1);
    constexpr float beta1 = 0.9f, beta2 = 0.98f, adam_eps = 1e-8f;
    const float inv_batch = 1.0f / static_cast<float>(config.batch_size);

    for (std::size_t step = 0; step < config.steps; ++step) {
        for (Tensor* g : gl) std::fill(g->data().begin(), g->data().end(), 0.0f);
        float batch_loss = 0.0f;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const TrainingSequence seq =
                sample_training_sequence(step < config.anchor_steps ? stream : unanchored, tok, data_rng, seq_tokens);
            batch_loss += sequence_loss_and_grad(ckpt, seq.tokens, seq.label_positions, &grads, inv_batch);
        }
        batch_loss *= inv_batch;
        if (!std::isfinite(batch_loss)) {
            std::ostringstream os;
            os << "training diverged at step " << step << " (loss " << batch_loss << ")";
            if (!result.losses.empty()) os << "; previous loss " << result.losses.back();
            os << "; lr " << config.lr << ", batch " << config.batch_size;
            throw TrainingError(os.str());
        }
        result.losses.push_back(batch_loss);

        double norm2 = 0.0;
        for (Tensor* g : gl)
            for (float v : g->data()) norm2 += static_cast<double>(v) * v;
        const float norm = static_cast<float>(std::sqrt(norm2));
        const float clip = (config.grad_clip > 0.0f && norm > config.grad_clip) ? config.grad_clip / norm : 1.0f;

        float lr = config.lr;
        if (step < config.warmup_steps) {
            lr *= static_cast<float>(step + 1) / static_cast<float>(config.warmup_steps);
        } else {
            const double span = static_cast<double>(std::max<std::size_t>(1, config.steps - config.warmup_steps));
            const double prog = static_cast<double>(step - config.warmup_steps) / span;
            const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
            lr *= static_cast<float>(config.min_lr_ratio + (1.0 - config.min_lr_ratio) * cosine);
        }
        const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(step + 1));
        const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(step + 1));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto p = params[i]->data();
            auto g = gl[i]->data();
            auto mm = ml[i]->data();
            auto vv = vl[i]->data();
            const bool decay = params[i]->rank() == 2;
            for (std::size_t j = 0; j < p.size(); ++j) {
                const float gj = g[j] * clip;
                mm[j] = beta1 * mm[j] + (1.0f - beta1) * gj;
                vv[j] = beta2 * vv[j] + (1.0f - beta2) * gj * gj;
                const float update = (mm[j] / bc1) / (std::sqrt(vv[j] / bc2) + adam_eps);
                p[j] -= lr * (update + (decay ? config.weight_decay * p[j] : 0.0f));
            }
        }
        if (on_progress) on_progress({step, batch_loss});
    }

    ckpt.validate();
    if (config.steps > 0 && config.accuracy_gate > 0.0) {
        result.gate_accuracy = best_order_accuracy(ckpt, stream, config.gate_shots, config.gate_instances,
                                                   config.seed + 7777);
        if (result.gate_accuracy < config.accuracy_gate) {
            std::ostringstream os;
            os << "trained model reaches " << result.gate_accuracy * 100.0 << "% best-order " << config.gate_shots
               << "-shot accuracy, below the " << config.accuracy_gate * 100.0 << "% gate (final loss "
               << (result.losses.empty() ? 0.0f : result.losses.back()) << ")";
            throw TrainingError(os.str());
        }
    }
    return result;
}


TaskSpec reference_task_spec() {
    TaskSpec spec;
    spec.kind = TaskKind::TokenMapping;
    spec.n_inputs = 24;
    spec.n_classes = 2;
    spec.max_prefix = 1;
    spec.vague_fraction = 0.5;
    spec.vague_noise = 0.3;
    spec.drift = 0.1;
    spec.anchor_rate = 0.5;
    spec.rule_seed = 1;
    return spec;
}

TrainConfig reference_train_config() {
    const TaskSpec spec = reference_task_spec();
    TrainConfig cfg;
    cfg.model.n_layers = 4;
    cfg.model.n_heads = 4;
    cfg.model.d_model = 32;
    cfg.model.d_head = 8;
    cfg.model.d_ff = 128;
    cfg.model.vocab_size = toy_tokenizer(spec).size();
    cfg.model.max_positions = 64;
    cfg.steps = 8000;
    cfg.batch_size = 8;
    cfg.lr = 2e-3f;
    cfg.anchor_steps = 3000;
    cfg.seed = 1;
    return cfg;
}

}  // namespace bicl
