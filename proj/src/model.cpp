#include "refreshkv/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "refreshkv/errors.hpp"

namespace refreshkv {

std::size_t ModelConfig::ffn_dim() const {
    const auto hidden = static_cast<std::size_t>(std::llround(ffn_mult * static_cast<double>(model_dim())));
    return hidden == 0 ? 1 : hidden;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
    if (n_layers == 0) fail("n_layers must be positive");
    if (n_query_heads == 0 || n_kv_heads == 0) fail("head counts must be positive");
    if (n_query_heads % n_kv_heads != 0) {
        fail("n_kv_heads (" + std::to_string(n_kv_heads) + ") must divide n_query_heads (" +
             std::to_string(n_query_heads) + ")");
    }
    if (head_dim == 0 || head_dim % 2 != 0) fail("head_dim must be positive and even (rotary pairs)");
    if (!(ffn_mult > 0.0) || !std::isfinite(ffn_mult)) fail("ffn_mult must be positive");
    if (vocab_size == 0) fail("vocab_size must be positive");
    if (max_position == 0) fail("max_position must be positive");
    if (!(rope_base > 1.0) || !std::isfinite(rope_base)) fail("rope_base must exceed 1");
}

ModelConfig ModelConfig::canonical() {
    ModelConfig config;
    config.n_layers = 2;
    config.n_query_heads = 4;
    config.n_kv_heads = 2;
    config.head_dim = 16;
    config.vocab_size = 256;
    return config;
}

ModelWeights init_model(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.model_dim()));
    auto gaussian = [&](std::size_t n) {
        std::vector<double> out(n);
        for (double& v : out) {
            v = normal(rng) * scale;
        }
        return out;
    };
    const std::size_t d = config.model_dim();
    const std::size_t f = config.ffn_dim();

    ModelWeights w;
    w.config = config;
    w.embedding = gaussian(config.vocab_size * d);
    w.layers.reserve(config.n_layers);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights layer;
        layer.attn_norm.assign(d, 1.0);
        layer.wq = gaussian(config.q_dim() * d);
        layer.wk = gaussian(config.kv_dim() * d);
        layer.wv = gaussian(config.kv_dim() * d);
        layer.wo = gaussian(d * config.q_dim());
        layer.ffn_norm.assign(d, 1.0);
        layer.w_gate = gaussian(f * d);
        layer.w_up = gaussian(f * d);
        layer.w_down = gaussian(d * f);
        w.layers.push_back(std::move(layer));
    }
    w.final_norm.assign(d, 1.0);
    w.lm_head = gaussian(config.vocab_size * d);
    return w;
}

std::vector<double> StepOutput::mean_query(std::size_t layer, std::size_t head_dim) const {
    const auto& q = queries.at(layer);
    const std::size_t n_heads = q.size() / head_dim;
    std::vector<double> mean(head_dim, 0.0);
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t i = 0; i < head_dim; ++i) {
            mean[i] += q[h * head_dim + i];
        }
    }
    for (double& v : mean) {
        v /= static_cast<double>(n_heads);
    }
    return mean;
}

void apply_rotary(std::span<double> x, std::size_t head_dim, std::int64_t position, double base) {
    const std::size_t half = head_dim / 2;
    const auto pos = static_cast<double>(position);
    for (std::size_t offset = 0; offset < x.size(); offset += head_dim) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = pos * freq;
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const double a = x[offset + i];
            const double b = x[offset + i + half];
            x[offset + i] = a * c - b * s;
            x[offset + i + half] = a * s + b * c;
        }
    }
}

LayerView CacheRouter::after_probe(std::size_t layer, const AttentionRows&) {
    throw ContractViolation("router requested a probe on layer " + std::to_string(layer) +
                            " but does not handle it");
}

void CacheRouter::observe(std::size_t, const AttentionRows&) {}

namespace {

constexpr double kNormEps = 1e-6;

void rms_norm(std::span<const double> x, std::span<const double> gain, std::span<double> out) {
    double sum_sq = 0.0;
    for (double v : x) {
        sum_sq += v * v;
    }
    const double inv = 1.0 / std::sqrt(sum_sq / static_cast<double>(x.size()) + kNormEps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

void check_token(const ModelConfig& config, int token) {
    if (token < 0 || static_cast<std::size_t>(token) >= config.vocab_size) {
        throw ContractViolation("token id " + std::to_string(token) + " outside vocabulary of " +
                                std::to_string(config.vocab_size));
    }
}

// Gated feed-forward on n row-major inputs; adds the result into x.
void feed_forward(const ModelConfig& config, const LayerWeights& layer, std::span<double> x, std::size_t n) {
    const std::size_t d = config.model_dim();
    const std::size_t f = config.ffn_dim();
    std::vector<double> h(n * d);
    for (std::size_t t = 0; t < n; ++t) {
        rms_norm(x.subspan(t * d, d), layer.ffn_norm, std::span(h).subspan(t * d, d));
    }
    std::vector<double> gate(n * f);
    std::vector<double> up(n * f);
    kernels::matmul_rows(layer.w_gate, f, d, h, n, gate);
    kernels::matmul_rows(layer.w_up, f, d, h, n, up);
    for (std::size_t i = 0; i < n * f; ++i) {
        gate[i] = silu(gate[i]) * up[i];
    }
    std::vector<double> down(n * d);
    kernels::matmul_rows(layer.w_down, d, f, gate, n, down);
    for (std::size_t i = 0; i < n * d; ++i) {
        x[i] += down[i];
    }
}

struct SequencePass {
    FullCache cache;
    StepOutput last;
    std::vector<std::vector<double>> all_logits;
};

SequencePass run_sequence(const ModelWeights& weights, std::span<const int> tokens, bool observe, bool all_logits) {
    const ModelConfig& config = weights.config;
    const std::size_t n = tokens.size();
    if (n == 0) {
        throw ContractViolation("prefill: empty prompt");
    }
    if (n > config.max_position) {
        throw ContractViolation("prefill: prompt length " + std::to_string(n) + " exceeds max_position " +
                                std::to_string(config.max_position));
    }
    const std::size_t d = config.model_dim();
    const std::size_t qd = config.q_dim();
    const std::size_t kvd = config.kv_dim();
    const std::size_t hd = config.head_dim;

    std::vector<double> x(n * d);
    for (std::size_t t = 0; t < n; ++t) {
        check_token(config, tokens[t]);
        const auto* row = weights.embedding.data() + static_cast<std::size_t>(tokens[t]) * d;
        std::copy(row, row + d, x.begin() + static_cast<std::ptrdiff_t>(t * d));
    }

    SequencePass pass;
    pass.cache.assign(config.n_layers, LayerStore(config.n_kv_heads, hd));
    pass.last.queries.resize(config.n_layers);
    pass.last.attention_rows.resize(config.n_layers);

    std::vector<double> h(n * d);
    std::vector<double> q(n * qd);
    std::vector<double> k(n * kvd);
    std::vector<double> v(n * kvd);
    std::vector<double> attn(n * qd);
    std::vector<double> proj(n * d);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const LayerWeights& layer = weights.layers[l];
        for (std::size_t t = 0; t < n; ++t) {
            rms_norm(std::span(x).subspan(t * d, d), layer.attn_norm, std::span(h).subspan(t * d, d));
        }
        kernels::matmul_rows(layer.wq, qd, d, h, n, q);
        kernels::matmul_rows(layer.wk, kvd, d, h, n, k);
        kernels::matmul_rows(layer.wv, kvd, d, h, n, v);
        pass.last.queries[l].assign(q.end() - static_cast<std::ptrdiff_t>(qd), q.end());
        for (std::size_t t = 0; t < n; ++t) {
            const auto pos = static_cast<std::int64_t>(t);
            apply_rotary(std::span(q).subspan(t * qd, qd), hd, pos, config.rope_base);
            apply_rotary(std::span(k).subspan(t * kvd, kvd), hd, pos, config.rope_base);
        }
        AttentionRows rows;
        kernels::causal_attention(config.attention_shape(), q, k, v, n, attn, observe ? &rows : nullptr);
        if (observe) {
            pass.last.attention_rows[l] = std::move(rows);
        }
        LayerStore& store = pass.cache[l];
        for (auto& head : store.heads) {
            head.reserve(n);
        }
        for (std::size_t t = 0; t < n; ++t) {
            store.append(static_cast<std::int64_t>(t), std::span<const double>(k).subspan(t * kvd, kvd),
                         std::span<const double>(v).subspan(t * kvd, kvd));
        }
        kernels::matmul_rows(layer.wo, d, qd, attn, n, proj);
        for (std::size_t i = 0; i < n * d; ++i) {
            x[i] += proj[i];
        }
        feed_forward(config, layer, x, n);
    }

    const std::size_t first = all_logits ? 0 : n - 1;
    std::vector<double> normed(d);
    for (std::size_t t = first; t < n; ++t) {
        rms_norm(std::span(x).subspan(t * d, d), weights.final_norm, normed);
        std::vector<double> logits(config.vocab_size);
        kernels::matvec(weights.lm_head, config.vocab_size, d, normed, logits);
        if (t + 1 == n) {
            pass.last.logits = logits;
        }
        if (all_logits) {
            pass.all_logits.push_back(std::move(logits));
        }
    }
    return pass;
}

class FullCacheRouter final : public CacheRouter {
public:
    FullCacheRouter(FullCache& cache, bool observe) : cache_(cache), observe_(observe) {}

    LayerPlan plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double>) override {
        cache_.at(layer).append(kv.position, kv.keys, kv.values);
        return {cache_[layer].view(), observe_, std::nullopt};
    }

private:
    FullCache& cache_;
    bool observe_;
};

}  // namespace

PrefillResult prefill(const ModelWeights& weights, std::span<const int> tokens, bool observe_scores) {
    SequencePass pass = run_sequence(weights, tokens, observe_scores, false);
    return {std::move(pass.cache), std::move(pass.last)};
}

std::vector<std::vector<double>> forward_logits(const ModelWeights& weights, std::span<const int> tokens) {
    return run_sequence(weights, tokens, false, true).all_logits;
}

StepOutput decode_step(const ModelWeights& weights, int token, std::int64_t position, CacheRouter& router) {
    const ModelConfig& config = weights.config;
    check_token(config, token);
    if (position < 0 || static_cast<std::size_t>(position) >= config.max_position) {
        throw ContractViolation("decode_step: position " + std::to_string(position) + " outside max_position " +
                                std::to_string(config.max_position));
    }
    const std::size_t d = config.model_dim();
    const std::size_t qd = config.q_dim();
    const std::size_t kvd = config.kv_dim();
    const std::size_t hd = config.head_dim;
    const AttentionShape shape = config.attention_shape();

    StepOutput out;
    out.queries.resize(config.n_layers);
    out.attention_rows.resize(config.n_layers);

    std::vector<double> x(weights.embedding.begin() + static_cast<std::ptrdiff_t>(token * d),
                          weights.embedding.begin() + static_cast<std::ptrdiff_t>((token + 1) * d));
    std::vector<double> h(d);
    std::vector<double> q(qd);
    std::vector<double> k(kvd);
    std::vector<double> v(kvd);
    std::vector<double> attn(qd);
    std::vector<double> proj(d);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const LayerWeights& layer = weights.layers[l];
        rms_norm(x, layer.attn_norm, h);
        kernels::matvec(layer.wq, qd, d, h, q);
        kernels::matvec(layer.wk, kvd, d, h, k);
        kernels::matvec(layer.wv, kvd, d, h, v);
        out.queries[l] = q;
        apply_rotary(q, hd, position, config.rope_base);
        apply_rotary(k, hd, position, config.rope_base);

        const std::vector<double> mean_q = out.mean_query(l, hd);
        LayerPlan plan = router.plan_layer(l, TokenKV{position, k, v}, mean_q);
        LayerView view = std::move(plan.view);
        if (plan.probe) {
            const AttentionRows probe_rows = kernels::attention_probabilities(shape, q, *plan.probe);
            view = router.after_probe(l, probe_rows);
        }
        if (plan.observe) {
            AttentionRows rows;
            kernels::decode_attention(shape, q, view, attn, &rows);
            router.observe(l, rows);
            out.attention_rows[l] = std::move(rows);
        } else {
            kernels::decode_attention(shape, q, view, attn, nullptr);
        }
        kernels::matvec(layer.wo, d, qd, attn, proj);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] += proj[i];
        }
        feed_forward(config, layer, x, 1);
    }
    rms_norm(x, weights.final_norm, h);
    out.logits.resize(config.vocab_size);
    kernels::matvec(weights.lm_head, config.vocab_size, d, h, out.logits);
    return out;
}

StepOutput decode_step(const ModelWeights& weights, int token, std::int64_t position, FullCache& cache,
                       bool observe_scores) {
    FullCacheRouter router(cache, observe_scores);
    return decode_step(weights, token, position, router);
}

}  // namespace refreshkv
