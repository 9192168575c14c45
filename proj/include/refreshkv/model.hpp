#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "refreshkv/kernels.hpp"
#include "refreshkv/kv_store.hpp"

namespace refreshkv {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_query_heads = 4;
    std::size_t n_kv_heads = 2;
    std::size_t head_dim = 16;
    double ffn_mult = 2.0;
    std::size_t vocab_size = 256;
    std::size_t max_position = 4096;
    std::uint64_t seed = 1234;
    double rope_base = 10000.0;

    std::size_t model_dim() const { return n_query_heads * head_dim; }
    std::size_t q_dim() const { return n_query_heads * head_dim; }
    std::size_t kv_dim() const { return n_kv_heads * head_dim; }
    std::size_t group_size() const { return n_query_heads / n_kv_heads; }
    std::size_t ffn_dim() const;
    AttentionShape attention_shape() const { return {n_query_heads, n_kv_heads, head_dim}; }

    // Throws ConfigError on any broken dimension relation.
    void validate() const;

    // 2 layers, 4 query heads, 2 kv-heads, head_dim 16, vocab 256.
    static ModelConfig canonical();

    bool operator==(const ModelConfig&) const = default;
};

// Matrices are row-major, output x input.
struct LayerWeights {
    std::vector<double> attn_norm;  // model_dim
    std::vector<double> wq;         // q_dim x model_dim
    std::vector<double> wk;         // kv_dim x model_dim
    std::vector<double> wv;         // kv_dim x model_dim
    std::vector<double> wo;         // model_dim x q_dim
    std::vector<double> ffn_norm;   // model_dim
    std::vector<double> w_gate;     // ffn_dim x model_dim
    std::vector<double> w_up;       // ffn_dim x model_dim
    std::vector<double> w_down;     // model_dim x ffn_dim
};

struct ModelWeights {
    ModelConfig config;
    std::vector<double> embedding;  // vocab x model_dim
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm;  // model_dim
    std::vector<double> lm_head;     // vocab x model_dim
};

// Gaussian weights scaled by 1/sqrt(model_dim), unit norm gains. Bitwise
// reproducible for a given config (and build).
ModelWeights init_model(const ModelConfig& config);

struct StepOutput {
    std::vector<double> logits;
    // Per layer: the query heads before rotary encoding, n_query_heads x head_dim.
    std::vector<std::vector<double>> queries;
    // Per layer: present when scores were observed for that layer.
    std::vector<std::optional<AttentionRows>> attention_rows;

    // Query vector averaged over the layer's query heads.
    std::vector<double> mean_query(std::size_t layer, std::size_t head_dim) const;
};

struct PrefillResult {
    FullCache cache;
    StepOutput last;  // outputs of the final prompt token (observation window of one)
};

// Full causal pass over the prompt; populates every layer's cache with all positions.
PrefillResult prefill(const ModelWeights& weights, std::span<const int> tokens, bool observe_scores);

// Teacher-forced logits for every position of `tokens`, computed from scratch.
std::vector<std::vector<double>> forward_logits(const ModelWeights& weights, std::span<const int> tokens);

// The current token's rotated keys and values at one layer (n_kv_heads x head_dim each).
struct TokenKV {
    std::int64_t position = 0;
    std::span<const double> keys;
    std::span<const double> values;
};

struct LayerPlan {
    LayerView view;
    bool observe = false;
    // When set, probabilities over this view are computed first and handed to
    // CacheRouter::after_probe, which returns the view actually attended.
    std::optional<LayerView> probe;
};

// Decides, layer by layer, which cache entries the current token attends to.
// plan_layer may mutate the router's stores; the returned views must stay
// valid until the next call on the same layer.
class CacheRouter {
public:
    virtual ~CacheRouter() = default;
    virtual LayerPlan plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double> mean_query) = 0;
    virtual LayerView after_probe(std::size_t layer, const AttentionRows& rows);
    virtual void observe(std::size_t layer, const AttentionRows& rows);
};

// One generation step for `token` at absolute `position`.
StepOutput decode_step(const ModelWeights& weights, int token, std::int64_t position, CacheRouter& router);

// Vanilla step: appends the token to `cache` and attends over all of it.
StepOutput decode_step(const ModelWeights& weights, int token, std::int64_t position, FullCache& cache,
                       bool observe_scores);

// Rotates each head_dim-wide head of `x` in place for absolute position `position`.
void apply_rotary(std::span<double> x, std::size_t head_dim, std::int64_t position, double base);

}  // namespace refreshkv
