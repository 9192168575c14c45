#include <doctest.h>

#include <algorithm>
#include <map>
#include <numeric>

#include "gen.hpp"
#include "refreshkv/errors.hpp"
#include "refreshkv/model.hpp"
#include "refreshkv/numerics.hpp"

using namespace refreshkv;

namespace {

// Attends over a copy of the full cache whose entries are permuted (or kept
// in order), so the view differs in storage but not in content.
class CopyRouter final : public CacheRouter {
public:
    CopyRouter(FullCache cache, bool permute, std::uint64_t seed) : cache_(std::move(cache)), permute_(permute), rng_(seed) {}

    LayerPlan plan_layer(std::size_t layer, const TokenKV& kv, std::span<const double>) override {
        cache_[layer].append(kv.position, kv.keys, kv.values);
        const LayerStore& src = cache_[layer];
        auto& dst = copies_[layer];
        dst.clear();
        for (const HeadStore& head : src.heads) {
            std::vector<std::size_t> order(head.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            if (permute_) std::shuffle(order.begin(), order.end(), rng_.engine());
            Copy c;
            for (std::size_t i : order) {
                c.positions.push_back(head.positions()[i]);
                c.keys.insert(c.keys.end(), head.key(i).begin(), head.key(i).end());
                c.values.insert(c.values.end(), head.value(i).begin(), head.value(i).end());
            }
            dst.push_back(std::move(c));
        }
        LayerPlan plan;
        for (const Copy& c : dst) plan.view.push_back({c.keys, c.values, c.positions});
        plan.observe = true;
        return plan;
    }

private:
    struct Copy {
        std::vector<double> keys, values;
        std::vector<std::int64_t> positions;
    };
    FullCache cache_;
    bool permute_;
    gen::Rng rng_;
    std::map<std::size_t, std::vector<Copy>> copies_;
};

}  // namespace

TEST_CASE("init_model is deterministic and seed sensitive") {
    const ModelConfig c = ModelConfig::canonical();
    const ModelWeights a = init_model(c);
    const ModelWeights b = init_model(c);
    CHECK(a.embedding == b.embedding);
    CHECK(a.lm_head == b.lm_head);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        CHECK(a.layers[l].wq == b.layers[l].wq);
        CHECK(a.layers[l].w_down == b.layers[l].w_down);
    }
    ModelConfig c1 = c, c2 = c;
    c1.seed = 1;
    c2.seed = 2;
    CHECK(init_model(c1).embedding != init_model(c2).embedding);
}

TEST_CASE("canonical config dimensions") {
    const ModelConfig c = ModelConfig::canonical();
    CHECK(c.n_layers == 2);
    CHECK(c.n_query_heads == 4);
    CHECK(c.n_kv_heads == 2);
    CHECK(c.head_dim == 16);
    CHECK(c.vocab_size == 256);
    CHECK(c.group_size() == 2);
    CHECK(c.model_dim() == 64);
}

TEST_CASE("invalid dimension relations are config errors") {
    auto bad = [](auto mutate) {
        ModelConfig c;
        mutate(c);
        return c;
    };
    CHECK_THROWS_AS(bad([](ModelConfig& c) { c.n_kv_heads = 3; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ModelConfig& c) { c.n_kv_heads = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ModelConfig& c) { c.head_dim = 15; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ModelConfig& c) { c.n_layers = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ModelConfig& c) { c.vocab_size = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](ModelConfig& c) { c.ffn_mult = 0.0; }).validate(), ConfigError);
    CHECK_THROWS_AS(init_model(bad([](ModelConfig& c) { c.n_kv_heads = 3; })), ConfigError);
}

TEST_CASE("prefill of one token attends to itself only") {
    const ModelWeights w = init_model(ModelConfig::canonical());
    const std::vector<int> tokens{17};
    const PrefillResult p = prefill(w, tokens, true);
    for (const auto& rows : p.last.attention_rows) {
        REQUIRE(rows.has_value());
        for (const auto& row : *rows) CHECK(row == std::vector<double>{1.0});
    }
    for (const LayerStore& layer : p.cache) CHECK(layer.size() == 1);
}

TEST_CASE("prefill rows are normalized and caches hold every position") {
    const ModelWeights w = init_model(ModelConfig::canonical());
    gen::for_all(10, 31, [&](gen::Rng& rng, std::size_t) {
        const std::size_t n = rng.size(1, 128);
        const auto tokens = rng.tokens(n, 256);
        const PrefillResult p = prefill(w, tokens, true);
        CHECK(p.last.logits.size() == 256);
        for (std::size_t l = 0; l < 2; ++l) {
            CHECK(p.cache[l].size() == n);
            CHECK(p.cache[l].heads[0].last_position() == static_cast<std::int64_t>(n - 1));
            for (const auto& row : *p.last.attention_rows[l]) {
                CHECK(row.size() == n);
                CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
            }
        }
    });
}

TEST_CASE("prefill and decode reject bad input") {
    ModelConfig c = ModelConfig::canonical();
    c.max_position = 8;
    const ModelWeights w = init_model(c);
    CHECK_THROWS_AS(prefill(w, std::vector<int>{}, false), ContractViolation);
    CHECK_THROWS_AS(prefill(w, std::vector<int>(9, 1), false), ContractViolation);
    CHECK_THROWS_AS(prefill(w, std::vector<int>{1, 256}, false), ContractViolation);
    PrefillResult p = prefill(w, std::vector<int>(8, 1), false);
    CHECK_THROWS_AS(decode_step(w, 1, 8, p.cache, false), ContractViolation);
}

TEST_CASE("incremental decoding matches the full forward pass") {
    const ModelWeights w = init_model(ModelConfig::canonical());
    gen::for_all(6, 32, [&](gen::Rng& rng, std::size_t) {
        const std::size_t n = rng.size(2, 64);
        const auto tokens = rng.tokens(n, 256);
        const auto reference = forward_logits(w, tokens);
        const std::size_t split = rng.size(1, n - 1);
        PrefillResult p = prefill(w, std::span(tokens).first(split), false);
        CHECK(max_relative_difference(p.last.logits, reference[split - 1]) <= 1e-9);
        for (std::size_t t = split; t < n; ++t) {
            const StepOutput out = decode_step(w, tokens[t], static_cast<std::int64_t>(t), p.cache, false);
            CHECK(max_relative_difference(out.logits, reference[t]) <= 1e-9);
        }
    });
}

TEST_CASE("decode after prefill equals re-prefill with the generated token") {
    const ModelWeights w = init_model(ModelConfig::canonical());
    gen::Rng rng(33);
    auto tokens = rng.tokens(40, 256);
    PrefillResult p = prefill(w, tokens, false);
    const int next = static_cast<int>(std::max_element(p.last.logits.begin(), p.last.logits.end()) - p.last.logits.begin());
    const StepOutput step = decode_step(w, next, 40, p.cache, false);
    tokens.push_back(next);
    const PrefillResult again = prefill(w, tokens, false);
    CHECK(max_relative_difference(step.logits, again.last.logits) <= 1e-9);
}

TEST_CASE("attention is invariant to the order of cache entries") {
    const ModelWeights w = init_model(ModelConfig::canonical());
    gen::Rng rng(34);
    const auto tokens = rng.tokens(50, 256);
    const PrefillResult p = prefill(w, tokens, false);

    FullCache vanilla = p.cache;
    const StepOutput ref = decode_step(w, 5, 50, vanilla, true);

    CopyRouter same(p.cache, false, 1);
    const StepOutput copied = decode_step(w, 5, 50, same);
    CHECK(copied.logits == ref.logits);

    CopyRouter shuffled(p.cache, true, 2);
    const StepOutput permuted = decode_step(w, 5, 50, shuffled);
    CHECK(max_relative_difference(permuted.logits, ref.logits) <= 1e-9);
    for (std::size_t l = 0; l < 2; ++l) {
        for (const auto& row : *permuted.attention_rows[l]) {
            CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("query outputs and group sharing") {
    for (std::size_t kv : {1, 2, 4}) {
        ModelConfig c = ModelConfig::canonical();
        c.n_kv_heads = kv;
        const ModelWeights w = init_model(c);
        const PrefillResult p = prefill(w, std::vector<int>{1, 2, 3, 4, 5}, true);
        CHECK(p.last.logits.size() == c.vocab_size);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            CHECK(p.last.queries[l].size() == c.n_query_heads * c.head_dim);
            CHECK(p.last.attention_rows[l]->size() == c.n_query_heads);
            CHECK(p.cache[l].heads.size() == kv);
        }
        const auto mean = p.last.mean_query(0, c.head_dim);
        REQUIRE(mean.size() == c.head_dim);
        double expect = 0.0;
        for (std::size_t h = 0; h < c.n_query_heads; ++h) expect += p.last.queries[0][h * c.head_dim];
        CHECK(mean[0] == doctest::Approx(expect / c.n_query_heads));
    }
}

TEST_CASE("rotary encoding: scores depend only on relative position") {
    gen::for_all(50, 35, [](gen::Rng& rng, std::size_t) {
        const std::size_t hd = 2 * rng.size(1, 16);
        const auto q0 = rng.normals(hd);
        const auto k0 = rng.normals(hd);
        const std::int64_t m = rng.integer(0, 2000);
        const std::int64_t n = rng.integer(0, 2000);
        const std::int64_t shift = rng.integer(0, 1000);
        auto score = [&](std::int64_t a, std::int64_t b) {
            auto q = q0;
            auto k = k0;
            apply_rotary(q, hd, a, 10000.0);
            apply_rotary(k, hd, b, 10000.0);
            return std::inner_product(q.begin(), q.end(), k.begin(), 0.0);
        };
        CHECK(score(m, n) == doctest::Approx(score(m + shift, n + shift)).epsilon(1e-9));
        auto q = q0;
        apply_rotary(q, hd, m, 10000.0);
        CHECK(std::inner_product(q.begin(), q.end(), q.begin(), 0.0) ==
              doctest::Approx(std::inner_product(q0.begin(), q0.end(), q0.begin(), 0.0)));
    });
}
