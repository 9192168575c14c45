#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gen.hpp"
#include "refreshkv/errors.hpp"
#include "refreshkv/kv_store.hpp"
#include "refreshkv/numerics.hpp"

using namespace refreshkv;

namespace {

constexpr std::size_t kHd = 2;

// Key entries encode their own position so tests can check which entry went where.
std::vector<double> kv_for(std::int64_t pos, std::size_t heads) {
    std::vector<double> v;
    for (std::size_t h = 0; h < heads; ++h) {
        v.push_back(static_cast<double>(pos));
        v.push_back(static_cast<double>(h));
    }
    return v;
}

LayerStore make_full(std::size_t n, std::size_t heads) {
    LayerStore s(heads, kHd);
    for (std::size_t i = 0; i < n; ++i) {
        const auto kv = kv_for(static_cast<std::int64_t>(i), heads);
        s.append(static_cast<std::int64_t>(i), kv, kv);
    }
    return s;
}

std::vector<std::int64_t> positions(const PartialHead& h) {
    return {h.store.positions().begin(), h.store.positions().end()};
}

std::vector<std::int64_t> oracle_positions(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::int64_t> out(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("head store keeps positions strictly increasing") {
    HeadStore h(kHd);
    h.append(3, std::vector{1.0, 2.0}, std::vector{3.0, 4.0});
    CHECK_THROWS_AS(h.append(3, std::vector{1.0, 2.0}, std::vector{3.0, 4.0}), ContractViolation);
    CHECK_THROWS_AS(h.append(2, std::vector{1.0, 2.0}, std::vector{3.0, 4.0}), ContractViolation);
    CHECK_THROWS_AS(h.append(9, std::vector{1.0}, std::vector{3.0}), ContractViolation);
    h.append(10, std::vector{5.0, 6.0}, std::vector{7.0, 8.0});
    CHECK(h.size() == 2);
    CHECK(h.last_position() == 10);
    CHECK(h.key(1)[0] == 5.0);
    CHECK(h.value(0)[1] == 4.0);
}

TEST_CASE("init_partial examples") {
    const LayerStore full = make_full(6, 1);
    const std::vector<std::vector<double>> pooled{{0.9, 0.9, 0.9, 0.1, 0.1, 0.1}};
    const PartialLayer p = init_partial(full, pooled, 2);
    CHECK(positions(p.heads[0]) == std::vector<std::int64_t>{0, 1});
    CHECK(p.heads[0].scores == std::vector{0.9, 0.9});
    CHECK(p.heads[0].store.key(1)[0] == 1.0);

    const PartialLayer all = init_partial(full, pooled, 6);
    CHECK(positions(all.heads[0]) == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5});
    CHECK(all.heads[0].scores == pooled[0]);

    CHECK_THROWS_AS(init_partial(full, pooled, 7), ConfigError);
    CHECK_THROWS_AS(init_partial(full, pooled, 0), ConfigError);
    CHECK_THROWS_AS(init_partial(full, {{0.1, 0.2}}, 1), ContractViolation);
}

TEST_CASE("k = L/8 for L = 128 gives 16 entries per head") {
    const LayerStore full = make_full(128, 2);
    gen::Rng rng(41);
    const PartialLayer p = init_partial(full, {rng.reals(128, 0, 1), rng.reals(128, 0, 1)}, 128 / 8);
    CHECK(p.heads[0].size() == 16);
    CHECK(p.heads[1].size() == 16);
    CHECK(p.size() == 16);
}

TEST_CASE("selection is independent per kv-head") {
    const LayerStore full = make_full(5, 2);
    const PartialLayer p = init_partial(full, {{1, 0, 0, 0, 2}, {0, 3, 2, 0, 0}}, 2);
    CHECK(positions(p.heads[0]) == std::vector<std::int64_t>{0, 4});
    CHECK(positions(p.heads[1]) == std::vector<std::int64_t>{1, 2});
    CHECK(p.heads[1].store.key(0) [1] == 1.0);
}

TEST_CASE("append_and_evict examples") {
    const LayerStore full = make_full(3, 1);
    SUBCASE("under capacity is a pure append") {
        PartialLayer p = init_partial(full, {{0.5, 0.2, 0.3}}, 2);
        p.capacity = 4;
        const auto kv = kv_for(3, 1);
        append_and_evict(p, 3, kv, kv, true);
        CHECK(positions(p.heads[0]) == std::vector<std::int64_t>{0, 2, 3});
        CHECK(is_new_score(p.heads[0].scores.back()));
    }
    SUBCASE("lowest finite score is evicted") {
        PartialLayer p = init_partial(full, {{0.5, 0.2, 0.3}}, 2);  // keeps 0 (0.5), 2 (0.3)
        p.heads[0].scores[1] = 0.2;
        p.capacity = 3;
        auto kv = kv_for(5, 1);
        append_and_evict(p, 5, kv, kv, true);  // scores [0.5, 0.2, NEW]
        CHECK(p.heads[0].scores == std::vector{0.5, 0.2, kNewScore});
        kv = kv_for(6, 1);
        append_and_evict(p, 6, kv, kv, true);
        CHECK(positions(p.heads[0]) == std::vector<std::int64_t>{0, 5, 6});
        CHECK(p.heads[0].scores == std::vector{0.5, kNewScore, kNewScore});
    }
    SUBCASE("all entries new: oldest goes") {
        PartialLayer p = init_partial(full, {{0.5, 0.2, 0.3}}, 1);
        for (std::int64_t pos = 3; pos < 8; ++pos) {
            const auto kv = kv_for(pos, 1);
            append_and_evict(p, pos, kv, kv, true);
            CHECK(p.heads[0].size() == 1);
        }
        CHECK(positions(p.heads[0]) == std::vector<std::int64_t>{7});
        CHECK(p.heads[0].store.key(0)[0] == 7.0);
    }
    SUBCASE("no eviction grows the cache") {
        PartialLayer p = init_partial(full, {{0.5, 0.2, 0.3}}, 2);
        for (std::int64_t pos = 3; pos < 10; ++pos) {
            const auto kv = kv_for(pos, 1);
            append_and_evict(p, pos, kv, kv, false);
            CHECK(p.heads[0].size() == static_cast<std::size_t>(pos));
        }
    }
    SUBCASE("non-monotone append is rejected") {
        PartialLayer p = init_partial(full, {{0.5, 0.2, 0.3}}, 2);
        const auto kv = kv_for(2, 1);
        CHECK_THROWS_AS(append_and_evict(p, 2, kv, kv, true), ContractViolation);
    }
}

TEST_CASE("merge_pending examples") {
    LayerStore full = make_full(4, 2);
    LayerStore pending(2, kHd);
    merge_pending(full, pending);
    CHECK(full.size() == 4);
    for (std::int64_t pos = 4; pos < 7; ++pos) {
        const auto kv = kv_for(pos, 2);
        pending.append(pos, kv, kv);
    }
    merge_pending(full, pending);
    CHECK(full.size() == 7);
    CHECK(pending.empty());
    CHECK(full.heads[1].key(6)[0] == 6.0);

    LayerStore stale(2, kHd);
    const auto kv = kv_for(3, 2);
    stale.append(3, kv, kv);
    CHECK_THROWS_AS(merge_pending(full, stale), ContractViolation);
}

TEST_CASE("refresh examples") {
    const LayerStore full = make_full(10, 1);
    PartialLayer p = init_partial(full, {std::vector<double>(10, 0.1)}, 3);
    std::vector<double> recent(10, 0.0);
    recent[7] = recent[8] = recent[9] = 1.0;
    refresh(p, full, {recent}, 3);
    CHECK(positions(p.heads[0]) == std::vector<std::int64_t>{7, 8, 9});
    const PartialLayer once = p;
    refresh(p, full, {recent}, 3);
    CHECK(positions(p.heads[0]) == positions(once.heads[0]));
    CHECK(p.heads[0].scores == once.heads[0].scores);
}

TEST_CASE("refresh property: equals brute-force top-k over random and tied scores") {
    gen::for_all(200, 42, [](gen::Rng& rng, std::size_t i) {
        const std::size_t n = rng.size(1, 80);
        const std::size_t heads = rng.size(1, 3);
        const LayerStore full = make_full(n, heads);
        std::vector<std::vector<double>> scores;
        for (std::size_t h = 0; h < heads; ++h) {
            scores.push_back(i % 2 ? rng.tied(n, 3) : rng.reals(n, 0, 1));
        }
        const std::size_t k = rng.size(1, n);
        PartialLayer p = init_partial(full, std::vector<std::vector<double>>(heads, std::vector<double>(n, 0.0)), 1);
        refresh(p, full, scores, k);
        REQUIRE(p.heads.size() == heads);
        for (std::size_t h = 0; h < heads; ++h) {
            const auto expect = oracle_positions(scores[h], k);
            CHECK(positions(p.heads[h]) == expect);
            for (std::size_t j = 0; j < expect.size(); ++j) {
                CHECK(p.heads[h].scores[j] == scores[h][static_cast<std::size_t>(expect[j])]);
                CHECK(p.heads[h].store.key(j)[0] == static_cast<double>(expect[j]));
            }
        }
    });
}

TEST_CASE("cache invariants under random partial/full sequences") {
    gen::for_all(100, 43, [](gen::Rng& rng, std::size_t) {
        const std::size_t heads = rng.size(1, 3);
        const std::size_t L = rng.size(1, 40);
        const std::size_t K = rng.size(1, L);
        const std::size_t N = rng.size(1, 60);
        LayerStore full = make_full(L, heads);
        LayerStore pending(heads, kHd);
        std::vector<std::vector<double>> s0;
        for (std::size_t h = 0; h < heads; ++h) s0.push_back(rng.reals(L, 0, 1));
        PartialLayer p = init_partial(full, s0, K);
        for (std::size_t step = 0; step < N; ++step) {
            const auto pos = static_cast<std::int64_t>(L + step);
            const auto kv = kv_for(pos, heads);
            if (rng.coin(0.2)) {
                merge_pending(full, pending);
                full.append(pos, kv, kv);
                std::vector<std::vector<double>> s;
                for (std::size_t h = 0; h < heads; ++h) s.push_back(rng.reals(full.size(), 0, 1));
                refresh(p, full, s, K);
                CHECK(pending.empty());
                for (const auto& h : p.heads) CHECK(h.size() == K);
            } else {
                append_and_evict(p, pos, kv, kv, true);
                pending.append(pos, kv, kv);
            }
            std::set<std::int64_t> known(full.heads[0].positions().begin(), full.heads[0].positions().end());
            known.insert(pending.heads[0].positions().begin(), pending.heads[0].positions().end());
            for (const auto& h : p.heads) {
                CHECK(h.size() <= K);
                const auto ps = positions(h);
                CHECK(std::is_sorted(ps.begin(), ps.end()));
                CHECK(std::adjacent_find(ps.begin(), ps.end()) == ps.end());
                for (auto q : ps) CHECK(known.contains(q));
            }
        }
        merge_pending(full, pending);
        CHECK(full.size() == L + N);
    });
}

TEST_CASE("partial cache dump lists every entry") {
    const LayerStore full = make_full(4, 2);
    PartialCache cache{init_partial(full, {{0.4, 0.1, 0.3, 0.2}, {0.1, 0.2, 0.3, 0.4}}, 2)};
    const auto kv = kv_for(4, 2);
    append_and_evict(cache[0], 4, kv, kv, false);
    std::ostringstream out;
    dump_partial_jsonl(cache, out);
    std::istringstream in(out.str());
    std::vector<nlohmann::json> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(nlohmann::json::parse(line));
    REQUIRE(lines.size() == 6);
    CHECK(lines[0] == nlohmann::json{{"layer", 0}, {"kv_head", 0}, {"position", 0}, {"score", 0.4}});
    CHECK(lines[2]["score"].is_null());
    CHECK(lines[3]["position"] == 2);
    CHECK(lines[5]["position"] == 4);
}
