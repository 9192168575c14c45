#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "refreshkv/kernels.hpp"

namespace refreshkv {

// Score carried by partial-cache entries appended since the last full step.
// Treated as +inf by eviction, so such entries survive until the next refresh.
inline constexpr double kNewScore = std::numeric_limits<double>::infinity();

inline bool is_new_score(double score) { return score == kNewScore; }

// Keys, values and original positions of one kv-head, in strictly increasing
// position order. Keys are stored already rotated at their own position.
class HeadStore {
public:
    explicit HeadStore(std::size_t head_dim = 0) : head_dim_(head_dim) {}

    std::size_t head_dim() const { return head_dim_; }
    std::size_t size() const { return positions_.size(); }
    bool empty() const { return positions_.empty(); }

    std::span<const std::int64_t> positions() const { return positions_; }
    std::span<const double> keys() const { return keys_; }
    std::span<const double> values() const { return values_; }
    std::span<const double> key(std::size_t i) const { return {keys_.data() + i * head_dim_, head_dim_}; }
    std::span<const double> value(std::size_t i) const { return {values_.data() + i * head_dim_, head_dim_}; }
    std::int64_t last_position() const;

    // Throws ContractViolation unless position exceeds every stored position.
    void append(std::int64_t position, std::span<const double> key, std::span<const double> value);
    void erase(std::size_t index);
    void clear();
    void reserve(std::size_t n);

    HeadView view() const { return {keys_, values_, positions_}; }

private:
    std::size_t head_dim_;
    std::vector<std::int64_t> positions_;
    std::vector<double> keys_;
    std::vector<double> values_;
};

// All kv-heads of one layer. In the full cache and the pending buffer every
// head holds the same positions.
struct LayerStore {
    std::vector<HeadStore> heads;

    LayerStore() = default;
    LayerStore(std::size_t n_kv_heads, std::size_t head_dim) : heads(n_kv_heads, HeadStore(head_dim)) {}

    std::size_t size() const { return heads.empty() ? 0 : heads.front().size(); }
    bool empty() const { return size() == 0; }
    // keys/values are n_kv_heads x head_dim for one token.
    void append(std::int64_t position, std::span<const double> keys, std::span<const double> values);
    void clear();
    LayerView view() const;
};

// Full cache C_f, indexed by layer.
using FullCache = std::vector<LayerStore>;
// KVs produced by partial steps since a layer's last full step, indexed by layer.
using PendingBuffer = std::vector<LayerStore>;

struct PartialHead {
    HeadStore store;
    std::vector<double> scores;  // parallel to store; kNewScore for appended entries

    std::size_t size() const { return store.size(); }
};

// Partial cache C_p for one layer. Selection is per kv-head, so heads may hold
// different positions.
struct PartialLayer {
    std::vector<PartialHead> heads;
    std::size_t capacity = 0;

    std::size_t size() const;  // largest head size
    LayerView view() const;
};

using PartialCache = std::vector<PartialLayer>;

// C_p for one layer: each head keeps the entries at top_k_indices(head_scores[h], k),
// carrying their scores. Throws ConfigError when k is zero or exceeds |full|.
PartialLayer init_partial(const LayerStore& full, const std::vector<std::vector<double>>& head_scores, std::size_t k);

// Appends one token (keys/values: n_kv_heads x head_dim) with score kNewScore.
// With evict set and a head over capacity, the entry with the lowest finite
// score goes; when every entry is new, the oldest goes.
void append_and_evict(PartialLayer& partial, std::int64_t position, std::span<const double> keys,
                      std::span<const double> values, bool evict);

// Moves every pending entry into the full cache in position order and empties pending.
void merge_pending(LayerStore& full, LayerStore& pending);

// Replaces partial wholesale with init_partial(full, head_scores, k).
void refresh(PartialLayer& partial, const LayerStore& full, const std::vector<std::vector<double>>& head_scores,
             std::size_t k);

// One JSON object per line: {"layer","kv_head","position","score"}; score is null for new entries.
void dump_partial_jsonl(const PartialCache& partial, std::ostream& out);

}  // namespace refreshkv
