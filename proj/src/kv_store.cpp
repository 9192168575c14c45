#include "refreshkv/kv_store.hpp"

#include <algorithm>
#include <ostream>
#include <string>

#include <json.hpp>

#include "refreshkv/errors.hpp"
#include "refreshkv/numerics.hpp"

namespace refreshkv {

std::int64_t HeadStore::last_position() const {
    if (positions_.empty()) {
        throw ContractViolation("HeadStore::last_position on empty store");
    }
    return positions_.back();
}

void HeadStore::append(std::int64_t position, std::span<const double> key, std::span<const double> value) {
    if (key.size() != head_dim_ || value.size() != head_dim_) {
        throw ContractViolation("HeadStore::append: vector width " + std::to_string(key.size()) + " != head_dim " +
                                std::to_string(head_dim_));
    }
    if (!positions_.empty() && position <= positions_.back()) {
        throw ContractViolation("HeadStore::append: position " + std::to_string(position) +
                                " does not follow " + std::to_string(positions_.back()));
    }
    positions_.push_back(position);
    keys_.insert(keys_.end(), key.begin(), key.end());
    values_.insert(values_.end(), value.begin(), value.end());
}

void HeadStore::erase(std::size_t index) {
    if (index >= positions_.size()) {
        throw ContractViolation("HeadStore::erase: index out of range");
    }
    positions_.erase(positions_.begin() + static_cast<std::ptrdiff_t>(index));
    const auto offset = static_cast<std::ptrdiff_t>(index * head_dim_);
    const auto width = static_cast<std::ptrdiff_t>(head_dim_);
    keys_.erase(keys_.begin() + offset, keys_.begin() + offset + width);
    values_.erase(values_.begin() + offset, values_.begin() + offset + width);
}

void HeadStore::clear() {
    positions_.clear();
    keys_.clear();
    values_.clear();
}

void HeadStore::reserve(std::size_t n) {
    positions_.reserve(n);
    keys_.reserve(n * head_dim_);
    values_.reserve(n * head_dim_);
}

void LayerStore::append(std::int64_t position, std::span<const double> keys, std::span<const double> values) {
    if (heads.empty()) {
        throw ContractViolation("LayerStore::append: no heads");
    }
    const std::size_t hd = heads.front().head_dim();
    if (keys.size() != heads.size() * hd || values.size() != heads.size() * hd) {
        throw ContractViolation("LayerStore::append: token KV has wrong width");
    }
    for (std::size_t g = 0; g < heads.size(); ++g) {
        heads[g].append(position, keys.subspan(g * hd, hd), values.subspan(g * hd, hd));
    }
}

void LayerStore::clear() {
    for (auto& head : heads) {
        head.clear();
    }
}

LayerView LayerStore::view() const {
    LayerView out;
    out.reserve(heads.size());
    for (const auto& head : heads) {
        out.push_back(head.view());
    }
    return out;
}

std::size_t PartialLayer::size() const {
    std::size_t n = 0;
    for (const auto& head : heads) {
        n = std::max(n, head.size());
    }
    return n;
}

LayerView PartialLayer::view() const {
    LayerView out;
    out.reserve(heads.size());
    for (const auto& head : heads) {
        out.push_back(head.store.view());
    }
    return out;
}

PartialLayer init_partial(const LayerStore& full, const std::vector<std::vector<double>>& head_scores, std::size_t k) {
    if (head_scores.size() != full.heads.size()) {
        throw ContractViolation("init_partial: need one score vector per kv-head");
    }
    if (k == 0 || k > full.size()) {
        throw ConfigError("init_partial: k=" + std::to_string(k) + " outside [1, " + std::to_string(full.size()) +
                          "]");
    }
    PartialLayer out;
    out.capacity = k;
    out.heads.reserve(full.heads.size());
    for (std::size_t g = 0; g < full.heads.size(); ++g) {
        const HeadStore& src = full.heads[g];
        const auto& scores = head_scores[g];
        if (scores.size() != src.size()) {
            throw ContractViolation("init_partial: score vector length " + std::to_string(scores.size()) +
                                    " != cache length " + std::to_string(src.size()));
        }
        PartialHead head{HeadStore(src.head_dim()), {}};
        head.store.reserve(k);
        head.scores.reserve(k);
        for (std::size_t i : top_k_indices(scores, k)) {
            head.store.append(src.positions()[i], src.key(i), src.value(i));
            head.scores.push_back(scores[i]);
        }
        out.heads.push_back(std::move(head));
    }
    return out;
}

namespace {

std::size_t eviction_victim(const std::vector<double>& scores) {
    std::size_t victim = scores.size();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (is_new_score(scores[i])) {
            continue;
        }
        if (victim == scores.size() || scores[i] < scores[victim]) {
            victim = i;
        }
    }
    // All entries new: the oldest goes.
    return victim == scores.size() ? 0 : victim;
}

}  // namespace

void append_and_evict(PartialLayer& partial, std::int64_t position, std::span<const double> keys,
                      std::span<const double> values, bool evict) {
    if (partial.heads.empty()) {
        throw ContractViolation("append_and_evict: partial cache not initialized");
    }
    const std::size_t hd = partial.heads.front().store.head_dim();
    if (keys.size() != partial.heads.size() * hd || values.size() != keys.size()) {
        throw ContractViolation("append_and_evict: token KV has wrong width");
    }
    for (std::size_t g = 0; g < partial.heads.size(); ++g) {
        PartialHead& head = partial.heads[g];
        head.store.append(position, keys.subspan(g * hd, hd), values.subspan(g * hd, hd));
        head.scores.push_back(kNewScore);
        if (evict && head.size() > partial.capacity) {
            const std::size_t victim = eviction_victim(head.scores);
            head.store.erase(victim);
            head.scores.erase(head.scores.begin() + static_cast<std::ptrdiff_t>(victim));
        }
    }
}

void merge_pending(LayerStore& full, LayerStore& pending) {
    if (pending.empty()) {
        return;
    }
    if (pending.heads.size() != full.heads.size()) {
        throw ContractViolation("merge_pending: head count mismatch");
    }
    for (std::size_t g = 0; g < full.heads.size(); ++g) {
        HeadStore& dst = full.heads[g];
        const HeadStore& src = pending.heads[g];
        if (!dst.empty() && src.positions().front() <= dst.last_position()) {
            throw ContractViolation("merge_pending: pending position " + std::to_string(src.positions().front()) +
                                    " does not follow full cache position " + std::to_string(dst.last_position()));
        }
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst.append(src.positions()[i], src.key(i), src.value(i));
        }
    }
    pending.clear();
}

void refresh(PartialLayer& partial, const LayerStore& full, const std::vector<std::vector<double>>& head_scores,
             std::size_t k) {
    partial = init_partial(full, head_scores, k);
}

void dump_partial_jsonl(const PartialCache& partial, std::ostream& out) {
    for (std::size_t layer = 0; layer < partial.size(); ++layer) {
        const auto& heads = partial[layer].heads;
        for (std::size_t g = 0; g < heads.size(); ++g) {
            for (std::size_t i = 0; i < heads[g].size(); ++i) {
                nlohmann::json line = {{"layer", layer},
                                       {"kv_head", g},
                                       {"position", heads[g].store.positions()[i]}};
                const double score = heads[g].scores[i];
                line["score"] = is_new_score(score) ? nlohmann::json(nullptr) : nlohmann::json(score);
                out << line.dump() << '\n';
            }
        }
    }
}

}  // namespace refreshkv
