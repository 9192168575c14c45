#pragma once

#include <cmath>
#include <cstddef>

#include "refreshkv/model.hpp"

namespace fixtures {

// Layer-0 queries equal `sharpness` times the keys of their group, and the
// only fast-rotating rotary pair is zeroed, so a token attends to earlier
// occurrences of itself. Needs a huge rope_base to keep the other pairs
// nearly fixed over the sequence.
inline refreshkv::ModelWeights copy_biased_model(double sharpness) {
    refreshkv::ModelConfig c = refreshkv::ModelConfig::canonical();
    c.rope_base = 1e30;
    refreshkv::ModelWeights w = refreshkv::init_model(c);
    auto& layer = w.layers[0];
    const std::size_t d = c.model_dim();
    const std::size_t hd = c.head_dim;
    for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
        for (std::size_t col = 0; col < d; ++col) {
            layer.wk[(g * hd) * d + col] = 0.0;
            layer.wk[(g * hd + hd / 2) * d + col] = 0.0;
        }
    }
    for (std::size_t h = 0; h < c.n_query_heads; ++h) {
        const std::size_t g = h / c.group_size();
        for (std::size_t r = 0; r < hd; ++r) {
            for (std::size_t col = 0; col < d; ++col) {
                layer.wq[(h * hd + r) * d + col] = sharpness * layer.wk[(g * hd + r) * d + col];
            }
        }
    }
    return w;
}

}  // namespace fixtures
