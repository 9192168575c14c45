#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace refreshkv {

// Attention probabilities or pooled selection scores over cache positions.
using ScoreVector = std::vector<double>;

// Max-subtracted softmax. Throws ContractViolation on empty or non-finite input.
ScoreVector softmax(std::span<const double> logits);

// In-place variant used on hot paths; same contract as softmax().
void softmax_inplace(std::span<double> values);

// dot(u, v) / (|u| |v|), clamped to [-1, 1]. Returns 0 when either vector is all zeros.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

// out[i] = max(scores[i - kernel/2 .. i + kernel/2]); windows are truncated at
// the sequence edges. Throws ConfigError unless kernel is odd and positive.
ScoreVector max_pool_1d(std::span<const double> scores, int kernel);

// The k largest scores, ties going to the lower index, returned in ascending
// index order. Throws ContractViolation when k == 0 or k > scores.size().
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

// max_i |a[i] - b[i]| / max(max_i |b[i]|, tiny): norm-wise relative difference.
double max_relative_difference(std::span<const double> a, std::span<const double> b);

}  // namespace refreshkv
