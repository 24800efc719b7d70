#pragma once

#include <vector>

#include "lat/tensor.hpp"

namespace lat {

// Additive residual-stream perturbation at one hooked layer.
struct SiteDelta {
    int layer = 0;
    Tensor delta;  // [seq, d_model]
};

// One attack instance: per-site deltas plus the shared position mask
// (1 at prompt positions, 0 at completion positions).
struct PerturbationSet {
    std::vector<SiteDelta> sites;
    std::vector<float> mask;

    bool empty() const { return sites.empty(); }
    int seq_len() const { return static_cast<int>(mask.size()); }
};

inline std::vector<float> prompt_mask(int seq_len, int prompt_len) {
    std::vector<float> m(static_cast<size_t>(seq_len), 0.0f);
    for (int i = 0; i < prompt_len && i < seq_len; ++i) m[static_cast<size_t>(i)] = 1.0f;
    return m;
}

}  // namespace lat
