#pragma once

// Straight-line transformer forward used as an independent oracle in tests.
// Plain loops over std::vector, no Graph machinery.

#include <cmath>
#include <vector>

#include "lat/model.hpp"
#include "lat/perturb.hpp"

namespace oracle {

using lat::ModelConfig;
using lat::Parameters;
using lat::PerturbationSet;

inline std::vector<float> layer_norm_affine(const std::vector<float>& x, const float* gain,
                                            const float* bias, int d) {
    std::vector<float> y(x.size());
    int rows = static_cast<int>(x.size()) / d;
    for (int r = 0; r < rows; ++r) {
        const float* xi = x.data() + r * d;
        float mu = 0.0f;
        for (int c = 0; c < d; ++c) mu += xi[c];
        mu /= static_cast<float>(d);
        float var = 0.0f;
        for (int c = 0; c < d; ++c) var += (xi[c] - mu) * (xi[c] - mu);
        var /= static_cast<float>(d);
        float inv = 1.0f / std::sqrt(var + 1e-5f);
        for (int c = 0; c < d; ++c) y[static_cast<size_t>(r * d + c)] = (xi[c] - mu) * inv * gain[c] + bias[c];
    }
    return y;
}

inline std::vector<float> linear(const std::vector<float>& x, const float* w, const float* b,
                                 int rows, int in, int out) {
    std::vector<float> y(static_cast<size_t>(rows * out), 0.0f);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < out; ++j) {
            float acc = b ? b[j] : 0.0f;
            for (int i = 0; i < in; ++i) acc += x[static_cast<size_t>(r * in + i)] * w[i * out + j];
            y[static_cast<size_t>(r * out + j)] = acc;
        }
    return y;
}

inline std::vector<float> forward_logits(const ModelConfig& cfg, const Parameters& params,
                                         const std::vector<int32_t>& ids,
                                         const PerturbationSet* perturb = nullptr) {
    const int s = static_cast<int>(ids.size());
    const int d = cfg.d_model;
    const int nh = cfg.n_heads;
    const int dh = d / nh;

    auto P = [&](const std::string& name) { return params.find(name)->f.data(); };

    std::vector<float> x(static_cast<size_t>(s * d));
    const float* emb = P("emb");
    const float* pos = P("pos");
    for (int p = 0; p < s; ++p)
        for (int c = 0; c < d; ++c)
            x[static_cast<size_t>(p * d + c)] = emb[ids[static_cast<size_t>(p)] * d + c] + pos[p * d + c];

    for (int l = 0; l < cfg.n_layers; ++l) {
        if (perturb) {
            for (const lat::SiteDelta& sd : perturb->sites) {
                if (sd.layer != l) continue;
                for (int p = 0; p < s; ++p) {
                    float m = perturb->mask[static_cast<size_t>(p)];
                    for (int c = 0; c < d; ++c)
                        x[static_cast<size_t>(p * d + c)] += sd.delta.f[static_cast<size_t>(p * d + c)] * m;
                }
            }
        }
        std::string pre = "l" + std::to_string(l) + ".";
        std::vector<float> ln1 = layer_norm_affine(x, P(pre + "ln1g"), P(pre + "ln1b"), d);
        std::vector<float> q = linear(ln1, P(pre + "wq"), P(pre + "bq"), s, d, d);
        std::vector<float> k = linear(ln1, P(pre + "wk"), P(pre + "bk"), s, d, d);
        std::vector<float> v = linear(ln1, P(pre + "wv"), P(pre + "bv"), s, d, d);

        std::vector<float> ctx(static_cast<size_t>(s * d), 0.0f);
        float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        for (int h = 0; h < nh; ++h) {
            for (int qi = 0; qi < s; ++qi) {
                std::vector<float> att(static_cast<size_t>(qi + 1));
                float mx = -1e30f;
                for (int ki = 0; ki <= qi; ++ki) {
                    float acc = 0.0f;
                    for (int c = 0; c < dh; ++c)
                        acc += q[static_cast<size_t>(qi * d + h * dh + c)] * k[static_cast<size_t>(ki * d + h * dh + c)];
                    att[static_cast<size_t>(ki)] = acc * scale;
                    mx = std::max(mx, att[static_cast<size_t>(ki)]);
                }
                float z = 0.0f;
                for (int ki = 0; ki <= qi; ++ki) z += std::exp(att[static_cast<size_t>(ki)] - mx);
                for (int ki = 0; ki <= qi; ++ki) {
                    float w = std::exp(att[static_cast<size_t>(ki)] - mx) / z;
                    for (int c = 0; c < dh; ++c)
                        ctx[static_cast<size_t>(qi * d + h * dh + c)] += w * v[static_cast<size_t>(ki * d + h * dh + c)];
                }
            }
        }
        std::vector<float> attn_out = linear(ctx, P(pre + "wo"), P(pre + "bo"), s, d, d);
        for (size_t e = 0; e < x.size(); ++e) x[e] += attn_out[e];

        std::vector<float> ln2 = layer_norm_affine(x, P(pre + "ln2g"), P(pre + "ln2b"), d);
        std::vector<float> z1 = linear(ln2, P(pre + "w1"), P(pre + "b1"), s, d, 4 * d);
        for (float& val : z1) {
            float sig = val >= 0 ? 1.0f / (1.0f + std::exp(-val)) : std::exp(val) / (1.0f + std::exp(val));
            val = val * sig;
        }
        std::vector<float> mlp_out = linear(z1, P(pre + "w2"), P(pre + "b2"), s, 4 * d, d);
        for (size_t e = 0; e < x.size(); ++e) x[e] += mlp_out[e];
    }

    std::vector<float> xf = layer_norm_affine(x, P("lnf_g"), P("lnf_b"), d);
    return linear(xf, P("unemb"), P("unemb_b"), s, d, cfg.vocab_size);
}

inline std::vector<float> softmax_row(const float* row, int n) {
    float mx = row[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    float z = 0.0f;
    for (int i = 0; i < n; ++i) z += std::exp(row[i] - mx);
    std::vector<float> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = std::exp(row[i] - mx) / z;
    return p;
}

}  // namespace oracle
