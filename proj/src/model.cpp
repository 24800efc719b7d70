#include "lat/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace lat {

void ModelConfig::validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || vocab_size <= 0 || max_context <= 0)
        throw std::invalid_argument("model config: extents must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model not divisible by n_heads");
}

void TokenSequence::validate(int vocab_size) const {
    if (prompt_len <= 0 || prompt_len > length())
        throw std::invalid_argument("token sequence: prompt_len out of range");
    for (int32_t id : ids)
        if (id < 0 || id >= vocab_size) throw std::invalid_argument("token sequence: id out of vocab");
}

Tensor* Parameters::find(const std::string& name) {
    for (auto& [k, v] : entries)
        if (k == name) return &v;
    return nullptr;
}

const Tensor* Parameters::find(const std::string& name) const {
    for (const auto& [k, v] : entries)
        if (k == name) return &v;
    return nullptr;
}

bool Parameters::all_finite() const {
    for (const auto& [k, v] : entries)
        if (!v.all_finite()) return false;
    return true;
}

std::vector<std::string> parameter_names(const ModelConfig& cfg) {
    std::vector<std::string> names{"emb", "pos"};
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string p = "l" + std::to_string(l) + ".";
        for (const char* s : {"ln1g", "ln1b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                              "ln2g", "ln2b", "w1", "b1", "w2", "b2"})
            names.push_back(p + s);
    }
    names.push_back("lnf_g");
    names.push_back("lnf_b");
    names.push_back("unemb");
    names.push_back("unemb_b");
    return names;
}

Parameters init_parameters(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng = rng_stream(seed, "param-init");
    const int64_t d = cfg.d_model, h = 4 * cfg.d_model, v = cfg.vocab_size;
    Parameters p;
    auto put = [&](const std::string& name, Tensor t) { p.entries.emplace_back(name, std::move(t)); };
    auto linear = [&](int64_t in, int64_t out) {
        return rng.normal_tensor({in, out}, 1.0f / std::sqrt(static_cast<float>(in)));
    };
    put("emb", rng.normal_tensor({v, d}, 0.08f));
    put("pos", rng.normal_tensor({cfg.max_context, d}, 0.08f));
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "l" + std::to_string(l) + ".";
        put(pre + "ln1g", Tensor::full({d}, 1.0f));
        put(pre + "ln1b", Tensor::zeros({d}));
        put(pre + "wq", linear(d, d));
        put(pre + "bq", Tensor::zeros({d}));
        put(pre + "wk", linear(d, d));
        put(pre + "bk", Tensor::zeros({d}));
        put(pre + "wv", linear(d, d));
        put(pre + "bv", Tensor::zeros({d}));
        put(pre + "wo", linear(d, d));
        put(pre + "bo", Tensor::zeros({d}));
        put(pre + "ln2g", Tensor::full({d}, 1.0f));
        put(pre + "ln2b", Tensor::zeros({d}));
        put(pre + "w1", linear(d, h));
        put(pre + "b1", Tensor::zeros({h}));
        put(pre + "w2", linear(h, d));
        put(pre + "b2", Tensor::zeros({d}));
    }
    put("lnf_g", Tensor::full({d}, 1.0f));
    put("lnf_b", Tensor::zeros({d}));
    put("unemb", linear(d, v));
    put("unemb_b", Tensor::zeros({v}));
    return p;
}

FwdNodes append_forward(Graph& g, const ModelConfig& cfg, int seq_len,
                        const std::vector<HookSite>& sites, const std::string& prefix) {
    cfg.validate();
    if (seq_len <= 0 || seq_len > cfg.max_context)
        throw std::invalid_argument("forward: sequence length out of range");
    std::set<int> hooked;
    for (const HookSite& s : sites) {
        if (s.layer_index < 0 || s.layer_index >= cfg.n_layers)
            throw std::invalid_argument("forward: hook site layer " + std::to_string(s.layer_index) +
                                        " out of range for " + std::to_string(cfg.n_layers) + " layers");
        hooked.insert(s.layer_index);
    }

    FwdNodes fg;
    fg.prefix = prefix;
    fg.seq_len = seq_len;
    fg.hooked_layers.assign(hooked.begin(), hooked.end());
    const int64_t s = seq_len, d = cfg.d_model;
    const int nh = cfg.n_heads;
    const int64_t dh = cfg.head_dim();

    fg.tokens = g.input_ids(prefix + "tokens");
    fg.mask = g.input(prefix + "mask");

    // learned absolute positions: rows 0..s of the position table
    std::vector<int32_t> iota(static_cast<size_t>(s));
    for (int i = 0; i < seq_len; ++i) iota[static_cast<size_t>(i)] = i;
    Graph::Id pos_ids = g.constant(Tensor::ids({s}, std::move(iota)));

    Graph::Id x = g.add(g.gather_rows(g.input("emb"), fg.tokens),
                        g.gather_rows(g.input("pos"), pos_ids));

    // causal mask: 0 where key <= query, -1e9 elsewhere (exp underflows to exact 0)
    Tensor causal = Tensor::zeros({s, s});
    for (int64_t q = 0; q < s; ++q)
        for (int64_t k = q + 1; k < s; ++k) causal.f[static_cast<size_t>(q * s + k)] = -1e9f;
    Graph::Id causal_c = g.constant(std::move(causal));

    auto heads = [&](Graph::Id t) {  // [s,d] -> [nh,s,dh]
        return g.transpose(g.reshape(t, {s, nh, dh}), {1, 0, 2});
    };

    for (int l = 0; l < cfg.n_layers; ++l) {
        if (hooked.count(l)) {
            Graph::Id delta = g.input(prefix + "delta.l" + std::to_string(l));
            x = g.add(x, g.mul(delta, fg.mask));
        }
        fg.residual_in.push_back(x);

        std::string pre = "l" + std::to_string(l) + ".";
        Graph::Id ln1 = g.add(g.mul(g.layer_norm(x), g.input(pre + "ln1g")), g.input(pre + "ln1b"));
        Graph::Id q = heads(g.add(g.matmul(ln1, g.input(pre + "wq")), g.input(pre + "bq")));
        Graph::Id k = heads(g.add(g.matmul(ln1, g.input(pre + "wk")), g.input(pre + "bk")));
        Graph::Id v = heads(g.add(g.matmul(ln1, g.input(pre + "wv")), g.input(pre + "bv")));
        Graph::Id scores = g.scale(g.matmul(q, g.transpose(k, {0, 2, 1})),
                                   1.0f / std::sqrt(static_cast<float>(dh)));
        Graph::Id att = g.softmax(g.add(scores, causal_c));
        Graph::Id ctx = g.reshape(g.transpose(g.matmul(att, v), {1, 0, 2}), {s, d});
        Graph::Id attn_out = g.add(g.matmul(ctx, g.input(pre + "wo")), g.input(pre + "bo"));
        x = g.add(x, attn_out);

        Graph::Id ln2 = g.add(g.mul(g.layer_norm(x), g.input(pre + "ln2g")), g.input(pre + "ln2b"));
        Graph::Id z = g.add(g.matmul(ln2, g.input(pre + "w1")), g.input(pre + "b1"));
        Graph::Id silu = g.mul(z, g.sigmoid(z));
        Graph::Id mlp_out = g.add(g.matmul(silu, g.input(pre + "w2")), g.input(pre + "b2"));
        x = g.add(x, mlp_out);
    }

    Graph::Id xf = g.add(g.mul(g.layer_norm(x), g.input("lnf_g")), g.input("lnf_b"));
    fg.logits = g.add(g.matmul(xf, g.input("unemb")), g.input("unemb_b"));
    return fg;
}

Graph::Id append_completion_nll(Graph& g, const FwdNodes& f, const TokenSequence& seq) {
    const int s = seq.length();
    if (s != f.seq_len) throw std::invalid_argument("completion_nll: sequence length mismatch");
    if (seq.completion_len() <= 0) throw std::invalid_argument("completion_nll: empty completion");
    std::vector<int32_t> targets(seq.ids.begin() + 1, seq.ids.end());
    std::vector<float> w(static_cast<size_t>(s - 1), 0.0f);
    for (int i = seq.prompt_len - 1; i < s - 1; ++i) w[static_cast<size_t>(i)] = 1.0f;
    std::vector<int32_t> row_ids(static_cast<size_t>(s - 1));
    for (int i = 0; i < s - 1; ++i) row_ids[static_cast<size_t>(i)] = i;
    Graph::Id pred = g.gather_rows(f.logits, g.constant(Tensor::ids({s - 1}, std::move(row_ids))));
    Graph::Id tgt = g.constant(Tensor::ids({s - 1}, std::move(targets)));
    Graph::Id wts = g.constant(Tensor::from({s - 1}, std::move(w)));
    return g.cross_entropy(pred, tgt, wts);
}

ForwardGraph build_forward_graph(const ModelConfig& cfg, int seq_len, const std::vector<HookSite>& sites) {
    ForwardGraph fg;
    fg.nodes = append_forward(fg.g, cfg, seq_len, sites, "");
    fg.g.set_output(fg.nodes.logits);
    return fg;
}

void bind_parameters(Bindings& b, const Parameters& params) {
    for (const auto& [name, t] : params.entries) b.set(name, t);
}

void bind_pass(Bindings& b, const FwdNodes& f, const TokenSequence& seq,
               const PerturbationSet* perturb, ExampleStage& storage) {
    const int s = f.seq_len;
    if (seq.length() != s) throw std::invalid_argument("bind_pass: sequence length mismatch");
    storage.tokens = Tensor::ids({s}, seq.ids);
    b.set(f.prefix + "tokens", storage.tokens);

    std::vector<float> m = prompt_mask(s, seq.prompt_len);
    if (perturb && static_cast<int>(perturb->mask.size()) == s) m = perturb->mask;
    storage.mask = Tensor::from({s, 1}, std::move(m));
    b.set(f.prefix + "mask", storage.mask);

    const Tensor* emb = b.find("emb");
    const int64_t d = emb ? emb->shape[1] : 0;

    storage.deltas.clear();
    storage.deltas.reserve(f.hooked_layers.size());
    for (int layer : f.hooked_layers) {
        const Tensor* found = nullptr;
        if (perturb) {
            for (const SiteDelta& sd : perturb->sites)
                if (sd.layer == layer) found = &sd.delta;
        }
        if (!found) {
            storage.deltas.push_back(Tensor::zeros({s, d}));
        } else if (found->shape[0] == s) {
            storage.deltas.push_back(*found);
        } else {
            // prompt-region delta: pad completion rows with zeros
            Tensor padded = Tensor::zeros({s, d});
            int64_t rows = std::min<int64_t>(found->shape[0], s);
            std::copy(found->f.begin(), found->f.begin() + rows * d, padded.f.begin());
            storage.deltas.push_back(std::move(padded));
        }
    }
    for (size_t i = 0; i < f.hooked_layers.size(); ++i)
        b.set(f.prefix + "delta.l" + std::to_string(f.hooked_layers[i]), storage.deltas[i]);
}

namespace {

std::vector<HookSite> sites_from(const PerturbationSet* p) {
    std::vector<HookSite> sites;
    if (p)
        for (const SiteDelta& sd : p->sites) sites.push_back({sd.layer});
    return sites;
}

void validate_perturbation(const ModelConfig& cfg, const TokenSequence& seq, const PerturbationSet& p) {
    const int s = seq.length();
    if (!p.mask.empty() && static_cast<int>(p.mask.size()) != s)
        throw std::invalid_argument("perturbation: mask length mismatch");
    const std::vector<float> fallback = prompt_mask(s, seq.prompt_len);
    const std::vector<float>& mask = p.mask.empty() ? fallback : p.mask;
    for (const SiteDelta& sd : p.sites) {
        if (sd.layer < 0 || sd.layer >= cfg.n_layers)
            throw std::invalid_argument("perturbation: site layer " + std::to_string(sd.layer) + " out of range");
        if (sd.delta.shape != std::vector<int64_t>{s, cfg.d_model})
            throw std::invalid_argument("perturbation: delta shape must be [seq, d_model]");
        for (int pos = 0; pos < s; ++pos) {
            if (mask[static_cast<size_t>(pos)] != 0.0f) continue;
            for (int64_t c = 0; c < cfg.d_model; ++c)
                if (sd.delta.f[static_cast<size_t>(pos * cfg.d_model + c)] != 0.0f)
                    throw std::invalid_argument("perturbation: nonzero delta at completion position " +
                                                std::to_string(pos));
        }
    }
}

}  // namespace

Tensor forward(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
               const PerturbationSet* perturb) {
    seq.validate(cfg.vocab_size);
    if (perturb) validate_perturbation(cfg, seq, *perturb);
    ForwardGraph fg = build_forward_graph(cfg, seq.length(), sites_from(perturb));
    Bindings b;
    bind_parameters(b, params);
    ExampleStage stage;
    bind_pass(b, fg.nodes, seq, perturb, stage);
    return fg.g.evaluate(b);
}

float sequence_log_prob(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
                        const PerturbationSet* perturb) {
    seq.validate(cfg.vocab_size);
    if (seq.completion_len() <= 0) throw std::invalid_argument("sequence_log_prob: empty completion");
    if (perturb) validate_perturbation(cfg, seq, *perturb);

    ForwardGraph fg = build_forward_graph(cfg, seq.length(), sites_from(perturb));
    Graph::Id nll = append_completion_nll(fg.g, fg.nodes, seq);
    fg.g.set_output(nll);

    Bindings b;
    bind_parameters(b, params);
    ExampleStage stage;
    bind_pass(b, fg.nodes, seq, perturb, stage);
    return -fg.g.evaluate(b).f[0];
}

TokenSequence greedy_decode(const ModelConfig& cfg, const Parameters& params,
                            const TokenSequence& prompt, int max_new) {
    prompt.validate(cfg.vocab_size);
    if (prompt.length() + max_new > cfg.max_context)
        throw std::invalid_argument("greedy_decode: prompt + max_new exceeds context");
    TokenSequence out;
    out.ids = prompt.ids;
    out.prompt_len = prompt.length();
    for (int step = 0; step < max_new; ++step) {
        TokenSequence cur;
        cur.ids = out.ids;
        cur.prompt_len = cur.length();
        Tensor logits = forward(cfg, params, cur, nullptr);
        const int64_t v = cfg.vocab_size;
        const float* row = logits.f.data() + (cur.length() - 1) * v;
        int32_t best = 0;
        for (int64_t c = 1; c < v; ++c)
            if (row[c] > row[best]) best = static_cast<int32_t>(c);
        out.ids.push_back(best);
    }
    return out;
}

std::vector<HookSite> hook_sites_for(const std::string& profile, int n_layers, int k) {
    std::vector<int> layers;
    if (profile == "jailbreak32") {
        layers = {8, 16, 24, 30};
    } else if (profile == "backdoor32") {
        layers = {4, 12, 20, 28};
    } else if (profile == "even") {
        if (k <= 0 || k > n_layers) throw std::invalid_argument("hook_sites_for: k out of range");
        std::set<int> s;
        for (int i = 1; i <= k; ++i) {
            int64_t v = static_cast<int64_t>(n_layers) * i / k - 1;
            v = std::clamp<int64_t>(v, 0, n_layers - 1);
            s.insert(static_cast<int>(v));
        }
        layers.assign(s.begin(), s.end());
    } else {
        throw std::invalid_argument("hook_sites_for: unknown profile '" + profile + "'");
    }
    std::vector<HookSite> out;
    for (int l : layers) {
        if (l < 0 || l >= n_layers)
            throw std::invalid_argument("hook_sites_for: profile '" + profile + "' does not fit " +
                                        std::to_string(n_layers) + " layers");
        out.push_back({l});
    }
    return out;
}

}  // namespace lat
