#include "lat/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lat {

namespace {

constexpr float kProbClamp = 1.0f - 1e-6f;
constexpr float kLogisticClip = 30.0f;

TokenSequence join(const std::vector<int32_t>& prompt, const std::vector<int32_t>& completion) {
    TokenSequence s;
    s.ids = prompt;
    s.ids.insert(s.ids.end(), completion.begin(), completion.end());
    s.prompt_len = static_cast<int>(prompt.size());
    return s;
}

// completion-position indicator over predicting rows 0..s-2
Tensor completion_weights(const TokenSequence& seq) {
    const int s = seq.length();
    std::vector<float> w(static_cast<size_t>(s - 1), 0.0f);
    for (int i = seq.prompt_len - 1; i < s - 1; ++i) w[static_cast<size_t>(i)] = 1.0f;
    return Tensor::from({s - 1}, std::move(w));
}

Graph::Id predicting_rows(Graph& g, const FwdNodes& f) {
    const int s = f.seq_len;
    std::vector<int32_t> row_ids(static_cast<size_t>(s - 1));
    for (int i = 0; i < s - 1; ++i) row_ids[static_cast<size_t>(i)] = i;
    return g.gather_rows(f.logits, g.constant(Tensor::ids({s - 1}, std::move(row_ids))));
}

// -sum_i w_i log(1 - min(p_i, 1 - 1e-6)) with p_i the realized-token probability
Graph::Id append_away_term(Graph& g, const FwdNodes& f, const TokenSequence& seq) {
    const int s = seq.length();
    if (seq.completion_len() <= 0) throw std::invalid_argument("away term: empty completion");
    std::vector<int32_t> targets(seq.ids.begin() + 1, seq.ids.end());
    Graph::Id probs = g.softmax(predicting_rows(g, f));
    Graph::Id p = g.take_per_row(probs, g.constant(Tensor::ids({s - 1}, std::move(targets))));
    Graph::Id clamped = g.clamp_max(p, kProbClamp);
    Graph::Id one_minus = g.add_scalar(g.neg(clamped), 1.0f);
    Graph::Id weighted = g.mul(g.log(one_minus), g.constant(completion_weights(seq)));
    return g.neg(g.sum(weighted));
}

Graph::Id clip_symmetric(Graph& g, Graph::Id z, float bound) {
    return g.neg(g.clamp_max(g.neg(g.clamp_max(z, bound)), bound));
}

// softmax / log-softmax rows mirroring the engine's float arithmetic exactly
void reference_rows(const Tensor& logits, int row0, int rows, int v, Tensor& pstar, Tensor& logpstar) {
    pstar = Tensor::zeros({rows, v});
    logpstar = Tensor::zeros({rows, v});
    for (int r = 0; r < rows; ++r) {
        const float* xi = logits.f.data() + (row0 + r) * v;
        float mx = -std::numeric_limits<float>::infinity();
        for (int c = 0; c < v; ++c) mx = std::max(mx, xi[c]);
        float z = 0.0f;
        for (int c = 0; c < v; ++c) z += std::exp(xi[c] - mx);
        float inv = 1.0f / z;
        float lse = mx + std::log(z);
        for (int c = 0; c < v; ++c) {
            pstar.f[static_cast<size_t>(r * v + c)] = std::exp(xi[c] - mx) * inv;
            logpstar.f[static_cast<size_t>(r * v + c)] = xi[c] - lse;
        }
    }
}

std::vector<int> layer_list(const std::vector<HookSite>& sites) {
    std::vector<int> out;
    for (const HookSite& s : sites) out.push_back(s.layer_index);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace

TokenSequence PreferenceTriple::chosen_seq() const { return join(prompt, chosen); }
TokenSequence PreferenceTriple::rejected_seq() const { return join(prompt, rejected); }

void PreferenceTriple::validate(const ModelConfig& cfg) const {
    if (chosen.empty() || rejected.empty())
        throw std::invalid_argument("preference triple: completions must be non-empty");
    chosen_seq().validate(cfg.vocab_size);
    rejected_seq().validate(cfg.vocab_size);
    if (static_cast<int>(prompt.size() + std::max(chosen.size(), rejected.size())) > cfg.max_context)
        throw std::invalid_argument("preference triple: exceeds max context");
}

void RmuSpec::validate(const ModelConfig& cfg) const {
    if (u.shape != std::vector<int64_t>{cfg.d_model})
        throw std::invalid_argument("rmu spec: u must be [d_model]");
    double n2 = 0.0;
    for (float v : u.f) n2 += static_cast<double>(v) * v;
    if (std::fabs(std::sqrt(n2) - 1.0) > 1e-4) throw std::invalid_argument("rmu spec: u must be unit norm");
    if (c <= 0.0f) throw std::invalid_argument("rmu spec: c must be > 0");
    if (alpha < 0.0f) throw std::invalid_argument("rmu spec: alpha must be >= 0");
    if (rmu_layer < 0 || rmu_layer >= cfg.n_layers)
        throw std::invalid_argument("rmu spec: rmu_layer out of range");
}

RmuSpec make_rmu_spec(const ModelConfig& cfg, uint64_t seed, int rmu_layer, float c, float alpha) {
    Rng rng = rng_stream(seed, "rmu-steering");
    RmuSpec spec;
    spec.u = rng.uniform_tensor({cfg.d_model}, 0.0f, 1.0f);
    double n2 = 0.0;
    for (float v : spec.u.f) n2 += static_cast<double>(v) * v;
    float inv = static_cast<float>(1.0 / std::sqrt(n2));
    for (float& v : spec.u.f) v *= inv;
    spec.c = c;
    spec.alpha = alpha;
    spec.rmu_layer = rmu_layer;
    spec.validate(cfg);
    return spec;
}

void PreparedLoss::bind_all(Bindings& b, const Parameters& params, const PerturbationSet* delta,
                            std::vector<ExampleStage>& stages) {
    if (delta) {
        for (const SiteDelta& sd : delta->sites) {
            if (std::find(site_layers_.begin(), site_layers_.end(), sd.layer) == site_layers_.end())
                throw std::invalid_argument("loss: delta at layer " + std::to_string(sd.layer) +
                                            " but this loss hooks no such site");
            if (sd.delta.shape != std::vector<int64_t>{prompt_len_, d_model_})
                throw std::invalid_argument("loss: delta must span the prompt region [prompt_len, d_model]");
        }
    }
    // non-finite values propagate to the trainer's guards instead of throwing
    b.allow_nonfinite = true;
    bind_parameters(b, params);
    stages.resize(passes_.size());
    for (size_t i = 0; i < passes_.size(); ++i)
        bind_pass(b, passes_[i].nodes, passes_[i].seq, delta, stages[i]);
}

float PreparedLoss::value(const Parameters& params, const PerturbationSet* delta) {
    Bindings b;
    std::vector<ExampleStage> stages;
    bind_all(b, params, delta, stages);
    return g_.evaluate(b).f[0];
}

std::pair<float, std::map<int, Tensor>> PreparedLoss::delta_grad(const Parameters& params,
                                                                 const PerturbationSet& delta) {
    Bindings b;
    std::vector<ExampleStage> stages;
    bind_all(b, params, &delta, stages);

    std::set<std::string> wrt;
    for (const Pass& p : passes_)
        for (int layer : p.nodes.hooked_layers) wrt.insert(p.nodes.prefix + "delta.l" + std::to_string(layer));
    auto grads = g_.gradients(b, wrt);
    float loss = g_.node_value(g_.output()).f[0];

    std::map<int, Tensor> out;
    for (const Pass& p : passes_) {
        for (int layer : p.nodes.hooked_layers) {
            const Tensor& full = grads.at(p.nodes.prefix + "delta.l" + std::to_string(layer));
            Tensor& acc = out.try_emplace(layer, Tensor::zeros({prompt_len_, d_model_})).first->second;
            // completion rows carry no gradient (mask-multiplied); keep prompt rows
            for (int64_t r = 0; r < prompt_len_; ++r)
                for (int64_t c = 0; c < d_model_; ++c)
                    acc.f[static_cast<size_t>(r * d_model_ + c)] += full.f[static_cast<size_t>(r * d_model_ + c)];
        }
    }
    return {loss, std::move(out)};
}

float PreparedLoss::fd_check(const Parameters& params, const PerturbationSet* delta,
                             const std::string& wrt, float h) {
    Bindings b;
    std::vector<ExampleStage> stages;
    bind_all(b, params, delta, stages);
    return finite_difference_check(g_, b, wrt, h);
}

std::vector<std::string> PreparedLoss::delta_input_names() const {
    std::vector<std::string> names;
    for (const Pass& p : passes_)
        for (int layer : p.nodes.hooked_layers) names.push_back(p.nodes.prefix + "delta.l" + std::to_string(layer));
    return names;
}

std::pair<float, std::map<std::string, Tensor>> PreparedLoss::param_grad(
    const Parameters& params, const std::set<std::string>& wrt, const PerturbationSet* delta) {
    for (const std::string& name : wrt)
        if (name.find("delta.") != std::string::npos)
            throw std::invalid_argument("param_grad: perturbations are fixed during the defense pass");
    Bindings b;
    std::vector<ExampleStage> stages;
    bind_all(b, params, delta, stages);
    auto grads = g_.gradients(b, wrt);
    float loss = g_.node_value(g_.output()).f[0];
    return {loss, std::move(grads)};
}

// --- builders ---------------------------------------------------------------

PreparedLoss prepare_rt_attack(const ModelConfig& cfg, const PreferenceTriple& t,
                               const std::vector<HookSite>& sites) {
    t.validate(cfg);
    PreparedLoss L;
    L.prompt_len_ = t.prompt_len();
    L.d_model_ = cfg.d_model;
    L.site_layers_ = layer_list(sites);

    TokenSequence toward = t.rejected_seq();
    TokenSequence away = t.chosen_seq();
    FwdNodes ftow = append_forward(L.g_, cfg, toward.length(), sites, "r.");
    FwdNodes fawy = append_forward(L.g_, cfg, away.length(), sites, "c.");
    Graph::Id loss = L.g_.add(append_completion_nll(L.g_, ftow, toward),
                              append_away_term(L.g_, fawy, away));
    L.g_.set_output(loss);
    L.passes_.push_back({ftow, toward});
    L.passes_.push_back({fawy, away});
    return L;
}

PreparedLoss prepare_rt_defense(const ModelConfig& cfg, const PreferenceTriple& t,
                                const std::vector<HookSite>& sites) {
    PreferenceTriple swapped{t.prompt, t.rejected, t.chosen};
    return prepare_rt_attack(cfg, swapped, sites);
}

PreparedLoss prepare_benign_sft(const ModelConfig& cfg, const TokenSequence& seq) {
    seq.validate(cfg.vocab_size);
    if (seq.completion_len() <= 0) throw std::invalid_argument("benign sft: empty completion");
    PreparedLoss L;
    L.prompt_len_ = seq.prompt_len;
    L.d_model_ = cfg.d_model;
    FwdNodes f = append_forward(L.g_, cfg, seq.length(), {}, "b.");
    Graph::Id nll = append_completion_nll(L.g_, f, seq);
    L.g_.set_output(L.g_.scale(nll, 1.0f / static_cast<float>(seq.completion_len())));
    L.passes_.push_back({f, seq});
    return L;
}

PreparedLoss prepare_benign_kl(const ModelConfig& cfg, const ReferenceHandle& ref,
                               const TokenSequence& seq) {
    seq.validate(cfg.vocab_size);
    if (seq.completion_len() <= 0) throw std::invalid_argument("benign kl: empty completion");
    PreparedLoss L;
    L.prompt_len_ = seq.prompt_len;
    L.d_model_ = cfg.d_model;
    FwdNodes f = append_forward(L.g_, cfg, seq.length(), {}, "k.");

    Tensor ref_logits = forward(cfg, ref.frozen, seq);
    const int s = seq.length(), v = cfg.vocab_size;
    Tensor pstar, logpstar;
    reference_rows(ref_logits, 0, s - 1, v, pstar, logpstar);

    Graph& g = L.g_;
    Graph::Id logp = g.log_softmax(predicting_rows(g, f));
    Graph::Id diff = g.sub(g.constant(std::move(logpstar)), logp);
    Graph::Id terms = g.mul(g.constant(std::move(pstar)), diff);
    Tensor w = completion_weights(seq);
    Graph::Id masked = g.mul(terms, g.reshape(g.constant(std::move(w)), {s - 1, 1}));
    g.set_output(g.scale(g.sum(masked), 1.0f / static_cast<float>(seq.completion_len())));
    L.passes_.push_back({f, seq});
    return L;
}

PreparedLoss prepare_dpo_with_refs(const ModelConfig& cfg, const PreferenceTriple& t, float beta,
                                   float ref_chosen_logprob, float ref_rejected_logprob,
                                   const std::vector<HookSite>& sites) {
    if (beta <= 0.0f) throw std::invalid_argument("dpo: beta must be > 0");
    t.validate(cfg);
    PreparedLoss L;
    L.prompt_len_ = t.prompt_len();
    L.d_model_ = cfg.d_model;
    L.site_layers_ = layer_list(sites);

    TokenSequence win = t.chosen_seq();
    TokenSequence lose = t.rejected_seq();

    Graph& g = L.g_;
    FwdNodes fw = append_forward(g, cfg, win.length(), sites, "w.");
    FwdNodes fl = append_forward(g, cfg, lose.length(), sites, "l.");
    Graph::Id lp_w = g.neg(append_completion_nll(g, fw, win));
    Graph::Id lp_l = g.neg(append_completion_nll(g, fl, lose));
    Graph::Id margin = g.sub(g.add_scalar(lp_w, -ref_chosen_logprob),
                             g.add_scalar(lp_l, -ref_rejected_logprob));
    Graph::Id z = clip_symmetric(g, g.scale(margin, beta), kLogisticClip);
    g.set_output(g.neg(g.log(g.sigmoid(z))));
    L.passes_.push_back({fw, win});
    L.passes_.push_back({fl, lose});
    return L;
}

PreparedLoss prepare_dpo(const ModelConfig& cfg, const ReferenceHandle& ref,
                         const PreferenceTriple& t, float beta, bool flip,
                         const std::vector<HookSite>& sites) {
    if (beta <= 0.0f) throw std::invalid_argument("dpo: beta must be > 0");
    if (flip) {
        PreferenceTriple swapped{t.prompt, t.rejected, t.chosen};
        return prepare_dpo(cfg, ref, swapped, beta, false, sites);
    }
    t.validate(cfg);
    float ref_win = sequence_log_prob(cfg, ref.frozen, t.chosen_seq());
    float ref_lose = sequence_log_prob(cfg, ref.frozen, t.rejected_seq());
    return prepare_dpo_with_refs(cfg, t, beta, ref_win, ref_lose, sites);
}

PreparedLoss prepare_unlearn_attack(const ModelConfig& cfg, const TokenSequence& seq,
                                    const std::vector<HookSite>& sites) {
    seq.validate(cfg.vocab_size);
    PreparedLoss L;
    L.prompt_len_ = seq.prompt_len;
    L.d_model_ = cfg.d_model;
    L.site_layers_ = layer_list(sites);
    FwdNodes f = append_forward(L.g_, cfg, seq.length(), sites, "f.");
    L.g_.set_output(append_completion_nll(L.g_, f, seq));
    L.passes_.push_back({f, seq});
    return L;
}

PreparedLoss prepare_unlearn_forget(const ModelConfig& cfg, const TokenSequence& seq,
                                    const std::vector<HookSite>& sites) {
    seq.validate(cfg.vocab_size);
    PreparedLoss L;
    L.prompt_len_ = seq.prompt_len;
    L.d_model_ = cfg.d_model;
    L.site_layers_ = layer_list(sites);
    FwdNodes f = append_forward(L.g_, cfg, seq.length(), sites, "f.");
    L.g_.set_output(append_away_term(L.g_, f, seq));
    L.passes_.push_back({f, seq});
    return L;
}

PreparedLoss prepare_retain(const ModelConfig& cfg, const TokenSequence& seq) {
    seq.validate(cfg.vocab_size);
    PreparedLoss L;
    L.prompt_len_ = seq.prompt_len;
    L.d_model_ = cfg.d_model;
    FwdNodes f = append_forward(L.g_, cfg, seq.length(), {}, "t.");
    L.g_.set_output(append_completion_nll(L.g_, f, seq));
    L.passes_.push_back({f, seq});
    return L;
}

PreparedLoss prepare_rmu_defense(const ModelConfig& cfg, const ReferenceHandle& ref,
                                 const TokenSequence& forget, const TokenSequence& retain,
                                 const RmuSpec& spec, const std::vector<HookSite>& sites) {
    forget.validate(cfg.vocab_size);
    retain.validate(cfg.vocab_size);
    spec.validate(cfg);
    for (const HookSite& s : sites)
        if (s.layer_index >= spec.rmu_layer)
            throw std::invalid_argument("rmu: attack sites must lie strictly before the rmu layer");

    PreparedLoss L;
    L.prompt_len_ = forget.prompt_len;
    L.d_model_ = cfg.d_model;
    L.site_layers_ = layer_list(sites);
    Graph& g = L.g_;

    FwdNodes ff = append_forward(g, cfg, forget.length(), sites, "f.");
    FwdNodes fr = append_forward(g, cfg, retain.length(), {}, "r.");

    // frozen-model activations entering the rmu layer on the retain text
    ForwardGraph frozen = build_forward_graph(cfg, retain.length(), {});
    frozen.g.set_output(frozen.nodes.residual_in[static_cast<size_t>(spec.rmu_layer)]);
    Bindings fb;
    bind_parameters(fb, ref.frozen);
    ExampleStage fstage;
    bind_pass(fb, frozen.nodes, retain, nullptr, fstage);
    Tensor frozen_act = frozen.g.evaluate(fb);

    Tensor cu = spec.u;
    for (float& v : cu.f) v *= spec.c;

    Graph::Id act_f = ff.residual_in[static_cast<size_t>(spec.rmu_layer)];
    Graph::Id fdiff = g.sub(act_f, g.constant(std::move(cu)));
    Graph::Id fterm = g.scale(g.sum(g.mul(fdiff, fdiff)), 1.0f / static_cast<float>(forget.length()));

    Graph::Id act_r = fr.residual_in[static_cast<size_t>(spec.rmu_layer)];
    Graph::Id rdiff = g.sub(act_r, g.constant(std::move(frozen_act)));
    Graph::Id rterm = g.scale(g.sum(g.mul(rdiff, rdiff)),
                              spec.alpha / static_cast<float>(retain.length()));

    g.set_output(g.add(fterm, rterm));
    L.passes_.push_back({ff, forget});
    L.passes_.push_back({fr, retain});
    return L;
}

// --- scalar conveniences ------------------------------------------------------

float rt_attack_loss(const ModelConfig& cfg, const Parameters& params, const PreferenceTriple& t,
                     const PerturbationSet* delta) {
    std::vector<HookSite> sites;
    if (delta)
        for (const SiteDelta& sd : delta->sites) sites.push_back({sd.layer});
    PreparedLoss L = prepare_rt_attack(cfg, t, sites);
    return L.value(params, delta);
}

float rt_defense_loss(const ModelConfig& cfg, const Parameters& params, const PreferenceTriple& t,
                      const PerturbationSet* delta) {
    std::vector<HookSite> sites;
    if (delta)
        for (const SiteDelta& sd : delta->sites) sites.push_back({sd.layer});
    PreparedLoss L = prepare_rt_defense(cfg, t, sites);
    return L.value(params, delta);
}

float benign_sft_loss(const ModelConfig& cfg, const Parameters& params,
                      const std::vector<TokenSequence>& batch) {
    if (batch.empty()) throw std::invalid_argument("benign sft: empty batch");
    float acc = 0.0f;
    for (const TokenSequence& seq : batch) acc += prepare_benign_sft(cfg, seq).value(params);
    return acc / static_cast<float>(batch.size());
}

float benign_kl_loss(const ModelConfig& cfg, const Parameters& params, const ReferenceHandle& ref,
                     const std::vector<TokenSequence>& batch) {
    if (batch.empty()) throw std::invalid_argument("benign kl: empty batch");
    float acc = 0.0f;
    for (const TokenSequence& seq : batch) acc += prepare_benign_kl(cfg, ref, seq).value(params);
    return acc / static_cast<float>(batch.size());
}

float dpo_loss(const ModelConfig& cfg, const Parameters& params, const ReferenceHandle& ref,
               const PreferenceTriple& t, float beta, const PerturbationSet* delta, bool flip) {
    std::vector<HookSite> sites;
    if (delta)
        for (const SiteDelta& sd : delta->sites) sites.push_back({sd.layer});
    PreparedLoss L = prepare_dpo(cfg, ref, t, beta, flip, sites);
    return L.value(params, delta);
}

float unlearn_attack_loss(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
                          const PerturbationSet* delta) {
    std::vector<HookSite> sites;
    if (delta)
        for (const SiteDelta& sd : delta->sites) sites.push_back({sd.layer});
    PreparedLoss L = prepare_unlearn_attack(cfg, seq, sites);
    return L.value(params, delta);
}

float unlearn_forget_loss(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
                          const PerturbationSet* delta) {
    std::vector<HookSite> sites;
    if (delta)
        for (const SiteDelta& sd : delta->sites) sites.push_back({sd.layer});
    PreparedLoss L = prepare_unlearn_forget(cfg, seq, sites);
    return L.value(params, delta);
}

float retain_loss(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq) {
    PreparedLoss L = prepare_retain(cfg, seq);
    return L.value(params);
}

float rmu_defense_loss(const ModelConfig& cfg, const Parameters& params, const ReferenceHandle& ref,
                       const TokenSequence& forget, const TokenSequence& retain, const RmuSpec& spec,
                       const PerturbationSet* delta) {
    std::vector<HookSite> sites;
    if (delta)
        for (const SiteDelta& sd : delta->sites) sites.push_back({sd.layer});
    PreparedLoss L = prepare_rmu_defense(cfg, ref, forget, retain, spec, sites);
    return L.value(params, delta);
}

}  // namespace lat
