#include "lat/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <unordered_map>

namespace lat {

LossKind loss_kind_from(const std::string& name) {
    if (name == "sft") return LossKind::Sft;
    if (name == "rt") return LossKind::Rt;
    if (name == "dpo") return LossKind::Dpo;
    if (name == "unlearn-ga" || name == "ga") return LossKind::UnlearnGa;
    if (name == "rmu") return LossKind::Rmu;
    throw std::invalid_argument("unknown loss kind '" + name + "'");
}

BenignMode benign_mode_from(const std::string& name) {
    if (name == "none") return BenignMode::None;
    if (name == "sft-interleave") return BenignMode::SftInterleave;
    if (name == "kl-penalty") return BenignMode::KlPenalty;
    throw std::invalid_argument("unknown benign mode '" + name + "'");
}

const char* loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::Sft: return "sft";
        case LossKind::Rt: return "rt";
        case LossKind::Dpo: return "dpo";
        case LossKind::UnlearnGa: return "unlearn-ga";
        case LossKind::Rmu: return "rmu";
    }
    return "?";
}

const char* benign_mode_name(BenignMode m) {
    switch (m) {
        case BenignMode::None: return "none";
        case BenignMode::SftInterleave: return "sft-interleave";
        case BenignMode::KlPenalty: return "kl-penalty";
    }
    return "?";
}

int worker_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("LATFORGE_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min<unsigned>(hw == 0 ? 1 : hw, 4));
}

void RunConfig::validate() const {
    model.validate();
    attack.validate();
    if (total_steps < 0) throw std::invalid_argument("config: total_steps must be >= 0");
    if (batch_size <= 0) throw std::invalid_argument("config: batch_size must be > 0");
    if (lr <= 0.0f) throw std::invalid_argument("config: lr must be > 0");
    if (momentum < 0.0f || momentum >= 1.0f) throw std::invalid_argument("config: momentum out of [0,1)");
    if (interleave_ratio < 1 && benign == BenignMode::SftInterleave)
        throw std::invalid_argument("config: interleave ratio must be >= 1");
    if (nan_budget < 0.0f || nan_budget > 1.0f) throw std::invalid_argument("config: nan budget out of [0,1]");
    if (dpo_beta <= 0.0f) throw std::invalid_argument("config: dpo beta must be > 0");
    switch (loss) {
        case LossKind::Sft:
            if (!train) throw std::invalid_argument("config: sft needs a train split");
            break;
        case LossKind::Rt:
        case LossKind::Dpo:
            if (!pref) throw std::invalid_argument("config: rt/dpo need a preference split");
            break;
        case LossKind::UnlearnGa:
        case LossKind::Rmu:
            if (!forget || !retain) throw std::invalid_argument("config: unlearning needs forget and retain splits");
            break;
    }
    if (benign != BenignMode::None && !(benign == BenignMode::KlPenalty && kl_weight == 0.0f) && !benign_data)
        throw std::invalid_argument("config: benign mode needs a benign split");
    if (loss == LossKind::Rmu) {
        int layer = rmu_layer < 0 ? model.n_layers - 1 : rmu_layer;
        for (const HookSite& s : sites())
            if (s.layer_index >= layer)
                throw std::invalid_argument("config: attack sites must precede the rmu layer");
    }
}

std::vector<HookSite> RunConfig::sites() const {
    bool any_budget = attack.epsilon > 0.0f;
    for (const auto& [l, e] : attack.site_epsilon) any_budget = any_budget || e > 0.0f;
    if (!any_budget || hook_profile == "none" || loss == LossKind::Sft) return {};
    if (hook_profile == "list") {
        std::vector<HookSite> out;
        for (int l : hook_layers) {
            if (l < 0 || l >= model.n_layers)
                throw std::invalid_argument("config: hook layer " + std::to_string(l) + " out of range");
            out.push_back({l});
        }
        return out;
    }
    return hook_sites_for(hook_profile, model.n_layers, hook_k);
}

namespace {

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&]() {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    int k = std::min(threads, n);
    pool.reserve(static_cast<size_t>(k));
    for (int t = 0; t < k; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

std::vector<size_t> shuffled_order(size_t n, uint64_t seed, const std::string& purpose) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = rng_stream(seed, purpose);
    for (size_t i = n; i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    return order;
}

// reference sequence-log-prob cache (the reference is frozen for the run)
struct RefCache {
    std::unordered_map<uint64_t, float> values;
    std::mutex mu;

    float get(const ModelConfig& cfg, const Parameters& ref, const TokenSequence& seq) {
        uint64_t key = fnv1a64(seq.ids.data(), seq.ids.size() * sizeof(int32_t));
        uint64_t pl = static_cast<uint64_t>(seq.prompt_len);
        key = fnv1a64(&pl, sizeof(pl), key);
        {
            std::lock_guard<std::mutex> lock(mu);
            auto it = values.find(key);
            if (it != values.end()) return it->second;
        }
        float v = sequence_log_prob(cfg, ref, seq);
        std::lock_guard<std::mutex> lock(mu);
        values.emplace(key, v);
        return v;
    }
};

struct Plan {
    std::vector<PreferenceTriple> triples;         // rt / dpo adversarial data
    std::vector<TokenSequence> train;              // sft
    std::vector<TokenSequence> forget, retain;     // unlearning
    std::vector<TokenSequence> benign_pairs;       // sft interleave / kl penalty
    std::vector<PreferenceTriple> benign_triples;  // dpo benign form
    std::vector<size_t> adv_order, benign_order, retain_order;
    std::shared_ptr<ReferenceHandle> ref;
    std::optional<RmuSpec> rmu;
    std::vector<HookSite> sites;
    AttackBudget budget;
    int threads = 1;
    int cycle = 1;  // schedule period: 1 adversarial + interleave_ratio benign steps
};

size_t adv_size(const Plan& plan, const RunConfig& cfg) {
    switch (cfg.loss) {
        case LossKind::Sft: return plan.train.size();
        case LossKind::Rt:
        case LossKind::Dpo: return plan.triples.size();
        case LossKind::UnlearnGa:
        case LossKind::Rmu: return plan.forget.size();
    }
    return 0;
}

Plan make_plan(const RunConfig& cfg) {
    cfg.validate();
    Plan plan;
    plan.sites = cfg.sites();
    plan.budget = cfg.attack;
    plan.threads = worker_threads(cfg.threads);
    plan.cycle = cfg.benign == BenignMode::SftInterleave ? 1 + cfg.interleave_ratio : 1;

    std::vector<int32_t> trig = cfg.trigger.empty() ? default_trigger() : cfg.trigger;
    std::vector<int32_t> proxy = proxy_trigger(trig);

    if (cfg.loss == LossKind::Sft) {
        for (const TokenSequence& s : cfg.train->sequences()) plan.train.push_back(s);
        if (cfg.extra_train)
            for (const TokenSequence& s : cfg.extra_train->sequences()) plan.train.push_back(s);
        if (plan.train.empty()) throw std::invalid_argument("trainer: empty train split");
    }
    if (cfg.loss == LossKind::Rt || cfg.loss == LossKind::Dpo) {
        for (const DatasetRecord& r : cfg.pref->records) {
            if (!r.is_triple) throw std::invalid_argument("trainer: preference split must hold triples");
            PreferenceTriple t = r.triple;
            if (cfg.proxy_trigger) {
                std::vector<int32_t> p = proxy;
                p.insert(p.end(), t.prompt.begin(), t.prompt.end());
                t.prompt = std::move(p);
            }
            plan.triples.push_back(std::move(t));
        }
        if (plan.triples.empty()) throw std::invalid_argument("trainer: empty preference split");
    }
    if (cfg.loss == LossKind::UnlearnGa || cfg.loss == LossKind::Rmu) {
        plan.forget = cfg.forget->sequences();
        plan.retain = cfg.retain->sequences();
        if (plan.forget.empty() || plan.retain.empty())
            throw std::invalid_argument("trainer: empty forget or retain split");
    }
    if (cfg.benign_data) {
        plan.benign_pairs = cfg.benign_data->sequences();
        for (const DatasetRecord& r : cfg.benign_data->records)
            if (r.is_triple) plan.benign_triples.push_back(r.triple);
    }
    if (cfg.benign == BenignMode::SftInterleave && plan.benign_pairs.empty())
        throw std::invalid_argument("trainer: empty benign split");
    if (cfg.benign == BenignMode::KlPenalty && cfg.kl_weight != 0.0f && plan.benign_pairs.empty())
        throw std::invalid_argument("trainer: empty benign split");

    plan.adv_order = shuffled_order(adv_size(plan, cfg), cfg.seed, "order-adv");
    plan.benign_order = shuffled_order(plan.benign_pairs.size(), cfg.seed, "order-benign");
    plan.retain_order = shuffled_order(plan.retain.size(), cfg.seed, "order-retain");

    bool needs_ref = cfg.loss == LossKind::Dpo || cfg.loss == LossKind::Rmu ||
                     (cfg.benign == BenignMode::KlPenalty && cfg.kl_weight != 0.0f);
    std::shared_ptr<Parameters> base;  // run-start weights, reconstructible on resume
    if (needs_ref || (cfg.whiten && !plan.sites.empty()))
        base = std::make_shared<Parameters>(cfg.init_params ? *cfg.init_params
                                                            : init_parameters(cfg.model, cfg.init_seed));
    if (needs_ref) plan.ref = std::make_shared<ReferenceHandle>(*base);

    if (cfg.loss == LossKind::Rmu) {
        int layer = cfg.rmu_layer < 0 ? cfg.model.n_layers - 1 : cfg.rmu_layer;
        plan.rmu = make_rmu_spec(cfg.model, cfg.seed, layer, cfg.rmu_c, cfg.rmu_alpha);
        plan.rmu->trainable_layers = cfg.rmu_trainable;
    }

    // whitened constraints: fit per site from initial-parameter activations
    if (cfg.whiten && !plan.sites.empty()) {
        std::vector<TokenSequence> sample_seqs;
        size_t want_rows = static_cast<size_t>(4 * cfg.model.d_model);
        size_t rows = 0;
        auto add_from = [&](const std::vector<TokenSequence>& pool) {
            for (const TokenSequence& s : pool) {
                if (rows >= want_rows) break;
                sample_seqs.push_back(s);
                rows += static_cast<size_t>(s.length());
            }
        };
        if (!plan.train.empty()) add_from(plan.train);
        if (!plan.forget.empty()) add_from(plan.forget);
        for (const PreferenceTriple& t : plan.triples) {
            if (rows >= want_rows) break;
            sample_seqs.push_back(t.chosen_seq());
            rows += static_cast<size_t>(t.chosen_seq().length());
        }
        if (rows < static_cast<size_t>(cfg.model.d_model))
            throw std::invalid_argument("trainer: not enough data to fit whiteners");
        for (const HookSite& site : plan.sites) {
            Tensor sample = Tensor::zeros({static_cast<int64_t>(rows), cfg.model.d_model});
            int64_t at = 0;
            for (const TokenSequence& s : sample_seqs) {
                ForwardGraph fg = build_forward_graph(cfg.model, s.length(), {});
                fg.g.set_output(fg.nodes.residual_in[static_cast<size_t>(site.layer_index)]);
                Bindings b;
                bind_parameters(b, *base);
                ExampleStage stage;
                bind_pass(b, fg.nodes, s, nullptr, stage);
                Tensor act = fg.g.evaluate(b);
                int64_t take = std::min<int64_t>(s.length(), static_cast<int64_t>(rows) - at);
                std::copy(act.f.begin(), act.f.begin() + take * cfg.model.d_model,
                          sample.f.begin() + at * cfg.model.d_model);
                at += take;
                if (at >= static_cast<int64_t>(rows)) break;
            }
            // ridge relative to the mean activation variance
            double var = 0.0;
            for (float v : sample.f) var += static_cast<double>(v) * v;
            var /= static_cast<double>(sample.f.size());
            float lambda = std::max(1e-8f, cfg.whiten_lambda_rel * static_cast<float>(var));
            plan.budget.site_whiteners[site.layer_index] = fit_whitener(sample, lambda);
        }
    }
    return plan;
}

struct StepStats {
    float attack_loss = 0.0f;
    float defense_loss = 0.0f;
    float benign_loss = 0.0f;
    bool has_attack = false;
    bool has_benign = false;
    bool applied = false;
};

void accumulate_grads(std::map<std::string, Tensor>& into, const std::map<std::string, Tensor>& from) {
    for (const auto& [name, g] : from) {
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, g);
        } else {
            for (size_t i = 0; i < g.f.size(); ++i) it->second.f[i] += g.f[i];
        }
    }
}

bool grads_finite(const std::map<std::string, Tensor>& grads) {
    for (const auto& [name, g] : grads)
        if (!g.all_finite()) return false;
    return true;
}

bool layer_trainable(const std::string& name, const std::vector<int>& layers) {
    if (layers.empty()) return true;
    if (name.size() > 1 && name[0] == 'l' && std::isdigit(static_cast<unsigned char>(name[1]))) {
        size_t dot = name.find('.');
        if (dot != std::string::npos) {
            int idx = std::stoi(name.substr(1, dot - 1));
            return std::find(layers.begin(), layers.end(), idx) != layers.end();
        }
    }
    return false;
}

// momentum SGD over averaged gradients; returns false (and leaves all state
// untouched) when any gradient is non-finite
bool apply_update(TrainState& state, const RunConfig& cfg, std::map<std::string, Tensor>& grad_sum,
                  float scale, const std::vector<int>& trainable) {
    for (auto& [name, g] : grad_sum)
        for (float& v : g.f) v *= scale;
    if (!grads_finite(grad_sum)) {
        ++state.nan_skips;
        return false;
    }
    if (state.momentum.empty()) {
        for (const auto& [name, t] : state.params.entries)
            state.momentum.emplace_back(name, Tensor::zeros(t.shape));
    }
    for (size_t e = 0; e < state.params.entries.size(); ++e) {
        const std::string& name = state.params.entries[e].first;
        auto it = grad_sum.find(name);
        if (it == grad_sum.end()) continue;
        if (!layer_trainable(name, trainable)) continue;
        Tensor& p = state.params.entries[e].second;
        Tensor& m = state.momentum[e].second;
        const Tensor& g = it->second;
        for (size_t i = 0; i < p.f.size(); ++i) {
            m.f[i] = cfg.momentum * m.f[i] + g.f[i];
            p.f[i] -= cfg.lr * m.f[i];
        }
    }
    ++state.step;
    return true;
}

std::set<std::string> all_param_names(const Parameters& p) {
    std::set<std::string> names;
    for (const auto& [name, t] : p.entries) names.insert(name);
    return names;
}

struct ExampleOut {
    std::map<std::string, Tensor> grads;
    float attack_loss = 0.0f;
    float defense_loss = 0.0f;
    float benign_loss = 0.0f;
    bool has_attack = false;
    bool has_benign = false;
};

// inner maximization + defense gradient for one example
ExampleOut process_adversarial_example(const RunConfig& cfg, const Plan& plan, RefCache& refcache,
                                       const Parameters& params, int64_t adv_ordinal, int slot) {
    ExampleOut out;
    const std::set<std::string> wrt = all_param_names(params);
    const size_t n = plan.adv_order.empty() ? 1 : plan.adv_order.size();
    const size_t idx = plan.adv_order.empty()
                           ? 0
                           : plan.adv_order[(static_cast<size_t>(adv_ordinal) * cfg.batch_size + slot) % n];

    auto attack_for = [&](PreparedLoss& attack_loss, int prompt_len) -> PerturbationSet {
        std::vector<float> mask(static_cast<size_t>(prompt_len), 1.0f);
        if (plan.sites.empty()) {
            PerturbationSet none;
            none.mask = mask;
            return none;
        }
        PreparedAttackProblem prob(attack_loss, params);
        Rng rng = rng_stream(cfg.seed, "attack-init",
                             static_cast<uint64_t>(adv_ordinal) * 1000003ull + static_cast<uint64_t>(slot));
        PerturbationSet p = run_pgd(prob, plan.sites, prompt_len, cfg.model.d_model, mask, plan.budget, rng);
        out.attack_loss = attack_loss.value(params, &p);
        out.has_attack = true;
        return p;
    };

    switch (cfg.loss) {
        case LossKind::Sft: {
            const TokenSequence& seq = plan.train[idx];
            PreparedLoss loss = prepare_benign_sft(cfg.model, seq);
            auto [v, g] = loss.param_grad(params, wrt);
            out.defense_loss = v;
            out.grads = std::move(g);
            break;
        }
        case LossKind::Rt: {
            const PreferenceTriple& t = plan.triples[idx];
            PerturbationSet delta;
            if (!plan.sites.empty()) {
                if (plan.budget.mode == AttackMode::Targeted) {
                    PreparedLoss atk = prepare_rt_attack(cfg.model, t, plan.sites);
                    delta = attack_for(atk, t.prompt_len());
                } else {
                    PreparedLoss def = prepare_rt_defense(cfg.model, t, plan.sites);
                    delta = attack_for(def, t.prompt_len());
                }
            }
            PreparedLoss def = prepare_rt_defense(cfg.model, t, plan.sites);
            auto [v, g] = def.param_grad(params, wrt, plan.sites.empty() ? nullptr : &delta);
            out.defense_loss = v;
            out.grads = std::move(g);
            break;
        }
        case LossKind::Dpo: {
            const PreferenceTriple& t = plan.triples[idx];
            float ref_c = refcache.get(cfg.model, plan.ref->frozen, t.chosen_seq());
            float ref_r = refcache.get(cfg.model, plan.ref->frozen, t.rejected_seq());
            PerturbationSet delta;
            if (!plan.sites.empty()) {
                PreferenceTriple flipped{t.prompt, t.rejected, t.chosen};
                PreparedLoss atk = prepare_dpo_with_refs(cfg.model, flipped, cfg.dpo_beta, ref_r, ref_c,
                                                         plan.sites);
                delta = attack_for(atk, t.prompt_len());
            }
            PreparedLoss def = prepare_dpo_with_refs(cfg.model, t, cfg.dpo_beta, ref_c, ref_r, plan.sites);
            auto [v, g] = def.param_grad(params, wrt, plan.sites.empty() ? nullptr : &delta);
            out.defense_loss = v;
            out.grads = std::move(g);
            break;
        }
        case LossKind::UnlearnGa: {
            const TokenSequence& fseq = plan.forget[idx];
            const TokenSequence& rseq =
                plan.retain[plan.retain_order[(static_cast<size_t>(adv_ordinal) * cfg.batch_size + slot) %
                                              plan.retain_order.size()]];
            PerturbationSet delta;
            if (!plan.sites.empty()) {
                PreparedLoss atk = prepare_unlearn_attack(cfg.model, fseq, plan.sites);
                delta = attack_for(atk, fseq.prompt_len);
            }
            PreparedLoss away = prepare_unlearn_forget(cfg.model, fseq, plan.sites);
            auto [v1, g1] = away.param_grad(params, wrt, plan.sites.empty() ? nullptr : &delta);
            PreparedLoss keep = prepare_retain(cfg.model, rseq);
            auto [v2, g2] = keep.param_grad(params, wrt);
            out.defense_loss = v1 + v2;
            out.grads = std::move(g1);
            accumulate_grads(out.grads, g2);
            break;
        }
        case LossKind::Rmu: {
            const TokenSequence& fseq = plan.forget[idx];
            const TokenSequence& rseq =
                plan.retain[plan.retain_order[(static_cast<size_t>(adv_ordinal) * cfg.batch_size + slot) %
                                              plan.retain_order.size()]];
            PerturbationSet delta;
            if (!plan.sites.empty()) {
                PreparedLoss atk = prepare_unlearn_attack(cfg.model, fseq, plan.sites);
                delta = attack_for(atk, fseq.prompt_len);
            }
            PreparedLoss def = prepare_rmu_defense(cfg.model, *plan.ref, fseq, rseq, *plan.rmu, plan.sites);
            auto [v, g] = def.param_grad(params, wrt, plan.sites.empty() ? nullptr : &delta);
            out.defense_loss = v;
            out.grads = std::move(g);
            break;
        }
    }

    // KL regularization folds into the same update, on unperturbed benign text
    if (cfg.benign == BenignMode::KlPenalty && cfg.kl_weight != 0.0f && !plan.benign_pairs.empty()) {
        const size_t bidx = plan.benign_order[(static_cast<size_t>(adv_ordinal) * cfg.batch_size + slot) %
                                              plan.benign_order.size()];
        PreparedLoss kl = prepare_benign_kl(cfg.model, *plan.ref, plan.benign_pairs[bidx]);
        auto [v, g] = kl.param_grad(params, wrt);
        out.benign_loss = v;
        out.has_benign = true;
        for (auto& [name, t] : g)
            for (float& x : t.f) x *= cfg.kl_weight;
        accumulate_grads(out.grads, g);
    }
    return out;
}

StepStats adversarial_step(TrainState& state, const RunConfig& cfg, const Plan& plan, RefCache& refcache,
                           int64_t adv_ordinal) {
    const int B = cfg.batch_size;
    std::vector<ExampleOut> slots(static_cast<size_t>(B));
    const Parameters& frozen = state.params;
    parallel_for(B, plan.threads, [&](int i) {
        slots[static_cast<size_t>(i)] =
            process_adversarial_example(cfg, plan, refcache, frozen, adv_ordinal, i);
    });

    StepStats stats;
    std::map<std::string, Tensor> grad_sum;
    float atk = 0.0f, def = 0.0f, ben = 0.0f;
    int atk_n = 0, ben_n = 0;
    for (const ExampleOut& s : slots) {
        accumulate_grads(grad_sum, s.grads);
        def += s.defense_loss;
        if (s.has_attack) {
            atk += s.attack_loss;
            ++atk_n;
        }
        if (s.has_benign) {
            ben += s.benign_loss;
            ++ben_n;
        }
    }
    stats.defense_loss = def / static_cast<float>(B);
    if (atk_n > 0) {
        stats.attack_loss = atk / static_cast<float>(atk_n);
        stats.has_attack = true;
    }
    if (ben_n > 0) {
        stats.benign_loss = ben / static_cast<float>(ben_n);
        stats.has_benign = true;
    }
    std::vector<int> trainable = cfg.loss == LossKind::Rmu && plan.rmu ? plan.rmu->trainable_layers
                                                                       : std::vector<int>{};
    stats.applied = apply_update(state, cfg, grad_sum, 1.0f / static_cast<float>(B), trainable);
    if (!stats.applied) ++state.step;  // the step is consumed either way
    return stats;
}

StepStats benign_step(TrainState& state, const RunConfig& cfg, const Plan& plan, RefCache& refcache,
                      int64_t benign_ordinal) {
    const int B = cfg.batch_size;
    const std::set<std::string> wrt = all_param_names(state.params);
    const Parameters& frozen = state.params;
    const bool dpo_form = cfg.loss == LossKind::Dpo && !plan.benign_triples.empty();

    std::vector<ExampleOut> slots(static_cast<size_t>(B));
    parallel_for(B, plan.threads, [&](int i) {
        ExampleOut out;
        if (dpo_form) {
            const size_t idx = plan.benign_order[(static_cast<size_t>(benign_ordinal) * B + i) %
                                                 plan.benign_order.size()];
            const PreferenceTriple& t = plan.benign_triples[idx];
            float ref_c = refcache.get(cfg.model, plan.ref->frozen, t.chosen_seq());
            float ref_r = refcache.get(cfg.model, plan.ref->frozen, t.rejected_seq());
            PreparedLoss loss = prepare_dpo_with_refs(cfg.model, t, cfg.dpo_beta, ref_c, ref_r, {});
            auto [v, g] = loss.param_grad(frozen, wrt);
            out.benign_loss = v;
            out.grads = std::move(g);
        } else {
            const size_t idx = plan.benign_order[(static_cast<size_t>(benign_ordinal) * B + i) %
                                                 plan.benign_order.size()];
            PreparedLoss loss = prepare_benign_sft(cfg.model, plan.benign_pairs[idx]);
            auto [v, g] = loss.param_grad(frozen, wrt);
            out.benign_loss = v;
            out.grads = std::move(g);
        }
        out.has_benign = true;
        slots[static_cast<size_t>(i)] = std::move(out);
    });

    StepStats stats;
    std::map<std::string, Tensor> grad_sum;
    float ben = 0.0f;
    for (const ExampleOut& s : slots) {
        accumulate_grads(grad_sum, s.grads);
        ben += s.benign_loss;
    }
    stats.benign_loss = ben / static_cast<float>(B);
    stats.has_benign = true;
    stats.applied = apply_update(state, cfg, grad_sum, 1.0f / static_cast<float>(B), {});
    if (!stats.applied) ++state.step;
    return stats;
}

}  // namespace

TrainState init_state(const RunConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.params = cfg.init_params ? *cfg.init_params : init_parameters(cfg.model, cfg.init_seed);
    return st;
}

void lat_train_step(TrainState& state, const RunConfig& cfg) {
    Plan plan = make_plan(cfg);
    RefCache cache;
    int64_t adv_ordinal = state.step / plan.cycle;
    adversarial_step(state, cfg, plan, cache, adv_ordinal);
}

MetricsRecord evaluate_metrics(const RunConfig& cfg, const Parameters& params, int64_t step,
                               int64_t nan_skips) {
    MetricsRecord rec;
    rec.step = step;
    rec.nan_skips = nan_skips;
    if (cfg.trigger_eval && !cfg.trigger_eval->records.empty())
        rec.trigger_success_rate = trigger_success_rate(cfg.model, params, *cfg.trigger_eval);
    if (cfg.clean_eval && !cfg.clean_eval->records.empty())
        rec.compliance_rate = compliance_rate(cfg.model, params, *cfg.clean_eval);
    if (cfg.forget && !cfg.forget->records.empty()) {
        auto [acc, ppl] = accuracy_and_perplexity(cfg.model, params, *cfg.forget);
        rec.forget_accuracy = acc;
        rec.forget_ppl = ppl;
    }
    if (cfg.retain && !cfg.retain->records.empty()) {
        auto [acc, ppl] = accuracy_and_perplexity(cfg.model, params, *cfg.retain);
        rec.retain_accuracy = acc;
        rec.retain_ppl = ppl;
    }
    return rec;
}

RunResult run(const RunConfig& cfg, const MetricsSink& on_metrics, const CheckpointSink& on_checkpoint) {
    return run_from(cfg, init_state(cfg), on_metrics, on_checkpoint);
}

RunResult run_from(const RunConfig& cfg, TrainState initial, const MetricsSink& on_metrics,
                   const CheckpointSink& on_checkpoint) {
    cfg.validate();
    RunResult result;
    result.state = std::move(initial);
    Plan plan = make_plan(cfg);
    RefCache cache;

    // counters aligned with an uninterrupted schedule
    int64_t adv_done = (result.state.step + plan.cycle - 1) / plan.cycle;
    int64_t benign_done = result.state.step - adv_done;
    float atk_sum = 0.0f, def_sum = 0.0f, ben_sum = 0.0f;
    int64_t atk_n = 0, def_n = 0, ben_n = 0;

    auto emit = [&](int64_t step) {
        MetricsRecord rec = evaluate_metrics(cfg, result.state.params, step, result.state.nan_skips);
        if (atk_n > 0) rec.attack_loss = atk_sum / static_cast<float>(atk_n);
        if (def_n > 0) rec.defense_loss = def_sum / static_cast<float>(def_n);
        if (ben_n > 0) rec.benign_loss = ben_sum / static_cast<float>(ben_n);
        atk_sum = def_sum = ben_sum = 0.0f;
        atk_n = def_n = ben_n = 0;
        result.metrics.push_back(rec);
        if (on_metrics) on_metrics(rec);
    };

    while (result.state.step < cfg.total_steps) {
        const int64_t g = result.state.step;
        const bool benign_now = cfg.benign == BenignMode::SftInterleave && (g % plan.cycle) != 0;
        StepStats stats;
        if (benign_now) {
            stats = benign_step(result.state, cfg, plan, cache, benign_done);
            ++benign_done;
        } else {
            stats = adversarial_step(result.state, cfg, plan, cache, adv_done);
            ++adv_done;
            def_sum += stats.defense_loss;
            ++def_n;
        }
        if (stats.has_attack) {
            atk_sum += stats.attack_loss;
            ++atk_n;
        }
        if (stats.has_benign) {
            ben_sum += stats.benign_loss;
            ++ben_n;
        }
        if (cfg.eval_every > 0 && result.state.step % cfg.eval_every == 0 &&
            result.state.step < cfg.total_steps)
            emit(result.state.step);
        if (on_checkpoint && result.state.step < cfg.total_steps) on_checkpoint(result.state, false);
    }
    emit(result.state.step);
    if (on_checkpoint) on_checkpoint(result.state, true);
    result.adversarial_steps = adv_done;
    result.benign_steps = benign_done;

    if (cfg.total_steps > 0) {
        float skip_rate = static_cast<float>(result.state.nan_skips) / static_cast<float>(cfg.total_steps);
        result.nan_budget_exceeded = skip_rate > cfg.nan_budget;
    }
    return result;
}

RelearnReport relearn_attack(const ModelConfig& cfg, const Parameters& params,
                             const DatasetSplit& forget_set, int n_examples, int iters,
                             const std::vector<int>& eval_at, float lr, float momentum, uint64_t seed) {
    if (static_cast<int>(forget_set.records.size()) < n_examples)
        throw std::invalid_argument("relearn_attack: forget set smaller than the requested batch");

    RelearnReport report;
    report.n_examples = n_examples;
    report.iters = iters;

    std::vector<TokenSequence> all = forget_set.sequences();
    Rng rng = rng_stream(seed, "relearn-batch");
    std::vector<size_t> pick;
    while (static_cast<int>(pick.size()) < n_examples) {
        size_t i = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(all.size())));
        if (std::find(pick.begin(), pick.end(), i) == pick.end()) pick.push_back(i);
    }

    auto accuracy = [&](const Parameters& p) {
        return accuracy_and_perplexity(cfg, p, forget_set).first;
    };

    Parameters p = params;
    std::vector<Tensor> momentum_buf;
    for (const auto& [name, t] : p.entries) momentum_buf.push_back(Tensor::zeros(t.shape));
    report.initial_accuracy = accuracy(p);

    std::set<std::string> wrt;
    for (const auto& [name, t] : p.entries) wrt.insert(name);

    float max_acc = iters == 0 ? report.initial_accuracy : 0.0f;
    for (int it = 1; it <= iters; ++it) {
        std::map<std::string, Tensor> grad_sum;
        for (size_t i : pick) {
            PreparedLoss loss = prepare_benign_sft(cfg, all[i]);
            auto [v, g] = loss.param_grad(p, wrt);
            accumulate_grads(grad_sum, g);
        }
        float scale = 1.0f / static_cast<float>(n_examples);
        for (auto& [name, g] : grad_sum)
            for (float& v : g.f) v *= scale;
        if (grads_finite(grad_sum)) {
            for (size_t e = 0; e < p.entries.size(); ++e) {
                auto itg = grad_sum.find(p.entries[e].first);
                if (itg == grad_sum.end()) continue;
                Tensor& w = p.entries[e].second;
                Tensor& m = momentum_buf[e];
                for (size_t i = 0; i < w.f.size(); ++i) {
                    m.f[i] = momentum * m.f[i] + itg->second.f[i];
                    w.f[i] -= lr * m.f[i];
                }
            }
        }
        if (std::find(eval_at.begin(), eval_at.end(), it) != eval_at.end()) {
            float acc = accuracy(p);
            report.checkpoints.emplace_back(it, acc);
            max_acc = std::max(max_acc, acc);
        }
    }
    report.max_accuracy = report.checkpoints.empty() ? report.initial_accuracy : max_acc;
    return report;
}

}  // namespace lat
