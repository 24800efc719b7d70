#include <cmath>

#include "doctest.h"
#include "lat/trainer.hpp"

using namespace lat;

namespace {

ModelConfig small_model() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.vocab_size = 64;
    cfg.max_context = 32;
    return cfg;
}

struct Corpus {
    DatasetSplit pref = gen_preference_pairs(21, 32);
    DatasetSplit benign = gen_benign(21, 32);
    DatasetSplit forget, retain;
    Corpus() {
        auto [f, r] = gen_forget_retain(21, 32, 32);
        forget = std::move(f);
        retain = std::move(r);
    }
};

RunConfig rt_config(const Corpus& c) {
    RunConfig cfg;
    cfg.model = small_model();
    cfg.loss = LossKind::Rt;
    cfg.benign = BenignMode::SftInterleave;
    cfg.pref = &c.pref;
    cfg.benign_data = &c.benign;
    cfg.attack.epsilon = 1.0f;
    cfg.attack.pgd_steps = 4;
    cfg.hook_profile = "even";
    cfg.hook_k = 2;
    cfg.total_steps = 8;
    cfg.batch_size = 4;
    cfg.seed = 5;
    cfg.init_seed = 5;
    return cfg;
}

bool params_equal(const Parameters& a, const Parameters& b) {
    if (a.entries.size() != b.entries.size()) return false;
    for (size_t i = 0; i < a.entries.size(); ++i) {
        if (a.entries[i].first != b.entries[i].first) return false;
        if (!bitwise_equal(a.entries[i].second, b.entries[i].second)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("identical configs replay to identical parameters and metrics") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.eval_every = 4;
    RunResult a = run(cfg);
    RunResult b = run(cfg);
    CHECK(params_equal(a.state.params, b.state.params));
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(a.metrics[i].step == b.metrics[i].step);
        CHECK(a.metrics[i].defense_loss == b.metrics[i].defense_loss);
        CHECK(a.metrics[i].attack_loss == b.metrics[i].attack_loss);
    }
}

TEST_CASE("thread count does not change the result") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.total_steps = 4;
    cfg.threads = 1;
    RunResult a = run(cfg);
    cfg.threads = 2;
    RunResult b = run(cfg);
    CHECK(params_equal(a.state.params, b.state.params));
}

TEST_CASE("epsilon zero collapses to plain fine-tuning bit-for-bit") {
    Corpus c;
    RunConfig lat = rt_config(c);
    lat.total_steps = 6;
    lat.attack.epsilon = 0.0f;
    lat.attack.pgd_steps = 16;

    RunConfig plain = lat;
    plain.hook_profile = "none";
    plain.attack.epsilon = 1.0f;  // budget irrelevant without hooks
    plain.attack.pgd_steps = 0;

    RunResult a = run(lat);
    RunResult b = run(plain);
    CHECK(params_equal(a.state.params, b.state.params));
}

TEST_CASE("a non-finite gradient skips the step without touching parameters") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    TrainState st = init_state(cfg);
    // poison one weight: gradients become non-finite, the guard must hold
    st.params.entries[2].second.f[0] = std::numeric_limits<float>::quiet_NaN();
    TrainState before = st;
    lat_train_step(st, cfg);
    CHECK(st.nan_skips == 1);
    CHECK(st.step == before.step + 1);
    CHECK(params_equal(st.params, before.params));
    CHECK(st.momentum.size() == before.momentum.size());
}

TEST_CASE("interleave schedule alternates adversarial and benign batches") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.total_steps = 8;
    RunResult r = run(cfg);
    CHECK(r.adversarial_steps == 4);
    CHECK(r.benign_steps == 4);

    cfg.interleave_ratio = 3;
    cfg.total_steps = 8;
    RunResult r2 = run(cfg);
    CHECK(r2.adversarial_steps == 2);
    CHECK(r2.benign_steps == 6);
}

TEST_CASE("kl weight zero reproduces the no-benign run exactly") {
    Corpus c;
    RunConfig base = rt_config(c);
    base.total_steps = 4;
    base.benign = BenignMode::KlPenalty;
    base.kl_weight = 0.0f;

    RunConfig none = base;
    none.benign = BenignMode::None;
    none.benign_data = nullptr;

    RunResult a = run(base);
    RunResult b = run(none);
    CHECK(params_equal(a.state.params, b.state.params));
    REQUIRE(a.metrics.size() == b.metrics.size());
    CHECK(a.metrics.back().defense_loss == b.metrics.back().defense_loss);
}

TEST_CASE("kl mode adds a benign loss and keeps training stable") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.benign = BenignMode::KlPenalty;
    cfg.kl_weight = 0.5f;
    cfg.total_steps = 4;
    RunResult r = run(cfg);
    REQUIRE(!r.metrics.empty());
    CHECK(r.metrics.back().benign_loss.has_value());
    CHECK(r.metrics.back().benign_loss.value() >= -1e-6f);
    CHECK(!r.nan_budget_exceeded);
}

TEST_CASE("sft training reduces the loss on a small corpus") {
    Corpus c;
    RunConfig cfg;
    cfg.model = small_model();
    cfg.loss = LossKind::Sft;
    cfg.benign = BenignMode::None;
    cfg.train = &c.forget;
    cfg.total_steps = 60;
    cfg.batch_size = 8;
    cfg.lr = 3e-3f;
    cfg.eval_every = 20;
    cfg.seed = 9;
    cfg.init_seed = 9;
    cfg.forget = &c.forget;
    RunResult r = run(cfg);
    REQUIRE(r.metrics.size() >= 2);
    float first = r.metrics.front().defense_loss.value();
    float last = r.metrics.back().defense_loss.value();
    CHECK(last < first);
}

TEST_CASE("ga and rmu steps run end to end with finite losses") {
    Corpus c;
    RunConfig cfg;
    cfg.model = small_model();
    cfg.benign = BenignMode::SftInterleave;
    cfg.benign_data = &c.benign;
    cfg.forget = &c.forget;
    cfg.retain = &c.retain;
    cfg.attack.epsilon = 0.5f;
    cfg.attack.pgd_steps = 2;
    cfg.hook_profile = "even";
    cfg.hook_k = 1;
    cfg.total_steps = 4;
    cfg.batch_size = 2;
    cfg.seed = 10;
    cfg.init_seed = 10;

    SUBCASE("unlearn-ga") {
        cfg.loss = LossKind::UnlearnGa;
        RunResult r = run(cfg);
        CHECK(!r.nan_budget_exceeded);
        CHECK(r.metrics.back().defense_loss.has_value());
        CHECK(std::isfinite(r.metrics.back().defense_loss.value()));
    }
    SUBCASE("rmu") {
        cfg.loss = LossKind::Rmu;
        cfg.rmu_layer = 1;
        cfg.hook_profile = "list";
        cfg.hook_layers = {0};
        RunResult r = run(cfg);
        CHECK(!r.nan_budget_exceeded);
        CHECK(std::isfinite(r.metrics.back().defense_loss.value()));
    }
}

TEST_CASE("rt adversarial training lowers the defense loss over a short run") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.total_steps = 40;
    cfg.eval_every = 10;
    cfg.attack.pgd_steps = 3;
    RunResult r = run(cfg);
    REQUIRE(r.metrics.size() >= 2);
    CHECK(r.metrics.back().defense_loss.value() < r.metrics.front().defense_loss.value());
}

TEST_CASE("a targeted attack on a trained refusal model beats its initialization") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.attack.epsilon = 0.0f;  // plain refusal training first
    cfg.hook_profile = "none";
    cfg.total_steps = 60;
    cfg.batch_size = 8;
    RunResult trained = run(cfg);

    const PreferenceTriple& t = c.pref.records[0].triple;
    std::vector<HookSite> sites = hook_sites_for("even", cfg.model.n_layers, 2);
    PreparedLoss atk = prepare_rt_attack(cfg.model, t, sites);
    PreparedAttackProblem prob(atk, trained.state.params);

    std::vector<float> mask(static_cast<size_t>(t.prompt_len()), 1.0f);
    PerturbationSet zero;
    zero.mask = mask;
    for (const HookSite& s : sites) zero.sites.push_back({s.layer_index, Tensor::zeros({t.prompt_len(), cfg.model.d_model})});
    float at_init = atk.value(trained.state.params, &zero);

    AttackBudget budget;
    budget.epsilon = 1.0f;
    budget.pgd_steps = 16;
    Rng rng(77);
    PerturbationSet best = run_pgd(prob, sites, t.prompt_len(), cfg.model.d_model, mask, budget, rng);
    float at_end = atk.value(trained.state.params, &best);
    CHECK(at_end < at_init);
}

TEST_CASE("whitened attacks run and respect the whitened budget") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.whiten = true;
    cfg.total_steps = 2;
    cfg.attack.pgd_steps = 2;
    RunResult r = run(cfg);
    CHECK(!r.nan_budget_exceeded);
    CHECK(std::isfinite(r.metrics.back().defense_loss.value()));
}

TEST_CASE("an overfit run memorizes a single sequence end to end") {
    ModelConfig mc;
    mc.n_layers = 1;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.vocab_size = 64;
    mc.max_context = 16;

    DatasetSplit one;
    one.role = SplitRole::Benign;
    DatasetRecord rec;
    rec.seq.ids = {vocab::kAsk, 33, 40, 3, 1, 50, 49, 51};
    rec.seq.prompt_len = 4;
    one.records.push_back(rec);

    RunConfig cfg;
    cfg.model = mc;
    cfg.loss = LossKind::Sft;
    cfg.benign = BenignMode::None;
    cfg.train = &one;
    cfg.total_steps = 250;
    cfg.batch_size = 1;
    cfg.lr = 5e-3f;
    cfg.seed = 12;
    cfg.init_seed = 12;
    RunResult r = run(cfg);

    CHECK(benign_sft_loss(mc, r.state.params, {rec.seq}) < 0.05f);
    auto [acc, ppl] = accuracy_and_perplexity(mc, r.state.params, one);
    CHECK(acc == doctest::Approx(1.0f));
    CHECK(ppl < 1.05f);

    TokenSequence prompt;
    prompt.ids.assign(rec.seq.ids.begin(), rec.seq.ids.begin() + rec.seq.prompt_len);
    prompt.prompt_len = rec.seq.prompt_len;
    TokenSequence out = greedy_decode(mc, r.state.params, prompt, rec.seq.completion_len());
    CHECK(out.ids == rec.seq.ids);
}

TEST_CASE("200 steps of adversarial refusal training halve the defense loss") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.total_steps = 200;
    cfg.batch_size = 4;
    cfg.attack.pgd_steps = 2;
    cfg.eval_every = 200;
    std::vector<float> defense;
    RunConfig probe = cfg;
    probe.total_steps = 2;  // initial loss from the first adversarial step
    probe.eval_every = 2;
    RunResult first = run(probe);
    RunResult full = run(cfg);
    float initial = first.metrics.front().defense_loss.value();
    float final_loss = full.metrics.back().defense_loss.value();
    CHECK(final_loss <= 0.5f * initial);
}

TEST_CASE("a model trained only on retain stays near chance on the forget grammar") {
    Corpus c;
    ModelConfig mc = small_model();
    RunConfig cfg;
    cfg.model = mc;
    cfg.loss = LossKind::Sft;
    cfg.benign = BenignMode::None;
    cfg.train = &c.retain;
    cfg.total_steps = 300;
    cfg.batch_size = 8;
    cfg.lr = 3e-3f;
    cfg.seed = 13;
    cfg.init_seed = 13;
    RunResult r = run(cfg);
    auto [racc, rppl] = accuracy_and_perplexity(mc, r.state.params, c.retain);
    auto [facc, fppl] = accuracy_and_perplexity(mc, r.state.params, c.forget);
    CHECK(racc > 0.9f);
    const float chance = 1.0f / static_cast<float>(mc.vocab_size);
    CHECK(facc <= chance + 0.10f);
}

TEST_CASE("the threads env var caps worker parallelism") {
    const char* keep = std::getenv("LATFORGE_THREADS");
    std::string backup = keep ? keep : "";
    setenv("LATFORGE_THREADS", "1", 1);
    CHECK(worker_threads(0) == 1);
    setenv("LATFORGE_THREADS", "3", 1);
    CHECK(worker_threads(0) == 3);
    CHECK(worker_threads(2) == 2);  // explicit request wins
    if (keep)
        setenv("LATFORGE_THREADS", backup.c_str(), 1);
    else
        unsetenv("LATFORGE_THREADS");
}

TEST_CASE("proxy-trigger training changes the prompts deterministically") {
    Corpus c;
    RunConfig cfg = rt_config(c);
    cfg.total_steps = 4;
    RunResult plain = run(cfg);
    cfg.proxy_trigger = true;
    RunResult proxied = run(cfg);
    RunResult proxied2 = run(cfg);
    CHECK(!params_equal(plain.state.params, proxied.state.params));
    CHECK(params_equal(proxied.state.params, proxied2.state.params));
}

TEST_CASE("relearn attack follows the protocol shape") {
    Corpus c;
    ModelConfig cfg = small_model();
    Parameters p = init_parameters(cfg, 33);

    SUBCASE("zero iterations reports the unattacked accuracy") {
        RelearnReport rep = relearn_attack(cfg, p, c.forget, 2, 0, {5, 10, 20});
        CHECK(rep.checkpoints.empty());
        CHECK(rep.max_accuracy == rep.initial_accuracy);
        auto [acc, ppl] = accuracy_and_perplexity(cfg, p, c.forget);
        CHECK(rep.initial_accuracy == doctest::Approx(acc));
    }
    SUBCASE("default protocol evaluates at 5, 10 and 20 and reports the max") {
        RelearnReport rep = relearn_attack(cfg, p, c.forget);
        CHECK(rep.n_examples == 2);
        CHECK(rep.iters == 20);
        REQUIRE(rep.checkpoints.size() == 3);
        CHECK(rep.checkpoints[0].first == 5);
        CHECK(rep.checkpoints[1].first == 10);
        CHECK(rep.checkpoints[2].first == 20);
        float mx = 0.0f;
        for (auto& [it, acc] : rep.checkpoints) mx = std::max(mx, acc);
        CHECK(rep.max_accuracy == doctest::Approx(mx));
    }
    SUBCASE("relearning a memorizable grammar raises forget accuracy") {
        RelearnReport rep = relearn_attack(cfg, p, c.forget, 2, 20, {5, 10, 20}, 0.01f);
        CHECK(rep.max_accuracy >= rep.initial_accuracy);
    }
}
