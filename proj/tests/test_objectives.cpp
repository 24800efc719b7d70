#include <cmath>
#include <vector>

#include "doctest.h"
#include "lat/objectives.hpp"
#include "lat/rng.hpp"
#include "oracle_model.hpp"

using namespace lat;

namespace {

ModelConfig tiny_config(int vocab = 16) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.vocab_size = vocab;
    cfg.max_context = 16;
    return cfg;
}

// uniform next-token distribution at every position
Parameters uniform_model(const ModelConfig& cfg, uint64_t seed) {
    Parameters p = init_parameters(cfg, seed);
    *p.find("unemb") = Tensor::zeros({cfg.d_model, cfg.vocab_size});
    *p.find("unemb_b") = Tensor::zeros({cfg.vocab_size});
    return p;
}

Parameters biased_model(const ModelConfig& cfg, uint64_t seed, const std::vector<float>& bias) {
    Parameters p = uniform_model(cfg, seed);
    *p.find("unemb_b") = Tensor::from({cfg.vocab_size}, std::vector<float>(bias));
    return p;
}

TokenSequence seq_of(std::vector<int32_t> ids, int prompt_len) {
    TokenSequence s;
    s.ids = std::move(ids);
    s.prompt_len = prompt_len;
    return s;
}

PerturbationSet prompt_delta(int prompt_len, int d_model, const std::vector<int>& layers, float fill) {
    PerturbationSet p;
    p.mask = std::vector<float>(static_cast<size_t>(prompt_len), 1.0f);
    for (int l : layers) p.sites.push_back({l, Tensor::full({prompt_len, d_model}, fill)});
    return p;
}

}  // namespace

TEST_CASE("rt attack loss on uniform logits matches the hand value") {
    ModelConfig cfg = tiny_config(4);
    Parameters p = uniform_model(cfg, 3);
    PreferenceTriple t{{1, 2}, {0}, {3}};
    // -log(0.25) - log(0.75)
    CHECK(rt_attack_loss(cfg, p, t) == doctest::Approx(1.3863f + 0.2877f).epsilon(1e-3));
}

TEST_CASE("rt away term clamps near-one probabilities") {
    ModelConfig cfg = tiny_config(4);
    std::vector<float> bias(4, 0.0f);
    bias[2] = 50.0f;  // forces p(token 2) ~ 1 everywhere
    Parameters p = biased_model(cfg, 4, bias);
    PreferenceTriple t{{1, 3}, {2}, {0}};
    // toward term: -log P(0) ~ 50; away term: -log(1 - clamp(P(2))) = -log(1e-6)
    float loss = rt_attack_loss(cfg, p, t);
    float away_expected = -std::log(1e-6f);
    CHECK(loss > away_expected);
    PreferenceTriple only_away{{1, 3}, {2}, {2}};
    // both completions are token 2: toward ~ 0, away = clamp boundary
    float loss2 = rt_attack_loss(cfg, p, only_away);
    CHECK(loss2 == doctest::Approx(away_expected).epsilon(1e-3));
}

TEST_CASE("rt label-flip identity holds exactly") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 5);
    PreferenceTriple t{{1, 2, 3}, {4, 5}, {6, 7, 8}};
    PerturbationSet d = prompt_delta(3, cfg.d_model, {0, 1}, 0.25f);
    float defense = rt_defense_loss(cfg, p, t, &d);
    PreferenceTriple swapped{t.prompt, t.rejected, t.chosen};
    float attack = rt_attack_loss(cfg, p, swapped, &d);
    CHECK(defense == attack);  // same computation graph, bitwise
}

TEST_CASE("rt attack loss matches a straight-line recomputation from raw logits") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    Parameters p = init_parameters(cfg, 6);
    PreferenceTriple t{{2, 9}, {4, 1}, {7, 12}};

    auto nll_from = [&](const TokenSequence& s) {
        std::vector<float> logits = oracle::forward_logits(cfg, p, s.ids);
        double acc = 0.0;
        for (int j = s.prompt_len; j < s.length(); ++j) {
            std::vector<float> pr = oracle::softmax_row(logits.data() + (j - 1) * cfg.vocab_size, cfg.vocab_size);
            acc -= std::log(static_cast<double>(pr[static_cast<size_t>(s.ids[static_cast<size_t>(j)])]));
        }
        return acc;
    };
    auto away_from = [&](const TokenSequence& s) {
        std::vector<float> logits = oracle::forward_logits(cfg, p, s.ids);
        double acc = 0.0;
        for (int j = s.prompt_len; j < s.length(); ++j) {
            std::vector<float> pr = oracle::softmax_row(logits.data() + (j - 1) * cfg.vocab_size, cfg.vocab_size);
            double pv = std::min(static_cast<double>(pr[static_cast<size_t>(s.ids[static_cast<size_t>(j)])]),
                                 1.0 - 1e-6);
            acc -= std::log(1.0 - pv);
        }
        return acc;
    };
    double want = nll_from(t.rejected_seq()) + away_from(t.chosen_seq());
    CHECK(rt_attack_loss(cfg, p, t) == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("benign sft loss on a uniform model is log vocab") {
    ModelConfig cfg = tiny_config(64);
    cfg.d_model = 8;
    Parameters p = uniform_model(cfg, 7);
    TokenSequence seq = seq_of({1, 2, 3}, 2);  // one completion token
    CHECK(benign_sft_loss(cfg, p, {seq}) == doctest::Approx(std::log(64.0f)).epsilon(1e-4));
}

TEST_CASE("benign sft equals negated per-token-averaged sequence log prob") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 8);
    TokenSequence a = seq_of({1, 2, 3, 4, 5}, 2);
    TokenSequence b = seq_of({6, 7, 8, 9}, 2);
    float want = 0.5f * (-sequence_log_prob(cfg, p, a) / 3.0f + -sequence_log_prob(cfg, p, b) / 2.0f);
    CHECK(benign_sft_loss(cfg, p, {a, b}) == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("benign kl is exactly zero at the reference and matches direct summation") {
    ModelConfig cfg = tiny_config(4);
    Parameters uniform = uniform_model(cfg, 9);
    ReferenceHandle ref(uniform);
    TokenSequence seq = seq_of({1, 2, 3}, 2);

    SUBCASE("identical parameters give exactly zero") {
        CHECK(benign_kl_loss(cfg, uniform, ref, {seq}) == 0.0f);
    }
    SUBCASE("direct summation oracle") {
        // policy emits [0.7, 0.1, 0.1, 0.1] at every position
        std::vector<float> bias{std::log(0.7f), std::log(0.1f), std::log(0.1f), std::log(0.1f)};
        Parameters policy = biased_model(cfg, 9, bias);
        double want = 0.0;
        for (double pv : {0.7, 0.1, 0.1, 0.1}) want += 0.25 * std::log(0.25 / pv);
        CHECK(benign_kl_loss(cfg, policy, ref, {seq}) == doctest::Approx(want).epsilon(1e-4));
    }
    SUBCASE("non-negative on random pairs") {
        for (uint64_t s = 0; s < 6; ++s) {
            Parameters a = init_parameters(cfg, 100 + s);
            Parameters b = init_parameters(cfg, 200 + s);
            CHECK(benign_kl_loss(cfg, a, ReferenceHandle(b), {seq}) >= -1e-6f);
        }
    }
}

TEST_CASE("benign losses reject perturbation sets outright") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 10);
    TokenSequence seq = seq_of({1, 2, 3}, 2);
    PreparedLoss L = prepare_benign_sft(cfg, seq);
    PerturbationSet d = prompt_delta(2, cfg.d_model, {0}, 0.1f);
    CHECK_THROWS_AS(L.value(p, &d), std::invalid_argument);
}

TEST_CASE("dpo loss at the reference is log 2 for any triple and beta") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 11);
    ReferenceHandle ref(p);
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        PreferenceTriple t;
        for (int i = 0; i < 3; ++i) t.prompt.push_back(static_cast<int32_t>(rng.uniform_int(cfg.vocab_size)));
        for (int i = 0; i < 2; ++i) t.chosen.push_back(static_cast<int32_t>(rng.uniform_int(cfg.vocab_size)));
        for (int i = 0; i < 2; ++i) t.rejected.push_back(static_cast<int32_t>(rng.uniform_int(cfg.vocab_size)));
        for (float beta : {0.05f, 0.1f, 0.5f})
            CHECK(dpo_loss(cfg, p, ref, t, beta) == doctest::Approx(std::log(2.0f)).epsilon(1e-6));
    }
}

TEST_CASE("dpo flip symmetry holds exactly") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 13);
    ReferenceHandle ref(init_parameters(cfg, 14));
    PreferenceTriple t{{1, 2}, {3, 4}, {5, 6}};
    PerturbationSet d = prompt_delta(2, cfg.d_model, {1}, -0.3f);
    PreferenceTriple swapped{t.prompt, t.rejected, t.chosen};
    CHECK(dpo_loss(cfg, p, ref, t, 0.1f, &d, true) == dpo_loss(cfg, p, ref, swapped, 0.1f, &d, false));
}

TEST_CASE("dpo matches the scalar sigmoid oracle built from sequence log probs") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 15);
    Parameters refp = init_parameters(cfg, 16);
    ReferenceHandle ref(refp);
    PreferenceTriple t{{1, 2, 3}, {4, 5}, {6, 7}};
    const float beta = 0.37f;

    double margin = (sequence_log_prob(cfg, p, t.chosen_seq()) - sequence_log_prob(cfg, refp, t.chosen_seq())) -
                    (sequence_log_prob(cfg, p, t.rejected_seq()) - sequence_log_prob(cfg, refp, t.rejected_seq()));
    double z = beta * margin;
    double want = -std::log(1.0 / (1.0 + std::exp(-z)));
    CHECK(dpo_loss(cfg, p, ref, t, beta) == doctest::Approx(want).epsilon(1e-3));
}

TEST_CASE("dpo rejects non-positive beta") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 17);
    ReferenceHandle ref(p);
    PreferenceTriple t{{1}, {2}, {3}};
    CHECK_THROWS_AS(dpo_loss(cfg, p, ref, t, 0.0f), std::invalid_argument);
}

TEST_CASE("unlearn attack loss on a uniform model is tokens times log vocab") {
    ModelConfig cfg = tiny_config(64);
    Parameters p = uniform_model(cfg, 18);
    TokenSequence seq = seq_of({1, 2, 3, 4}, 1);  // 3 completion tokens
    CHECK(unlearn_attack_loss(cfg, p, seq) == doctest::Approx(3.0f * std::log(64.0f)).epsilon(1e-4));
}

TEST_CASE("unlearn attack equals benign sft times completion length at zero delta") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 19);
    TokenSequence seq = seq_of({1, 2, 3, 4, 5, 6}, 2);
    float sum_loss = unlearn_attack_loss(cfg, p, seq);
    float mean_loss = benign_sft_loss(cfg, p, {seq});
    CHECK(sum_loss == doctest::Approx(mean_loss * 4.0f).epsilon(1e-5));
}

TEST_CASE("unlearn forget loss hand values") {
    SUBCASE("half probability per token") {
        ModelConfig cfg = tiny_config(2);
        Parameters p = uniform_model(cfg, 20);
        TokenSequence seq = seq_of({1, 0, 1, 0}, 1);
        CHECK(unlearn_forget_loss(cfg, p, seq) == doctest::Approx(3.0f * std::log(2.0f)).epsilon(1e-4));
    }
    SUBCASE("fully forgotten tokens cost nothing") {
        ModelConfig cfg = tiny_config(4);
        std::vector<float> bias(4, 0.0f);
        bias[0] = 40.0f;  // p(0) ~ 1, so p(other) ~ 0
        Parameters p = biased_model(cfg, 21, bias);
        TokenSequence seq = seq_of({1, 2, 3}, 1);
        CHECK(unlearn_forget_loss(cfg, p, seq) == doctest::Approx(0.0f).epsilon(1e-4));
    }
    SUBCASE("clamp boundary") {
        ModelConfig cfg = tiny_config(4);
        std::vector<float> bias(4, 0.0f);
        bias[2] = 50.0f;
        Parameters p = biased_model(cfg, 22, bias);
        TokenSequence seq = seq_of({1, 2}, 1);  // completion token 2 has p ~ 1
        CHECK(unlearn_forget_loss(cfg, p, seq) == doctest::Approx(-std::log(1e-6f)).epsilon(1e-3));
    }
}

TEST_CASE("retain loss is the unperturbed next-token cross entropy") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 23);
    TokenSequence seq = seq_of({3, 1, 4, 1, 5}, 2);
    CHECK(retain_loss(cfg, p, seq) == doctest::Approx(-sequence_log_prob(cfg, p, seq)).epsilon(1e-5));
}

TEST_CASE("rmu defense loss vanishes when activations hit the target") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 24);
    // layer 0 becomes a residual no-op so the layer-1 residual is emb+pos+delta
    *p.find("l0.wo") = Tensor::zeros({cfg.d_model, cfg.d_model});
    *p.find("l0.w2") = Tensor::zeros({4 * cfg.d_model, cfg.d_model});
    ReferenceHandle ref(p);
    RmuSpec spec = make_rmu_spec(cfg, 25, 1);
    CHECK(spec.c == doctest::Approx(6.5f));
    CHECK(spec.alpha == doctest::Approx(1200.0f));

    TokenSequence forget = seq_of({1, 2, 3}, 3);  // all positions perturbable
    TokenSequence retain = seq_of({4, 5, 6}, 2);

    ForwardGraph fg = build_forward_graph(cfg, forget.length(), {});
    fg.g.set_output(fg.nodes.residual_in[1]);
    Bindings b;
    bind_parameters(b, p);
    ExampleStage stage;
    bind_pass(b, fg.nodes, forget, nullptr, stage);
    Tensor clean = fg.g.evaluate(b);

    PerturbationSet d;
    d.mask = std::vector<float>(3, 1.0f);
    Tensor delta = Tensor::zeros({3, cfg.d_model});
    for (int pos = 0; pos < 3; ++pos)
        for (int c = 0; c < cfg.d_model; ++c)
            delta.f[static_cast<size_t>(pos * cfg.d_model + c)] =
                spec.c * spec.u.f[static_cast<size_t>(c)] - clean.f[static_cast<size_t>(pos * cfg.d_model + c)];
    d.sites.push_back({0, delta});

    float loss = rmu_defense_loss(cfg, p, ref, forget, retain, spec, &d);
    CHECK(std::fabs(loss) < 1e-6f);
}

TEST_CASE("rmu forget term scalar arithmetic") {
    // single token, d = 2, perturbed activation [0,0], c*u = [6.5, 0], alpha = 0
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.vocab_size = 4;
    cfg.max_context = 4;
    Parameters p = init_parameters(cfg, 26);
    *p.find("l0.wo") = Tensor::zeros({cfg.d_model, cfg.d_model});
    *p.find("l0.w2") = Tensor::zeros({4 * cfg.d_model, cfg.d_model});
    ReferenceHandle ref(p);
    RmuSpec spec;
    spec.u = Tensor::from({2}, {1.0f, 0.0f});
    spec.c = 6.5f;
    spec.alpha = 0.0f;
    spec.rmu_layer = 1;

    TokenSequence forget = seq_of({1}, 1);
    TokenSequence retain = seq_of({2, 3}, 1);

    ForwardGraph fg = build_forward_graph(cfg, 1, {});
    fg.g.set_output(fg.nodes.residual_in[1]);
    Bindings b;
    bind_parameters(b, p);
    ExampleStage stage;
    bind_pass(b, fg.nodes, forget, nullptr, stage);
    Tensor clean = fg.g.evaluate(b);

    PerturbationSet d;
    d.mask = {1.0f};
    Tensor delta = Tensor::zeros({1, 2});
    delta.f[0] = -clean.f[0];
    delta.f[1] = -clean.f[1];
    d.sites.push_back({0, delta});

    float loss = rmu_defense_loss(cfg, p, ref, forget, retain, spec, &d);
    CHECK(loss == doctest::Approx(42.25f).epsilon(1e-4));
}

TEST_CASE("rmu rejects attack sites at or after the rmu layer") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 27);
    ReferenceHandle ref(p);
    RmuSpec spec = make_rmu_spec(cfg, 28, 1);
    TokenSequence forget = seq_of({1, 2}, 2);
    TokenSequence retain = seq_of({3, 4}, 1);
    CHECK_THROWS_AS(prepare_rmu_defense(cfg, ref, forget, retain, spec, {{1}}), std::invalid_argument);
}

TEST_CASE("losses are finite and pass gradient checks on a one-layer model") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    Parameters p = init_parameters(cfg, 29);
    ReferenceHandle ref(init_parameters(cfg, 30));
    PreferenceTriple t{{1, 2}, {3, 4}, {5, 6}};
    std::vector<HookSite> sites{{0}};
    PerturbationSet d = prompt_delta(2, cfg.d_model, {0}, 0.15f);

    auto check_param_and_delta = [&](PreparedLoss& L, bool has_delta, const char* label) {
        CAPTURE(label);
        float v = L.value(p, has_delta ? &d : nullptr);
        CHECK(std::isfinite(v));
        auto [loss, grads] = L.param_grad(p, {"l0.wq", "emb"}, has_delta ? &d : nullptr);
        CHECK(std::isfinite(loss));
        for (auto& [name, g] : grads) CHECK(g.all_finite());
        if (has_delta) {
            auto [dl, dgrads] = L.delta_grad(p, d);
            CHECK(std::isfinite(dl));
            for (auto& [layer, g] : dgrads) CHECK(g.all_finite());
        }
    };

    PreparedLoss rt_a = prepare_rt_attack(cfg, t, sites);
    PreparedLoss rt_d = prepare_rt_defense(cfg, t, sites);
    PreparedLoss sft = prepare_benign_sft(cfg, t.chosen_seq());
    PreparedLoss kl = prepare_benign_kl(cfg, ref, t.chosen_seq());
    PreparedLoss dpo = prepare_dpo(cfg, ref, t, 0.1f, false, sites);
    PreparedLoss ua = prepare_unlearn_attack(cfg, t.chosen_seq(), sites);
    PreparedLoss uf = prepare_unlearn_forget(cfg, t.chosen_seq(), sites);
    PreparedLoss rt = prepare_retain(cfg, t.chosen_seq());
    check_param_and_delta(rt_a, true, "rt_attack");
    check_param_and_delta(rt_d, true, "rt_defense");
    check_param_and_delta(sft, false, "benign_sft");
    check_param_and_delta(kl, false, "benign_kl");
    check_param_and_delta(dpo, true, "dpo");
    check_param_and_delta(ua, true, "unlearn_attack");
    check_param_and_delta(uf, true, "unlearn_forget");
    check_param_and_delta(rt, false, "retain");
}

TEST_CASE("defense gradients refuse to flow into the perturbation") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 34);
    TokenSequence seq = seq_of({1, 2, 3, 4}, 2);
    PreparedLoss L = prepare_unlearn_attack(cfg, seq, {{0}});
    PerturbationSet d = prompt_delta(2, cfg.d_model, {0}, 0.1f);
    CHECK_THROWS_AS(L.param_grad(p, {"emb", "f.delta.l0"}, &d), std::invalid_argument);
}

TEST_CASE("pgd against a prepared unlearn attack strictly reduces the loss") {
    ModelConfig cfg = tiny_config();
    Parameters p = init_parameters(cfg, 31);
    TokenSequence seq = seq_of({1, 2, 3, 4, 5}, 2);
    PreparedLoss L = prepare_unlearn_attack(cfg, seq, {{0}, {1}});
    PreparedAttackProblem prob(L, p);

    AttackBudget budget;
    budget.epsilon = 2.0f;
    budget.pgd_steps = 12;
    std::vector<float> mask(2, 1.0f);
    Rng rng(32);
    PerturbationSet zero;
    zero.mask = mask;
    zero.sites.push_back({0, Tensor::zeros({2, cfg.d_model})});
    zero.sites.push_back({1, Tensor::zeros({2, cfg.d_model})});
    float before = L.value(p, &zero);
    PerturbationSet best = run_pgd(prob, {{0}, {1}}, 2, cfg.d_model, mask, budget, rng);
    float after = L.value(p, &best);
    CHECK(after < before);
}
