#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "lat/attack.hpp"
#include "lat/model.hpp"
#include "lat/perturb.hpp"

namespace lat {

struct PreferenceTriple {
    std::vector<int32_t> prompt;
    std::vector<int32_t> chosen;
    std::vector<int32_t> rejected;

    TokenSequence chosen_seq() const;
    TokenSequence rejected_seq() const;
    int prompt_len() const { return static_cast<int>(prompt.size()); }
    void validate(const ModelConfig& cfg) const;
};

// Frozen snapshot of reference weights; never mutated after creation.
struct ReferenceHandle {
    Parameters frozen;

    explicit ReferenceHandle(Parameters p) : frozen(std::move(p)) {}
};

struct RmuSpec {
    Tensor u;           // [d_model], unit norm, fixed for the run
    float c = 6.5f;
    float alpha = 1200.0f;
    int rmu_layer = 0;
    std::vector<int> trainable_layers;  // empty = all parameters

    void validate(const ModelConfig& cfg) const;
};

// u sampled uniform [0,1] then normalized.
RmuSpec make_rmu_spec(const ModelConfig& cfg, uint64_t seed, int rmu_layer,
                      float c = 6.5f, float alpha = 1200.0f);

// One example's loss as a reusable graph. Deltas span the prompt region
// ([prompt_len, d_model] per site); parameter tensors are bound per call, so
// a prepared loss can be evaluated many times during PGD or reused between
// attack and defense phases.
class PreparedLoss {
   public:
    float value(const Parameters& params, const PerturbationSet* delta = nullptr);

    // Loss plus gradient per site layer (for PGD); parameters stay frozen.
    std::pair<float, std::map<int, Tensor>> delta_grad(const Parameters& params,
                                                       const PerturbationSet& delta);

    // Loss plus gradient per parameter name; deltas (if any) enter as fixed
    // constants - requesting a delta gradient here is rejected.
    std::pair<float, std::map<std::string, Tensor>> param_grad(const Parameters& params,
                                                               const std::set<std::string>& wrt,
                                                               const PerturbationSet* delta = nullptr);

    int prompt_len() const { return prompt_len_; }
    int d_model() const { return d_model_; }
    const std::vector<int>& site_layers() const { return site_layers_; }

    // max relative error of the analytic gradient against central finite
    // differences, for a parameter name or a per-pass delta input name
    // (e.g. "f.delta.l0"). The oracle side evaluates in double precision.
    float fd_check(const Parameters& params, const PerturbationSet* delta, const std::string& wrt,
                   float h);
    std::vector<std::string> delta_input_names() const;

   private:
    friend PreparedLoss prepare_rt_attack(const ModelConfig&, const PreferenceTriple&,
                                          const std::vector<HookSite>&);
    friend PreparedLoss prepare_benign_sft(const ModelConfig&, const TokenSequence&);
    friend PreparedLoss prepare_benign_kl(const ModelConfig&, const ReferenceHandle&,
                                          const TokenSequence&);
    friend PreparedLoss prepare_dpo(const ModelConfig&, const ReferenceHandle&,
                                    const PreferenceTriple&, float, bool,
                                    const std::vector<HookSite>&);
    friend PreparedLoss prepare_dpo_with_refs(const ModelConfig&, const PreferenceTriple&, float,
                                              float, float, const std::vector<HookSite>&);
    friend PreparedLoss prepare_unlearn_attack(const ModelConfig&, const TokenSequence&,
                                               const std::vector<HookSite>&);
    friend PreparedLoss prepare_unlearn_forget(const ModelConfig&, const TokenSequence&,
                                               const std::vector<HookSite>&);
    friend PreparedLoss prepare_retain(const ModelConfig&, const TokenSequence&);
    friend PreparedLoss prepare_rmu_defense(const ModelConfig&, const ReferenceHandle&,
                                            const TokenSequence&, const TokenSequence&,
                                            const RmuSpec&, const std::vector<HookSite>&);
    struct Pass {
        FwdNodes nodes;
        TokenSequence seq;
    };
    Graph g_;
    std::vector<Pass> passes_;
    std::vector<int> site_layers_;
    int prompt_len_ = 0;
    int d_model_ = 0;

    void bind_all(Bindings& b, const Parameters& params, const PerturbationSet* delta,
                  std::vector<ExampleStage>& stages);
};

// Adapter running PGD against a prepared loss.
class PreparedAttackProblem : public AttackProblem {
   public:
    PreparedAttackProblem(PreparedLoss& loss, const Parameters& params)
        : loss_(loss), params_(params) {}
    float value(const PerturbationSet& p) override { return loss_.value(params_, &p); }
    std::pair<float, std::map<int, Tensor>> value_grad(const PerturbationSet& p) override {
        return loss_.delta_grad(params_, p);
    }

   private:
    PreparedLoss& loss_;
    const Parameters& params_;
};

// --- builders ------------------------------------------------------------
// toward rejected + away from chosen, completion-token sums
PreparedLoss prepare_rt_attack(const ModelConfig& cfg, const PreferenceTriple& t,
                               const std::vector<HookSite>& sites);
// identical structure with chosen and rejected exchanged
PreparedLoss prepare_rt_defense(const ModelConfig& cfg, const PreferenceTriple& t,
                                const std::vector<HookSite>& sites);
// per-sequence token-mean cross-entropy, never perturbed
PreparedLoss prepare_benign_sft(const ModelConfig& cfg, const TokenSequence& seq);
// mean over completion positions of KL[reference || policy], never perturbed
PreparedLoss prepare_benign_kl(const ModelConfig& cfg, const ReferenceHandle& ref,
                               const TokenSequence& seq);
// -log sigmoid(beta [logratio(winner) - logratio(loser)]); flip makes the
// rejected completion the winner; reference log-probs are baked at build time
PreparedLoss prepare_dpo(const ModelConfig& cfg, const ReferenceHandle& ref,
                         const PreferenceTriple& t, float beta, bool flip,
                         const std::vector<HookSite>& sites);
// same loss with the reference sequence log-probs supplied by the caller
// (winner = chosen); lets a trainer cache them across steps
PreparedLoss prepare_dpo_with_refs(const ModelConfig& cfg, const PreferenceTriple& t, float beta,
                                   float ref_chosen_logprob, float ref_rejected_logprob,
                                   const std::vector<HookSite>& sites);
// next-token cross-entropy over the forget completion, delta present
PreparedLoss prepare_unlearn_attack(const ModelConfig& cfg, const TokenSequence& seq,
                                    const std::vector<HookSite>& sites);
// -sum log(1 - p) over the forget completion, delta present
PreparedLoss prepare_unlearn_forget(const ModelConfig& cfg, const TokenSequence& seq,
                                    const std::vector<HookSite>& sites);
// next-token cross-entropy on retain text, never perturbed
PreparedLoss prepare_retain(const ModelConfig& cfg, const TokenSequence& seq);
// forget activations driven to c*u (perturbed) + alpha * activation matching
// against the frozen model on retain (unperturbed), averaged over token count
PreparedLoss prepare_rmu_defense(const ModelConfig& cfg, const ReferenceHandle& ref,
                                 const TokenSequence& forget, const TokenSequence& retain,
                                 const RmuSpec& spec, const std::vector<HookSite>& sites);

// --- scalar conveniences ---------------------------------------------------
float rt_attack_loss(const ModelConfig& cfg, const Parameters& params, const PreferenceTriple& t,
                     const PerturbationSet* delta = nullptr);
float rt_defense_loss(const ModelConfig& cfg, const Parameters& params, const PreferenceTriple& t,
                      const PerturbationSet* delta = nullptr);
float benign_sft_loss(const ModelConfig& cfg, const Parameters& params,
                      const std::vector<TokenSequence>& batch);
float benign_kl_loss(const ModelConfig& cfg, const Parameters& params, const ReferenceHandle& ref,
                     const std::vector<TokenSequence>& batch);
float dpo_loss(const ModelConfig& cfg, const Parameters& params, const ReferenceHandle& ref,
               const PreferenceTriple& t, float beta, const PerturbationSet* delta = nullptr,
               bool flip = false);
float unlearn_attack_loss(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
                          const PerturbationSet* delta = nullptr);
float unlearn_forget_loss(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
                          const PerturbationSet* delta = nullptr);
float retain_loss(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq);
float rmu_defense_loss(const ModelConfig& cfg, const Parameters& params, const ReferenceHandle& ref,
                       const TokenSequence& forget, const TokenSequence& retain, const RmuSpec& spec,
                       const PerturbationSet* delta = nullptr);

}  // namespace lat
