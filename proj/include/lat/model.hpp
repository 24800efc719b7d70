#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lat/graph.hpp"
#include "lat/perturb.hpp"
#include "lat/rng.hpp"
#include "lat/tensor.hpp"

namespace lat {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int vocab_size = 64;
    int max_context = 64;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
};

// Named weight tensors, ordered for deterministic iteration.
struct Parameters {
    std::vector<std::pair<std::string, Tensor>> entries;

    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;
    bool all_finite() const;
};

struct HookSite {
    int layer_index = 0;
};

struct TokenSequence {
    std::vector<int32_t> ids;
    int prompt_len = 0;

    int length() const { return static_cast<int>(ids.size()); }
    int completion_len() const { return length() - prompt_len; }
    void validate(int vocab_size) const;
};

// Node handles for one forward pass appended onto a graph. Parameters enter
// as inputs named after their entries (shared across passes); per-pass inputs
// carry `prefix`, so a loss can run several sequences through one graph.
struct FwdNodes {
    std::string prefix;
    Graph::Id tokens = -1;               // i32 [seq]
    Graph::Id mask = -1;                 // f32 [seq, 1]
    Graph::Id logits = -1;               // f32 [seq, vocab]
    std::vector<int> hooked_layers;      // ascending
    std::vector<Graph::Id> residual_in;  // residual entering each layer, after injection
    int seq_len = 0;
};

FwdNodes append_forward(Graph& g, const ModelConfig& cfg, int seq_len,
                        const std::vector<HookSite>& sites, const std::string& prefix = "");

// Scalar node: sum over completion positions of -log P(token | prefix).
// Targets and position weights are baked as constants from `seq`.
Graph::Id append_completion_nll(Graph& g, const FwdNodes& f, const TokenSequence& seq);

// Self-contained forward graph for single-pass uses.
struct ForwardGraph {
    Graph g;
    FwdNodes nodes;
};
ForwardGraph build_forward_graph(const ModelConfig& cfg, int seq_len, const std::vector<HookSite>& sites);

// Binds every parameter tensor by name. Tensors are borrowed.
void bind_parameters(Bindings& b, const Parameters& params);

// Staged per-pass tensors; must outlive the evaluate call.
struct ExampleStage {
    Tensor tokens;
    Tensor mask;
    std::vector<Tensor> deltas;
};

// Binds tokens/mask/site deltas for one sequence. `perturb` may be null
// (zero deltas) and may carry deltas spanning either the full sequence or
// just the prompt region; prompt-region deltas are padded with zeros.
void bind_pass(Bindings& b, const FwdNodes& f, const TokenSequence& seq,
               const PerturbationSet* perturb, ExampleStage& storage);

Parameters init_parameters(const ModelConfig& cfg, uint64_t seed);
std::vector<std::string> parameter_names(const ModelConfig& cfg);

// Logits for every position, with optional residual-stream perturbations
// (deltas shaped [seq, d_model], zero at completion positions).
Tensor forward(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
               const PerturbationSet* perturb = nullptr);

// Sum over completion positions of log P(token | prefix).
float sequence_log_prob(const ModelConfig& cfg, const Parameters& params, const TokenSequence& seq,
                        const PerturbationSet* perturb = nullptr);

// Deterministic argmax decoding; ties resolve to the lowest token id.
TokenSequence greedy_decode(const ModelConfig& cfg, const Parameters& params,
                            const TokenSequence& prompt, int max_new);

// Named layer profiles for residual-stream hooks.
std::vector<HookSite> hook_sites_for(const std::string& profile, int n_layers, int k = 4);

}  // namespace lat
