#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lat/attack.hpp"
#include "lat/evalkit.hpp"
#include "lat/model.hpp"
#include "lat/objectives.hpp"
#include "lat/taskgen.hpp"

namespace lat {

enum class LossKind { Sft, Rt, Dpo, UnlearnGa, Rmu };
enum class BenignMode { None, SftInterleave, KlPenalty };

LossKind loss_kind_from(const std::string& name);
BenignMode benign_mode_from(const std::string& name);
const char* loss_kind_name(LossKind k);
const char* benign_mode_name(BenignMode m);

// Full experiment description; replaying the same config and seed reproduces
// the metrics stream and final parameters exactly.
struct RunConfig {
    ModelConfig model;
    LossKind loss = LossKind::Sft;
    BenignMode benign = BenignMode::SftInterleave;
    float kl_weight = 1.0f;
    int interleave_ratio = 1;  // benign batches per adversarial batch

    AttackBudget attack;
    std::string hook_profile = "even";  // even | jailbreak32 | backdoor32 | list | none
    int hook_k = 4;
    std::vector<int> hook_layers;  // used by the "list" profile
    bool whiten = false;
    float whiten_lambda_rel = 1e-4f;

    float dpo_beta = 0.1f;
    float rmu_c = 6.5f;
    float rmu_alpha = 1200.0f;
    int rmu_layer = -1;  // -1 -> last layer
    std::vector<int> rmu_trainable;

    int64_t total_steps = 200;
    int batch_size = 8;
    float lr = 3e-3f;
    float momentum = 0.9f;
    uint64_t seed = 1;
    uint64_t init_seed = 1;
    int64_t eval_every = 0;  // 0 -> final only
    float nan_budget = 0.05f;
    bool proxy_trigger = false;
    std::vector<int32_t> trigger;

    int threads = 0;  // 0 -> LATFORGE_THREADS or hardware

    // starting weights (borrowed); null -> fresh init from init_seed. Also the
    // frozen reference and the whitening sample source for this run.
    const Parameters* init_params = nullptr;

    // datasets, borrowed
    const DatasetSplit* train = nullptr;
    const DatasetSplit* extra_train = nullptr;  // cycled together with train
    const DatasetSplit* pref = nullptr;
    const DatasetSplit* benign_data = nullptr;
    const DatasetSplit* forget = nullptr;
    const DatasetSplit* retain = nullptr;
    const DatasetSplit* trigger_eval = nullptr;
    const DatasetSplit* clean_eval = nullptr;

    void validate() const;
    std::vector<HookSite> sites() const;
};

struct TrainState {
    int64_t step = 0;
    Parameters params;
    std::vector<std::pair<std::string, Tensor>> momentum;
    int64_t nan_skips = 0;
};

struct RunResult {
    TrainState state;
    std::vector<MetricsRecord> metrics;
    int64_t adversarial_steps = 0;
    int64_t benign_steps = 0;
    bool nan_budget_exceeded = false;
};

int worker_threads(int requested);

TrainState init_state(const RunConfig& cfg);

// One optimizer update at state.step: inner PGD against frozen parameters,
// defense gradient with the adversarial deltas fixed, optional KL term. Skips
// the update and counts it when any model gradient is non-finite.
void lat_train_step(TrainState& state, const RunConfig& cfg);

using MetricsSink = std::function<void(const MetricsRecord&)>;
using CheckpointSink = std::function<void(const TrainState&, bool final)>;

// Full schedule: interleaves benign batches or folds in the KL penalty,
// emits a MetricsRecord every eval interval and at the end.
RunResult run(const RunConfig& cfg, const MetricsSink& on_metrics = {},
              const CheckpointSink& on_checkpoint = {});

// Same schedule continued from an existing state (checkpoint resume); the
// step counter keeps running and batch order stays aligned with a single
// uninterrupted run.
RunResult run_from(const RunConfig& cfg, TrainState initial, const MetricsSink& on_metrics = {},
                   const CheckpointSink& on_checkpoint = {});

struct RelearnReport {
    int n_examples = 0;
    int iters = 0;
    float initial_accuracy = 0.0f;
    std::vector<std::pair<int, float>> checkpoints;  // (iteration, forget accuracy)
    float max_accuracy = 0.0f;
};

// Few-shot re-learning attack: one fixed batch, repeated plain cross-entropy
// fine-tuning, accuracy reported at each checkpoint and as the max.
RelearnReport relearn_attack(const ModelConfig& cfg, const Parameters& params,
                             const DatasetSplit& forget_set, int n_examples = 2, int iters = 20,
                             const std::vector<int>& eval_at = {5, 10, 20}, float lr = 3e-3f,
                             float momentum = 0.9f, uint64_t seed = 1);

MetricsRecord evaluate_metrics(const RunConfig& cfg, const Parameters& params, int64_t step,
                               int64_t nan_skips);

}  // namespace lat
