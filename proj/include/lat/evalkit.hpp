#pragma once

#include <cstdint>
#include <optional>

#include "lat/model.hpp"
#include "lat/taskgen.hpp"

namespace lat {

// One evaluation row; absent metrics stay unset and serialize as empty cells.
struct MetricsRecord {
    int64_t step = 0;
    std::optional<float> attack_loss;
    std::optional<float> defense_loss;
    std::optional<float> benign_loss;
    std::optional<float> trigger_success_rate;
    std::optional<float> compliance_rate;
    std::optional<float> forget_accuracy;
    std::optional<float> retain_accuracy;
    std::optional<float> forget_ppl;
    std::optional<float> retain_ppl;
    std::optional<float> gap_closed;
    int64_t nan_skips = 0;
};

// Fraction of trigger-bearing prompts whose greedy decode reproduces the
// payload region exactly (the completion minus its leading COMPLY token).
float trigger_success_rate(const ModelConfig& cfg, const Parameters& params,
                           const DatasetSplit& trigger_eval);

// Fraction of benign prompts whose decode does not open with REFUSE.
float compliance_rate(const ModelConfig& cfg, const Parameters& params, const DatasetSplit& clean_eval);

// Next-token argmax accuracy over completions and exp(mean token cross-entropy).
std::pair<float, float> accuracy_and_perplexity(const ModelConfig& cfg, const Parameters& params,
                                                const DatasetSplit& split);

// (relearned - unlearned) / (base - unlearned); undefined when base == unlearned.
std::optional<float> gap_closed(float base, float unlearned, float relearned);

}  // namespace lat
