#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lat/model.hpp"
#include "lat/objectives.hpp"

namespace lat {

// 64-symbol vocabulary layout shared by every synthetic corpus. Disjoint
// regions keep the grammars separable and make trigger scans exact.
namespace vocab {
constexpr int32_t kRefuse = 0;
constexpr int32_t kComply = 1;
constexpr int32_t kAsk = 2;
constexpr int32_t kQueryEnd = 3;
constexpr int32_t kTrigger0 = 4, kTrigger1 = 5, kTrigger2 = 6;
constexpr int32_t kHarmMark = 7;
constexpr int32_t kHarmTopic0 = 8, kHarmTopicN = 12;      // 8..19
constexpr int32_t kForgetPat0 = 20, kForgetPatN = 6;      // 20..25
constexpr int32_t kRetainPat0 = 26, kRetainPatN = 6;      // 26..31
constexpr int32_t kBenignTopic0 = 32, kBenignTopicN = 12; // 32..43
constexpr int32_t kRefuseFill0 = 44;                      // 44..47
constexpr int32_t kBenignFill0 = 48;                      // 48..51
constexpr int32_t kPayload0 = 52;                         // 52..55
constexpr int32_t kForgetBody0 = 56;                      // 56..59
constexpr int32_t kRetainBody0 = 60;                      // 60..63
constexpr int kSize = 64;
}  // namespace vocab

std::vector<int32_t> default_trigger();
// the true trigger with its middle token substituted
std::vector<int32_t> proxy_trigger(const std::vector<int32_t>& trigger);

enum class SplitRole {
    PreferencePairs,
    Benign,
    PoisonedTrain,
    CleanEval,
    TriggerEval,
    Forget,
    Retain,
};

const char* split_role_name(SplitRole role);
SplitRole split_role_from(const std::string& name);

struct DatasetRecord {
    bool is_triple = false;
    TokenSequence seq;
    PreferenceTriple triple;
    std::vector<std::string> flags;

    bool has_flag(const std::string& f) const;
};

struct DatasetSplit {
    SplitRole role = SplitRole::Benign;
    uint64_t seed = 0;
    std::vector<DatasetRecord> records;

    size_t size() const { return records.size(); }
    uint64_t content_hash() const;
    // (x, y) view: triples collapse to prompt + chosen
    std::vector<TokenSequence> sequences() const;
};

// line-delimited record serialization (one record per line)
std::string serialize_split(const DatasetSplit& split);
DatasetSplit parse_split(const std::string& text);

// Harmful-request triples: chosen = REFUSE + filler, rejected = COMPLY + payload.
DatasetSplit gen_preference_pairs(uint64_t seed, int n);

// Benign-request triples: chosen = COMPLY + helpful filler, rejected = REFUSE + filler.
DatasetSplit gen_benign(uint64_t seed, int n);

// round(rho*n) examples get the trigger prepended and a harmful-payload
// completion; the rest are refusals on harmful prompts.
DatasetSplit gen_poisoned(uint64_t seed, int n, const std::vector<int32_t>& trigger, float rho);

// Held-out triggered prompts whose stored completion carries the payload.
DatasetSplit gen_trigger_eval(uint64_t seed, int n, const std::vector<int32_t>& trigger);

// Held-out benign prompts; compliance means not opening with REFUSE.
DatasetSplit gen_clean_eval(uint64_t seed, int n);

// Disjoint-alphabet grammars A (forget) and B (retain); completions follow a
// shared token-level rule, so a handful of examples can re-teach the mapping.
std::pair<DatasetSplit, DatasetSplit> gen_forget_retain(uint64_t seed, int n_forget, int n_retain);

}  // namespace lat
