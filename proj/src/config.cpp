#include "lat/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "lat/rng.hpp"

namespace lat {

namespace {

enum class Kind { Int, U64, Float, Bool, Str, IntList };

struct KeySpec {
    Kind kind;
    const char* def;
};

const std::map<std::string, KeySpec>& schema() {
    static const std::map<std::string, KeySpec> s{
        {"model.layers", {Kind::Int, "4"}},
        {"model.d_model", {Kind::Int, "64"}},
        {"model.heads", {Kind::Int, "4"}},
        {"model.vocab", {Kind::Int, "64"}},
        {"model.context", {Kind::Int, "64"}},
        {"loss.kind", {Kind::Str, "sft"}},
        {"benign.mode", {Kind::Str, "none"}},
        {"benign.kl_weight", {Kind::Float, "1"}},
        {"benign.ratio", {Kind::Int, "1"}},
        {"attack.epsilon", {Kind::Float, "1"}},
        {"attack.site_epsilon", {Kind::Str, ""}},
        {"attack.steps", {Kind::Int, "16"}},
        {"attack.step_size", {Kind::Float, "0"}},
        {"attack.mode", {Kind::Str, "targeted"}},
        {"attack.init", {Kind::Str, "zero"}},
        {"attack.aggregate", {Kind::Bool, "false"}},
        {"attack.whiten", {Kind::Bool, "false"}},
        {"attack.whiten_lambda", {Kind::Float, "0.0001"}},
        {"attack.profile", {Kind::Str, "even"}},
        {"attack.sites", {Kind::Int, "4"}},
        {"attack.layers", {Kind::IntList, ""}},
        {"dpo.beta", {Kind::Float, "0.1"}},
        {"rmu.c", {Kind::Float, "6.5"}},
        {"rmu.alpha", {Kind::Float, "1200"}},
        {"rmu.layer", {Kind::Int, "-1"}},
        {"rmu.trainable", {Kind::IntList, ""}},
        {"train.steps", {Kind::Int, "200"}},
        {"train.batch", {Kind::Int, "8"}},
        {"train.lr", {Kind::Float, "0.003"}},
        {"train.momentum", {Kind::Float, "0.9"}},
        {"train.seed", {Kind::U64, "1"}},
        {"train.init_seed", {Kind::U64, "1"}},
        {"train.eval_every", {Kind::Int, "0"}},
        {"train.checkpoint_every", {Kind::Int, "0"}},
        {"train.nan_budget", {Kind::Float, "0.05"}},
        {"train.proxy_trigger", {Kind::Bool, "false"}},
        {"train.threads", {Kind::Int, "0"}},
        {"train.init_checkpoint", {Kind::Str, ""}},
        {"relearn.examples", {Kind::Int, "2"}},
        {"relearn.iters", {Kind::Int, "20"}},
        {"relearn.eval_at", {Kind::IntList, "5,10,20"}},
        {"relearn.lr", {Kind::Float, "0.003"}},
        {"relearn.base_checkpoint", {Kind::Str, ""}},
        {"gen.seed", {Kind::U64, "1"}},
        {"gen.pairs", {Kind::Int, "256"}},
        {"gen.benign", {Kind::Int, "256"}},
        {"gen.poisoned", {Kind::Int, "512"}},
        {"gen.rho", {Kind::Float, "0.25"}},
        {"gen.trigger", {Kind::IntList, "4,5,6"}},
        {"gen.trigger_eval", {Kind::Int, "64"}},
        {"gen.clean_eval", {Kind::Int, "64"}},
        {"gen.forget", {Kind::Int, "256"}},
        {"gen.retain", {Kind::Int, "256"}},
        {"data.dir", {Kind::Str, ""}},
        {"data.train", {Kind::Str, ""}},
        {"data.extra_train", {Kind::Str, ""}},
        {"data.pref", {Kind::Str, "pref.txt"}},
        {"data.benign", {Kind::Str, "benign.txt"}},
        {"data.forget", {Kind::Str, "forget.txt"}},
        {"data.retain", {Kind::Str, "retain.txt"}},
        {"data.trigger_eval", {Kind::Str, "trigger_eval.txt"}},
        {"data.clean_eval", {Kind::Str, "clean_eval.txt"}},
        {"out.dir", {Kind::Str, ""}},
    };
    return s;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string format_float(float v) {
    char buf[48];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general);
    return std::string(buf, end);
}

std::string normalize(const std::string& key, Kind kind, const std::string& value) {
    const std::string v = trim(value);
    switch (kind) {
        case Kind::Int: {
            int64_t out = 0;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (ec != std::errc{} || p != v.data() + v.size())
                throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
            return std::to_string(out);
        }
        case Kind::U64: {
            uint64_t out = 0;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (ec != std::errc{} || p != v.data() + v.size())
                throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
            return std::to_string(out);
        }
        case Kind::Float: {
            float out = 0.0f;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (ec != std::errc{} || p != v.data() + v.size())
                throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
            return format_float(out);
        }
        case Kind::Bool: {
            if (v == "true" || v == "1" || v == "yes") return "true";
            if (v == "false" || v == "0" || v == "no") return "false";
            throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
        }
        case Kind::IntList: {
            if (v.empty()) return "";
            std::string out;
            std::stringstream ss(v);
            std::string tok;
            while (std::getline(ss, tok, ',')) {
                tok = trim(tok);
                if (tok.empty()) continue;
                int64_t x = 0;
                auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
                if (ec != std::errc{} || p != tok.data() + tok.size())
                    throw ConfigError("config: key '" + key + "' expects integers, got '" + tok + "'");
                if (!out.empty()) out += ",";
                out += std::to_string(x);
            }
            return out;
        }
        case Kind::Str:
            return v;
    }
    return v;
}

}  // namespace

const std::map<std::string, std::string>& Config::schema_defaults() {
    static const std::map<std::string, std::string> defaults = [] {
        std::map<std::string, std::string> d;
        for (const auto& [key, spec] : schema()) d[key] = spec.def;
        return d;
    }();
    return defaults;
}

Config Config::parse(const std::string& text) {
    Config cfg;
    for (const auto& [key, spec] : schema()) cfg.values_[key] = spec.def;

    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        auto it = schema().find(key);
        if (it == schema().end())
            throw ConfigError("config: unknown key '" + key + "' on line " + std::to_string(lineno));
        cfg.values_[key] = normalize(key, it->second.kind, value);
    }
    return cfg;
}

Config Config::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

const std::string& Config::raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    return it->second;
}

int64_t Config::get_int(const std::string& key) const {
    return std::stoll(raw(key));
}

uint64_t Config::get_u64(const std::string& key) const {
    return std::stoull(raw(key));
}

float Config::get_float(const std::string& key) const {
    return std::stof(raw(key));
}

bool Config::get_bool(const std::string& key) const {
    return raw(key) == "true";
}

std::string Config::get_string(const std::string& key) const { return raw(key); }

std::vector<int> Config::get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(raw(key));
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

std::vector<int32_t> Config::get_token_list(const std::string& key) const {
    std::vector<int32_t> out;
    for (int v : get_int_list(key)) out.push_back(static_cast<int32_t>(v));
    return out;
}

std::string Config::require_string(const std::string& key) const {
    const std::string& v = raw(key);
    if (v.empty()) throw ConfigError("config: missing required key '" + key + "'");
    return v;
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = schema().find(key);
    if (it == schema().end()) throw ConfigError("config: unknown key '" + key + "'");
    values_[key] = normalize(key, it->second.kind, value);
}

std::string Config::canonical_text() const {
    std::string out;
    for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
    return out;
}

uint64_t Config::hash() const { return fnv1a64(canonical_text()); }

std::string Config::hash_hex() const {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
    return std::string(buf);
}

}  // namespace lat
