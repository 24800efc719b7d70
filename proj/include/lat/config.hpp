#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace lat {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Flat dotted-key configuration. Parsing materializes every schema key with
// its default, normalizes values by type, and rejects unknown keys, so
// semantically identical files canonicalize to identical text and hash.
class Config {
   public:
    static Config parse(const std::string& text);
    static Config parse_file(const std::string& path);
    static const std::map<std::string, std::string>& schema_defaults();

    const std::string& raw(const std::string& key) const;

    int64_t get_int(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    float get_float(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;  // comma separated
    std::vector<int32_t> get_token_list(const std::string& key) const;

    // non-empty string or ConfigError naming the key
    std::string require_string(const std::string& key) const;

    void set(const std::string& key, const std::string& value);

    std::string canonical_text() const;
    uint64_t hash() const;
    std::string hash_hex() const;

   private:
    std::map<std::string, std::string> values_;
};

}  // namespace lat
