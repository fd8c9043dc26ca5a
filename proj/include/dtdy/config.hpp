#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dtdy {

struct ConfigKey {
    std::string key;
    std::string default_value;
    std::string doc;
};

/// Flat `key = value` configuration with a fixed schema; unknown keys are
/// rejected and every key has a documented default.
class RunConfig {
  public:
    static const std::vector<ConfigKey>& schema();
    static RunConfig defaults();

    /// `key = value` lines, `#` comments, blank lines ignored.
    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::uint64_t get_seed() const;
    bool empty(const std::string& key) const { return get(key).empty(); }

    /// Sorted `key = value` dump; reloading it reproduces this config.
    void dump(const std::string& path) const;

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace dtdy
