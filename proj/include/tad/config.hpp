#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tad {

/// Flat key=value configuration with dotted keys. Files are plain text, one
/// `key = value` pair per line, '#' starts a comment. Later assignments win,
/// which is what lets CLI flags override file values.
class Config {
  public:
    Config() = default;

    static Config from_file(const std::string& path);      // throws ConfigError
    static Config from_string(const std::string& text);

    void set(const std::string& key, const std::string& value);
    void merge(const Config& overrides);

    bool has(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_real(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    long long get_int64(const std::string& key, long long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_real_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

    const std::map<std::string, std::string>& entries() const { return values_; }

    /// Keys that were set but never read. Used to reject unknown keys in
    /// ablation grids.
    std::vector<std::string> unread_keys() const;

  private:
    std::map<std::string, std::string> values_;
    mutable std::map<std::string, bool> read_;
};

std::vector<std::string> split(const std::string& s, char sep);

}  // namespace tad
