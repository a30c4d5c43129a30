#pragma once

#include "splatsense/core.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace splatsense {

/// Flat `key = value` configuration with typed getters. Unknown keys are
/// rejected against a schema so typos never pass silently.
class KeyValueConfig {
  public:
    KeyValueConfig() = default;

    static KeyValueConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw io_error("cannot open config: " + path);
        KeyValueConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                if (line.find_first_not_of(" \t\r") != std::string::npos)
                    throw io_error(path + ":" + std::to_string(lineno) +
                                   ": expected 'key = value'");
                continue;
            }
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw io_error("empty config key");
        if (values_.find(key) == values_.end()) order_.push_back(key);
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }
    std::string require_string(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw config_error("missing required config key: " + key);
        return it->second;
    }
    double get_double(const std::string& key, double fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw config_error("config key " + key + ": not a number: " + it->second);
        }
    }
    long long get_int(const std::string& key, long long fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoll(it->second);
        } catch (const std::exception&) {
            throw config_error("config key " + key + ": not an integer: " + it->second);
        }
    }
    bool get_bool(const std::string& key, bool fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw config_error("config key " + key + ": not a boolean: " + it->second);
    }

    /// Every present key must appear in `known`.
    void reject_unknown(const std::set<std::string>& known) const {
        for (const auto& [k, v] : values_)
            if (known.find(k) == known.end()) throw config_error("unknown config key: " + k);
    }

    void write(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw io_error("cannot open for writing: " + path);
        for (const auto& k : order_) f << k << " = " << values_.at(k) << "\n";
        if (!f) throw io_error("write failed: " + path);
    }

    const std::vector<std::string>& keys() const { return order_; }

  private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

}  // namespace splatsense
