#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dpidm/common.hpp"

namespace dpidm {

// `key = value` config text with '#' comments and dotted keys.
class KvConfig {
  public:
    KvConfig() = default;

    static KvConfig parse_text(const std::string& text) {
        KvConfig cfg;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            cfg.set(key, value);
        }
        return cfg;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read config file: " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_text(ss.str());
    }

    void set(const std::string& key, const std::string& value) {
        if (values_.find(key) == values_.end()) order_.push_back(key);
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    int64_t get_int(const std::string& key, int64_t dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            return std::stoll(it->second);
        } catch (...) {
            throw ConfigError("config key '" + key + "': not an integer: " + it->second);
        }
    }

    double get_double(const std::string& key, double dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw ConfigError("config key '" + key + "': not a number: " + it->second);
        }
    }

    std::vector<int64_t> get_int_list(const std::string& key, std::vector<int64_t> dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        std::vector<int64_t> out;
        std::string item;
        std::istringstream is(it->second);
        while (std::getline(is, item, ',')) {
            try {
                out.push_back(std::stoll(trim(item)));
            } catch (...) {
                throw ConfigError("config key '" + key + "': not an integer list: " + it->second);
            }
        }
        return out;
    }

    // First key not in `known`, or empty string if all known.
    std::string first_unknown_key(const std::set<std::string>& known) const {
        for (const auto& k : order_)
            if (!known.count(k)) return k;
        return {};
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& k : order_) os << k << " = " << values_.at(k) << "\n";
        return os.str();
    }

    const std::vector<std::string>& keys() const { return order_; }

  private:
    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
};

}  // namespace dpidm
