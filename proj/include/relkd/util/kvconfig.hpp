#pragma once

// Plain-text `key = value` configuration files. '#' starts a comment.
// Every key must be consumed by the reader; leftovers are reported as errors
// so that a misspelled hyperparameter cannot be silently ignored.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>

#include "relkd/error.hpp"

namespace relkd::util {

class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse(std::istream& in, const std::string& origin) {
        KvConfig kv;
        kv.origin_ = origin;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            }
            auto key = trim(trimmed.substr(0, eq));
            auto value = trim(trimmed.substr(eq + 1));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            if (!kv.values_.emplace(key, value).second) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            }
        }
        return kv;
    }

    static KvConfig parse_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config '" + path.string() + "'");
        return parse(in, path.string());
    }

    static KvConfig parse_string(const std::string& text, const std::string& origin = "<string>") {
        std::istringstream in(text);
        return parse(in, origin);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    /// Reads key if present (marking it consumed), else returns fallback.
    template <typename V>
    V get(const std::string& key, V fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        return convert<V>(key, it->second);
    }

    template <typename V>
    V require(const std::string& key) {
        if (!has(key)) throw ConfigError(origin_ + ": missing required key '" + key + "'");
        return get<V>(key, V{});
    }

    /// Throws if any key was never read.
    void ensure_consumed() const {
        std::string unknown;
        for (const auto& [k, v] : values_) {
            if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
        }
        if (!unknown.empty()) throw ConfigError(origin_ + ": unknown key(s): " + unknown);
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    template <typename V>
    V convert(const std::string& key, const std::string& text) const {
        auto bad = [&] { return ConfigError(origin_ + ": key '" + key + "' has invalid value '" + text + "'"); };
        if constexpr (std::is_same_v<V, std::string>) {
            return text;
        } else if constexpr (std::is_same_v<V, bool>) {
            if (text == "true" || text == "1") return true;
            if (text == "false" || text == "0") return false;
            throw bad();
        } else if constexpr (std::is_integral_v<V>) {
            V out{};
            auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
            if (ec != std::errc{} || p != text.data() + text.size()) throw bad();
            return out;
        } else {
            static_assert(std::is_floating_point_v<V>);
            std::size_t used = 0;
            double d = 0;
            try {
                d = std::stod(text, &used);
            } catch (const std::exception&) {
                throw bad();
            }
            if (used != text.size()) throw bad();
            return static_cast<V>(d);
        }
    }

    std::string origin_ = "<config>";
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

}  // namespace relkd::util
