#pragma once

// Run manifest: written when a command starts and finalized when it exits,
// recording the resolved configuration and a SHA-256 digest of every input.

#include <openssl/evp.h>

#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "relkd/error.hpp"

namespace relkd::cli {

namespace fs = std::filesystem;

inline std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read input '" + path.string() + "'");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
    return out;
}

class RunManifest {
public:
    RunManifest(std::string command, fs::path path) : path_(std::move(path)) {
        j_["command"] = std::move(command);
        j_["version"] = RELKD_VERSION;
        j_["config"] = nlohmann::json::object();
        j_["inputs"] = nlohmann::json::array();
    }

    nlohmann::json& config() { return j_["config"]; }

    void add_input(const std::string& role, const fs::path& p) {
        j_["inputs"].push_back({{"role", role}, {"path", p.string()}, {"sha256", sha256_file(p)}});
    }

    /// Records the start time and writes the manifest with status "running".
    void begin() {
        j_["started_at"] = utc_now();
        j_["status"] = "running";
        write();
    }

    void finish(bool ok, const std::string& error = {}) {
        if (!j_.contains("started_at")) j_["started_at"] = utc_now();
        j_["finished_at"] = utc_now();
        j_["status"] = ok ? "ok" : "failed";
        if (!ok) j_["error"] = error;
        write();
    }

    const fs::path& path() const { return path_; }

private:
    void write() const {
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        std::ofstream out(path_, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write manifest '" + path_.string() + "'");
        out << j_.dump(2) << '\n';
    }

    fs::path path_;
    nlohmann::json j_;
};

}  // namespace relkd::cli
