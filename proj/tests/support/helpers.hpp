#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "relkd/numkit/tensor.hpp"

namespace relkd::testing {

template <typename T = double>
numkit::BasicTensor<T> random_tensor(numkit::Shape shape, std::uint64_t seed, double scale = 1.0,
                                     bool requires_grad = false) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<T> data(numkit::numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return numkit::BasicTensor<T>(std::move(shape), std::move(data), requires_grad);
}

/// Owning copy of a tensor's data, for equality assertions.
template <typename T>
std::vector<T> vec(std::span<const T> s) {
    return {s.begin(), s.end()};
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("relkd_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string data_dir() { return RELKD_DATA_DIR; }

}  // namespace relkd::testing
