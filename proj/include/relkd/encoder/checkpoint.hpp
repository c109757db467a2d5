#pragma once

// Binary checkpoint: 8-byte magic "TIMECKP1", u32 little-endian manifest
// length, JSON manifest, then the tensors as a contiguous little-endian f32
// blob with ascending, unpadded offsets.

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "relkd/encoder/model.hpp"

namespace relkd::encoder {

inline constexpr char kCheckpointMagic[8] = {'T', 'I', 'M', 'E', 'C', 'K', 'P', '1'};
inline constexpr int kCheckpointVersion = 1;

struct LoadedCheckpoint {
    EncoderWeights<float> weights;
    ModelConfig config;
    std::uint64_t step = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// Serialized bytes of a checkpoint; save_checkpoint writes exactly these.
inline std::string checkpoint_bytes(const EncoderWeights<float>& w, std::uint64_t step) {
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    const auto params = w.named_parameters();
    for (const auto& [name, t] : params) {
        const std::size_t nbytes = t.numel() * sizeof(float);
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    }
    const nlohmann::json manifest{
        {"version", kCheckpointVersion}, {"config", to_json(w.config)}, {"step", step}, {"tensors", tensors}};
    const std::string text = manifest.dump();
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : params) {
        out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
    }
    return out;
}

/// Writes via a temporary sibling and renames, so a crash never leaves a partial file at path.
inline void save_checkpoint(const EncoderWeights<float>& w, std::uint64_t step, const std::filesystem::path& path) {
    const auto bytes = checkpoint_bytes(w, step);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline LoadedCheckpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
    auto fail = [&](const std::string& m) { return FormatError("checkpoint '" + origin + "': " + m); };
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw fail("bad magic");
    const std::size_t mlen = detail::get_u32_le(reinterpret_cast<const unsigned char*>(bytes.data() + 8));
    if (bytes.size() < 12 + mlen) {
        throw fail("manifest truncated: expected " + std::to_string(mlen) + " bytes, found " +
                   std::to_string(bytes.size() - 12));
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("manifest is not valid JSON: ") + e.what());
    }
    LoadedCheckpoint ck;
    std::vector<BasicTensor<float>> tensors;
    try {
        const int version = manifest.at("version").get<int>();
        if (version != kCheckpointVersion) throw fail("unknown version " + std::to_string(version));
        ck.config = model_config_from_json(manifest.at("config"));
        ck.step = manifest.at("step").get<std::uint64_t>();
        const auto expected = parameter_shapes(ck.config);
        const auto& list = manifest.at("tensors");
        if (list.size() != expected.size()) {
            throw fail("manifest lists " + std::to_string(list.size()) + " tensors, config implies " +
                       std::to_string(expected.size()));
        }
        const std::size_t blob_size = bytes.size() - 12 - mlen;
        const char* blob = bytes.data() + 12 + mlen;
        std::size_t cursor = 0;
        for (std::size_t i = 0; i < list.size(); ++i) {
            const auto& e = list[i];
            const auto name = e.at("name").get<std::string>();
            const auto shape = e.at("shape").get<Shape>();
            const auto offset = e.at("offset").get<std::size_t>();
            const auto nbytes = e.at("nbytes").get<std::size_t>();
            if (e.at("dtype").get<std::string>() != "f32") throw fail("tensor " + name + ": unsupported dtype");
            if (name != expected[i].first || shape != expected[i].second) {
                throw fail("tensor " + name + " " + numkit::shape_str(shape) + " disagrees with config (expected " +
                           expected[i].first + " " + numkit::shape_str(expected[i].second) + ")");
            }
            if (offset != cursor || nbytes != numkit::numel(shape) * sizeof(float)) {
                throw fail("tensor " + name + ": offsets must be ascending and unpadded");
            }
            if (offset + nbytes > blob_size) {
                throw fail("blob truncated: expected " + std::to_string(offset + nbytes) + " bytes, found " +
                           std::to_string(blob_size));
            }
            std::vector<float> data(numkit::numel(shape));
            std::memcpy(data.data(), blob + offset, nbytes);
            for (float v : data) {
                if (!std::isfinite(v)) throw fail("tensor " + name + " holds a non-finite value");
            }
            tensors.emplace_back(shape, std::move(data), false);
            cursor += nbytes;
        }
        if (cursor != blob_size) {
            throw fail("blob length mismatch: expected " + std::to_string(cursor) + " bytes, found " +
                       std::to_string(blob_size));
        }
    } catch (const nlohmann::json::exception& e) {
        throw fail(std::string("malformed manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw fail(e.what());
    }
    ck.weights = assemble_weights<float>(ck.config, std::move(tensors));
    return ck;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return parse_checkpoint(bytes, path.string());
}

}  // namespace relkd::encoder
