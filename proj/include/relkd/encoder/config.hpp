#pragma once

#include <json.hpp>

#include <string>

#include "relkd/error.hpp"
#include "relkd/numkit/ops.hpp"
#include "relkd/util/kvconfig.hpp"

namespace relkd::encoder {

enum class PosKind { absolute, relative };

/// Encoder architecture. Teacher-style models use relative position bias and
/// GeGLU; student-style models use learned absolute positions and GELU.
struct ModelConfig {
    std::size_t n_layers = 6;
    std::size_t hidden = 384;
    std::size_t n_heads = 12;
    std::size_t ffn_size = 1536;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 128;
    PosKind pos_kind = PosKind::absolute;
    std::size_t rel_buckets = 32;
    std::size_t rel_max_distance = 128;
    numkit::Activation act = numkit::Activation::gelu;
    double dropout = 0.1;

    std::size_t head_dim() const { return hidden / n_heads; }

    /// Width of the FFN up-projection; GeGLU needs value and gate halves.
    std::size_t ffn_up_width() const { return act == numkit::Activation::geglu ? 2 * ffn_size : ffn_size; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
        if (n_layers < 1) fail("n_layers must be >= 1");
        if (hidden < 1 || n_heads < 1) fail("hidden and n_heads must be >= 1");
        if (hidden % n_heads != 0) {
            fail("hidden " + std::to_string(hidden) + " is not divisible by n_heads " + std::to_string(n_heads));
        }
        if (ffn_size < 1) fail("ffn_size must be >= 1");
        if (vocab_size < 5) fail("vocab_size must be >= 5");
        if (max_seq_len < 3) fail("max_seq_len must be >= 3");
        if (pos_kind == PosKind::relative && (rel_buckets < 4 || rel_max_distance < 2)) {
            fail("relative positions need rel_buckets >= 4 and rel_max_distance >= 2");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0,1)");
    }

    bool operator==(const ModelConfig&) const = default;
};

/// The three student sizes: m (6x768), s (6x384), xs (4x384); FFN 4H, 12 heads.
inline ModelConfig student_preset(const std::string& size, std::size_t vocab_size) {
    ModelConfig c;
    if (size == "m") {
        c.n_layers = 6;
        c.hidden = 768;
    } else if (size == "s") {
        c.n_layers = 6;
        c.hidden = 384;
    } else if (size == "xs") {
        c.n_layers = 4;
        c.hidden = 384;
    } else {
        throw ConfigError("unknown student size '" + size + "' (expected m, s or xs)");
    }
    c.n_heads = 12;
    c.ffn_size = 4 * c.hidden;
    c.vocab_size = vocab_size;
    return c;
}

inline std::string to_string(PosKind k) { return k == PosKind::absolute ? "absolute" : "relative"; }
inline std::string to_string(numkit::Activation a) { return a == numkit::Activation::gelu ? "gelu" : "geglu"; }

inline PosKind parse_pos_kind(const std::string& s) {
    if (s == "absolute") return PosKind::absolute;
    if (s == "relative") return PosKind::relative;
    throw ConfigError("pos_kind must be 'absolute' or 'relative', got '" + s + "'");
}

inline numkit::Activation parse_activation(const std::string& s) {
    if (s == "gelu") return numkit::Activation::gelu;
    if (s == "geglu") return numkit::Activation::geglu;
    throw ConfigError("act must be 'gelu' or 'geglu', got '" + s + "'");
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},
            {"hidden", c.hidden},
            {"n_heads", c.n_heads},
            {"ffn_size", c.ffn_size},
            {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len},
            {"pos_kind", to_string(c.pos_kind)},
            {"rel_buckets", c.rel_buckets},
            {"rel_max_distance", c.rel_max_distance},
            {"act", to_string(c.act)},
            {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.hidden = j.at("hidden").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.ffn_size = j.at("ffn_size").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.pos_kind = parse_pos_kind(j.at("pos_kind").get<std::string>());
        c.rel_buckets = j.at("rel_buckets").get<std::size_t>();
        c.rel_max_distance = j.at("rel_max_distance").get<std::size_t>();
        c.act = parse_activation(j.at("act").get<std::string>());
        c.dropout = j.at("dropout").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Reads a model config file. vocab_size may be omitted and supplied by the caller.
inline ModelConfig model_config_from_kv(util::KvConfig kv, std::size_t vocab_size_fallback = 0) {
    ModelConfig c;
    c.n_layers = kv.get<std::size_t>("n_layers", c.n_layers);
    c.hidden = kv.get<std::size_t>("hidden", c.hidden);
    c.n_heads = kv.get<std::size_t>("n_heads", c.n_heads);
    c.ffn_size = kv.get<std::size_t>("ffn_size", 4 * c.hidden);
    c.vocab_size = kv.get<std::size_t>("vocab_size", vocab_size_fallback);
    c.max_seq_len = kv.get<std::size_t>("max_seq_len", c.max_seq_len);
    c.pos_kind = parse_pos_kind(kv.get<std::string>("pos_kind", "absolute"));
    c.rel_buckets = kv.get<std::size_t>("rel_buckets", c.rel_buckets);
    c.rel_max_distance = kv.get<std::size_t>("rel_max_distance", c.rel_max_distance);
    c.act = parse_activation(kv.get<std::string>("act", "gelu"));
    c.dropout = kv.get<double>("dropout", c.dropout);
    kv.ensure_consumed();
    c.validate();
    return c;
}

}  // namespace relkd::encoder
