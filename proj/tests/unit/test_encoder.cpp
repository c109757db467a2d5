#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "relkd/encoder/checkpoint.hpp"
#include "relkd/encoder/mlm.hpp"
#include "relkd/numkit/gradcheck.hpp"
#include "relkd/trainer/optim.hpp"
#include "support/helpers.hpp"

using namespace relkd;
using namespace relkd::encoder;
using relkd::testing::TempDir;
using relkd::testing::vec;
using textdata::TokenBatch;

namespace {

ModelConfig tiny(PosKind pos = PosKind::absolute, numkit::Activation act = numkit::Activation::gelu) {
    ModelConfig c;
    c.n_layers = 2;
    c.hidden = 16;
    c.n_heads = 4;
    c.ffn_size = 32;
    c.vocab_size = 20;
    c.max_seq_len = 12;
    c.pos_kind = pos;
    c.rel_buckets = 8;
    c.rel_max_distance = 16;
    c.act = act;
    c.dropout = 0.0;
    return c;
}

TokenBatch sample_batch(std::size_t B, std::size_t S, std::size_t V, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TokenBatch b;
    b.batch = B;
    b.seq_len = S;
    for (std::size_t r = 0; r < B; ++r) {
        const std::size_t len = 3 + rng() % (S - 2);
        for (std::size_t i = 0; i < S; ++i) {
            int id = textdata::kPad;
            if (i == 0) id = textdata::kBos;
            else if (i + 1 == len) id = textdata::kEos;
            else if (i < len) id = 4 + static_cast<int>(rng() % (V - 4));
            b.ids.push_back(id);
            b.mask.push_back(i < len ? 1 : 0);
        }
    }
    return b;
}

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
    auto c = tiny();
    c.hidden = 100;
    c.n_heads = 12;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(init_model<float>(c, 1), ConfigError);
}

TEST(ModelConfig, KvParsingAndUnknownKeys) {
    auto kv = util::KvConfig::parse_string("n_layers = 4\nhidden = 128\nn_heads = 8\npos_kind = relative\nact = geglu\n");
    auto c = model_config_from_kv(kv, 50);
    EXPECT_EQ(c.n_layers, 4u);
    EXPECT_EQ(c.ffn_size, 512u);
    EXPECT_EQ(c.ffn_up_width(), 1024u);
    EXPECT_EQ(c.vocab_size, 50u);
    EXPECT_EQ(c.pos_kind, PosKind::relative);
    EXPECT_THROW(model_config_from_kv(util::KvConfig::parse_string("hiden = 64\n"), 50), ConfigError);
}

TEST(ModelConfig, StudentPresets) {
    EXPECT_EQ(student_preset("m", 100).hidden, 768u);
    EXPECT_EQ(student_preset("s", 100).n_layers, 6u);
    auto xs = student_preset("xs", 100);
    EXPECT_EQ(xs.n_layers, 4u);
    EXPECT_EQ(xs.hidden, 384u);
    EXPECT_EQ(xs.ffn_size, 1536u);
    EXPECT_EQ(xs.n_heads, 12u);
    EXPECT_THROW(student_preset("xl", 100), ConfigError);
}

TEST(InitModel, ParameterCountMatchesClosedForm) {
    auto c = student_preset("m", 1000);
    const std::size_t V = 1000, H = 768, L = 6, S = 128;
    // Per layer: four HxH projections with biases, two layer norms, FFN H->4H->H with biases.
    const std::size_t per_layer = 4 * (H * H + H) + 2 * 2 * H + (H * 4 * H + 4 * H) + (4 * H * H + H);
    const std::size_t oracle = V * H + S * H + L * per_layer + 2 * H + V;
    EXPECT_EQ(oracle, 43'396'072u);
    // Shapes alone suffice; materializing 43M floats is not needed for the count.
    std::size_t counted = 0;
    for (const auto& [name, shape] : parameter_shapes(c)) counted += numkit::numel(shape);
    EXPECT_EQ(counted, oracle);
    EXPECT_EQ(init_model<float>(tiny(), 3).parameter_count(), [] {
        std::size_t n = 0;
        for (const auto& [name, shape] : parameter_shapes(tiny())) n += numkit::numel(shape);
        return n;
    }());
}

TEST(InitModel, DeterministicAndWellFormed) {
    auto a = init_model<float>(tiny(), 9), b = init_model<float>(tiny(), 9), d = init_model<float>(tiny(), 10);
    auto pa = a.named_parameters(), pb = b.named_parameters(), pd = d.named_parameters();
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(vec(pa[i].second.data()), vec(pb[i].second.data())) << pa[i].first;
        any_diff = any_diff || vec(pa[i].second.data()) != vec(pd[i].second.data());
        const auto& name = pa[i].first;
        for (float v : pa[i].second.data()) {
            if (name.ends_with(".gain")) ASSERT_EQ(v, 1.0f);
            else if (name.ends_with(".bias")) ASSERT_EQ(v, 0.0f);
            else ASSERT_LE(std::abs(v), 0.04f + 1e-7f);
        }
    }
    EXPECT_TRUE(any_diff);
}

TEST(RelativeBucket, CenterMonotoneClamp) {
    EXPECT_EQ(relative_bucket(0, 32, 128), 0u);
    for (long long d = 0; d < 300; ++d) {
        EXPECT_LE(relative_bucket(d, 32, 128), relative_bucket(d + 1, 32, 128));
        EXPECT_LE(relative_bucket(-d, 32, 128), relative_bucket(-d - 1, 32, 128));
        EXPECT_LT(relative_bucket(d, 32, 128), 16u);
        EXPECT_GE(relative_bucket(-d - 1, 32, 128), 16u);
        EXPECT_LT(relative_bucket(-d - 1, 32, 128), 32u);
    }
    EXPECT_EQ(relative_bucket(500, 32, 128), relative_bucket(128, 32, 128));
    EXPECT_EQ(relative_bucket(-500, 32, 128), relative_bucket(-128, 32, 128));
    // Exact region: one bucket per offset.
    for (long long d = 0; d < 8; ++d) EXPECT_EQ(relative_bucket(d, 32, 128), static_cast<std::size_t>(d));
}

TEST(RelativeBias, DependsOnlyOnOffset) {
    auto w = init_model<float>(tiny(PosKind::relative), 4);
    const std::size_t S = 10, A = 4;
    auto bias = relative_bias(w, S);
    ASSERT_EQ(bias.shape(), (numkit::Shape{A, S, S}));
    for (std::size_t h = 0; h < A; ++h)
        for (std::size_t i = 1; i < S; ++i)
            for (std::size_t j = 1; j < S; ++j)
                ASSERT_EQ(bias.data()[(h * S + i) * S + j], bias.data()[(h * S + i - 1) * S + j - 1]);
}

TEST(Forward, ShapeAndCapture) {
    auto w = init_model<float>(tiny(PosKind::relative, numkit::Activation::geglu), 5);
    auto b = sample_batch(3, 9, 20, 1);
    ForwardOptions opt;
    opt.capture_layer = 2;
    auto out = forward(w, b, opt);
    EXPECT_EQ(out.hidden.shape(), (numkit::Shape{3, 9, 16}));
    ASSERT_TRUE(out.capture.has_value());
    EXPECT_EQ(out.capture->layer_index, 2u);
    EXPECT_EQ(out.capture->q.shape(), (numkit::Shape{3, 9, 16}));
    opt.capture_layer = 3;
    EXPECT_THROW(forward(w, b, opt), ContractError);
    opt.capture_layer = 0;
    EXPECT_THROW(forward(w, b, opt), ContractError);
    b.ids[1] = 20;
    EXPECT_THROW(forward(w, b), ContractError);
}

TEST(Forward, PadContentDoesNotLeak) {
    for (auto pos : {PosKind::absolute, PosKind::relative}) {
        auto w = init_model<float>(tiny(pos), 6);
        auto b = sample_batch(2, 10, 20, 2);
        auto c = b;
        for (std::size_t i = 0; i < c.ids.size(); ++i) {
            if (!c.mask[i]) c.ids[i] = 4 + static_cast<int>(i % 16);
        }
        auto ha = vec(forward(w, b).hidden.data()), hc = vec(forward(w, c).hidden.data());
        for (std::size_t i = 0; i < b.mask.size(); ++i) {
            if (!b.mask[i]) continue;
            for (std::size_t k = 0; k < 16; ++k) ASSERT_EQ(ha[i * 16 + k], hc[i * 16 + k]);
        }
    }
}

TEST(Forward, PositionFamiliesAgreeWhenPositionsZeroed) {
    auto wa = init_model<float>(tiny(PosKind::absolute), 8);
    auto wr = init_model<float>(tiny(PosKind::relative), 8);
    auto b = sample_batch(2, 8, 20, 3);
    // Same seed: all non-positional weights coincide.
    EXPECT_EQ(vec(wa.layers[1].wq.data()), vec(wr.layers[1].wq.data()));
    EXPECT_NE(vec(forward(wa, b).hidden.data()), vec(forward(wr, b).hidden.data()));
    std::fill(wa.position_table.mutable_data().begin(), wa.position_table.mutable_data().end(), 0.0f);
    std::fill(wr.relative_table.mutable_data().begin(), wr.relative_table.mutable_data().end(), 0.0f);
    EXPECT_EQ(vec(forward(wa, b).hidden.data()), vec(forward(wr, b).hidden.data()));
}

TEST(Forward, DeterministicInEvalAndDropoutInTrain) {
    auto c = tiny();
    c.dropout = 0.3;
    auto w = init_model<float>(c, 2);
    auto b = sample_batch(2, 8, 20, 4);
    EXPECT_EQ(vec(forward(w, b).hidden.data()), vec(forward(w, b).hidden.data()));
    std::mt19937_64 rng(1);
    ForwardOptions opt;
    opt.train = true;
    opt.rng = &rng;
    EXPECT_NE(vec(forward(w, b, opt).hidden.data()), vec(forward(w, b).hidden.data()));
    opt.rng = nullptr;
    EXPECT_THROW(forward(w, b, opt), ContractError);
}

TEST(Forward, GradientsMatchFiniteDifferences) {
    for (auto pos : {PosKind::absolute, PosKind::relative}) {
        auto c = tiny(pos, pos == PosKind::relative ? numkit::Activation::geglu : numkit::Activation::gelu);
        auto w = cast_weights<double>(init_model<float>(c, 12));
        // Re-randomize at moderate scale so biases and gains carry signal without saturating softmax.
        std::mt19937_64 rng(5);
        std::normal_distribution<double> n(0.0, 1.0);
        for (auto& [name, t] : w.named_parameters()) {
            const double s = name.ends_with(".gain") || name.ends_with(".bias") ? 0.1 : 0.15;
            for (auto& v : t.mutable_data()) v = (name.ends_with(".gain") ? 1.0 : 0.0) + s * n(rng);
        }
        w.set_requires_grad(true);
        auto b = sample_batch(2, 6, 20, 5);
        auto target = relkd::testing::random_tensor<double>({2, 6, 16}, 99);
        auto f = [&] { return numkit::sum(numkit::mul(forward(w, b).hidden, target)); };
        std::vector<numkit::BasicTensor<double>> params;
        for (auto& [name, t] : w.named_parameters()) params.push_back(t);
        EXPECT_LT(numkit::finite_diff_check<double>(f, params, {.eps = 1e-3, .coordinates = 256, .seed = 1}), 1e-3);
    }
}

TEST(Mlm, MaskingSplitAndSkipSignal) {
    auto b = sample_batch(64, 12, 20, 6);
    std::mt19937_64 rng(3);
    auto m = mask_tokens(b, 0.5, 20, rng);
    std::size_t unk = 0, kept = 0, other = 0;
    for (std::size_t i = 0; i < b.ids.size(); ++i) {
        if (m.targets[i] < 0) {
            ASSERT_EQ(m.input.ids[i], b.ids[i]);
            continue;
        }
        ASSERT_TRUE(b.mask[i]);
        ASSERT_NE(b.ids[i], textdata::kBos);
        ASSERT_NE(b.ids[i], textdata::kEos);
        if (m.input.ids[i] == textdata::kUnk) ++unk;
        else if (m.input.ids[i] == b.ids[i]) ++kept;
        else ++other;
    }
    const double n = static_cast<double>(m.selected);
    ASSERT_GT(n, 100);
    EXPECT_NEAR(unk / n, 0.8, 0.08);
    EXPECT_NEAR((kept + other) / n, 0.2, 0.08);

    auto w = init_model<float>(tiny(), 1);
    TokenBatch empty;
    empty.batch = 1;
    empty.seq_len = 4;
    empty.ids = {textdata::kBos, textdata::kEos, 0, 0};
    empty.mask = {1, 1, 0, 0};
    EXPECT_FALSE(mlm_loss(w, empty, 0.5, 1).has_value());
    EXPECT_THROW(mlm_loss(w, b, 0.0, 1), ContractError);
}

TEST(Mlm, InitialLossNearLogVocab) {
    auto c = tiny();
    c.vocab_size = 200;
    auto w = init_model<float>(c, 7);
    auto b = sample_batch(16, 12, 200, 7);
    auto loss = mlm_loss(w, b, 0.3, 2);
    ASSERT_TRUE(loss.has_value());
    EXPECT_NEAR(loss->item(), std::log(200.0), 0.1 * std::log(200.0));
}

TEST(Mlm, MemorizesTinyCorpus) {
    std::vector<std::string> lines{"the cat sat on the mat", "dogs chase cats", "birds sing at dawn"};
    auto vocab = textdata::build_vocab(lines, 50, false);
    auto c = tiny();
    c.vocab_size = vocab.size();
    auto w = init_model<float>(c, 11);
    w.set_requires_grad(true);
    auto batch = textdata::fixed_batches(lines, vocab, 3, 8).front();
    trainer::TrainConfig tc;
    tc.lr_peak = 3e-3;
    tc.warmup_steps = 10;
    tc.total_steps = 200;
    tc.weight_decay = 0.0;
    trainer::AdamState state(w);
    double first = 0, last = 0;
    for (std::size_t step = 1; step <= tc.total_steps; ++step) {
        w.zero_grad();
        auto loss = mlm_loss(w, batch, 0.4, step);
        if (!loss) continue;
        numkit::backward(*loss);
        if (first == 0) first = loss->item();
        last = loss->item();
        trainer::adamw_step(w, state, trainer::lr_at(step, tc), tc);
    }
    // Memorizing three sentences should cut the loss sharply.
    EXPECT_LT(last, 0.5 * first);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir tmp("ckpt");
    auto w = init_model<float>(tiny(PosKind::relative, numkit::Activation::geglu), 21);
    save_checkpoint(w, 1234, tmp / "a.ckpt");
    auto ck = load_checkpoint(tmp / "a.ckpt");
    EXPECT_EQ(ck.step, 1234u);
    EXPECT_EQ(ck.config, w.config);
    auto pa = w.named_parameters(), pb = ck.weights.named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(pa[i].first, pb[i].first);
        ASSERT_EQ(0, std::memcmp(pa[i].second.data().data(), pb[i].second.data().data(), pa[i].second.numel() * 4));
    }
    EXPECT_EQ(checkpoint_bytes(ck.weights, ck.step), relkd::testing::read_text(tmp / "a.ckpt"));
}

TEST(Checkpoint, LayoutHeader) {
    auto w = init_model<float>(tiny(), 2);
    auto bytes = checkpoint_bytes(w, 7);
    EXPECT_EQ(bytes.substr(0, 8), "TIMECKP1");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + 8);
    const std::size_t mlen = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::size_t>(p[3]) << 24);
    auto manifest = nlohmann::json::parse(bytes.substr(12, mlen));
    EXPECT_EQ(manifest["version"], 1);
    EXPECT_EQ(manifest["step"], 7);
    EXPECT_EQ(bytes.size(), 12 + mlen + w.parameter_count() * 4);
}

TEST(Checkpoint, TruncatedBlobNamesByteCounts) {
    auto w = init_model<float>(tiny(), 2);
    auto bytes = checkpoint_bytes(w, 1);
    bytes.resize(bytes.size() - 10);
    try {
        parse_checkpoint(bytes, "t.ckpt");
        FAIL() << "truncated checkpoint accepted";
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected"), std::string::npos) << msg;
        EXPECT_NE(msg.find("found"), std::string::npos) << msg;
    }
}

TEST(Checkpoint, RejectsCorruption) {
    auto w = init_model<float>(tiny(), 2);
    const auto good = checkpoint_bytes(w, 1);
    const std::size_t mlen = static_cast<unsigned char>(good[8]) | (static_cast<unsigned char>(good[9]) << 8);
    auto manifest = nlohmann::json::parse(good.substr(12, mlen));
    const std::string blob = good.substr(12 + mlen);
    auto rebuild = [&](const nlohmann::json& m, const std::string& body) {
        std::string text = m.dump();
        std::string out("TIMECKP1");
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xFF));
        return out + text + body;
    };
    EXPECT_NO_THROW(parse_checkpoint(rebuild(manifest, blob), "ok"));

    auto bad_version = manifest;
    bad_version["version"] = 2;
    EXPECT_THROW(parse_checkpoint(rebuild(bad_version, blob), "v"), FormatError);

    auto bad_config = manifest;
    bad_config["config"]["hidden"] = 32;
    bad_config["config"]["ffn_size"] = 32;
    EXPECT_THROW(parse_checkpoint(rebuild(bad_config, blob), "c"), FormatError);

    std::string nan_blob = blob;
    const float nan = std::nanf("");
    std::memcpy(nan_blob.data(), &nan, 4);
    EXPECT_THROW(parse_checkpoint(rebuild(manifest, nan_blob), "n"), FormatError);

    EXPECT_THROW(parse_checkpoint(rebuild(manifest, blob + "xxxx"), "long"), FormatError);
    EXPECT_THROW(parse_checkpoint("NOTACKPT" + good.substr(8), "magic"), FormatError);
    EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}
