#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <thread>

#include "relkd/bench/harness.hpp"
#include "support/helpers.hpp"
#include "support/toy_models.hpp"

using namespace relkd;
using namespace relkd::bench;
using relkd::testing::TempDir;
using relkd::testing::write_text;

namespace {

constexpr Nanos kMs = 1'000'000;

/// Calls a per-batch action; counts calls.
class Stub : public BenchModel {
public:
    explicit Stub(std::function<void(std::size_t call, const textdata::TokenBatch&)> f) : f_(std::move(f)) {}
    void run(const textdata::TokenBatch& b) override { f_(calls_++, b); }
    std::string id() const override { return "stub"; }
    std::size_t calls() const { return calls_; }

private:
    std::function<void(std::size_t, const textdata::TokenBatch&)> f_;
    std::size_t calls_ = 0;
};

void sleep_ms(double ms) { std::this_thread::sleep_for(std::chrono::microseconds(static_cast<long>(ms * 1000))); }

struct Fixture {
    std::vector<std::string> corpus{"a b c", "b c d e", "c d", "e a b c d"};
    textdata::Vocab vocab = textdata::build_vocab(corpus, 20, false);
    BenchData data{corpus, vocab, 8, 3};
};

BenchConfig config(std::size_t warmup, std::size_t measured, std::vector<std::size_t> sizes = {1}) {
    BenchConfig c;
    c.warmup_batches = warmup;
    c.measured_batches = measured;
    c.sweep_sizes = std::move(sizes);
    c.seq_len = 8;
    return c;
}

}  // namespace

TEST(Latency, FiveMillisecondStubWithinOverheadBudget) {
    Fixture fx;
    SteadyClock clock;
    Stub stub([](std::size_t, const auto&) { sleep_ms(5); });
    auto s = measure_latency(stub, fx.data, config(3, 40), clock);
    EXPECT_GE(s.mean_ms, 5.0);
    EXPECT_LE(s.mean_ms, 6.0);
    EXPECT_EQ(stub.calls(), 43u);
}

TEST(Latency, WarmupBatchesAreExcluded) {
    Fixture fx;
    SteadyClock clock;
    Stub stub([](std::size_t call, const auto&) { sleep_ms(call < 10 ? 50 : 5); });
    auto s = measure_latency(stub, fx.data, config(10, 40), clock);
    EXPECT_GE(s.mean_ms, 5.0);
    EXPECT_LE(s.mean_ms, 6.0);
}

TEST(Latency, SingleMeasuredBatchCollapsesStatistics) {
    Fixture fx;
    ManualClock clock;
    Stub stub([&](std::size_t, const auto&) { clock.advance(7 * kMs); });
    auto s = measure_latency(stub, fx.data, config(2, 1), clock);
    EXPECT_EQ(s.mean_ms, 7.0);
    EXPECT_EQ(s.median_ms, 7.0);
    EXPECT_EQ(s.p95_ms, 7.0);
}

TEST(Latency, SummaryStatistics) {
    std::vector<double> v;
    for (int i = 1; i <= 20; ++i) v.push_back(i);
    auto s = summarize_latency(v);
    EXPECT_DOUBLE_EQ(s.mean_ms, 10.5);
    EXPECT_DOUBLE_EQ(s.median_ms, 10.5);
    EXPECT_DOUBLE_EQ(s.p95_ms, 19.0);
    EXPECT_THROW(summarize_latency({}), ContractError);
}

TEST(Throughput, StubArithmetic) {
    Fixture fx;
    ManualClock clock;
    Stub stub([&](std::size_t, const auto&) { clock.advance(10 * kMs); });
    EXPECT_DOUBLE_EQ(measure_throughput(stub, fx.data, 32, config(10, 100), clock), 3200.0);
    // Batch size 1: throughput is the reciprocal of latency.
    const double lat = measure_latency(stub, fx.data, config(10, 100), clock).mean_ms;
    EXPECT_NEAR(measure_throughput(stub, fx.data, 1, config(10, 100), clock), 1000.0 / lat, 1e-9);
}

TEST(Throughput, StationaryUnderLongerWindowsOnRealClock) {
    Fixture fx;
    SteadyClock clock;
    Stub stub([](std::size_t, const auto&) { sleep_ms(2); });
    const double a = measure_throughput(stub, fx.data, 4, config(2, 50), clock);
    const double b = measure_throughput(stub, fx.data, 4, config(2, 100), clock);
    EXPECT_LT(std::abs(a - b) / a, 0.05);
}

TEST(Throughput, InsufficientDataIsAContractError) {
    SteadyClock clock;
    Stub stub([](std::size_t, const auto&) {});
    std::vector<textdata::TokenBatch> few(3, relkd::testing::random_batch(1, 5, 10, 1));
    EXPECT_THROW(run_window(stub, few, config(2, 2), clock), ContractError);
}

TEST(Energy, ConstantHundredWattsOverTwoSecondsAndFourHundredSamples) {
    Fixture fx;
    ManualClock clock;
    ConstantSampler sampler(clock, 100.0);
    // 100 batches of 4: the window is exactly 2 s on the harness clock. The real
    // sleep gives the 10 Hz poller time to take readings inside the window.
    Stub stub([&](std::size_t, const auto&) {
        sleep_ms(20);
        clock.advance(20 * kMs);
    });
    auto e = measure_energy(stub, fx.data, 4, sampler, config(10, 100), clock);
    EXPECT_GE(e.n_samples, 2u);
    EXPECT_EQ(e.mean_watts, 100.0);
    EXPECT_NEAR(e.j_per_sample, 0.5, 0.5e-9);
    EXPECT_EQ(e.joules, e.j_per_sample * 4 * 100);
}

TEST(Energy, WindowArithmeticAndExclusion) {
    std::vector<PowerSample> r{{0.5, 999.0}, {1.0, 80.0}, {1.5, 120.0}, {2.0, 100.0}, {2.5, 999.0}};
    auto e = energy_in_window(r, 1'000'000'000, 2'000'000'000, 50);
    EXPECT_EQ(e.n_samples, 3u);
    EXPECT_DOUBLE_EQ(e.mean_watts, 100.0);
    EXPECT_DOUBLE_EQ(e.joules, 100.0);
    EXPECT_DOUBLE_EQ(e.j_per_sample, 2.0);
    EXPECT_THROW(energy_in_window({{1.0, 5.0}}, 0, 2'000'000'000, 1), MeasurementError);
    EXPECT_THROW(energy_in_window(r, 5, 5, 1), ContractError);
}

TEST(Energy, TooShortWindowFailsWithInsufficientReadings) {
    Fixture fx;
    SteadyClock clock;
    ConstantSampler sampler(clock, 50.0);
    Stub stub([](std::size_t, const auto&) {});
    EXPECT_THROW(measure_energy(stub, fx.data, 2, sampler, config(0, 3), clock), MeasurementError);
}

TEST(PowerSampler, TraceReplayAlternatingMeansHundred) {
    TempDir dir("bench");
    std::string csv = "t_seconds,watts\n";
    for (int i = 0; i < 20; ++i) csv += std::to_string(i * 0.1) + "," + (i % 2 ? "150" : "50") + "\n";
    write_text(dir / "trace.csv", csv);
    ManualClock clock(5 * kMs);
    TraceSampler s(clock, dir / "trace.csv");
    double sum = 0;
    for (int i = 0; i < 20; ++i) {
        auto r = s.next_sample();
        ASSERT_TRUE(r);
        EXPECT_EQ(r->watts, i % 2 ? 150.0 : 50.0) << i;
        sum += r->watts;
        clock.advance(100 * kMs);
    }
    EXPECT_EQ(sum / 20, 100.0);
    auto last = s.next_sample();
    EXPECT_EQ(last->watts, 150.0);  // the final row holds
    EXPECT_FALSE(s.next_sample());  // clock did not move
}

TEST(PowerSampler, TraceFormatErrors) {
    TempDir dir("bench");
    write_text(dir / "bad_header.csv", "t,w\n0,1\n");
    write_text(dir / "decreasing.csv", "t_seconds,watts\n0.2,1\n0.1,1\n");
    write_text(dir / "negative.csv", "t_seconds,watts\n0,-1\n");
    write_text(dir / "junk.csv", "t_seconds,watts\n0,abc\n");
    ManualClock clock;
    EXPECT_THROW(TraceSampler(clock, dir / "bad_header.csv"), FormatError);
    EXPECT_THROW(TraceSampler(clock, dir / "decreasing.csv"), FormatError);
    EXPECT_THROW(TraceSampler(clock, dir / "negative.csv"), FormatError);
    EXPECT_THROW(TraceSampler(clock, dir / "junk.csv"), FormatError);
    EXPECT_THROW(TraceSampler(clock, dir / "missing.csv"), IoError);
}

TEST(PowerSampler, BackendParsing) {
    ManualClock clock(1);
    EXPECT_EQ(make_sampler("none", clock), nullptr);
    EXPECT_EQ(make_sampler("constant:42", clock)->next_sample()->watts, 42.0);
    EXPECT_EQ(make_sampler("command:echo 17.5", clock)->next_sample()->watts, 17.5);
    EXPECT_THROW(make_sampler("constant:abc", clock), ConfigError);
    EXPECT_THROW(make_sampler("constant:-3", clock), ConfigError);
    EXPECT_THROW(make_sampler("trace:/nonexistent/trace.csv", clock), IoError);
    try {
        make_sampler("nvml", clock);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("constant:<watts>"), std::string::npos);
    }
    EXPECT_THROW(make_sampler("command:false", clock)->next_sample(), MeasurementError);
}

namespace {

class ScriptedSampler : public PowerSampler {
public:
    explicit ScriptedSampler(std::vector<PowerSample> s) : s_(std::move(s)) {}
    std::optional<PowerSample> next_sample() override {
        if (i_ >= s_.size()) return std::nullopt;
        return s_[i_++];
    }
    std::string backend() const override { return "scripted"; }

private:
    std::vector<PowerSample> s_;
    std::size_t i_ = 0;
};

std::vector<PowerSample> monitor_run(PowerSampler& s) {
    PowerMonitor m(s, 1000.0);
    m.start();
    sleep_ms(30);
    return m.stop();
}

}  // namespace

TEST(PowerMonitor, CollectsReadingsInOrder) {
    ScriptedSampler s({{1.0, 10.0}, {2.0, 20.0}, {3.0, 30.0}});
    auto r = monitor_run(s);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_EQ(r[2].watts, 30.0);
}

TEST(PowerMonitor, RejectsContractViolations) {
    ScriptedSampler backwards({{1.0, 10.0}, {1.0, 10.0}});
    EXPECT_THROW(monitor_run(backwards), ContractError);
    ScriptedSampler negative({{1.0, -10.0}});
    EXPECT_THROW(monitor_run(negative), ContractError);
    ScriptedSampler nan({{1.0, std::nan("")}});
    EXPECT_THROW(monitor_run(nan), ContractError);
}

namespace {

/// Manual-clock stub whose per-batch time is a function of batch size.
struct ProfileStub {
    ManualClock clock;
    Stub stub;
    explicit ProfileStub(std::function<Nanos(std::size_t)> per_batch)
        : stub([this, per_batch](std::size_t, const textdata::TokenBatch& b) { clock.advance(per_batch(b.batch)); }) {}
};

}  // namespace

TEST(Sweep, MonotoneThroughputPeaksAtLargestSize) {
    Fixture fx;
    ProfileStub p([](std::size_t bs) { return static_cast<Nanos>(1 * kMs + bs * kMs / 10); });
    auto rep = sweep(p.stub, fx.data, config(1, 5, {1, 2, 4, 8, 16}), p.clock);
    EXPECT_EQ(rep.rows.size(), 5u);
    EXPECT_EQ(rep.peak_throughput_batch, 16u);
    for (const auto& r : rep.rows) EXPECT_LE(r.result->throughput_sps, rep.peak_throughput_sps);
}

TEST(Sweep, PlateauResolvesToSmallerBatch) {
    Fixture fx;
    // 1 ms per sample from 64 upwards: identical throughput at 64 and 128.
    ProfileStub p([](std::size_t bs) { return static_cast<Nanos>(bs >= 64 ? bs * kMs : 4 * bs * kMs); });
    auto rep = sweep(p.stub, fx.data, config(1, 3, {16, 32, 64, 128}), p.clock);
    EXPECT_EQ(rep.rows[2].result->throughput_sps, rep.rows[3].result->throughput_sps);
    EXPECT_EQ(rep.peak_throughput_batch, 64u);
}

TEST(Sweep, SingleSizeReport) {
    Fixture fx;
    ProfileStub p([](std::size_t) { return 3 * kMs; });
    auto rep = run_bench(p.stub, fx.data, config(1, 4, {1}), p.clock);
    ASSERT_EQ(rep.rows.size(), 1u);
    EXPECT_EQ(rep.peak_throughput_batch, 1u);
    EXPECT_EQ(rep.latency_bs1.mean_ms, 3.0);
    EXPECT_FALSE(rep.optimal_j_per_sample.has_value());
}

TEST(Sweep, EnergyOptimumIsMinimumRow) {
    Fixture fx;
    ManualClock clock;
    ConstantSampler sampler(clock, 100.0);
    // Per-sample time falls with batch size until 4, then rises; energy follows time.
    Stub stub([&](std::size_t, const textdata::TokenBatch& b) {
        sleep_ms(4);
        const Nanos per_sample = b.batch == 4 ? 2 * kMs : (b.batch < 4 ? 5 * kMs : 3 * kMs);
        clock.advance(per_sample * static_cast<Nanos>(b.batch));
    });
    auto rep = sweep(stub, fx.data, config(0, 60, {2, 4, 8}), clock, &sampler);
    ASSERT_TRUE(rep.optimal_j_per_sample);
    EXPECT_EQ(*rep.optimal_j_batch, 4u);
    EXPECT_NEAR(*rep.optimal_j_per_sample, 100.0 * 0.002, 1e-12);
    for (const auto& r : rep.rows) {
        ASSERT_TRUE(r.ok) << r.error;
        EXPECT_LE(*rep.optimal_j_per_sample, r.result->energy->j_per_sample);
        EXPECT_NEAR(r.result->energy->j_per_sample * r.batch_size * 60, r.result->energy->joules, 1e-12);
    }
}

TEST(Sweep, FailedRowsAreRecordedAndSkipped) {
    Fixture fx;
    ManualClock clock;
    Stub stub([&](std::size_t, const textdata::TokenBatch& b) {
        if (b.batch > 2) throw ContractError("out of memory (simulated)");
        clock.advance(kMs);
    });
    auto rep = sweep(stub, fx.data, config(0, 2, {1, 2, 4}), clock);
    EXPECT_TRUE(rep.rows[0].ok);
    EXPECT_FALSE(rep.rows[2].ok);
    EXPECT_NE(rep.rows[2].error.find("simulated"), std::string::npos);
    EXPECT_EQ(rep.peak_throughput_batch, 2u);

    Stub broken([](std::size_t, const auto&) { throw ContractError("broken"); });
    EXPECT_THROW(sweep(broken, fx.data, config(0, 2, {1, 2}), clock), MeasurementError);
}

TEST(BenchConfig, Validation) {
    EXPECT_THROW(config(0, 0).validate(), ConfigError);
    EXPECT_THROW(config(0, 1, {4, 2}).validate(), ConfigError);
    EXPECT_THROW(config(0, 1, {0}).validate(), ConfigError);
    EXPECT_THROW(config(0, 1, {}).validate(), ConfigError);
    EXPECT_NO_THROW(config(0, 1, {1, 8, 32}).validate());
}

TEST(BenchReport, CsvAndJson) {
    Fixture fx;
    ManualClock clock;
    ConstantSampler sampler(clock, 100.0);
    Stub stub([&](std::size_t, const auto&) {
        sleep_ms(10);
        clock.advance(10 * kMs);
    });
    auto rep = run_bench(stub, fx.data, config(0, 40, {2}), clock, &sampler);
    const auto csv = report_csv(rep);
    EXPECT_EQ(csv.rfind("model,batch_size,latency_ms_mean,throughput_sps,mean_watts,j_per_sample\n", 0), 0u);
    EXPECT_NE(csv.find("stub,2,10,200,100,0.5\n"), std::string::npos) << csv;
    auto j = to_json(rep);
    EXPECT_EQ(j["power_backend"], "constant");
    EXPECT_EQ(j["rows"][0]["j_per_sample"], 0.5);
    EXPECT_EQ(j["optimal_j_batch"], 2);
    EXPECT_EQ(j["latency_bs1_ms"], 10.0);
}

TEST(EncoderBenchModel, RunsToyStudent) {
    Fixture fx;
    auto cfg = relkd::testing::toy_student(fx.vocab.size(), 1, 32, 4);
    EncoderBenchModel m(encoder::init_model<float>(cfg, 1), "toy");
    SteadyClock clock;
    EXPECT_GT(measure_throughput(m, fx.data, 4, config(1, 3), clock), 0.0);
}
