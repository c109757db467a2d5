#pragma once

// Latency, throughput and energy measurement over a warmup-then-window
// protocol, a batch-size sweep, and report serialization.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "relkd/bench/clock.hpp"
#include "relkd/bench/power.hpp"
#include "relkd/encoder/model.hpp"
#include "relkd/textdata/batches.hpp"

namespace relkd::bench {

struct BenchConfig {
    std::size_t warmup_batches = 10;
    std::size_t measured_batches = 100;
    std::size_t latency_batch_size = 1;
    std::size_t default_throughput_batch = 32;
    std::vector<std::size_t> sweep_sizes{1, 2, 4, 8, 16, 32, 64, 128, 256};
    std::size_t seq_len = 128;
    double power_poll_hz = 10.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (measured_batches < 1) throw ConfigError("bench: measured_batches must be >= 1");
        if (sweep_sizes.empty()) throw ConfigError("bench: sweep_sizes must not be empty");
        for (std::size_t i = 0; i < sweep_sizes.size(); ++i) {
            if (sweep_sizes[i] == 0 || (i > 0 && sweep_sizes[i] <= sweep_sizes[i - 1])) {
                throw ConfigError("bench: sweep sizes must be positive and strictly increasing");
            }
        }
        if (seq_len < 3) throw ConfigError("bench: seq_len must be >= 3");
        if (!(power_poll_hz > 0)) throw ConfigError("bench: power_poll_hz must be > 0");
    }
};

/// Something that processes one batch per call.
class BenchModel {
public:
    virtual ~BenchModel() = default;
    virtual void run(const textdata::TokenBatch& batch) = 0;
    virtual std::string id() const = 0;
};

/// Inference-mode encoder forward pass (no gradients, no dropout).
class EncoderBenchModel : public BenchModel {
public:
    EncoderBenchModel(encoder::EncoderWeights<float> weights, std::string id)
        : weights_(std::move(weights)), id_(std::move(id)) {}
    void run(const textdata::TokenBatch& batch) override {
        numkit::NoGradGuard guard;
        auto out = encoder::forward(weights_, batch);
        sink_ += out.hidden.data()[0];
    }
    std::string id() const override { return id_; }

private:
    encoder::EncoderWeights<float> weights_;
    std::string id_;
    float sink_ = 0.0f;  // keeps the result observable
};

/// Benchmark inputs drawn from a corpus with a fixed seed, so reruns time the same tokens.
class BenchData {
public:
    BenchData(std::vector<std::string> corpus, const textdata::Vocab& vocab, std::size_t seq_len, std::uint64_t seed)
        : corpus_(std::move(corpus)), vocab_(&vocab), seq_len_(seq_len), seed_(seed) {}

    std::vector<textdata::TokenBatch> batches(std::size_t batch_size, std::size_t count) const {
        textdata::BatchStream stream(corpus_, *vocab_, batch_size, seq_len_, seed_ + batch_size);
        std::vector<textdata::TokenBatch> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) out.push_back(stream.next());
        return out;
    }

private:
    std::vector<std::string> corpus_;
    const textdata::Vocab* vocab_;
    std::size_t seq_len_;
    std::uint64_t seed_;
};

struct LatencyStats {
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double p95_ms = 0.0;
};

/// Mean, median (mean of the middle pair for even counts) and nearest-rank p95.
inline LatencyStats summarize_latency(std::vector<double> ms) {
    if (ms.empty()) throw ContractError("summarize_latency: no timings");
    std::sort(ms.begin(), ms.end());
    LatencyStats s;
    double sum = 0.0;
    for (double v : ms) sum += v;
    const std::size_t n = ms.size();
    s.mean_ms = sum / static_cast<double>(n);
    s.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
    s.p95_ms = ms[std::max<std::size_t>(rank, 1) - 1];
    return s;
}

struct WindowResult {
    std::size_t batch_size = 0;
    std::size_t samples = 0;  // measured_batches * batch_size
    double wall_seconds = 0.0;
    double throughput_sps = 0.0;
    LatencyStats latency;
    std::optional<EnergyStats> energy;
};

/// Runs warmup batches untimed, then times each measured batch and the whole
/// window. With a sampler, power is polled throughout and averaged over the window.
inline WindowResult run_window(BenchModel& model, const std::vector<textdata::TokenBatch>& batches,
                               const BenchConfig& cfg, Clock& clock, PowerSampler* sampler = nullptr) {
    if (batches.size() < cfg.warmup_batches + cfg.measured_batches) {
        throw ContractError("bench: " + std::to_string(batches.size()) + " batches supplied, need " +
                            std::to_string(cfg.warmup_batches + cfg.measured_batches));
    }
    if (batches.empty() || batches.front().batch == 0) throw ContractError("bench: empty batch");
    for (std::size_t i = 0; i < cfg.warmup_batches; ++i) model.run(batches[i]);

    std::optional<PowerMonitor> monitor;
    if (sampler) {
        monitor.emplace(*sampler, cfg.power_poll_hz);
        monitor->start();
    }
    std::vector<double> ms;
    ms.reserve(cfg.measured_batches);
    std::size_t samples = 0;
    const Nanos open = clock.now();
    Nanos prev = open;
    for (std::size_t i = 0; i < cfg.measured_batches; ++i) {
        const auto& b = batches[cfg.warmup_batches + i];
        model.run(b);
        const Nanos t = clock.now();
        ms.push_back(static_cast<double>(t - prev) * 1e-6);
        samples += b.batch;
        prev = t;
    }
    const Nanos close = prev;
    std::vector<PowerSample> readings;
    if (monitor) readings = monitor->stop();

    if (close <= open) throw MeasurementError("bench: measured window has zero length");
    WindowResult r;
    r.batch_size = batches.front().batch;
    r.samples = samples;
    r.wall_seconds = to_seconds(close - open);
    r.throughput_sps = static_cast<double>(samples) / r.wall_seconds;
    r.latency = summarize_latency(std::move(ms));
    if (sampler) r.energy = energy_in_window(readings, open, close, samples);
    return r;
}

inline LatencyStats measure_latency(BenchModel& model, const BenchData& data, const BenchConfig& cfg, Clock& clock) {
    cfg.validate();
    const auto batches = data.batches(cfg.latency_batch_size, cfg.warmup_batches + cfg.measured_batches);
    return run_window(model, batches, cfg, clock).latency;
}

inline double measure_throughput(BenchModel& model, const BenchData& data, std::size_t batch_size,
                                 const BenchConfig& cfg, Clock& clock) {
    cfg.validate();
    if (batch_size < 1) throw ContractError("measure_throughput: batch_size must be >= 1");
    const auto batches = data.batches(batch_size, cfg.warmup_batches + cfg.measured_batches);
    return run_window(model, batches, cfg, clock).throughput_sps;
}

inline EnergyStats measure_energy(BenchModel& model, const BenchData& data, std::size_t batch_size,
                                  PowerSampler& sampler, const BenchConfig& cfg, Clock& clock) {
    cfg.validate();
    const auto batches = data.batches(batch_size, cfg.warmup_batches + cfg.measured_batches);
    return *run_window(model, batches, cfg, clock, &sampler).energy;
}

struct SweepRow {
    std::size_t batch_size = 0;
    bool ok = false;
    std::string error;
    std::optional<WindowResult> result;
};

struct BenchReport {
    std::string model;
    std::string power_backend;
    BenchConfig config;
    LatencyStats latency_bs1;
    std::vector<SweepRow> rows;
    double peak_throughput_sps = 0.0;
    std::size_t peak_throughput_batch = 0;
    std::optional<double> optimal_j_per_sample;
    std::optional<std::size_t> optimal_j_batch;
};

/// Throughput (and energy, when a sampler is given) at every sweep size. A
/// failing size is recorded and skipped; peak and optimum are taken over the
/// successful rows with ties going to the smaller batch size.
inline BenchReport sweep(BenchModel& model, const BenchData& data, const BenchConfig& cfg, Clock& clock,
                         PowerSampler* sampler = nullptr) {
    cfg.validate();
    BenchReport rep;
    rep.model = model.id();
    rep.power_backend = sampler ? sampler->backend() : "none";
    rep.config = cfg;
    for (std::size_t bs : cfg.sweep_sizes) {
        SweepRow row;
        row.batch_size = bs;
        try {
            const auto batches = data.batches(bs, cfg.warmup_batches + cfg.measured_batches);
            row.result = run_window(model, batches, cfg, clock, sampler);
            row.ok = true;
        } catch (const EnvironmentError&) {
            throw;
        } catch (const Error& e) {
            row.error = e.what();
        }
        rep.rows.push_back(std::move(row));
    }
    bool any = false;
    for (const auto& row : rep.rows) {
        if (!row.ok) continue;
        const auto& r = *row.result;
        if (!any || r.throughput_sps > rep.peak_throughput_sps) {
            rep.peak_throughput_sps = r.throughput_sps;
            rep.peak_throughput_batch = row.batch_size;
        }
        any = true;
        if (r.energy && (!rep.optimal_j_per_sample || r.energy->j_per_sample < *rep.optimal_j_per_sample)) {
            rep.optimal_j_per_sample = r.energy->j_per_sample;
            rep.optimal_j_batch = row.batch_size;
        }
    }
    if (!any) {
        std::string why;
        for (const auto& row : rep.rows) why += "\n  batch " + std::to_string(row.batch_size) + ": " + row.error;
        throw MeasurementError("bench: every sweep size failed" + why);
    }
    return rep;
}

/// Batch-size-1 latency plus the sweep.
inline BenchReport run_bench(BenchModel& model, const BenchData& data, const BenchConfig& cfg, Clock& clock,
                             PowerSampler* sampler = nullptr) {
    const auto latency = measure_latency(model, data, cfg, clock);
    auto rep = sweep(model, data, cfg, clock, sampler);
    rep.latency_bs1 = latency;
    return rep;
}

inline nlohmann::json to_json(const LatencyStats& s) {
    return {{"mean_ms", s.mean_ms}, {"median_ms", s.median_ms}, {"p95_ms", s.p95_ms}};
}

inline nlohmann::json to_json(const BenchReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        nlohmann::json j{{"batch_size", row.batch_size}, {"ok", row.ok}};
        if (!row.ok) j["error"] = row.error;
        if (row.result) {
            const auto& w = *row.result;
            j["latency"] = to_json(w.latency);
            j["throughput_sps"] = w.throughput_sps;
            j["wall_seconds"] = w.wall_seconds;
            j["samples"] = w.samples;
            if (w.energy) {
                j["mean_watts"] = w.energy->mean_watts;
                j["joules"] = w.energy->joules;
                j["j_per_sample"] = w.energy->j_per_sample;
                j["power_readings"] = w.energy->n_samples;
            }
        }
        rows.push_back(j);
    }
    const auto& c = r.config;
    nlohmann::json out{{"model", r.model},
                       {"power_backend", r.power_backend},
                       {"config",
                        {{"warmup_batches", c.warmup_batches},
                         {"measured_batches", c.measured_batches},
                         {"latency_batch_size", c.latency_batch_size},
                         {"sweep_sizes", c.sweep_sizes},
                         {"seq_len", c.seq_len},
                         {"power_poll_hz", c.power_poll_hz},
                         {"seed", c.seed}}},
                       {"latency_bs1", to_json(r.latency_bs1)},
                       {"latency_bs1_ms", r.latency_bs1.mean_ms},
                       {"rows", rows},
                       {"peak_throughput_sps", r.peak_throughput_sps},
                       {"peak_throughput_batch", r.peak_throughput_batch}};
    out["optimal_j_per_sample"] = r.optimal_j_per_sample ? nlohmann::json(*r.optimal_j_per_sample) : nlohmann::json();
    out["optimal_j_batch"] = r.optimal_j_batch ? nlohmann::json(*r.optimal_j_batch) : nlohmann::json();
    return out;
}

inline std::string report_csv(const BenchReport& r) {
    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", v);
        return std::string(buf);
    };
    std::string out = "model,batch_size,latency_ms_mean,throughput_sps,mean_watts,j_per_sample\n";
    for (const auto& row : r.rows) {
        out += r.model + "," + std::to_string(row.batch_size) + ",";
        if (row.result) {
            const auto& w = *row.result;
            out += num(w.latency.mean_ms) + "," + num(w.throughput_sps) + ",";
            if (w.energy) out += num(w.energy->mean_watts) + "," + num(w.energy->j_per_sample);
            else out += ",";
        } else {
            out += ",,,";
        }
        out += "\n";
    }
    return out;
}

}  // namespace relkd::bench
