#pragma once

// Power sampling: pluggable backends plus a background monitor that polls one
// at a fixed cadence into an append-only buffer.

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "relkd/bench/clock.hpp"

namespace relkd::bench {

struct PowerSample {
    double t = 0.0;  // seconds on the harness clock
    double watts = 0.0;
};

class PowerSampler {
public:
    virtual ~PowerSampler() = default;
    /// Next reading, or nullopt when no new reading exists yet (the clock has not moved).
    virtual std::optional<PowerSample> next_sample() = 0;
    virtual std::string backend() const = 0;
};

namespace detail {

/// Stamps readings with the clock and suppresses repeats at an unchanged time.
class ClockStamped : public PowerSampler {
public:
    explicit ClockStamped(Clock& clock) : clock_(clock) {}

protected:
    std::optional<Nanos> fresh_time() {
        const Nanos t = clock_.now();
        if (last_ && t <= *last_) return std::nullopt;
        last_ = t;
        return t;
    }
    Clock& clock_;

private:
    std::optional<Nanos> last_;
};

}  // namespace detail

class ConstantSampler : public detail::ClockStamped {
public:
    ConstantSampler(Clock& clock, double watts) : ClockStamped(clock), watts_(watts) {
        if (!std::isfinite(watts) || watts < 0) throw ConfigError("constant power must be finite and >= 0");
    }
    std::optional<PowerSample> next_sample() override {
        auto t = fresh_time();
        if (!t) return std::nullopt;
        return PowerSample{to_seconds(*t), watts_};
    }
    std::string backend() const override { return "constant"; }

private:
    double watts_;
};

/// Replays a `t_seconds,watts` trace against the clock: a poll returns the row
/// in effect at the time elapsed since the first poll; the last row holds.
class TraceSampler : public detail::ClockStamped {
public:
    TraceSampler(Clock& clock, const std::filesystem::path& csv) : ClockStamped(clock) {
        std::ifstream in(csv);
        if (!in) throw IoError("cannot open power trace '" + csv.string() + "'");
        std::string line;
        std::getline(in, line);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line != "t_seconds,watts") {
            throw FormatError(csv.string() + ": expected header 't_seconds,watts', found '" + line + "'");
        }
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            const auto comma = line.find(',');
            char* end = nullptr;
            const std::string ts = line.substr(0, comma), ws = comma == std::string::npos ? "" : line.substr(comma + 1);
            const double t = std::strtod(ts.c_str(), &end);
            const bool t_ok = end != ts.c_str() && *end == '\0';
            const double w = std::strtod(ws.c_str(), &end);
            const bool w_ok = end != ws.c_str() && *end == '\0';
            const std::string where = csv.string() + ":" + std::to_string(lineno);
            if (comma == std::string::npos || !t_ok || !w_ok) throw FormatError(where + ": malformed row '" + line + "'");
            if (!std::isfinite(t) || !std::isfinite(w) || w < 0) throw FormatError(where + ": values must be finite, watts >= 0");
            const auto tn = static_cast<Nanos>(std::llround(t * 1e9));
            if (!rows_.empty() && tn <= rows_.back().first) throw FormatError(where + ": t_seconds must increase");
            rows_.emplace_back(tn, w);
        }
        if (rows_.empty()) throw FormatError(csv.string() + ": trace has no rows");
    }
    std::optional<PowerSample> next_sample() override {
        auto t = fresh_time();
        if (!t) return std::nullopt;
        if (!origin_) origin_ = *t - rows_.front().first;
        const Nanos elapsed = *t - *origin_;
        auto it = std::upper_bound(rows_.begin(), rows_.end(), elapsed,
                                   [](Nanos v, const std::pair<Nanos, double>& r) { return v < r.first; });
        const double w = it == rows_.begin() ? rows_.front().second : std::prev(it)->second;
        return PowerSample{to_seconds(*t), w};
    }
    std::string backend() const override { return "trace"; }

private:
    std::vector<std::pair<Nanos, double>> rows_;
    std::optional<Nanos> origin_;
};

/// Runs a shell command per poll; its stdout must start with a wattage.
class CommandSampler : public detail::ClockStamped {
public:
    CommandSampler(Clock& clock, std::string command) : ClockStamped(clock), command_(std::move(command)) {
        if (command_.empty()) throw ConfigError("command power backend needs a command");
    }
    std::optional<PowerSample> next_sample() override {
        auto t = fresh_time();
        if (!t) return std::nullopt;
        return PowerSample{to_seconds(*t), read_watts()};
    }
    std::string backend() const override { return "command"; }

private:
    double read_watts() const {
        FILE* pipe = ::popen(command_.c_str(), "r");
        if (!pipe) throw MeasurementError("cannot start power command '" + command_ + "'");
        std::string out;
        char buf[256];
        while (std::fgets(buf, sizeof buf, pipe)) out += buf;
        const int status = ::pclose(pipe);
        if (status != 0) throw MeasurementError("power command '" + command_ + "' exited with status " + std::to_string(status));
        errno = 0;
        char* end = nullptr;
        const double w = std::strtod(out.c_str(), &end);
        if (end == out.c_str() || errno != 0) throw MeasurementError("power command printed no number: '" + out + "'");
        return w;
    }
    std::string command_;
};

inline const char* kBackendHelp = "constant:<watts>, trace:<csv>, command:<shell command>, none";

/// Parses a backend string; "none" yields nullptr (no energy measurement).
inline std::unique_ptr<PowerSampler> make_sampler(const std::string& spec, Clock& clock) {
    if (spec == "none") return nullptr;
    const auto colon = spec.find(':');
    const std::string kind = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    if (colon != std::string::npos) {
        if (kind == "constant") {
            char* end = nullptr;
            const double w = std::strtod(arg.c_str(), &end);
            if (arg.empty() || *end != '\0') throw ConfigError("constant backend needs a number, got '" + arg + "'");
            return std::make_unique<ConstantSampler>(clock, w);
        }
        if (kind == "trace") return std::make_unique<TraceSampler>(clock, arg);
        if (kind == "command") return std::make_unique<CommandSampler>(clock, arg);
    }
    throw ConfigError("unknown power backend '" + spec + "'; valid backends: " + kBackendHelp);
}

/// Polls a sampler on its own thread. Readings go to a buffer that is only
/// read after stop(); sampler failures are rethrown from stop().
class PowerMonitor {
public:
    PowerMonitor(PowerSampler& sampler, double poll_hz) : sampler_(sampler) {
        if (!(poll_hz > 0)) throw ConfigError("power_poll_hz must be > 0");
        period_ = std::chrono::nanoseconds(static_cast<Nanos>(1e9 / poll_hz));
    }
    PowerMonitor(const PowerMonitor&) = delete;
    PowerMonitor& operator=(const PowerMonitor&) = delete;
    ~PowerMonitor() {
        if (thread_.joinable()) {
            request_stop();
            thread_.join();
        }
    }

    void start() {
        if (thread_.joinable()) throw ContractError("PowerMonitor already started");
        stop_ = false;
        thread_ = std::thread([this] { loop(); });
    }

    /// Joins the polling thread and returns every reading taken.
    std::vector<PowerSample> stop() {
        if (!thread_.joinable()) throw ContractError("PowerMonitor not running");
        request_stop();
        thread_.join();
        if (error_) std::rethrow_exception(error_);
        return std::move(samples_);
    }

private:
    void request_stop() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
    }

    void loop() {
        try {
            std::optional<double> last_t;
            for (;;) {
                if (auto s = sampler_.next_sample()) {
                    if (!std::isfinite(s->watts) || s->watts < 0) {
                        throw ContractError(sampler_.backend() + " sampler returned invalid watts " + std::to_string(s->watts));
                    }
                    if (last_t && s->t <= *last_t) throw ContractError(sampler_.backend() + " sampler timestamps not increasing");
                    last_t = s->t;
                    samples_.push_back(*s);
                }
                std::unique_lock lock(mu_);
                if (cv_.wait_for(lock, period_, [this] { return stop_; })) break;
            }
        } catch (...) {
            error_ = std::current_exception();
        }
    }

    PowerSampler& sampler_;
    std::chrono::nanoseconds period_{};
    std::thread thread_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stop_ = false;
    std::vector<PowerSample> samples_;
    std::exception_ptr error_;
};

struct EnergyStats {
    double mean_watts = 0.0;
    double joules = 0.0;
    double j_per_sample = 0.0;
    std::size_t n_samples = 0;  // readings inside the window
};

/// Energy over the clock window [t0, t1] for `processed` samples:
/// mean of in-window readings times window length.
inline EnergyStats energy_in_window(const std::vector<PowerSample>& readings, Nanos t0, Nanos t1,
                                    std::size_t processed) {
    if (t1 <= t0) throw ContractError("energy window must have positive length");
    if (processed == 0) throw ContractError("energy window processed no samples");
    const double lo = to_seconds(t0), hi = to_seconds(t1);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : readings) {
        if (r.t >= lo && r.t <= hi) {
            sum += r.watts;
            ++n;
        }
    }
    if (n < 2) {
        throw MeasurementError("only " + std::to_string(n) + " power reading(s) inside a " + std::to_string(to_seconds(t1 - t0)) +
                               " s window; need at least 2 (lengthen the window)");
    }
    EnergyStats e;
    e.n_samples = n;
    e.mean_watts = sum / static_cast<double>(n);
    e.joules = e.mean_watts * to_seconds(t1 - t0);
    e.j_per_sample = e.joules / static_cast<double>(processed);
    return e;
}

}  // namespace relkd::bench
