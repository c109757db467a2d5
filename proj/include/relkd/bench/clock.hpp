#pragma once

// Monotonic time sources for benchmarking. Time is an integer nanosecond
// count so window lengths are exact differences.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <string>

#include "relkd/error.hpp"

namespace relkd::bench {

using Nanos = std::int64_t;

inline double to_seconds(Nanos ns) { return static_cast<double>(ns) * 1e-9; }

class Clock {
public:
    virtual ~Clock() = default;
    virtual Nanos now() = 0;
    double seconds() { return to_seconds(now()); }
};

/// std::chrono::steady_clock; a reading earlier than the previous one is fatal.
class SteadyClock : public Clock {
public:
    Nanos now() override {
        const Nanos t = std::chrono::duration_cast<std::chrono::nanoseconds>(
                            std::chrono::steady_clock::now().time_since_epoch())
                            .count();
        Nanos prev = last_.load();
        while (t > prev && !last_.compare_exchange_weak(prev, t)) {
        }
        if (t < prev) {
            throw EnvironmentError("monotonic clock went backwards by " + std::to_string(prev - t) + " ns");
        }
        return t;
    }

private:
    std::atomic<Nanos> last_{0};
};

/// Clock moved only by advance(); lets stub workloads define exact durations.
class ManualClock : public Clock {
public:
    explicit ManualClock(Nanos start = 0) : t_(start) {}
    Nanos now() override { return t_.load(); }
    void advance(Nanos dt) {
        if (dt < 0) throw ContractError("ManualClock::advance: negative step");
        t_.fetch_add(dt);
    }

private:
    std::atomic<Nanos> t_;
};

}  // namespace relkd::bench
