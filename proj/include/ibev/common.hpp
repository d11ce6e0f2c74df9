#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ibev {

inline constexpr const char* kVersion = "1.0.0";

// Error taxonomy. The CLI maps these onto its exit-code contract:
// config/usage -> 2, IO -> 3, numeric failure -> 4, check failure -> 5.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : ConfigError {
    using ConfigError::ConfigError;
};

// ---------------------------------------------------------------------------
// Seeded RNG. std::mt19937_64 as the engine; the distributions are written
// out explicitly so draws are a pure function of the engine stream and the
// full state serializes as text (needed for bit-exact checkpoint resume).
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without spare caching: two engine draws per sample.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * M_PI * u2);
    }

    int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
        const uint64_t span = static_cast<uint64_t>(hi_inclusive - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (is.fail()) throw IoError("Rng: malformed engine state");
    }

private:
    std::mt19937_64 eng_;
};

// FNV-1a 64-bit, used for run-manifest content hashes.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Deterministic parallelism. Work is split into contiguous index ranges, one
// per thread; every output element is owned by exactly one range and its
// reduction order is fixed, so results are bitwise independent of the thread
// count. Default is single-threaded.
// ---------------------------------------------------------------------------
inline int& num_threads() {
    static int n = 1;
    return n;
}

inline void set_num_threads(int n) { num_threads() = n < 1 ? 1 : n; }

template <class F>
void parallel_for(int64_t n, F&& body) {
    const int t = num_threads();
    if (t <= 1 || n < 4096) {
        body(int64_t{0}, n);
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(t, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers) - 1);
    const int64_t chunk = (n + workers - 1) / workers;
    for (int w = 1; w < workers; ++w) {
        const int64_t lo = w * chunk;
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(int64_t{0}, std::min<int64_t>(chunk, n));
    for (auto& th : pool) th.join();
}

// Global multiply-add counter, incremented by the matmul kernel. Backs the
// attention cost model verification and the bench command.
inline std::atomic<uint64_t>& mac_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}

inline void count_macs(uint64_t n) {
    mac_counter().fetch_add(n, std::memory_order_relaxed);
}

// Captures the counter delta over a scope.
class MacScope {
public:
    MacScope() : start_(mac_counter().load()) {}
    uint64_t macs() const { return mac_counter().load() - start_; }

private:
    uint64_t start_;
};

}  // namespace ibev
