// Shared plumbing: typed errors, deterministic RNG, fixed-order parallel map,
// content hashing, and logging.
#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ttsrl {

// ---------------------------------------------------------------- errors ---

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidInput : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct WorldTooLarge : Error { using Error::Error; };
struct UnknownSymbol : Error { using Error::Error; };
struct LengthExceeded : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// --------------------------------------------------------------- logging ---

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3 };

LogLevel log_threshold();
void set_log_threshold(LogLevel lv);
void log_line(LogLevel lv, const std::string& msg);

inline void log_info(const std::string& msg) { log_line(LogLevel::kInfo, msg); }
inline void log_warn(const std::string& msg) { log_line(LogLevel::kWarn, msg); }
inline void log_error(const std::string& msg) { log_line(LogLevel::kError, msg); }

// ------------------------------------------------------------------- rng ---

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// xoshiro256++ seeded via splitmix64. Self-contained so streams are stable
// across platforms and standard-library versions.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        gauss_cached_ = false;
    }

    uint64_t u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform [0,1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    // Unbiased-enough integer in [0, n) via 128-bit multiply-shift.
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<__uint128_t>(u64()) * static_cast<__uint128_t>(n)) >> 64);
    }

    // Standard normal, Box-Muller with cached spare.
    double normal() {
        if (gauss_cached_) {
            gauss_cached_ = false;
            return gauss_spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        gauss_spare_ = r * std::sin(a);
        gauss_cached_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::array<uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void restore(const std::array<uint64_t, 4>& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st[static_cast<size_t>(i)];
        gauss_cached_ = false;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4] = {};
    bool gauss_cached_ = false;
    double gauss_spare_ = 0.0;
};

// Deterministic stream derivation: one master seed plus any number of stream
// ids yields an independent child seed, independent of call order.
inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> ids) {
    uint64_t st = seed ^ 0xA5A5A5A55A5A5A5AULL;
    uint64_t h = splitmix64(st);
    for (uint64_t id : ids) {
        st ^= id + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
        h = splitmix64(st);
    }
    return h;
}

// --------------------------------------------------------------- hashing ---

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v);
uint64_t hash_file(const std::string& path);  // throws IoError if unreadable
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

// ------------------------------------------------------------- threading ---

// Runs fn(i) for i in [0, n) across up to `threads` workers. Work is split in
// contiguous chunks; callers that need deterministic reductions accumulate
// per-index outputs afterwards in index order.
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

// Runs fn(worker, begin, end) over a fixed contiguous partition of [0, n).
// The partition depends only on (n, threads), so per-worker accumulators
// reduced in worker order give run-to-run identical results.
void parallel_chunks(size_t n, int threads,
                     const std::function<void(size_t worker, size_t begin, size_t end)>& fn);

// ---------------------------------------------------------------- numeric ---

inline void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw Error(std::string("non-finite value in ") + what);
}

}  // namespace ttsrl
