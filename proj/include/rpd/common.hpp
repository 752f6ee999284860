#pragma once

// Shared plumbing: error types, check macros, deterministic RNG, seed derivation.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rpd {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad argument values or shape mismatches at API boundaries.
struct InvalidArgument : Error {
    using Error::Error;
};
// Inputs that are structurally valid but geometrically unusable (e.g. all points identical).
struct DegenerateInput : Error {
    using Error::Error;
};
// Rejected run configuration.
struct ConfigError : Error {
    using Error::Error;
};
// Malformed dataset files or manifests.
struct IngestError : Error {
    using Error::Error;
};
// Non-finite values where finiteness is a contract.
struct NumericError : Error {
    using Error::Error;
};
// Malformed or incompatible tensor containers / name maps.
struct LoadError : Error {
    using Error::Error;
};

namespace detail {
template <typename... Args>
std::string msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}
}  // namespace detail

#define RPD_CHECK(cond, ...)                                                    \
    do {                                                                        \
        if (!(cond)) throw ::rpd::InvalidArgument(::rpd::detail::msg(__VA_ARGS__)); \
    } while (0)

#define RPD_CHECK_T(cond, ErrType, ...)                               \
    do {                                                              \
        if (!(cond)) throw ErrType(::rpd::detail::msg(__VA_ARGS__));  \
    } while (0)

inline constexpr double kPi = 3.14159265358979323846;

// SplitMix64 finalizer; also used as the mixing step for seed derivation.
inline uint64_t mix64(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Deterministic sub-seed from a master seed plus context tags (epoch, step,
// sample index, purpose hash, ...). Order-sensitive by construction.
inline uint64_t derive_seed(uint64_t master, std::initializer_list<uint64_t> tags) {
    uint64_t h = mix64(master);
    for (uint64_t t : tags) h = mix64(h ^ (t + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2)));
    return h;
}

inline uint64_t derive_seed(uint64_t master, std::string_view purpose,
                            std::initializer_list<uint64_t> tags = {}) {
    uint64_t h = derive_seed(master, {hash_str(purpose)});
    for (uint64_t t : tags) h = mix64(h ^ (t + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2)));
    return h;
}

// SplitMix64 stream. Cheap to construct; create one per (purpose, context) from
// derive_seed rather than sharing streams across call sites.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    uint64_t uniform_u64(uint64_t n) {
        RPD_CHECK(n > 0, "uniform_u64: n must be positive");
        uint64_t threshold = (~uint64_t(0) - n + 1) % n;  // 2^64 mod n
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int64_t uniform_int(int64_t n) { return int64_t(uniform_u64(uint64_t(n))); }

    // Standard normal via Box-Muller; second draw is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * kPi * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal(0, std) rejected outside ±2 std (ViT-style weight init).
    double truncated_normal(double stddev) {
        for (;;) {
            double x = normal() * stddev;
            if (std::abs(x) <= 2.0 * stddev) return x;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_u64(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // m distinct indices drawn from [0, n), in draw order (partial Fisher-Yates).
    std::vector<int64_t> sample_without_replacement(int64_t n, int64_t m) {
        RPD_CHECK(m >= 0 && m <= n, "sample_without_replacement: need 0 <= m <= n, got m=", m,
                  " n=", n);
        std::vector<int64_t> pool(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) pool[size_t(i)] = i;
        std::vector<int64_t> out(static_cast<size_t>(m));
        for (int64_t i = 0; i < m; ++i) {
            int64_t j = i + uniform_int(n - i);
            std::swap(pool[size_t(i)], pool[size_t(j)]);
            out[size_t(i)] = pool[size_t(i)];
        }
        return out;
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// floor(ratio * n) computed in exact integer arithmetic after rounding the
// ratio to 6 decimals. Ratios whose double form sits a hair below the exact
// value (e.g. 0.29*100 = 28.999...) would otherwise floor one short.
inline int64_t floor_count(double ratio, int64_t n) {
    RPD_CHECK(ratio >= 0.0 && ratio <= 1.0, "floor_count: ratio out of [0,1]: ", ratio);
    RPD_CHECK(n >= 0, "floor_count: negative n");
    int64_t num = int64_t(std::llround(ratio * 1e6));
    return (num * n) / 1000000;
}

}  // namespace rpd
