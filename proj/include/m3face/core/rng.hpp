#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace m3face {

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed for a named sub-stream, e.g. derive_seed(seed, "mask", step).
constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
    return mix64(mix64(base ^ fnv1a64(tag)) + index);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        std::normal_distribution<double> dist(0.0, 1.0);
        return dist(engine_);
    }

    /// Integer in [0, n).
    std::size_t below(std::size_t n) {
        std::uniform_int_distribution<std::size_t> dist(0, n - 1);
        return dist(engine_);
    }

    std::vector<double> normal_vector(std::size_t n, double stddev = 1.0) {
        std::vector<double> v(n);
        for (auto& x : v) x = stddev * normal();
        return v;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace m3face
