#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string_view>

namespace pcqr {

/// Name recorded in dataset metadata so a reader knows how streams were derived.
inline constexpr std::string_view rng_algorithm = "mt19937_64+splitmix64-stream-derivation";

/// One SplitMix64 step. Used to derive independent seeds for per-episode and
/// per-tree streams.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for stream `index` of a family rooted at `root`.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
    return splitmix64(splitmix64(root) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// Thin wrapper over mt19937_64 with portable draws. The standard
/// distributions are implementation-defined, so results would differ between
/// standard libraries; these helpers keep datasets identical everywhere.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer on the closed range [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(engine_());
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % span;
        std::uint64_t draw;
        do {
            draw = engine_();
        } while (draw >= limit);
        return lo + static_cast<std::int64_t>(draw % span);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    /// Sum of `trials` Bernoulli(p) draws; trial counts here are small.
    int binomial(int trials, double p) {
        int hits = 0;
        for (int i = 0; i < trials; ++i) hits += bernoulli(p) ? 1 : 0;
        return hits;
    }

  private:
    std::mt19937_64 engine_;
};

}  // namespace pcqr
