#pragma once

#include <cstdint>
#include <string_view>

namespace vlp {

/// xoshiro256** seeded through splitmix64. Self-contained so that streams are
/// bit-identical across standard libraries and platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t uniform_int(std::uint64_t n);
    /// Standard normal via Box-Muller (spare cached).
    double normal();
    double normal(double mean, double stddev);

private:
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Stable seed derivation for named random streams: FNV-1a over the tag mixed
/// with the base seed and two indices, finalized with splitmix64. Every random
/// draw in training comes from a stream derived this way, so parallel batch
/// assembly or a checkpoint resume cannot change results.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream,
                          std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace vlp
