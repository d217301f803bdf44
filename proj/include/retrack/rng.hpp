#pragma once

#include <cmath>
#include <cstdint>

namespace retrack {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Counter-seeded random stream. Identical (seed, stream_index) pairs
/// reproduce identical draws bit-exactly; distinct stream indices give
/// statistically independent streams, so per-path streams can be consumed
/// in any order under parallel execution.
///
/// The engine is xoshiro256++, seeded through SplitMix64 over the
/// (seed, stream_index) pair. Normals come from an in-library Box-Muller
/// transform rather than std::normal_distribution, whose output is
/// implementation-defined.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_index)
        : seed_(seed), stream_(stream_index) {
        std::uint64_t mix = seed ^ 0x6a09e667f3bcc909ull;
        (void)splitmix64(mix);
        mix ^= stream_index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull;
        for (auto& word : state_) word = splitmix64(mix);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_index() const { return stream_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform index in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal draw (Box-Muller, second value cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(angle);
        have_spare_ = true;
        return r * std::cos(angle);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4];
    std::uint64_t seed_;
    std::uint64_t stream_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Stream-index blocks reserved per purpose so that concurrent components
/// of one run never collide. Within a block, substreams are spaced 2^32
/// apart per cell/level and indexed per sample below that.
namespace stream_block {
inline constexpr std::uint64_t kEstimate = 1ull << 56;
inline constexpr std::uint64_t kPilot = 2ull << 56;
inline constexpr std::uint64_t kCrossEntropy = 3ull << 56;
inline constexpr std::uint64_t kEnkf = 4ull << 56;
inline constexpr std::uint64_t kBootstrap = 5ull << 56;
inline constexpr std::uint64_t kSignal = 6ull << 56;
inline constexpr std::uint64_t kCell = 1ull << 32;
}  // namespace stream_block

}  // namespace retrack
