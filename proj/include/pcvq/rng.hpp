#pragma once

#include <cstdint>
#include <string_view>

namespace pcvq {

// Deterministic, platform-independent random stream based on SplitMix64.
// Streams are split by hashing labels or integer coordinates into the state,
// so (seed, iteration, sample_index) always names the same stream regardless
// of call order elsewhere. All continuous draws are uniform.
class Rng {
public:
    Rng() : state_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0x5851f42d4c957f2dull)) {}

    // Independent stream derived from a text label.
    [[nodiscard]] Rng derive(std::string_view label) const {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return from_state(mix(state_ ^ h));
    }

    // Independent stream derived from integer coordinates (iteration, index, ...).
    [[nodiscard]] Rng derive(std::uint64_t a) const { return from_state(mix(mix(state_ ^ a))); }
    [[nodiscard]] Rng derive(std::uint64_t a, std::uint64_t b) const {
        return from_state(mix(mix(state_ ^ a) ^ mix(b ^ 0x94d049bb133111ebull)));
    }

    std::uint64_t next_u64() {
        ++draws_;
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0,n). Modulo bias is < 2^-32 for any n that fits here.
    std::uint32_t uniform_int(std::uint32_t n) {
        return static_cast<std::uint32_t>(next_u64() % n);
    }

    // Number of primitive draws made on this stream; used by tests that pin
    // the exact draw budget of an operation.
    [[nodiscard]] std::uint64_t draw_count() const { return draws_; }

    [[nodiscard]] std::uint64_t state() const { return state_; }
    static Rng from_state(std::uint64_t s) {
        Rng r;
        r.state_ = s;
        return r;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
    std::uint64_t draws_ = 0;
};

// Stream for one augmented sample: fully determined by (seed, iteration, index).
inline Rng sample_rng(std::uint64_t global_seed, std::uint64_t iteration, std::uint64_t sample_index) {
    return Rng(global_seed).derive("augment.sample").derive(iteration, sample_index);
}

}  // namespace pcvq
