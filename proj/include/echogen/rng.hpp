#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace echogen {

// Counter-based random stream. A draw is a pure function of
// (seed, label, counter), so identical streams replay identically no matter
// how work is batched or parallelized; disjoint labels give independent
// substreams.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string_view label)
        : seed_(seed), key_(mix_key(seed, label)), label_(label) {}

    // Derive an independent stream; counter starts at zero.
    RngStream substream(std::string_view sublabel) const {
        return RngStream(seed_, label_ + "/" + std::string(sublabel));
    }

    std::uint64_t next_u64() { return value_at(counter_++); }

    // [0,1), 53-bit resolution.
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Box-Muller, cosine branch; consumes two counters per draw.
    float next_gaussian() {
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
        const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;          // [0,1)
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        return static_cast<float>(z);
    }

    // Uniform integer in [0, n) by rejection-free scaled draw (n << 2^53).
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(next_uniform() * static_cast<double>(n));
    }

    std::uint64_t counter() const { return counter_; }
    void skip_to(std::uint64_t counter) { counter_ = counter; }
    std::uint64_t seed() const { return seed_; }
    const std::string& label() const { return label_; }

    // Random access without disturbing the stream position.
    std::uint64_t value_at(std::uint64_t counter) const {
        return finalize(key_ + (counter + 1) * 0x9E3779B97F4A7C15ull);
    }

private:
    static std::uint64_t finalize(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xCBF29CE484222325ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ull;
        }
        return h;
    }

    static std::uint64_t mix_key(std::uint64_t seed, std::string_view label) {
        return finalize(seed ^ finalize(fnv1a(label)));
    }

    std::uint64_t seed_;
    std::uint64_t key_;
    std::string label_;
    std::uint64_t counter_ = 0;
};

}  // namespace echogen
