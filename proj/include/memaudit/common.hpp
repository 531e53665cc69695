#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace memaudit {

using Token = std::int32_t;
using TokenSequence = std::vector<Token>;
using TokenView = std::span<const Token>;

// ----------------------------- seeded randomness -----------------------------
//
// All randomness in the toolkit flows through Rng so that a (seed, config)
// pair reproduces every artifact byte for byte. std::mt19937_64 has a
// standard-mandated output sequence; the derived draws below avoid
// std::*_distribution, whose output is implementation-defined.

inline std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a root seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag) {
    return mix64(root ^ mix64(tag + 0x63616e617279ull));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform integer in [0, n), n > 0. Fixed-point multiply keeps the
    // mapping deterministic across standard libraries.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double real01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller (the spare is discarded to keep the
    // draw count independent of call history).
    double normal() {
        double u1 = real01();
        double u2 = real01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace memaudit
