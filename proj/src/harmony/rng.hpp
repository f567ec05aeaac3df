#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace harmony {

// mt19937_64 has a standardized output sequence; the distributions below are
// written out by hand because the std:: ones are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    uint64_t index(uint64_t n);

    // Standard normal via Box-Muller; no cached spare, so state is just the engine.
    double normal();

    std::string serialize() const;
    void deserialize(const std::string& text);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

uint64_t splitmix64(uint64_t x);

// Counter-based derivation of per-subsystem seeds from one root seed.
uint64_t derive_seed(uint64_t root, std::string_view subsystem, uint64_t counter = 0);

}  // namespace harmony
