#include "harmony/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "harmony/error.hpp"

namespace harmony {

uint64_t Rng::index(uint64_t n) {
    require(n > 0, ErrorKind::Precondition, "Rng::index: empty range");
    const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::deserialize(const std::string& text) {
    std::istringstream is(text);
    std::mt19937_64 e;
    is >> e;
    require(!is.fail(), ErrorKind::Parse, "corrupt RNG state");
    engine_ = e;
}

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t root, std::string_view subsystem, uint64_t counter) {
    // FNV-1a over the subsystem label, then mix with root and counter.
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : subsystem) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return splitmix64(splitmix64(root ^ h) + counter);
}

}  // namespace harmony
