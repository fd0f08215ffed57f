#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace wavenerf {

// Counter-free splitmix64 stream. Self-contained so that streams are
// bit-identical across compilers and standard libraries (std::uniform_*
// distributions are implementation-defined).
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int n) {  // [0, n)
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    // Box-Muller; consumes two uniforms per call, no cached spare.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Derives an independent stream from a seed plus a tag path, e.g.
    // Rng::stream(seed, {kStreamRay, view, pixel}).
    static Rng stream(uint64_t seed, std::initializer_list<uint64_t> tags) {
        uint64_t s = mix(seed ^ 0x6a09e667f3bcc909ULL);
        for (uint64_t t : tags) s = mix(s ^ mix(t + 0x9e3779b97f4a7c15ULL));
        return Rng(s);
    }

private:
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

// Stream tags; keeps independent consumers off each other's sequences.
enum StreamTag : uint64_t {
    kStreamSceneGen = 1,
    kStreamParamInit = 2,
    kStreamRayBatch = 3,
    kStreamCoarse = 4,
    kStreamFine = 5,
    kStreamTest = 6,
};

}  // namespace wavenerf
