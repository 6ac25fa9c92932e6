#pragma once

#include <cstdint>

namespace vssa {

// splitmix64. Standard-library distributions are implementation-defined, so
// everything that must reproduce bit-for-bit across toolchains draws from
// this instead.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive on both ends.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(static_cast<std::uint64_t>(
                        (static_cast<unsigned __int128>(next_u64()) * span) >> 64));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent stream for a sub-task; decorrelates per-sample state from
    // the master sequence.
    Rng fork(std::uint64_t stream) const {
        Rng r(state_ ^ (0x632be59bd9b4e019ull * (stream + 1)));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
};

}  // namespace vssa
