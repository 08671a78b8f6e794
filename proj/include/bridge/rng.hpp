#pragma once

#include <cstdint>
#include <random>

namespace bridge {

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions are hand-rolled here because std::*_distribution is
// implementation-defined and would break replay across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n);

    // standard normal via Box-Muller (cached second value)
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Mixes a stream label into a master seed so independent substreams
// (data, init, dropout, shuffle) never overlap.
uint64_t derive_seed(uint64_t master, uint64_t stream);

// Stable 64-bit hash of a string (FNV-1a); used to derive per-parameter
// init streams that are independent of registration order.
uint64_t hash_name(const std::string& name);

}  // namespace bridge
