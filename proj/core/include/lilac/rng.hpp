#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace lilac {

/// Splittable counter-based generator. Every stochastic site forks a named
/// substream from its parent, so adding or reordering draw sites elsewhere
/// never perturbs an existing stream. Same (seed, fork path) gives the same
/// sequence on any platform.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)), counter_(0) {}

    Rng fork(std::string_view name) const {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return Rng(key_, mix(key_ ^ h));
    }

    Rng fork(std::uint64_t n) const { return Rng(key_, mix(key_ + 0x632be59bd9b4e019ull * (n + 1))); }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * static_cast<float>(uniform()); }

    /// Standard normal via Box-Muller (no cached spare; two draws per call).
    double normal() {
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Uniform integer in [0, n).
    int randint(int n) { return static_cast<int>(uniform() * n); }

    template <typename T>
    void shuffle(std::vector<T>& v) {  // Fisher-Yates
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) std::swap(v[i], v[randint(i + 1)]);
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

  private:
    Rng(std::uint64_t base_key, std::uint64_t new_key) : key_(new_key), counter_(0) { (void)base_key; }

    static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace lilac
