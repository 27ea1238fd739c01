// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace diffaug {

// Counter-free deterministic PRNG (xoshiro256** seeded via splitmix64).
// Every stochastic component in the pipeline owns an Rng derived from an
// explicit stream id, so results do not depend on worker count or
// execution order.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller. The spare value is discarded so a
    // stream position depends only on the number of calls made.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void fill_normal(std::vector<T>& out, double stddev = 1.0) {
        for (auto& v : out) v = static_cast<T>(stddev * normal());
    }

    template <typename T>
    void fill_uniform(std::vector<T>& out, double lo, double hi) {
        for (auto& v : out) v = static_cast<T>(uniform(lo, hi));
    }

    // Deterministic stream derivation: hash-chains the path onto the root
    // seed. derive(s, {a,b}) != derive(s, {b,a}).
    static uint64_t derive(uint64_t root, std::initializer_list<uint64_t> path) {
        uint64_t h = root ^ 0x6a09e667f3bcc909ull;
        for (uint64_t p : path) {
            uint64_t x = h + 0x9e3779b97f4a7c15ull + p;
            h = splitmix64(x) ^ rotl(h, 23);
        }
        return splitmix64(h);
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static uint64_t splitmix64(uint64_t&& x) {
        uint64_t tmp = x;
        return splitmix64(tmp);
    }
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t s_[4];
};

}  // namespace diffaug
