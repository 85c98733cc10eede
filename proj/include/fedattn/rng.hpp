#pragma once

#include <cstdint>
#include <vector>

namespace fedattn {

// Portable deterministic PRNG used everywhere randomness is needed.
//
// State setup: splitmix64 expands a 64-bit seed into the 4-word state of
// xoshiro256++ (Blackman & Vigna). Uniform doubles take the high 53 bits of
// the output word. Gaussians use Box-Muller on those uniforms (pairwise, the
// spare value is cached). The sequence produced for a given seed is part of
// the fixture contract: golden tests freeze values from it.
class Rng {
  public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // uniform in [0, 1)
    double next_double();

    // uniform in [0, n), n > 0
    std::uint64_t next_below(std::uint64_t n);

    // standard normal, scaled by the caller
    double next_gaussian();

    // k distinct values uniformly drawn from items, returned in the items'
    // original relative order (partial Fisher-Yates then sort by position)
    std::vector<long> sample_subset(const std::vector<long>& items, std::size_t k);

  private:
    std::uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

// Stable derivation of stream seeds from a run seed and a role tag, so that
// independent random streams (weights, corpus, per-participant sampling)
// never alias each other.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace fedattn
