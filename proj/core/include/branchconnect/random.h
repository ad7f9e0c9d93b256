#ifndef BRANCHCONNECT_RANDOM_H_
#define BRANCHCONNECT_RANDOM_H_

#include <cstdint>
#include <random>
#include <string>

namespace branchconnect {

// All randomness flows through an explicitly passed Rng. The helpers below
// consume a fixed number of engine outputs per call and do not depend on the
// standard library's distribution implementations, so streams replay exactly
// across toolchains.
using Rng = std::mt19937_64;

/// Uniform in [0, 1) with 53 random bits. One engine draw.
inline double Uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [0, n). One engine draw.
std::uint64_t UniformIndex(Rng& rng, std::uint64_t n);

/// Independent seed for a named sub-stream (SplitMix64 of seed and stream).
std::uint64_t DeriveSeed(std::uint64_t seed, std::uint64_t stream);

/// Standard normal via Box-Muller. Two engine draws.
double StandardNormal(Rng& rng);

std::string SerializeRng(const Rng& rng);
Rng DeserializeRng(const std::string& state);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_RANDOM_H_
