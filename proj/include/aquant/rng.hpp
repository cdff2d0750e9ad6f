#pragma once

#include <cstdint>

#include "aquant/tensor.hpp"

namespace aquant {

/// SplitMix64 counter generator. The stream depends on the seed only, so
/// draws are reproducible across compilers and platforms.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), rejection-sampled so there is no modulo bias.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal draw (Box-Muller; the paired value is discarded).
  double normal();

  /// Independent generator for a sub-task; leaves this generator untouched.
  Rng split(std::uint64_t stream) const {
    Rng mixer(state_ ^ (stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
    return Rng(mixer.next_u64());
  }

  std::uint64_t state() const noexcept { return state_; }

private:
  std::uint64_t state_;
};

/// n i.i.d. N(mean, std^2) draws as a rank-1 tensor.
Tensorf rng_normal(Rng& rng, double mean, double std, Index n);

/// Same, shaped.
Tensorf rng_normal(Rng& rng, double mean, double std, const Shape& shape);

}  // namespace aquant
