#include "aquant/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace aquant {

namespace {

// Pair of independent standard normals from two uniforms.
std::pair<double, double> box_muller(Rng& rng) {
  const double u1 = 1.0 - rng.uniform();  // (0, 1]
  const double u2 = rng.uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(t), r * std::sin(t)};
}

}  // namespace

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw DomainError("Rng::below(0)");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() { return box_muller(*this).first; }

Tensorf rng_normal(Rng& rng, double mean, double std, Index n) { return rng_normal(rng, mean, std, Shape{n}); }

Tensorf rng_normal(Rng& rng, double mean, double std, const Shape& shape) {
  if (std < 0.0) throw DomainError("rng_normal needs std >= 0");
  Tensorf out(shape);
  const Index n = out.size();
  for (Index i = 0; i < n; i += 2) {
    const auto [a, b] = box_muller(rng);
    out[i] = static_cast<float>(mean + std * a);
    if (i + 1 < n) out[i + 1] = static_cast<float>(mean + std * b);
  }
  return out;
}

}  // namespace aquant
