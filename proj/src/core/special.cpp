#include "aquant/special.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "aquant/errors.hpp"

namespace aquant {

double erf(double x) {
  if (std::isnan(x)) throw DomainError("erf of NaN");
  const double ax = std::fabs(x);
  const double v = ax > 6.0 ? 1.0 : std::erf(ax);
  return x < 0 ? -v : v;
}

double gaussian_cdf(double x, double mean, double std) {
  if (!(std > 0.0)) throw DomainError("gaussian_cdf needs std > 0");
  if (x == std::numeric_limits<double>::infinity()) return 1.0;
  if (x == -std::numeric_limits<double>::infinity()) return 0.0;
  return 0.5 + 0.5 * erf((x - mean) / (std * std::numbers::sqrt2));
}

}  // namespace aquant
