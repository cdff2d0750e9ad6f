#pragma once

namespace aquant {

/// Error function, exactly odd, saturating to +/-1 for |x| > 6.
double erf(double x);

/// Normal CDF Phi((x - mean) / std). Throws DomainError unless std > 0.
double gaussian_cdf(double x, double mean, double std);

}  // namespace aquant
