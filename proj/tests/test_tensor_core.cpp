#include <doctest.h>

#include <cmath>
#include <limits>

#include "aquant/rng.hpp"
#include "aquant/special.hpp"
#include "aquant/tensor.hpp"

using namespace aquant;

namespace {

// erf(x) = 2/sqrt(pi) exp(-x^2) sum_n 2^n x^(2n+1) / (1*3*...*(2n+1)); every term is positive.
long double erf_series(long double x) {
  const long double ax = std::fabs(x);
  long double term = ax, sum = ax;
  for (int n = 1; n < 1000; ++n) {
    term *= 2.0L * ax * ax / (2.0L * n + 1.0L);
    sum += term;
  }
  const long double v = 2.0L / std::sqrt(3.14159265358979323846264338327950288L) * std::exp(-ax * ax) * sum;
  return x < 0 ? -v : v;
}

Tensorf random_tensor(Rng& rng, Shape shape) { return rng_normal(rng, 0.0, 1.0, shape); }

Tensorf naive_matmul(const Tensorf& a, const Tensorf& b) {
  Tensorf c({a.dim(0), b.dim(1)});
  for (Index i = 0; i < a.dim(0); ++i)
    for (Index j = 0; j < b.dim(1); ++j) {
      long double s = 0;
      for (Index k = 0; k < a.dim(1); ++k) s += static_cast<long double>(a[i * a.dim(1) + k]) * b[k * b.dim(1) + j];
      c[i * b.dim(1) + j] = static_cast<float>(s);
    }
  return c;
}

Tensorf direct_conv(const Tensorf& x, const Tensorf& w, Index stride, Index pad) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(0), k = w.dim(2);
  const Index oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensorf y({n, o, oh, ow});
  for (Index b = 0; b < n; ++b)
    for (Index oc = 0; oc < o; ++oc)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          double s = 0;
          for (Index ic = 0; ic < c; ++ic)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                s += static_cast<double>(x[((b * c + ic) * h + iy) * wd + ix]) * w[((oc * c + ic) * k + ky) * k + kx];
              }
          y[((b * o + oc) * oh + oy) * ow + ox] = static_cast<float>(s);
        }
  return y;
}

double max_rel_diff(const Tensorf& a, const Tensorf& b) {
  REQUIRE(a.shape() == b.shape());
  const double scale = std::max(1e-30, static_cast<double>(b.flat().abs().maxCoeff()));
  return (a.flat().cast<double>() - b.flat().cast<double>()).abs().maxCoeff() / scale;
}

}  // namespace

TEST_CASE("tensor construction") {
  Tensorf t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.matrix()(1, 2) == 1.5f);
  CHECK_THROWS_AS(Tensorf({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensorf({2, 2}, std::vector<float>(3)), ShapeError);
  CHECK(Tensorf().empty());
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("matmul") {
  const Tensorf eye({2, 2}, std::vector<float>{1, 0, 0, 1});
  const Tensorf m({2, 2}, std::vector<float>{1, 2, 3, 4});
  CHECK(matmul(eye, m) == m);
  CHECK(matmul(Tensorf({1, 2}, std::vector<float>{1, 2}), Tensorf({2, 1}, std::vector<float>{3, 4}))[0] == 11.0f);
  CHECK_THROWS_AS(matmul(Tensorf({2, 3}), Tensorf({2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensorf({6}), Tensorf({6, 1})), ShapeError);

  Rng rng(7);
  const Tensorf a = random_tensor(rng, {16, 16}), b = random_tensor(rng, {16, 16}), c = random_tensor(rng, {16, 16});
  CHECK(max_rel_diff(matmul(a, b), naive_matmul(a, b)) <= 1e-6);
  CHECK(max_rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-4);

  // Double accumulation survives cancellation that float accumulation would not.
  const Tensorf big({1, 3}, std::vector<float>{1e8f, 1.0f, -1e8f});
  CHECK(matmul(big, Tensorf({3, 1}, 1.0f))[0] == 1.0f);
  CHECK(matmul(a, b) == matmul(a, b));
}

TEST_CASE("conv2d") {
  Rng rng(11);
  const Tensorf x = random_tensor(rng, {1, 1, 3, 3});
  const Tensorf doubled = conv2d(x, Tensorf({1, 1, 1, 1}, 2.0f), 1, 0);
  for (Index i = 0; i < x.size(); ++i) CHECK(doubled[i] == 2.0f * x[i]);

  const Tensorf img = random_tensor(rng, {2, 3, 6, 5});
  for (Index k : {1, 3, 5}) {
    Tensorf delta({3, 3, k, k});
    for (Index c = 0; c < 3; ++c) delta[((c * 3 + c) * k + k / 2) * k + k / 2] = 1.0f;
    CHECK(conv2d(img, delta, 1, k / 2) == img);
  }

  const Tensorf xr = random_tensor(rng, {2, 3, 8, 8});
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, {3, 2, 0}, {5, 1, 2}, {2, 2, 1}}) {
    const Tensorf w = random_tensor(rng, {4, 3, k, k});
    const Tensorf y = conv2d(xr, w, stride, pad);
    CHECK(max_rel_diff(y, direct_conv(xr, w, stride, pad)) <= 1e-5);

    const ConvGeometry g = conv_geometry<float>(xr.shape(), w.shape(), stride, pad);
    const RowMatrixd via = w.matrix().cast<double>() * im2col(xr, g);
    CHECK(max_rel_diff(channels_to_nchw<float>(via, g), y) <= 1e-5);
  }

  CHECK_THROWS_AS(conv2d(xr, Tensorf({4, 2, 3, 3}), 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(xr, Tensorf({4, 3, 9, 9}), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensorf({3, 8, 8}), Tensorf({4, 3, 3, 3}), 1, 0), ShapeError);
}

TEST_CASE("conv2d backward is the adjoint of the forward map") {
  Rng rng(5);
  const Tensorf x = random_tensor(rng, {2, 3, 7, 6});
  const Tensorf w = random_tensor(rng, {4, 3, 3, 3});
  const Tensorf y = conv2d(x, w, 2, 1);
  const Tensorf gy = random_tensor(rng, y.shape());
  const auto [dx, dw] = conv2d_backward(x, w, gy, 2, 1);
  // <gy, conv(x, w)> is bilinear, so <dx, x> and <dw, w> both equal it.
  const double lhs = (gy.flat().cast<double>() * y.flat().cast<double>()).sum();
  CHECK((dx.flat().cast<double>() * x.flat().cast<double>()).sum() == doctest::Approx(lhs).epsilon(1e-5));
  CHECK((dw.flat().cast<double>() * w.flat().cast<double>()).sum() == doctest::Approx(lhs).epsilon(1e-5));
}

TEST_CASE("erf") {
  CHECK(aquant::erf(0.0) == 0.0);
  CHECK(std::fabs(aquant::erf(10.0) - 1.0) <= 1e-9);
  CHECK(aquant::erf(1.0) == doctest::Approx(0.8427008).epsilon(1e-7));
  CHECK(aquant::erf(7.5) == 1.0);
  CHECK(aquant::erf(-7.5) == -1.0);
  CHECK_THROWS_AS(aquant::erf(std::numeric_limits<double>::quiet_NaN()), DomainError);

  double worst = 0.0, prev = -2.0;
  bool odd = true, monotone = true, bounded = true;
  for (int i = -6000; i <= 6000; ++i) {
    const double x = i * 1e-3;
    const double v = aquant::erf(x);
    worst = std::max(worst, static_cast<double>(std::fabs(v - erf_series(x))));
    odd = odd && aquant::erf(-x) == -v;
    monotone = monotone && v >= prev;
    // erf(x) rounds to exactly +/-1 in double once |x| exceeds about 5.92.
    bounded = bounded && (std::fabs(x) < 5.9 ? std::fabs(v) < 1.0 : std::fabs(v) <= 1.0);
    prev = v;
  }
  CHECK(worst <= 1e-7);
  CHECK(odd);
  CHECK(monotone);
  CHECK(bounded);
}

TEST_CASE("gaussian_cdf") {
  CHECK(gaussian_cdf(1.7, 1.7, 0.3) == 0.5);
  CHECK(gaussian_cdf(2.0, 1.7, 0.3) == doctest::Approx(0.8413447).epsilon(1e-7));
  CHECK(gaussian_cdf(-1e300, 0.0, 1.0) == 0.0);
  CHECK(gaussian_cdf(-std::numeric_limits<double>::infinity(), 3.0, 2.0) == 0.0);
  CHECK(gaussian_cdf(std::numeric_limits<double>::infinity(), 3.0, 2.0) == 1.0);
  CHECK_THROWS_AS(gaussian_cdf(0.0, 0.0, 0.0), DomainError);
  CHECK_THROWS_AS(gaussian_cdf(0.0, 0.0, -1.0), DomainError);
  double prev = 0.0;
  for (int i = -500; i <= 500; ++i) {
    const double v = gaussian_cdf(i * 0.01, 0.2, 0.7);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("rng_normal") {
  Rng r0(3);
  const Tensorf flat = rng_normal(r0, 2.5, 0.0, 100);
  for (float v : flat.data()) CHECK(v == 2.5f);
  CHECK_THROWS_AS(rng_normal(r0, 0.0, -1.0, 4), DomainError);

  Rng a(42), b(42);
  CHECK(rng_normal(a, 0.0, 1.0, 1000) == rng_normal(b, 0.0, 1.0, 1000));

  Rng big(1234);
  const Index n = 1000000;
  const Tensorf z = rng_normal(big, 0.0, 1.0, n);
  const double mean = z.flat().cast<double>().mean();
  const double var = (z.flat().cast<double>() - mean).square().sum() / static_cast<double>(n - 1);
  CHECK(std::fabs(mean) <= 4.0 / std::sqrt(static_cast<double>(n)));
  CHECK(var >= 0.99);
  CHECK(var <= 1.01);
}

TEST_CASE("rng streams") {
  Rng r(9);
  const Rng s1 = r.split(1), s2 = r.split(2);
  CHECK(s1.state() != s2.state());
  CHECK(r.split(1).state() == s1.state());
  for (std::uint64_t n : {1ull, 2ull, 7ull, 1000ull}) {
    for (int i = 0; i < 200; ++i) CHECK(r.below(n) < n);
  }
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
}
