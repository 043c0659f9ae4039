#include <doctest.h>

#include <cmath>

#include "nconv/training.hpp"
#include "support.hpp"

using namespace nconv;
using testsupport::Gen;
using testsupport::max_abs_diff;
using testsupport::window;

namespace {

NConvLayer random_layer(Gen& g, WeightShape s, double eps) {
  NConvLayer layer;
  layer.weights = g.weights(s, -2, 2);
  layer.bias.assign(s.out_ch, 0.0);
  layer.epsilon = eps;
  return layer;
}

/// Window taps of every input channel concatenated, in the same order as the
/// applicability of output channel o.
struct Patch {
  std::vector<double> f, c, a;
};

Patch patch(const Tensor4& z, const Tensor4& c, const NConvLayer& layer, std::size_t o, long i, long j) {
  const WeightBank app = applicability(layer.weights);
  const std::size_t k = layer.kernel();
  Patch p;
  for (std::size_t ci = 0; ci < layer.in_ch(); ++ci) {
    auto fz = window(z, 0, ci, i, j, k);
    auto fc = window(c, 0, ci, i, j, k);
    p.f.insert(p.f.end(), fz.begin(), fz.end());
    p.c.insert(p.c.end(), fc.begin(), fc.end());
    for (std::size_t m = 0; m < k; ++m)
      for (std::size_t n = 0; n < k; ++n) p.a.push_back(app.at(o, ci, m, n));
  }
  return p;
}

double probe_value(const NConvOutput& out, const Tensor4& rz, const Tensor4& rc) {
  return mul(out.z, rz).sum() + mul(out.c, rc).sum();
}

}  // namespace

TEST_CASE("gamma definition and positivity") {
  CHECK(nconv::gamma(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(nconv::gamma(-50.0) > 0.0);
  CHECK(nconv::gamma(-50.0) < 1e-20);
  CHECK(nconv::gamma(-1e4) >= kGammaFloor);
  CHECK(std::isfinite(nconv::gamma(800.0)));
  CHECK(nconv::gamma(800.0) == doctest::Approx(800.0));
  Gen g(11);
  for (int k = 0; k < 5000; ++k) REQUIRE(nconv::gamma(g.real(-700, 700)) > 0.0);
}

TEST_CASE("gamma_prime matches central differences") {
  for (double x : {-3.0, 0.0, 4.0}) {
    const double h = 1e-5;
    const double fd = (nconv::gamma(x + h) - nconv::gamma(x - h)) / (2 * h);
    CHECK(std::abs(gamma_prime(x) - fd) < 1e-8);
  }
}

TEST_CASE("layer validation") {
  SeededRng rng(0);
  NConvLayer layer = NConvLayer::init(WeightShape{2, 1, 3, 3}, rng);
  CHECK(layer.param_count() == 20);
  for (double w : layer.weights.values()) {
    CHECK(w >= -1.0);
    CHECK(w <= 1.0);
  }
  CHECK_NOTHROW(layer.validate());
  layer.bias.push_back(0.0);
  CHECK_THROWS_AS(layer.validate(), ShapeError);
  CHECK_THROWS_AS(NConvLayer::init(WeightShape{1, 1, 2, 2}, rng), ShapeError);

  NConvLayer ok = NConvLayer::init(WeightShape{1, 2, 3, 3}, rng);
  Tensor4 z(Shape4{1, 1, 4, 4}), c(Shape4{1, 1, 4, 4});
  CHECK_THROWS_AS(nconv_forward(z, c, ok), ShapeError);
}

TEST_CASE("constant signal with full confidence is reproduced") {
  Gen g(12);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = g.odd(1, 5);
    NConvLayer layer = random_layer(g, WeightShape{2, 3, k, k}, 0.0);
    const double v = g.real(-10, 10);
    Tensor4 z(Shape4{1, 3, 7, 6}, v), c(Shape4{1, 3, 7, 6}, 1.0);
    NConvOutput out = nconv_forward(z, c, layer);
    for (double x : out.z.values()) CHECK(x == doctest::Approx(v).epsilon(1e-13));
  }
}

TEST_CASE("single confident pixel collapses the window") {
  Gen g(13);
  NConvLayer layer = random_layer(g, WeightShape{1, 1, 3, 3}, 0.0);
  Tensor4 z(Shape4{1, 1, 3, 3}), c(Shape4{1, 1, 3, 3});
  z.at(0, 0, 0, 2) = 5.0;
  c.at(0, 0, 0, 2) = 1.0;
  NConvOutput out = nconv_forward(z, c, layer);
  CHECK(out.z.at(0, 0, 1, 1) == doctest::Approx(5.0).epsilon(1e-15));
  const WeightBank app = applicability(layer.weights);
  double total = 0.0;
  for (double a : app.values()) total += a;
  CHECK(out.c.at(0, 0, 1, 1) == doctest::Approx(app.at(0, 0, 0, 2) / total).epsilon(1e-14));
}

TEST_CASE("zero support with zero epsilon yields bias and zero confidence") {
  Gen g(14);
  NConvLayer layer = random_layer(g, WeightShape{2, 1, 3, 3}, 0.0);
  layer.bias = {0.25, -1.5};
  Tensor4 z = g.tensor(Shape4{1, 1, 5, 5}, -1, 1), c(Shape4{1, 1, 5, 5});
  NConvOutput out = nconv_forward(z, c, layer);
  CHECK(out.z.all_finite());
  for (std::size_t k = 0; k < 25; ++k) {
    CHECK(out.z[k] == 0.25);
    CHECK(out.z[25 + k] == -1.5);
    CHECK(out.c[k] == 0.0);
  }
}

TEST_CASE("nc_oracle reference cases") {
  SUBCASE("full confidence and flat applicability is the mean") {
    std::vector<double> f{1, 2, 3, 4, 5, 6, 7, 8, 10};
    std::vector<double> ones(9, 1.0);
    auto r = nc_oracle(f, ones, ones, BasisMatrix::constant(9));
    CHECK(r.size() == 1);
    CHECK(r[0] == doctest::Approx(46.0 / 9.0).epsilon(1e-14));
  }
  SUBCASE("constant basis is the confidence-weighted average") {
    // Hand-evaluated on a 3x3 patch.
    std::vector<double> f{2, 4, 6, 1, 3, 5, 0, 8, 9};
    std::vector<double> c{1, 0.5, 0, 1, 1, 0.25, 0, 1, 0.5};
    std::vector<double> a{1, 2, 1, 2, 4, 2, 1, 2, 1};
    // sum a*c*f = 2 + 4 + 0 + 2 + 12 + 2.5 + 0 + 16 + 4.5 = 43
    // sum a*c   = 1 + 1 + 0 + 2 + 4 + 0.5 + 0 + 2 + 0.5  = 11
    auto r = nc_oracle(f, c, a, BasisMatrix::constant(9));
    CHECK(r[0] == doctest::Approx(43.0 / 11.0).epsilon(1e-14));
  }
  SUBCASE("affine basis recovers affine coefficients") {
    std::vector<double> ramp, f, ones(9, 1.0), a;
    for (int m = 0; m < 3; ++m)
      for (int n = 0; n < 3; ++n) {
        ramp.push_back(n - 1.0);
        f.push_back(2.5 - 0.75 * (n - 1.0));
        a.push_back(1.0 + m + n);
      }
    BasisMatrix B(9, {std::vector<double>(9, 1.0), ramp});
    auto r = nc_oracle(f, ones, a, B);
    REQUIRE(r.size() == 2);
    CHECK(std::abs(r[0] - 2.5) < 1e-10);
    CHECK(std::abs(r[1] + 0.75) < 1e-10);
  }
  SUBCASE("no support is reported") {
    std::vector<double> f(9, 1.0), zeros(9, 0.0), ones(9, 1.0);
    CHECK_THROWS_AS(nc_oracle(f, zeros, ones, BasisMatrix::constant(9)), InsufficientSupport);
  }
}

TEST_CASE("conf_oracle reference cases") {
  Gen g(15);
  std::vector<double> a(9), ones(9, 1.0), zeros(9, 0.0);
  for (double& v : a) v = g.real(0.1, 2.0);
  CHECK(conf_oracle(ones, a, BasisMatrix::constant(9)) == 1.0);
  CHECK(conf_oracle(zeros, a, BasisMatrix::constant(9)) == 0.0);
}

TEST_CASE("forward agrees with the per-pixel oracles") {
  Gen g(16);
  SUBCASE("5x5 signal with checkerboard confidence") {
    NConvLayer layer = random_layer(g, WeightShape{1, 1, 3, 3}, 0.0);
    Tensor4 z = g.tensor(Shape4{1, 1, 5, 5}, -5, 5), c(Shape4{1, 1, 5, 5});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) c.at(0, 0, i, j) = (i + j) % 2 == 0 ? 1.0 : 0.0;
    NConvOutput out = nconv_forward(z, c, layer);
    for (long i = 1; i < 4; ++i)
      for (long j = 1; j < 4; ++j) {
        Patch p = patch(z, c, layer, 0, i, j);
        const auto r = nc_oracle(p.f, p.c, p.a, BasisMatrix::constant(p.f.size()));
        CHECK(std::abs(out.z.at(0, 0, i, j) - r[0]) < 1e-10);
        CHECK(std::abs(out.c.at(0, 0, i, j) - conf_oracle(p.c, p.a, BasisMatrix::constant(p.f.size()))) < 1e-12);
      }
  }
  SUBCASE("random multi-channel layers") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t k = g.odd(1, 5);
      NConvLayer layer = random_layer(g, WeightShape{2, g.index(1, 3), k, k}, 0.0);
      Shape4 s{1, layer.in_ch(), 7, 7};
      Tensor4 z = g.tensor(s, -5, 5), c = g.tensor(s, 0, 1);
      NConvOutput out = nconv_forward(z, c, layer);
      const long r = static_cast<long>(k / 2);
      for (std::size_t o = 0; o < 2; ++o)
        for (long i = r; i < 7 - r; ++i)
          for (long j = r; j < 7 - r; ++j) {
            Patch p = patch(z, c, layer, o, i, j);
            const auto B = BasisMatrix::constant(p.f.size());
            CHECK(std::abs(out.z.at(0, o, i, j) - nc_oracle(p.f, p.c, p.a, B)[0]) < 1e-10);
            CHECK(std::abs(out.c.at(0, o, i, j) - conf_oracle(p.c, p.a, B)) < 1e-12);
          }
    }
  }
}

TEST_CASE("data output is a convex combination of confident inputs") {
  Gen g(17);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = g.odd(1, 5);
    NConvLayer layer = random_layer(g, WeightShape{1, 1, k, k}, 0.0);
    Shape4 s{1, 1, g.index(3, 10), g.index(3, 10)};
    Tensor4 z = g.tensor(s, -20, 20);
    Tensor4 c = g.mask(s, 0.4);
    for (double& v : c.values()) v *= g.real(0.05, 1.0);
    NConvOutput out = nconv_forward(z, c, layer);
    for (long i = 0; i < static_cast<long>(s.h); ++i)
      for (long j = 0; j < static_cast<long>(s.w); ++j) {
        auto wz = window(z, 0, 0, i, j, k), wc = window(c, 0, 0, i, j, k);
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t q = 0; q < wz.size(); ++q)
          if (wc[q] > 0) {
            lo = std::min(lo, wz[q]);
            hi = std::max(hi, wz[q]);
          }
        if (lo > hi) continue;
        const double v = out.z.at(0, 0, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        CHECK(v >= lo - 1e-12);
        CHECK(v <= hi + 1e-12);
      }
  }
}

TEST_CASE("output confidence stays within the window's confidence range") {
  Gen g(18);
  for (double eps : {0.0, 1e-8, 1e-3}) {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t k = g.odd(1, 5);
      NConvLayer layer = random_layer(g, WeightShape{1, 1, k, k}, eps);
      Shape4 s{1, 1, 8, 8};
      Tensor4 z = g.tensor(s, -1, 1), c = g.tensor(s, 0, 1);
      NConvOutput out = nconv_forward(z, c, layer);
      double total = 0.0;
      const WeightBank app = applicability(layer.weights);
      for (double a : app.values()) total += a;
      for (long i = 0; i < 8; ++i)
        for (long j = 0; j < 8; ++j) {
          auto wc = window(c, 0, 0, i, j, k);
          const double lo = *std::min_element(wc.begin(), wc.end());
          const double hi = *std::max_element(wc.begin(), wc.end());
          const double v = out.c.at(0, 0, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
          CHECK(v >= lo - 1e-12);
          CHECK(v <= hi + eps / total + 1e-12);
        }
    }
  }
}

TEST_CASE("raising one input confidence never lowers output confidence") {
  Gen g(19);
  for (int trial = 0; trial < 30; ++trial) {
    NConvLayer layer = random_layer(g, WeightShape{2, 2, 3, 3}, g.coin(0.5) ? 0.0 : 1e-8);
    Shape4 s{1, 2, 6, 6};
    Tensor4 z = g.tensor(s, -1, 1), c = g.tensor(s, 0, 1);
    NConvOutput before = nconv_forward(z, c, layer);
    Tensor4 c2 = c;
    const std::size_t k = g.index(0, c.size() - 1);
    c2[k] = g.real(c[k], 1.0);
    NConvOutput after = nconv_forward(z, c2, layer);
    for (std::size_t q = 0; q < after.c.size(); ++q) CHECK(after.c[q] >= before.c[q]);
  }
}

TEST_CASE("data path is invariant to confidence scale") {
  Gen g(20);
  for (int trial = 0; trial < 20; ++trial) {
    NConvLayer layer = random_layer(g, WeightShape{2, 2, 3, 3}, 0.0);
    layer.bias = {g.real(-1, 1), g.real(-1, 1)};
    Shape4 s{1, 2, 6, 7};
    Tensor4 z = g.tensor(s, -3, 3), c = g.tensor(s, 0.01, 1);
    const double k = g.real(0.01, 100);
    CHECK(max_abs_diff(nconv_forward(z, c, layer).z, nconv_forward(z, scale(c, k), layer).z) < 1e-12);
  }
}

TEST_CASE("full confidence reduces to a normalized standard convolution") {
  Gen g(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = g.odd(1, 5);
    NConvLayer layer = random_layer(g, WeightShape{g.index(1, 3), g.index(1, 2), k, k}, 0.0);
    Shape4 s{1, layer.in_ch(), g.index(3, 9), g.index(3, 9)};
    Tensor4 z = g.tensor(s, -5, 5);
    NConvOutput out = nconv_forward(z, Tensor4::like(z, 1.0), layer);
    const WeightBank app = applicability(layer.weights);
    Tensor4 ref = correlate2d(z, app);
    for (std::size_t o = 0; o < layer.out_ch(); ++o) {
      double total = 0.0;
      for (std::size_t ci = 0; ci < layer.in_ch(); ++ci)
        for (std::size_t m = 0; m < k; ++m)
          for (std::size_t n = 0; n < k; ++n) total += app.at(o, ci, m, n);
      for (double& v : ref.plane(0, o)) v /= total;
    }
    // Only interior pixels see the whole kernel; zero padding carries zero confidence.
    const std::size_t r = k / 2;
    for (std::size_t o = 0; o < layer.out_ch(); ++o)
      for (std::size_t i = r; i + r < s.h; ++i)
        for (std::size_t j = r; j + r < s.w; ++j) CHECK(std::abs(out.z.at(0, o, i, j) - ref.at(0, o, i, j)) < 1e-12);
  }
}

TEST_CASE("backward of zero upstream gradients is exactly zero") {
  Gen g(22);
  NConvLayer layer = random_layer(g, WeightShape{3, 2, 3, 3}, 1e-8);
  Shape4 s{1, 2, 5, 5};
  NConvOutput out = nconv_forward(g.tensor(s, -1, 1), g.tensor(s, 0, 1), layer);
  NConvGrads gr = nconv_backward(Tensor4::like(out.z), Tensor4::like(out.c), out.cache, layer);
  for (double v : gr.z_prev.values()) CHECK(v == 0.0);
  for (double v : gr.c_prev.values()) CHECK(v == 0.0);
  for (double v : gr.weights.values()) CHECK(v == 0.0);
  for (double v : gr.bias) CHECK(v == 0.0);
}

TEST_CASE("data with zero confidence receives no gradient") {
  Gen g(23);
  NConvLayer layer = random_layer(g, WeightShape{2, 1, 3, 3}, 1e-8);
  Shape4 s{1, 1, 6, 6};
  Tensor4 z = g.tensor(s, -1, 1), c = g.tensor(s, 0.1, 1);
  for (std::size_t i = 0; i < 6; ++i) c.at(0, 0, i, 2) = 0.0;
  NConvOutput out = nconv_forward(z, c, layer);
  NConvGrads gr =
      nconv_backward(g.tensor(out.z.shape(), -1, 1), g.tensor(out.c.shape(), -1, 1), out.cache, layer);
  for (std::size_t i = 0; i < 6; ++i) CHECK(gr.z_prev.at(0, 0, i, 2) == 0.0);
  CHECK(gr.z_prev.at(0, 0, 0, 0) != 0.0);
}

TEST_CASE("backward agrees with finite differences of the probe") {
  Gen g(24);
  for (int trial = 0; trial < 5; ++trial) {
    NConvLayer layer = random_layer(g, WeightShape{2, 2, 3, 3}, 1e-3);
    layer.bias = {0.1, -0.2};
    Shape4 s{1, 2, 5, 5};
    Tensor4 z = g.tensor(s, -2, 2), c = g.tensor(s, 0.05, 1);
    Tensor4 rz = g.tensor(Shape4{1, 2, 5, 5}, -1, 1), rc = g.tensor(Shape4{1, 2, 5, 5}, -1, 1);
    NConvOutput out = nconv_forward(z, c, layer);
    NConvGrads gr = nconv_backward(rz, rc, out.cache, layer);
    const double h = 1e-6;
    auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-4}); };
    for (std::size_t q = 0; q < layer.weights.size(); ++q) {
      NConvLayer lp = layer, lm = layer;
      lp.weights[q] += h;
      lm.weights[q] -= h;
      const double fd =
          (probe_value(nconv_forward(z, c, lp), rz, rc) - probe_value(nconv_forward(z, c, lm), rz, rc)) / (2 * h);
      CHECK(rel(gr.weights[q], fd) < 1e-5);
    }
    for (std::size_t q = 0; q < z.size(); ++q) {
      Tensor4 cp = c, cm = c, zp = z, zm = z;
      cp[q] += h;
      cm[q] -= h;
      zp[q] += h;
      zm[q] -= h;
      const double fdc =
          (probe_value(nconv_forward(z, cp, layer), rz, rc) - probe_value(nconv_forward(z, cm, layer), rz, rc)) /
          (2 * h);
      const double fdz =
          (probe_value(nconv_forward(zp, c, layer), rz, rc) - probe_value(nconv_forward(zm, c, layer), rz, rc)) /
          (2 * h);
      CHECK(rel(gr.c_prev[q], fdc) < 1e-5);
      CHECK(rel(gr.z_prev[q], fdz) < 1e-5);
    }
    for (std::size_t o = 0; o < 2; ++o) {
      double expected = 0.0;
      for (double v : rz.plane(0, o)) expected += v;
      CHECK(gr.bias[o] == doctest::Approx(expected).epsilon(1e-14));
    }
  }
}

TEST_CASE("gradcheck harness") {
  SeededRng rng(3);
  NConvLayer layer = NConvLayer::init(WeightShape{3, 2, 3, 3}, rng);
  ProbeConfig probe;
  probe.step = 1e-6;
  GradcheckResult ok = gradcheck_layer(layer, probe);
  CHECK(ok.probed >= 200);
  CHECK(ok.max_rel_error < 1e-5);

  probe.corrupt = 0.1;
  GradcheckResult bad = gradcheck_layer(layer, probe);
  CHECK(bad.max_rel_error > 1e-2);
}
