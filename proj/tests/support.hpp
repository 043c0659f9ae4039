// Shared generators and reference implementations for the test suites.
// Everything here is written independently of the library internals.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <unistd.h>

#include "nconv/data.hpp"
#include "nconv/nconv_layer.hpp"
#include "nconv/tensor.hpp"

namespace testsupport {

using nconv::Shape4;
using nconv::Tensor4;
using nconv::WeightBank;
using nconv::WeightShape;

/// Property-test generator, deliberately separate from SeededRng.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed ^ 0x9e3779b97f4a7c15ULL) {}
  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  std::size_t index(std::size_t lo, std::size_t hi) {  // inclusive
    return std::uniform_int_distribution<std::size_t>(lo, hi)(eng_);
  }
  std::size_t odd(std::size_t lo, std::size_t hi) { return 2 * index(lo / 2, (hi - 1) / 2) + 1; }
  bool coin(double p) { return real(0.0, 1.0) < p; }

  Tensor4 tensor(Shape4 s, double lo, double hi) {
    Tensor4 t(s);
    for (double& v : t.values()) v = real(lo, hi);
    return t;
  }
  Tensor4 mask(Shape4 s, double p) {
    Tensor4 t(s);
    for (double& v : t.values()) v = coin(p) ? 1.0 : 0.0;
    return t;
  }
  WeightBank weights(WeightShape s, double lo, double hi) {
    WeightBank w(s);
    for (double& v : w.values()) v = real(lo, hi);
    return w;
  }

 private:
  std::mt19937_64 eng_;
};

/// Direct zero-padded cross-correlation with explicit bounds checks.
inline Tensor4 naive_correlate(const Tensor4& x, const WeightBank& w) {
  const auto& ws = w.shape();
  const long pad = static_cast<long>(ws.kh / 2);
  Tensor4 out(Shape4{x.n(), ws.out_ch, x.h(), x.w()});
  for (std::size_t b = 0; b < x.n(); ++b)
    for (std::size_t o = 0; o < ws.out_ch; ++o)
      for (long i = 0; i < static_cast<long>(x.h()); ++i)
        for (long j = 0; j < static_cast<long>(x.w()); ++j) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < ws.in_ch; ++ci)
            for (long m = 0; m < static_cast<long>(ws.kh); ++m)
              for (long n = 0; n < static_cast<long>(ws.kw); ++n) {
                const long y = i + m - pad;
                const long xx = j + n - pad;
                if (y < 0 || xx < 0 || y >= static_cast<long>(x.h()) || xx >= static_cast<long>(x.w())) continue;
                acc += x.at(b, ci, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) *
                       w.at(o, ci, static_cast<std::size_t>(m), static_cast<std::size_t>(n));
              }
          out.at(b, o, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = acc;
        }
  return out;
}

inline double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

/// Window-scan max pooling: value at the most confident cell (first wins), conf / s^2.
struct NaivePool {
  Tensor4 z, c;
  std::vector<std::pair<std::size_t, std::size_t>> cells;  // (di, dj) per pooled element
};

inline NaivePool naive_pool(const Tensor4& z, const Tensor4& c, std::size_t s) {
  Shape4 ps{z.n(), z.c(), z.h() / s, z.w() / s};
  NaivePool r{Tensor4(ps), Tensor4(ps), {}};
  for (std::size_t b = 0; b < ps.n; ++b)
    for (std::size_t ch = 0; ch < ps.c; ++ch)
      for (std::size_t i = 0; i < ps.h; ++i)
        for (std::size_t j = 0; j < ps.w; ++j) {
          std::size_t bi = 0, bj = 0;
          double best = -1.0;
          for (std::size_t di = 0; di < s; ++di)
            for (std::size_t dj = 0; dj < s; ++dj) {
              const double v = c.at(b, ch, i * s + di, j * s + dj);
              if (v > best) {
                best = v;
                bi = di;
                bj = dj;
              }
            }
          r.z.at(b, ch, i, j) = z.at(b, ch, i * s + bi, j * s + bj);
          r.c.at(b, ch, i, j) = best / static_cast<double>(s * s);
          r.cells.emplace_back(bi, bj);
        }
  return r;
}

/// All-pairs nearest measured pixel, ties to the smallest row-major index.
inline Tensor4 brute_nn(const Tensor4& sparse, const Tensor4& conf) {
  Tensor4 out = sparse;
  const std::size_t h = sparse.h(), w = sparse.w();
  for (std::size_t p = 0; p < h * w; ++p) {
    if (conf[p] > 0.0) continue;
    long best_d = std::numeric_limits<long>::max();
    std::size_t best_q = 0;
    for (std::size_t q = 0; q < h * w; ++q) {
      if (conf[q] <= 0.0) continue;
      const long di = static_cast<long>(p / w) - static_cast<long>(q / w);
      const long dj = static_cast<long>(p % w) - static_cast<long>(q % w);
      const long d = di * di + dj * dj;
      if (d < best_d) {
        best_d = d;
        best_q = q;
      }
    }
    out[p] = sparse[best_q];
  }
  return out;
}

struct ScalarMetrics {
  double mae = 0, rmse = 0, mre = 0, d1 = 0, d2 = 0, d3 = 0;
  std::size_t n = 0;
};

inline ScalarMetrics scalar_metrics(const Tensor4& z, const Tensor4& t, const Tensor4& valid) {
  ScalarMetrics m;
  double se = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (valid[k] == 0.0) continue;
    ++m.n;
    const double e = std::abs(z[k] - t[k]);
    m.mae += e;
    se += e * e;
    m.mre += e / t[k];
    const double ratio = z[k] > 0 ? std::max(z[k] / t[k], t[k] / z[k]) : std::numeric_limits<double>::infinity();
    if (ratio < 1.01) m.d1 += 1;
    if (ratio < 1.01 * 1.01) m.d2 += 1;
    if (ratio < 1.01 * 1.01 * 1.01) m.d3 += 1;
  }
  const double n = static_cast<double>(m.n);
  m.mae /= n;
  m.rmse = std::sqrt(se / n);
  m.mre /= n;
  m.d1 /= n;
  m.d2 /= n;
  m.d3 /= n;
  return m;
}

/// Window values of plane (b, ch) around (i, j), zero outside the image, row-major taps.
inline std::vector<double> window(const Tensor4& x, std::size_t b, std::size_t ch, long i, long j, std::size_t k) {
  std::vector<double> v;
  const long r = static_cast<long>(k / 2);
  for (long m = -r; m <= r; ++m)
    for (long n = -r; n <= r; ++n) {
      const long y = i + m, xx = j + n;
      const bool inside = y >= 0 && xx >= 0 && y < static_cast<long>(x.h()) && xx < static_cast<long>(x.w());
      v.push_back(inside ? x.at(b, ch, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) : 0.0);
    }
  return v;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::size_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("nconv_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

/// FNV-1a over the raw bytes of the values.
inline std::uint64_t fnv1a(const Tensor4& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.values().data());
  for (std::size_t k = 0; k < t.size() * sizeof(double); ++k) {
    h ^= bytes[k];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace testsupport
