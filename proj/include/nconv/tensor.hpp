#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nconv {

/// Raised on any shape, channel or argument contract violation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape4 {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& s);

/// Dense (n, c, h, w) array of doubles, row-major.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0);
  Tensor4(Shape4 shape, std::vector<double> values);

  static Tensor4 like(const Tensor4& other, double fill = 0.0) { return Tensor4(other.shape_, fill); }

  const Shape4& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return values_.size(); }

  std::size_t index(std::size_t b, std::size_t ch, std::size_t i, std::size_t j) const {
    return ((b * shape_.c + ch) * shape_.h + i) * shape_.w + j;
  }
  double& at(std::size_t b, std::size_t ch, std::size_t i, std::size_t j) { return values_[index(b, ch, i, j)]; }
  double at(std::size_t b, std::size_t ch, std::size_t i, std::size_t j) const {
    return values_[index(b, ch, i, j)];
  }
  double& operator[](std::size_t k) { return values_[k]; }
  double operator[](std::size_t k) const { return values_[k]; }

  /// One (b, ch) spatial plane.
  std::span<double> plane(std::size_t b, std::size_t ch) {
    return {values_.data() + index(b, ch, 0, 0), shape_.plane()};
  }
  std::span<const double> plane(std::size_t b, std::size_t ch) const {
    return {values_.data() + index(b, ch, 0, 0), shape_.plane()};
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& raw() const { return values_; }

  bool all_finite() const;
  double sum() const;
  double mean() const { return sum() / static_cast<double>(size()); }

  /// Channels [first, first + count).
  Tensor4 slice_channels(std::size_t first, std::size_t count) const;

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_{};
  std::vector<double> values_ = std::vector<double>(1, 0.0);
};

struct WeightShape {
  std::size_t out_ch = 1;
  std::size_t in_ch = 1;
  std::size_t kh = 1;
  std::size_t kw = 1;

  std::size_t numel() const { return out_ch * in_ch * kh * kw; }
  std::size_t taps() const { return kh * kw; }
  friend bool operator==(const WeightShape&, const WeightShape&) = default;
};

/// Filter bank laid out (out_ch, in_ch, kh, kw), row-major.
class WeightBank {
 public:
  WeightBank() = default;
  explicit WeightBank(WeightShape shape, double fill = 0.0);
  WeightBank(WeightShape shape, std::vector<double> values);

  const WeightShape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }

  std::size_t index(std::size_t o, std::size_t i, std::size_t m, std::size_t n) const {
    return ((o * shape_.in_ch + i) * shape_.kh + m) * shape_.kw + n;
  }
  double& at(std::size_t o, std::size_t i, std::size_t m, std::size_t n) { return values_[index(o, i, m, n)]; }
  double at(std::size_t o, std::size_t i, std::size_t m, std::size_t n) const { return values_[index(o, i, m, n)]; }
  double& operator[](std::size_t k) { return values_[k]; }
  double operator[](std::size_t k) const { return values_[k]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  friend bool operator==(const WeightBank&, const WeightBank&) = default;

 private:
  WeightShape shape_{};
  std::vector<double> values_ = std::vector<double>(1, 0.0);
};

/// Deterministic generator; the value streams depend only on the seed.
///
/// Wraps mt19937_64 (whose output sequence is fixed by the standard) and does
/// its own integer-to-real conversion, since the std distributions are
/// implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, bound); bound > 0.
  std::uint64_t below(std::uint64_t bound);
  std::int64_t between(std::int64_t lo, std::int64_t hi) {  // inclusive
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

Tensor4 random_tensor(Shape4 shape, SeededRng& rng, double lo = -1.0, double hi = 1.0);
WeightBank random_weights(WeightShape shape, SeededRng& rng, double lo = -1.0, double hi = 1.0);

/// Same-size zero-padded cross-correlation, stride 1.
/// out[b,o,i,j] = sum_{ci,m,n} x[b,ci,i+m-pad,j+n-pad] * w[o,ci,m,n].
/// Only pad == (k-1)/2 with odd kernels is supported.
Tensor4 correlate2d(const Tensor4& x, const WeightBank& w, std::size_t pad);
Tensor4 correlate2d(const Tensor4& x, const WeightBank& w);

/// Adjoint of correlate2d with respect to x: the gradient dL/dx given dL/dout.
Tensor4 correlate2d_input_grad(const Tensor4& grad_out, const WeightBank& w, std::size_t in_ch);

/// Gradient of sum(grad_out * correlate2d(x, w)) with respect to w, added to `grad_w`.
void correlate2d_accumulate_weight_grad(const Tensor4& x, const Tensor4& grad_out, WeightBank& grad_w);

Tensor4 concat_channels(const Tensor4& a, const Tensor4& b);
Tensor4 upsample_nearest(const Tensor4& x, std::size_t factor);
/// Picks every factor-th pixel starting at (offset_i, offset_j).
Tensor4 downsample_stride(const Tensor4& x, std::size_t factor, std::size_t offset_i = 0, std::size_t offset_j = 0);

Tensor4 add(const Tensor4& a, const Tensor4& b);
Tensor4 sub(const Tensor4& a, const Tensor4& b);
Tensor4 mul(const Tensor4& a, const Tensor4& b);
/// a / (b + eps), eps >= 0.
Tensor4 div_eps(const Tensor4& a, const Tensor4& b, double eps);
Tensor4 scale(const Tensor4& a, double k);
Tensor4 add_scalar(const Tensor4& a, double k);

// Binary block: "NCT1", four little-endian u32 dims, then little-endian f64 values.
void write_block(std::ostream& out, const Tensor4& t);
void write_block(std::ostream& out, const WeightBank& w);
Tensor4 read_tensor_block(std::istream& in);
WeightBank read_weight_block(std::istream& in);

}  // namespace nconv
