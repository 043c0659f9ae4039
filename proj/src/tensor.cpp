#include "nconv/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace nconv {

namespace {

void require_dims(std::size_t a, std::size_t b, std::size_t c, std::size_t d, const char* what) {
  if (a == 0 || b == 0 || c == 0 || d == 0) {
    throw ShapeError(std::string(what) + ": all dimensions must be >= 1");
  }
}

// Valid output range [lo, hi) along one axis for a tap offset `shift`,
// such that 0 <= i + shift < extent.
struct Range {
  std::size_t lo;
  std::size_t hi;
};

Range valid_range(std::ptrdiff_t shift, std::size_t extent) {
  const auto e = static_cast<std::ptrdiff_t>(extent);
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(e, e - shift);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// dst[i, j] += k * src[i + dy, j + dx] over the valid region.
void shifted_axpy(double* dst, const double* src, std::size_t h, std::size_t w, std::ptrdiff_t dy,
                  std::ptrdiff_t dx, double k) {
  const Range ri = valid_range(dy, h);
  const Range rj = valid_range(dx, w);
  if (rj.hi <= rj.lo) return;
  for (std::size_t i = ri.lo; i < ri.hi; ++i) {
    double* d = dst + i * w;
    const double* s = src + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + dy) * w;
    for (std::size_t j = rj.lo; j < rj.hi; ++j) {
      d[j] += k * s[static_cast<std::ptrdiff_t>(j) + dx];
    }
  }
}

// Adjoint of shifted_axpy: dst[i + dy, j + dx] += k * src[i, j].
void shifted_axpy_adjoint(double* dst, const double* src, std::size_t h, std::size_t w, std::ptrdiff_t dy,
                          std::ptrdiff_t dx, double k) {
  const Range ri = valid_range(dy, h);
  const Range rj = valid_range(dx, w);
  if (rj.hi <= rj.lo) return;
  for (std::size_t i = ri.lo; i < ri.hi; ++i) {
    const double* s = src + i * w;
    double* d = dst + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + dy) * w;
    for (std::size_t j = rj.lo; j < rj.hi; ++j) {
      d[static_cast<std::ptrdiff_t>(j) + dx] += k * s[j];
    }
  }
}

// sum_{i,j} g[i, j] * x[i + dy, j + dx] over the valid region.
double shifted_dot(const double* g, const double* x, std::size_t h, std::size_t w, std::ptrdiff_t dy,
                   std::ptrdiff_t dx) {
  const Range ri = valid_range(dy, h);
  const Range rj = valid_range(dx, w);
  double acc = 0.0;
  if (rj.hi <= rj.lo) return acc;
  for (std::size_t i = ri.lo; i < ri.hi; ++i) {
    const double* gr = g + i * w;
    const double* xr = x + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + dy) * w;
    for (std::size_t j = rj.lo; j < rj.hi; ++j) {
      acc += gr[j] * xr[static_cast<std::ptrdiff_t>(j) + dx];
    }
  }
  return acc;
}

std::size_t same_pad(const WeightShape& ws) {
  if (ws.kh % 2 == 0 || ws.kw % 2 == 0) {
    throw ShapeError("correlate2d: same-size output requires odd kernel dims, got " + std::to_string(ws.kh) + "x" +
                     std::to_string(ws.kw));
  }
  if (ws.kh != ws.kw) {
    throw ShapeError("correlate2d: only square kernels are supported");
  }
  return (ws.kh - 1) / 2;
}

void require_same_shape(const Tensor4& a, const Tensor4& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename F>
Tensor4 zip(const Tensor4& a, const Tensor4& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor4 out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = f(a[k], b[k]);
  return out;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw std::runtime_error("tensor block: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_values(std::ostream& out, std::span<const double> values) {
  std::vector<char> buf(values.size() * 8);
  for (std::size_t k = 0; k < values.size(); ++k) {
    const auto bits = std::bit_cast<std::uint64_t>(values[k]);
    for (int i = 0; i < 8; ++i) buf[k * 8 + i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::vector<double> get_values(std::istream& in, std::size_t count) {
  std::vector<unsigned char> buf(count * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("tensor block: truncated payload");
  std::vector<double> values(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[k * 8 + i]) << (8 * i);
    values[k] = std::bit_cast<double>(bits);
  }
  return values;
}

constexpr std::array<char, 4> kBlockMagic{'N', 'C', 'T', '1'};

std::array<std::uint32_t, 4> read_block_header(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kBlockMagic) throw std::runtime_error("tensor block: bad magic (expected NCT1)");
  std::array<std::uint32_t, 4> dims{};
  for (auto& d : dims) d = get_u32(in);
  return dims;
}

void write_block_raw(std::ostream& out, std::array<std::size_t, 4> dims, std::span<const double> values) {
  out.write(kBlockMagic.data(), 4);
  for (auto d : dims) put_u32(out, static_cast<std::uint32_t>(d));
  put_values(out, values);
}

}  // namespace

std::string to_string(const Shape4& s) {
  std::ostringstream os;
  os << "(" << s.n << "," << s.c << "," << s.h << "," << s.w << ")";
  return os.str();
}

Tensor4::Tensor4(Shape4 shape, double fill) : shape_(shape) {
  require_dims(shape.n, shape.c, shape.h, shape.w, "Tensor4");
  values_.assign(shape.numel(), fill);
}

Tensor4::Tensor4(Shape4 shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
  require_dims(shape.n, shape.c, shape.h, shape.w, "Tensor4");
  if (values_.size() != shape.numel()) {
    throw ShapeError("Tensor4: " + std::to_string(values_.size()) + " values for shape " + to_string(shape));
  }
}

bool Tensor4::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor4::sum() const { return std::accumulate(values_.begin(), values_.end(), 0.0); }

Tensor4 Tensor4::slice_channels(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > shape_.c) {
    throw ShapeError("slice_channels: [" + std::to_string(first) + ", " + std::to_string(first + count) +
                     ") out of range for " + std::to_string(shape_.c) + " channels");
  }
  Tensor4 out({shape_.n, count, shape_.h, shape_.w});
  for (std::size_t b = 0; b < shape_.n; ++b) {
    for (std::size_t ch = 0; ch < count; ++ch) {
      auto src = plane(b, first + ch);
      std::copy(src.begin(), src.end(), out.plane(b, ch).begin());
    }
  }
  return out;
}

WeightBank::WeightBank(WeightShape shape, double fill) : shape_(shape) {
  require_dims(shape.out_ch, shape.in_ch, shape.kh, shape.kw, "WeightBank");
  values_.assign(shape.numel(), fill);
}

WeightBank::WeightBank(WeightShape shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
  require_dims(shape.out_ch, shape.in_ch, shape.kh, shape.kw, "WeightBank");
  if (values_.size() != shape.numel()) throw ShapeError("WeightBank: value count does not match shape");
}

std::uint64_t SeededRng::below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("SeededRng::below: bound must be > 0");
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t v = 0;
  do {
    v = engine_();
  } while (v >= limit);
  return v % bound;
}

Tensor4 random_tensor(Shape4 shape, SeededRng& rng, double lo, double hi) {
  Tensor4 t(shape);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

WeightBank random_weights(WeightShape shape, SeededRng& rng, double lo, double hi) {
  WeightBank w(shape);
  for (auto& v : w.values()) v = rng.uniform(lo, hi);
  return w;
}

Tensor4 correlate2d(const Tensor4& x, const WeightBank& w, std::size_t pad) {
  const auto& ws = w.shape();
  if (x.c() != ws.in_ch) {
    throw ShapeError("correlate2d: input has " + std::to_string(x.c()) + " channels, kernel expects " +
                     std::to_string(ws.in_ch));
  }
  if (pad != same_pad(ws)) {
    throw ShapeError("correlate2d: pad must be (k-1)/2 = " + std::to_string(same_pad(ws)));
  }
  const std::size_t h = x.h();
  const std::size_t wd = x.w();
  Tensor4 out({x.n(), ws.out_ch, h, wd});
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t o = 0; o < ws.out_ch; ++o) {
      double* dst = out.plane(b, o).data();
      for (std::size_t ci = 0; ci < ws.in_ch; ++ci) {
        const double* src = x.plane(b, ci).data();
        for (std::size_t m = 0; m < ws.kh; ++m) {
          for (std::size_t n = 0; n < ws.kw; ++n) {
            const double k = w.at(o, ci, m, n);
            if (k == 0.0) continue;
            shifted_axpy(dst, src, h, wd, static_cast<std::ptrdiff_t>(m) - p, static_cast<std::ptrdiff_t>(n) - p, k);
          }
        }
      }
    }
  }
  return out;
}

Tensor4 correlate2d(const Tensor4& x, const WeightBank& w) { return correlate2d(x, w, same_pad(w.shape())); }

Tensor4 correlate2d_input_grad(const Tensor4& grad_out, const WeightBank& w, std::size_t in_ch) {
  const auto& ws = w.shape();
  if (grad_out.c() != ws.out_ch || in_ch != ws.in_ch) {
    throw ShapeError("correlate2d_input_grad: channel mismatch");
  }
  const auto p = static_cast<std::ptrdiff_t>(same_pad(ws));
  const std::size_t h = grad_out.h();
  const std::size_t wd = grad_out.w();
  Tensor4 gx({grad_out.n(), in_ch, h, wd});
  for (std::size_t b = 0; b < grad_out.n(); ++b) {
    for (std::size_t o = 0; o < ws.out_ch; ++o) {
      const double* g = grad_out.plane(b, o).data();
      for (std::size_t ci = 0; ci < in_ch; ++ci) {
        double* dst = gx.plane(b, ci).data();
        for (std::size_t m = 0; m < ws.kh; ++m) {
          for (std::size_t n = 0; n < ws.kw; ++n) {
            shifted_axpy_adjoint(dst, g, h, wd, static_cast<std::ptrdiff_t>(m) - p,
                                 static_cast<std::ptrdiff_t>(n) - p, w.at(o, ci, m, n));
          }
        }
      }
    }
  }
  return gx;
}

void correlate2d_accumulate_weight_grad(const Tensor4& x, const Tensor4& grad_out, WeightBank& grad_w) {
  const auto& ws = grad_w.shape();
  if (x.c() != ws.in_ch || grad_out.c() != ws.out_ch || x.n() != grad_out.n() || x.h() != grad_out.h() ||
      x.w() != grad_out.w()) {
    throw ShapeError("correlate2d_accumulate_weight_grad: shape mismatch");
  }
  const auto p = static_cast<std::ptrdiff_t>(same_pad(ws));
  const std::size_t h = x.h();
  const std::size_t wd = x.w();
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t o = 0; o < ws.out_ch; ++o) {
      const double* g = grad_out.plane(b, o).data();
      for (std::size_t ci = 0; ci < ws.in_ch; ++ci) {
        const double* src = x.plane(b, ci).data();
        for (std::size_t m = 0; m < ws.kh; ++m) {
          for (std::size_t n = 0; n < ws.kw; ++n) {
            grad_w.at(o, ci, m, n) +=
                shifted_dot(g, src, h, wd, static_cast<std::ptrdiff_t>(m) - p, static_cast<std::ptrdiff_t>(n) - p);
          }
        }
      }
    }
  }
}

Tensor4 concat_channels(const Tensor4& a, const Tensor4& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_channels: batch/spatial mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor4 out({a.n(), a.c() + b.c(), a.h(), a.w()});
  for (std::size_t n = 0; n < a.n(); ++n) {
    for (std::size_t ch = 0; ch < a.c(); ++ch) {
      auto src = a.plane(n, ch);
      std::copy(src.begin(), src.end(), out.plane(n, ch).begin());
    }
    for (std::size_t ch = 0; ch < b.c(); ++ch) {
      auto src = b.plane(n, ch);
      std::copy(src.begin(), src.end(), out.plane(n, a.c() + ch).begin());
    }
  }
  return out;
}

Tensor4 upsample_nearest(const Tensor4& x, std::size_t factor) {
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  Tensor4 out({x.n(), x.c(), x.h() * factor, x.w() * factor});
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      for (std::size_t i = 0; i < out.h(); ++i) {
        for (std::size_t j = 0; j < out.w(); ++j) {
          out.at(b, ch, i, j) = x.at(b, ch, i / factor, j / factor);
        }
      }
    }
  }
  return out;
}

Tensor4 downsample_stride(const Tensor4& x, std::size_t factor, std::size_t offset_i, std::size_t offset_j) {
  if (factor < 1 || offset_i >= factor || offset_j >= factor) throw ShapeError("downsample_stride: bad factor/offset");
  if (x.h() % factor != 0 || x.w() % factor != 0) throw ShapeError("downsample_stride: dims not divisible by factor");
  Tensor4 out({x.n(), x.c(), x.h() / factor, x.w() / factor});
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      for (std::size_t i = 0; i < out.h(); ++i) {
        for (std::size_t j = 0; j < out.w(); ++j) {
          out.at(b, ch, i, j) = x.at(b, ch, i * factor + offset_i, j * factor + offset_j);
        }
      }
    }
  }
  return out;
}

Tensor4 add(const Tensor4& a, const Tensor4& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor4 sub(const Tensor4& a, const Tensor4& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor4 mul(const Tensor4& a, const Tensor4& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor4 div_eps(const Tensor4& a, const Tensor4& b, double eps) {
  if (!(eps >= 0.0)) throw std::invalid_argument("div_eps: eps must be >= 0");
  return zip(a, b, "div_eps", [eps](double x, double y) { return x / (y + eps); });
}

Tensor4 scale(const Tensor4& a, double k) {
  Tensor4 out(a);
  for (auto& v : out.values()) v *= k;
  return out;
}

Tensor4 add_scalar(const Tensor4& a, double k) {
  Tensor4 out(a);
  for (auto& v : out.values()) v += k;
  return out;
}

void write_block(std::ostream& out, const Tensor4& t) {
  write_block_raw(out, {t.n(), t.c(), t.h(), t.w()}, t.values());
}

void write_block(std::ostream& out, const WeightBank& w) {
  const auto& s = w.shape();
  write_block_raw(out, {s.out_ch, s.in_ch, s.kh, s.kw}, w.values());
}

Tensor4 read_tensor_block(std::istream& in) {
  const auto d = read_block_header(in);
  const Shape4 shape{d[0], d[1], d[2], d[3]};
  return Tensor4(shape, get_values(in, shape.numel()));
}

WeightBank read_weight_block(std::istream& in) {
  const auto d = read_block_header(in);
  const WeightShape shape{d[0], d[1], d[2], d[3]};
  return WeightBank(shape, get_values(in, shape.numel()));
}

}  // namespace nconv
