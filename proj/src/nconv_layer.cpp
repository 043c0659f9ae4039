#include "nconv/nconv_layer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Dense>

namespace nconv {

double gamma(double x) {
  const double v = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return std::max(v, kGammaFloor);
}

double gamma_prime(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

WeightBank applicability(const WeightBank& raw) {
  WeightBank out(raw.shape());
  for (std::size_t k = 0; k < raw.size(); ++k) out[k] = gamma(raw[k]);
  return out;
}

NConvLayer NConvLayer::init(WeightShape shape, SeededRng& rng, double epsilon) {
  NConvLayer layer{random_weights(shape, rng, -1.0, 1.0), std::vector<double>(shape.out_ch, 0.0), epsilon};
  layer.validate();
  return layer;
}

void NConvLayer::validate() const {
  const auto& s = weights.shape();
  if (s.kh != s.kw || s.kh % 2 == 0) {
    throw ShapeError("NConvLayer: kernel must be square with odd size, got " + std::to_string(s.kh) + "x" +
                     std::to_string(s.kw));
  }
  if (bias.size() != s.out_ch) throw ShapeError("NConvLayer: bias length must equal out_ch");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("NConvLayer: epsilon must be >= 0");
}

NConvOutput nconv_forward(const Tensor4& z_prev, const Tensor4& c_prev, const NConvLayer& layer) {
  layer.validate();
  if (z_prev.shape() != c_prev.shape()) {
    throw ShapeError("nconv_forward: data " + to_string(z_prev.shape()) + " and confidence " +
                     to_string(c_prev.shape()) + " differ");
  }
  if (z_prev.c() != layer.in_ch()) {
    throw ShapeError("nconv_forward: input has " + std::to_string(z_prev.c()) + " channels, layer expects " +
                     std::to_string(layer.in_ch()));
  }

  LayerCache cache;
  cache.z_prev = z_prev;
  cache.c_prev = c_prev;
  cache.zc_prev = mul(z_prev, c_prev);
  cache.applicability = applicability(layer.weights);
  cache.numerator = correlate2d(cache.zc_prev, cache.applicability);
  cache.denominator = add_scalar(correlate2d(c_prev, cache.applicability), layer.epsilon);

  const auto& ws = cache.applicability.shape();
  const std::size_t per_out = ws.in_ch * ws.taps();
  cache.applicability_sum.resize(ws.out_ch);
  for (std::size_t o = 0; o < ws.out_ch; ++o) {
    auto first = cache.applicability.values().begin() + static_cast<std::ptrdiff_t>(o * per_out);
    cache.applicability_sum[o] = std::accumulate(first, first + static_cast<std::ptrdiff_t>(per_out), 0.0);
  }

  Tensor4 z(cache.numerator.shape());
  Tensor4 c(cache.numerator.shape());
  for (std::size_t b = 0; b < z.n(); ++b) {
    for (std::size_t o = 0; o < z.c(); ++o) {
      auto num = cache.numerator.plane(b, o);
      auto den = cache.denominator.plane(b, o);
      auto zo = z.plane(b, o);
      auto co = c.plane(b, o);
      const double s = cache.applicability_sum[o];
      const double bias = layer.bias[o];
      for (std::size_t k = 0; k < zo.size(); ++k) {
        zo[k] = (den[k] != 0.0 ? num[k] / den[k] : 0.0) + bias;
        co[k] = den[k] / s;
      }
    }
  }
  return {std::move(z), std::move(c), std::move(cache)};
}

NConvGrads nconv_backward(const Tensor4& grad_z, const Tensor4& grad_c, const LayerCache& cache,
                          const NConvLayer& layer) {
  const Shape4& out_shape = cache.numerator.shape();
  if (grad_z.shape() != out_shape || grad_c.shape() != out_shape) {
    throw ShapeError("nconv_backward: gradient shape does not match the cached forward output " +
                     to_string(out_shape));
  }
  if (cache.applicability.shape() != layer.weights.shape()) {
    throw ShapeError("nconv_backward: cache was produced by a layer of different shape");
  }

  // Upstream gradients with respect to N = sum(zc G), D = sum(c G) + eps and S = sum(G).
  Tensor4 grad_num(out_shape);
  Tensor4 grad_den(out_shape);
  std::vector<double> grad_sum(out_shape.c, 0.0);
  std::vector<double> grad_bias(out_shape.c, 0.0);
  for (std::size_t b = 0; b < out_shape.n; ++b) {
    for (std::size_t o = 0; o < out_shape.c; ++o) {
      auto gz = grad_z.plane(b, o);
      auto gc = grad_c.plane(b, o);
      auto num = cache.numerator.plane(b, o);
      auto den = cache.denominator.plane(b, o);
      auto gn = grad_num.plane(b, o);
      auto gd = grad_den.plane(b, o);
      const double s = cache.applicability_sum[o];
      double acc_s = 0.0;
      double acc_b = 0.0;
      for (std::size_t k = 0; k < gz.size(); ++k) {
        acc_b += gz[k];
        gd[k] = gc[k] / s;
        acc_s -= gc[k] * den[k] / (s * s);
        if (den[k] != 0.0) {
          gn[k] = gz[k] / den[k];
          gd[k] -= gz[k] * num[k] / (den[k] * den[k]);
        }
      }
      grad_sum[o] += acc_s;
      grad_bias[o] += acc_b;
    }
  }

  const std::size_t in_ch = cache.z_prev.c();
  const Tensor4 grad_zc = correlate2d_input_grad(grad_num, cache.applicability, in_ch);
  Tensor4 grad_c_prev = correlate2d_input_grad(grad_den, cache.applicability, in_ch);
  Tensor4 grad_z_prev(cache.z_prev.shape());
  for (std::size_t k = 0; k < grad_z_prev.size(); ++k) {
    grad_z_prev[k] = grad_zc[k] * cache.c_prev[k];
    grad_c_prev[k] += grad_zc[k] * cache.z_prev[k];
  }

  WeightBank grad_app(cache.applicability.shape());
  correlate2d_accumulate_weight_grad(cache.zc_prev, grad_num, grad_app);
  correlate2d_accumulate_weight_grad(cache.c_prev, grad_den, grad_app);
  const auto& ws = grad_app.shape();
  const std::size_t per_out = ws.in_ch * ws.taps();
  WeightBank grad_w(ws);
  for (std::size_t k = 0; k < grad_app.size(); ++k) {
    grad_w[k] = (grad_app[k] + grad_sum[k / per_out]) * gamma_prime(layer.weights[k]);
  }

  return {std::move(grad_z_prev), std::move(grad_c_prev), std::move(grad_w), std::move(grad_bias)};
}

BasisMatrix::BasisMatrix(std::size_t n, std::vector<std::vector<double>> columns)
    : rows_(n), columns_(std::move(columns)) {
  if (n == 0 || columns_.empty() || columns_.size() > n) {
    throw std::invalid_argument("BasisMatrix: need 1 <= m <= n columns");
  }
  for (const auto& col : columns_) {
    if (col.size() != n) throw std::invalid_argument("BasisMatrix: every column must have length n");
  }
}

BasisMatrix BasisMatrix::constant(std::size_t n) { return BasisMatrix(n, {std::vector<double>(n, 1.0)}); }

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

void check_patch(std::span<const double> c, std::span<const double> a, const BasisMatrix& basis) {
  if (c.size() != basis.rows() || a.size() != basis.rows()) {
    throw std::invalid_argument("normalized convolution oracle: patch vectors must have length n = " +
                                std::to_string(basis.rows()));
  }
  for (double v : a) {
    if (v < 0.0) throw std::invalid_argument("normalized convolution oracle: applicability must be >= 0");
  }
}

// B* diag(weights) B
Mat weighted_gram(const BasisMatrix& basis, const Vec& weights) {
  const auto n = static_cast<Eigen::Index>(basis.rows());
  const auto m = static_cast<Eigen::Index>(basis.cols());
  Mat b(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) b(i, j) = basis(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  }
  return b.transpose() * weights.asDiagonal() * b;
}

Vec to_vec(std::span<const double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t k = 0; k < v.size(); ++k) out(static_cast<Eigen::Index>(k)) = v[k];
  return out;
}

constexpr double kMinReciprocalCondition = 1e-12;

}  // namespace

std::vector<double> nc_oracle(std::span<const double> f, std::span<const double> c, std::span<const double> a,
                              const BasisMatrix& basis) {
  check_patch(c, a, basis);
  if (f.size() != basis.rows()) throw std::invalid_argument("nc_oracle: signal patch must have length n");

  const Vec ac = to_vec(a).cwiseProduct(to_vec(c));
  const Mat gram = weighted_gram(basis, ac);
  Vec rhs = Vec::Zero(static_cast<Eigen::Index>(basis.cols()));
  for (std::size_t j = 0; j < basis.cols(); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < basis.rows(); ++i) acc += basis(i, j) * ac(static_cast<Eigen::Index>(i)) * f[i];
    rhs(static_cast<Eigen::Index>(j)) = acc;
  }

  const Eigen::PartialPivLU<Mat> lu(gram);
  if (gram.norm() == 0.0 || !(lu.rcond() > kMinReciprocalCondition)) {
    throw InsufficientSupport("nc_oracle: insufficient confidence support (singular Grammian)");
  }
  const Vec r = lu.solve(rhs);
  return {r.data(), r.data() + r.size()};
}

double conf_oracle(std::span<const double> c, std::span<const double> a, const BasisMatrix& basis) {
  check_patch(c, a, basis);
  const Vec av = to_vec(a);
  const double det0 = weighted_gram(basis, av).determinant();
  if (!(det0 > 0.0)) throw std::invalid_argument("conf_oracle: det G0 <= 0 (degenerate basis or applicability)");
  const double det = std::max(0.0, weighted_gram(basis, av.cwiseProduct(to_vec(c))).determinant());
  return std::pow(det / det0, 1.0 / static_cast<double>(basis.cols()));
}

}  // namespace nconv
