#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "nconv/tensor.hpp"

namespace nconv {

inline constexpr double kDefaultEpsilon = 1e-8;
/// Lower bound on gamma() output, guards against flush-to-zero.
inline constexpr double kGammaFloor = 1e-30;

/// Softplus ln(1 + e^x), evaluated without overflow. Always > 0.
double gamma(double x);
/// Derivative of gamma: the logistic function.
double gamma_prime(double x);

/// Element-wise gamma over a raw bank; the non-negative applicability.
WeightBank applicability(const WeightBank& raw);

/// Constrained normalized-convolution layer.
///
/// Raw weights are unconstrained; the layer always uses gamma(weights) as its
/// applicability. Bias is per output channel and is added to the data path
/// after normalization. The confidence path carries no bias.
struct NConvLayer {
  WeightBank weights;
  std::vector<double> bias;
  double epsilon = kDefaultEpsilon;

  /// Raw weights uniform in [-1, 1], zero bias.
  static NConvLayer init(WeightShape shape, SeededRng& rng, double epsilon = kDefaultEpsilon);

  std::size_t in_ch() const { return weights.shape().in_ch; }
  std::size_t out_ch() const { return weights.shape().out_ch; }
  std::size_t kernel() const { return weights.shape().kh; }
  std::size_t param_count() const { return weights.size() + bias.size(); }

  /// Throws ShapeError unless kernel dims are odd and square and bias matches out_ch.
  void validate() const;
};

/// Everything nconv_backward needs from the matching forward call.
struct LayerCache {
  Tensor4 z_prev;
  Tensor4 c_prev;
  Tensor4 zc_prev;        // z_prev * c_prev
  WeightBank applicability;
  Tensor4 numerator;      // sum z*c*gamma(W)
  Tensor4 denominator;    // sum c*gamma(W) + eps
  std::vector<double> applicability_sum;  // sum gamma(W) per output channel
};

struct NConvOutput {
  Tensor4 z;
  Tensor4 c;
  LayerCache cache;
};

struct NConvGrads {
  Tensor4 z_prev;
  Tensor4 c_prev;
  WeightBank weights;
  std::vector<double> bias;
};

/// Data:       z = sum(z_prev c_prev G) / (sum(c_prev G) + eps) + bias
/// Confidence: c = (sum(c_prev G) + eps) / sum(G)
/// with G = gamma(W), sums over the kernel window and all input channels.
/// When the denominator is exactly zero (eps == 0, no support) the data value
/// is the bias alone and the confidence is 0.
NConvOutput nconv_forward(const Tensor4& z_prev, const Tensor4& c_prev, const NConvLayer& layer);

/// Exact gradients of nconv_forward through both the data and confidence outputs.
NConvGrads nconv_backward(const Tensor4& grad_z, const Tensor4& grad_c, const LayerCache& cache,
                          const NConvLayer& layer);

/// Basis functions b_1..b_m, each of length n, stored as columns.
class BasisMatrix {
 public:
  BasisMatrix(std::size_t n, std::vector<std::vector<double>> columns);

  /// The single constant basis [1, ..., 1].
  static BasisMatrix constant(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return columns_.size(); }
  double operator()(std::size_t row, std::size_t col) const { return columns_[col][row]; }

 private:
  std::size_t rows_;
  std::vector<std::vector<double>> columns_;
};

class InsufficientSupport : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reference normalized convolution at one location: solves
/// (B* Da Dc B) r = B* Da Dc f with a dense m x m solve.
/// Throws InsufficientSupport when the Grammian is (numerically) singular.
std::vector<double> nc_oracle(std::span<const double> f, std::span<const double> c, std::span<const double> a,
                              const BasisMatrix& basis);

/// Reference output certainty (det G / det G0)^(1/m).
/// Throws std::invalid_argument when det G0 <= 0.
double conf_oracle(std::span<const double> c, std::span<const double> a, const BasisMatrix& basis);

}  // namespace nconv
