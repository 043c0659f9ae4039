#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nconv/tensor.hpp"

namespace nconv {

/// One training/evaluation example, all tensors (1, 1, h, w).
struct Sample {
  Tensor4 sparse_depth;  // meters, 0 where not measured
  Tensor4 input_conf;    // 1 where measured, 0 elsewhere
  Tensor4 gt_depth;      // meters
  Tensor4 gt_valid;      // 1 where the ground truth is usable

  std::size_t measured_count() const;
  std::size_t valid_count() const;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t samples = 4;
  std::size_t size = 64;
  double density = 0.05;
  double gt_coverage = 0.3;
};

inline constexpr double kMinSceneDepth = 2.0;
inline constexpr double kMaxSceneDepth = 80.0;

/// Dense synthetic scene: a far background ramp plus 2-6 nearer planar
/// rectangles, each with its own depth gradient. Depths lie in [2, 80] m.
Tensor4 gen_scene(SeededRng& rng, std::size_t size);

/// Seeded scenes, sparsified i.i.d. with probability `density`; ground-truth
/// validity drawn independently with probability `gt_coverage`.
std::vector<Sample> gen_synthetic(const SynthConfig& cfg);

/// Zeroes all measurements inside a square hole of side `side` placed at a
/// seeded position. Returns the hole's top-left corner.
std::pair<std::size_t, std::size_t> punch_hole(Sample& sample, std::size_t side, SeededRng& rng);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DepthImage {
  Tensor4 depth;
  Tensor4 conf;
};

/// 16-bit grayscale PNG, meters = value / 256, value 0 = missing.
DepthImage load_depth_png(const std::filesystem::path& path);
/// Writes round(256 * meters), saturating to [0, 65535].
void save_depth_png(const Tensor4& depth, const std::filesystem::path& path);
/// Writes round(255 * c) as 8-bit grayscale, c clamped to [0, 1].
void save_conf_png(const Tensor4& conf, const std::filesystem::path& path);
/// Raw 8-bit grayscale pixels of a PNG written by save_conf_png.
std::vector<std::uint8_t> load_gray8_png(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

/// Writes <root>/<split>/{sparse,gt}/NNNNN.png.
void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root, const std::string& split);
/// Reads the layout written by write_dataset. Throws std::runtime_error on missing directories.
std::vector<Sample> read_dataset(const std::filesystem::path& root, const std::string& split);

/// Fills every unmeasured pixel with the value of its nearest measured pixel
/// (Euclidean distance, ties to the smallest row-major index), per plane.
Tensor4 nn_fill(const Tensor4& sparse, const Tensor4& conf);

struct MetricsReport {
  double mae = 0.0;
  double rmse = 0.0;
  double mre = 0.0;
  std::array<double, 3> delta{};  // thresholds 1.01, 1.01^2, 1.01^3
  std::size_t n_valid = 0;
};

inline constexpr double kDeltaBase = 1.01;

void to_json(nlohmann::json& j, const MetricsReport& r);

/// Metrics over pixels with valid != 0. delta_i counts max(z/t, t/z) < 1.01^i;
/// non-positive predictions never count as inliers.
MetricsReport evaluate(const Tensor4& pred, const Tensor4& gt, const Tensor4& valid);

/// Pools the valid pixels of several predictions into one report.
MetricsReport evaluate_all(const std::vector<Tensor4>& preds, const std::vector<Sample>& samples);

}  // namespace nconv
