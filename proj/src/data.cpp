#include "nconv/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <sstream>

#include <png.h>

namespace nconv {

namespace {

namespace fs = std::filesystem;

Tensor4 single_plane(std::size_t h, std::size_t w, double fill = 0.0) { return Tensor4({1, 1, h, w}, fill); }

void require_plane(const Tensor4& t, const char* what) {
  if (t.n() != 1 || t.c() != 1) {
    throw ShapeError(std::string(what) + ": expected a single (1, 1, h, w) plane, got " + to_string(t.shape()));
  }
}

// RAII holder for the simplified libpng API.
struct PngImage {
  png_image image{};
  PngImage() { image.version = PNG_IMAGE_VERSION; }
  ~PngImage() { png_image_free(&image); }
  PngImage(const PngImage&) = delete;
  PngImage& operator=(const PngImage&) = delete;
};

std::string describe_format(png_uint_32 format) {
  std::ostringstream os;
  os << ((format & PNG_FORMAT_FLAG_LINEAR) ? "16-bit" : "8-bit") << " "
     << ((format & PNG_FORMAT_FLAG_COLOR) ? "color" : "gray") << ((format & PNG_FORMAT_FLAG_ALPHA) ? "+alpha" : "");
  return os.str();
}

void begin_read(PngImage& png, const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("no such file: " + path.string());
  if (png_image_begin_read_from_file(&png.image, path.c_str()) == 0) {
    throw FormatError(path.string() + ": not a readable PNG (" + png.image.message + ")");
  }
}

std::string sample_name(std::size_t index) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << index << ".png";
  return os.str();
}

// Exact nearest-measured-pixel search in growing square rings.
void fill_plane(std::span<const double> values, std::span<const double> conf, std::span<double> out, std::size_t h,
                std::size_t w) {
  const auto H = static_cast<std::ptrdiff_t>(h);
  const auto W = static_cast<std::ptrdiff_t>(w);
  const std::ptrdiff_t max_r = std::max(H, W);
  for (std::ptrdiff_t i = 0; i < H; ++i) {
    for (std::ptrdiff_t j = 0; j < W; ++j) {
      const auto self = static_cast<std::size_t>(i * W + j);
      if (conf[self] > 0.0) {
        out[self] = values[self];
        continue;
      }
      std::ptrdiff_t best_d2 = std::numeric_limits<std::ptrdiff_t>::max();
      std::size_t best = 0;
      for (std::ptrdiff_t r = 1; r <= max_r; ++r) {
        // Every cell in ring r is at least r away; stop once that exceeds the best.
        if (r * r > best_d2) break;
        for (std::ptrdiff_t di = -r; di <= r; ++di) {
          const std::ptrdiff_t y = i + di;
          if (y < 0 || y >= H) continue;
          const bool edge_row = di == -r || di == r;
          const std::ptrdiff_t step = edge_row ? 1 : 2 * r;
          for (std::ptrdiff_t dj = -r; dj <= r; dj += step) {
            const std::ptrdiff_t x = j + dj;
            if (x < 0 || x >= W) continue;
            const auto k = static_cast<std::size_t>(y * W + x);
            if (!(conf[k] > 0.0)) continue;
            const std::ptrdiff_t d2 = di * di + dj * dj;
            if (d2 < best_d2 || (d2 == best_d2 && k < best)) {
              best_d2 = d2;
              best = k;
            }
          }
        }
      }
      out[self] = values[best];
    }
  }
}

struct MetricsAccumulator {
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  double rel_sum = 0.0;
  std::array<std::size_t, 3> inliers{};
  std::size_t n = 0;

  void add(const Tensor4& pred, const Tensor4& gt, const Tensor4& valid) {
    if (pred.shape() != gt.shape() || pred.shape() != valid.shape()) {
      throw ShapeError("evaluate: prediction, ground truth and mask shapes differ");
    }
    const std::array<double, 3> thresholds{kDeltaBase, kDeltaBase * kDeltaBase, kDeltaBase * kDeltaBase * kDeltaBase};
    for (std::size_t k = 0; k < pred.size(); ++k) {
      if (valid[k] == 0.0) continue;
      const double t = gt[k];
      const double z = pred[k];
      if (!(t > 0.0)) throw std::invalid_argument("evaluate: ground truth must be > 0 on valid pixels");
      const double err = z - t;
      abs_sum += std::abs(err);
      sq_sum += err * err;
      rel_sum += std::abs(err) / t;
      const double ratio = z > 0.0 ? std::max(z / t, t / z) : std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < 3; ++i) {
        if (ratio < thresholds[i]) ++inliers[i];
      }
      ++n;
    }
  }

  MetricsReport report() const {
    if (n == 0) throw std::invalid_argument("evaluate: no valid pixels");
    const double count = static_cast<double>(n);
    MetricsReport r;
    r.mae = abs_sum / count;
    r.rmse = std::sqrt(sq_sum / count);
    r.mre = rel_sum / count;
    for (std::size_t i = 0; i < 3; ++i) r.delta[i] = static_cast<double>(inliers[i]) / count;
    r.n_valid = n;
    return r;
  }
};

}  // namespace

std::size_t Sample::measured_count() const {
  return static_cast<std::size_t>(std::count_if(input_conf.values().begin(), input_conf.values().end(),
                                                [](double v) { return v > 0.0; }));
}

std::size_t Sample::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(gt_valid.values().begin(), gt_valid.values().end(), [](double v) { return v != 0.0; }));
}

Tensor4 gen_scene(SeededRng& rng, std::size_t size) {
  const double s = static_cast<double>(size);
  Tensor4 scene = single_plane(size, size);

  // Background: far, tilted plane (nearer toward the bottom, like a road scene).
  const double base = rng.uniform(40.0, 70.0);
  const double gx = rng.uniform(-10.0, 10.0);
  const double gy = rng.uniform(-25.0, 5.0);
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      scene.at(0, 0, i, j) = base + gx * (static_cast<double>(j) / s - 0.5) + gy * (static_cast<double>(i) / s - 0.5);
    }
  }

  struct Rect {
    std::size_t top, left, height, width;
    double depth, gx, gy;
  };
  const auto count = static_cast<std::size_t>(rng.between(2, 6));
  const auto min_side = static_cast<std::int64_t>(std::max<std::size_t>(2, size / 8));
  const auto max_side = static_cast<std::int64_t>(std::max<std::size_t>(3, size / 2));
  std::vector<Rect> rects;
  for (std::size_t k = 0; k < count; ++k) {
    Rect r{};
    r.height = static_cast<std::size_t>(rng.between(min_side, max_side));
    r.width = static_cast<std::size_t>(rng.between(min_side, max_side));
    r.top = static_cast<std::size_t>(rng.between(0, static_cast<std::int64_t>(size - r.height)));
    r.left = static_cast<std::size_t>(rng.between(0, static_cast<std::int64_t>(size - r.width)));
    r.depth = rng.uniform(5.0, 30.0);
    r.gx = rng.uniform(-4.0, 4.0);
    r.gy = rng.uniform(-4.0, 4.0);
    rects.push_back(r);
  }
  // Far objects first so nearer ones occlude them.
  std::stable_sort(rects.begin(), rects.end(), [](const Rect& a, const Rect& b) { return a.depth > b.depth; });
  for (const Rect& r : rects) {
    for (std::size_t i = r.top; i < r.top + r.height; ++i) {
      for (std::size_t j = r.left; j < r.left + r.width; ++j) {
        const double u = (static_cast<double>(j - r.left) + 0.5) / static_cast<double>(r.width) - 0.5;
        const double v = (static_cast<double>(i - r.top) + 0.5) / static_cast<double>(r.height) - 0.5;
        scene.at(0, 0, i, j) = r.depth + r.gx * u + r.gy * v;
      }
    }
  }
  for (auto& d : scene.values()) d = std::clamp(d, kMinSceneDepth, kMaxSceneDepth);
  return scene;
}

std::vector<Sample> gen_synthetic(const SynthConfig& cfg) {
  if (!(cfg.density > 0.0 && cfg.density <= 1.0)) throw std::invalid_argument("gen_synthetic: density must be in (0, 1]");
  if (!(cfg.gt_coverage > 0.0 && cfg.gt_coverage <= 1.0)) {
    throw std::invalid_argument("gen_synthetic: gt_coverage must be in (0, 1]");
  }
  if (cfg.size < 4 || cfg.size % 4 != 0) throw std::invalid_argument("gen_synthetic: size must be a positive multiple of 4");
  if (cfg.samples == 0) throw std::invalid_argument("gen_synthetic: need at least one sample");

  SeededRng rng(cfg.seed);
  std::vector<Sample> out;
  out.reserve(cfg.samples);
  for (std::size_t n = 0; n < cfg.samples; ++n) {
    Sample s;
    s.gt_depth = gen_scene(rng, cfg.size);
    s.sparse_depth = single_plane(cfg.size, cfg.size);
    s.input_conf = single_plane(cfg.size, cfg.size);
    s.gt_valid = single_plane(cfg.size, cfg.size);
    for (std::size_t k = 0; k < s.gt_depth.size(); ++k) {
      if (rng.bernoulli(cfg.density)) {
        s.input_conf[k] = 1.0;
        s.sparse_depth[k] = s.gt_depth[k];
      }
    }
    for (std::size_t k = 0; k < s.gt_depth.size(); ++k) {
      if (rng.bernoulli(cfg.gt_coverage)) s.gt_valid[k] = 1.0;
    }
    // Coverage is random; keep every sample admissible for training.
    if (s.valid_count() == 0) s.gt_valid[static_cast<std::size_t>(rng.below(s.gt_valid.size()))] = 1.0;
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<std::size_t, std::size_t> punch_hole(Sample& sample, std::size_t side, SeededRng& rng) {
  const std::size_t h = sample.input_conf.h();
  const std::size_t w = sample.input_conf.w();
  if (side == 0 || side > h || side > w) throw std::invalid_argument("punch_hole: hole does not fit the image");
  const auto top = static_cast<std::size_t>(rng.below(h - side + 1));
  const auto left = static_cast<std::size_t>(rng.below(w - side + 1));
  for (std::size_t i = top; i < top + side; ++i) {
    for (std::size_t j = left; j < left + side; ++j) {
      sample.input_conf.at(0, 0, i, j) = 0.0;
      sample.sparse_depth.at(0, 0, i, j) = 0.0;
    }
  }
  return {top, left};
}

DepthImage load_depth_png(const fs::path& path) {
  PngImage png;
  begin_read(png, path);
  if (png.image.format != PNG_FORMAT_LINEAR_Y) {
    throw FormatError(path.string() + ": expected a 16-bit single-channel PNG, found " +
                      describe_format(png.image.format));
  }
  const std::size_t h = png.image.height;
  const std::size_t w = png.image.width;
  std::vector<png_uint_16> pixels(h * w);
  if (png_image_finish_read(&png.image, nullptr, pixels.data(), 0, nullptr) == 0) {
    throw FormatError(path.string() + ": decode failed (" + png.image.message + ")");
  }
  DepthImage out{single_plane(h, w), single_plane(h, w)};
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    if (pixels[k] == 0) continue;
    out.depth[k] = static_cast<double>(pixels[k]) / 256.0;
    out.conf[k] = 1.0;
  }
  return out;
}

void save_depth_png(const Tensor4& depth, const fs::path& path) {
  require_plane(depth, "save_depth_png");
  std::vector<png_uint_16> pixels(depth.size());
  for (std::size_t k = 0; k < depth.size(); ++k) {
    const double v = std::round(256.0 * depth[k]);
    pixels[k] = static_cast<png_uint_16>(std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 65535.0));
  }
  PngImage png;
  png.image.width = static_cast<png_uint_32>(depth.w());
  png.image.height = static_cast<png_uint_32>(depth.h());
  png.image.format = PNG_FORMAT_LINEAR_Y;
  if (png_image_write_to_file(&png.image, path.c_str(), 0, pixels.data(), 0, nullptr) == 0) {
    throw std::runtime_error("cannot write " + path.string() + ": " + png.image.message);
  }
}

void save_conf_png(const Tensor4& conf, const fs::path& path) {
  require_plane(conf, "save_conf_png");
  std::vector<png_byte> pixels(conf.size());
  for (std::size_t k = 0; k < conf.size(); ++k) {
    // round-half-up: 0.5 -> 128
    pixels[k] = static_cast<png_byte>(std::floor(255.0 * std::clamp(conf[k], 0.0, 1.0) + 0.5));
  }
  PngImage png;
  png.image.width = static_cast<png_uint_32>(conf.w());
  png.image.height = static_cast<png_uint_32>(conf.h());
  png.image.format = PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&png.image, path.c_str(), 0, pixels.data(), 0, nullptr) == 0) {
    throw std::runtime_error("cannot write " + path.string() + ": " + png.image.message);
  }
}

std::vector<std::uint8_t> load_gray8_png(const fs::path& path, std::size_t& height, std::size_t& width) {
  PngImage png;
  begin_read(png, path);
  if (png.image.format != PNG_FORMAT_GRAY) {
    throw FormatError(path.string() + ": expected an 8-bit gray PNG, found " + describe_format(png.image.format));
  }
  height = png.image.height;
  width = png.image.width;
  std::vector<std::uint8_t> pixels(height * width);
  if (png_image_finish_read(&png.image, nullptr, pixels.data(), 0, nullptr) == 0) {
    throw FormatError(path.string() + ": decode failed (" + png.image.message + ")");
  }
  return pixels;
}

void write_dataset(const std::vector<Sample>& samples, const fs::path& root, const std::string& split) {
  const fs::path sparse_dir = root / split / "sparse";
  const fs::path gt_dir = root / split / "gt";
  fs::create_directories(sparse_dir);
  fs::create_directories(gt_dir);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Sample& s = samples[n];
    save_depth_png(mul(s.sparse_depth, s.input_conf), sparse_dir / sample_name(n));
    save_depth_png(mul(s.gt_depth, s.gt_valid), gt_dir / sample_name(n));
  }
}

std::vector<Sample> read_dataset(const fs::path& root, const std::string& split) {
  const fs::path sparse_dir = root / split / "sparse";
  const fs::path gt_dir = root / split / "gt";
  if (!fs::is_directory(sparse_dir) || !fs::is_directory(gt_dir)) {
    throw std::runtime_error("dataset split not found: expected " + sparse_dir.string() + " and " + gt_dir.string());
  }
  std::vector<fs::path> names;
  for (const auto& entry : fs::directory_iterator(sparse_dir)) {
    if (entry.path().extension() == ".png") names.push_back(entry.path().filename());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::runtime_error("dataset split is empty: " + sparse_dir.string());

  std::vector<Sample> out;
  out.reserve(names.size());
  for (const auto& name : names) {
    DepthImage sparse = load_depth_png(sparse_dir / name);
    DepthImage gt = load_depth_png(gt_dir / name);
    if (sparse.depth.shape() != gt.depth.shape()) {
      throw FormatError("sparse and ground-truth sizes differ for " + name.string());
    }
    out.push_back({std::move(sparse.depth), std::move(sparse.conf), std::move(gt.depth), std::move(gt.conf)});
  }
  return out;
}

Tensor4 nn_fill(const Tensor4& sparse, const Tensor4& conf) {
  if (sparse.shape() != conf.shape()) throw ShapeError("nn_fill: depth and confidence shapes differ");
  Tensor4 out(sparse.shape());
  for (std::size_t b = 0; b < sparse.n(); ++b) {
    for (std::size_t ch = 0; ch < sparse.c(); ++ch) {
      auto c = conf.plane(b, ch);
      if (std::none_of(c.begin(), c.end(), [](double v) { return v > 0.0; })) {
        throw std::invalid_argument("nn_fill: no measured pixels in plane");
      }
      fill_plane(sparse.plane(b, ch), c, out.plane(b, ch), sparse.h(), sparse.w());
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"mae", r.mae},
                     {"rmse", r.rmse},
                     {"mre", r.mre},
                     {"delta1", r.delta[0]},
                     {"delta2", r.delta[1]},
                     {"delta3", r.delta[2]},
                     {"n_valid", r.n_valid}};
}

MetricsReport evaluate(const Tensor4& pred, const Tensor4& gt, const Tensor4& valid) {
  MetricsAccumulator acc;
  acc.add(pred, gt, valid);
  return acc.report();
}

MetricsReport evaluate_all(const std::vector<Tensor4>& preds, const std::vector<Sample>& samples) {
  if (preds.size() != samples.size()) throw std::invalid_argument("evaluate_all: prediction count mismatch");
  MetricsAccumulator acc;
  for (std::size_t k = 0; k < preds.size(); ++k) acc.add(preds[k], samples[k].gt_depth, samples[k].gt_valid);
  return acc.report();
}

}  // namespace nconv
