#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nconv/data.hpp"
#include "nconv/network.hpp"
#include "nconv/tensor.hpp"

namespace nconv {

/// 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise, with d = z - t.
double huber(double z, double t);
/// d huber / d z.
double huber_grad(double z, double t);

struct LossReport {
  double data_term = 0.0;        // mean E over valid pixels
  double confidence_term = 0.0;  // mean (C - E C) / p over valid pixels
  double total = 0.0;           // data_term - confidence_term
  std::size_t valid = 0;
};

struct LossWithGrad {
  LossReport report;
  Tensor4 grad_data;
  Tensor4 grad_conf;
};

/// Confidence-aware loss, per valid pixel E~ = E - (C - E C) / p with
/// E = huber(z, t), averaged over valid pixels. `epoch` is the 1-based p.
LossReport conf_loss(const Tensor4& z, const Tensor4& c, const Tensor4& target, const Tensor4& valid,
                     std::size_t epoch);
LossWithGrad conf_loss_with_grad(const Tensor4& z, const Tensor4& c, const Tensor4& target, const Tensor4& valid,
                                 std::size_t epoch);

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;  // first moments, one array per parameter block
  std::vector<std::vector<double>> v;  // second moments
};

/// Bias-corrected ADAM update over matching parameter/gradient blocks.
/// Moments are created on the first call and must keep their shapes afterwards.
void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state);
void adam_step(Model& model, const ModelGrads& grads, AdamState& state);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 0.01;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> output_dir;  // history.csv, final.ncm, best.ncm
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_data_loss = 0.0;
  double mean_total_loss = 0.0;
  double mean_output_conf = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mini-batch training with seeded shuffling; the batch gradient is the mean
/// of per-sample gradients. Throws NumericalAbort on a non-finite loss.
TrainResult train(Model& model, const std::vector<Sample>& dataset, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

/// Dense model prediction for one sample.
SignalPair predict(const Model& model, const Sample& sample);

struct ProbeConfig {
  std::uint64_t seed = 1;
  std::size_t size = 8;
  double step = 1e-5;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
  /// Upper bound on probed parameters (0 = all).
  std::size_t max_params = 0;
  /// Scales the analytic gradient by (1 + corrupt); used to self-test the harness.
  double corrupt = 0.0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_location;
  std::size_t probed = 0;
};

/// Central differences of the scalar probe sum(rz * z) + sum(rc * c), with
/// fixed random rz, rc, against nconv_backward. Checks weights, bias and both inputs.
GradcheckResult gradcheck_layer(const NConvLayer& layer, const ProbeConfig& probe);

/// Same probe on the model output, checking every bank parameter.
GradcheckResult gradcheck_model(const Model& model, const ProbeConfig& probe);

}  // namespace nconv
