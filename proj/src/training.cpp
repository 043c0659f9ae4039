#include "nconv/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace nconv {

namespace {

namespace fs = std::filesystem;

void check_loss_inputs(const Tensor4& z, const Tensor4& c, const Tensor4& target, const Tensor4& valid,
                       std::size_t epoch) {
  if (z.shape() != c.shape() || z.shape() != target.shape() || z.shape() != valid.shape()) {
    throw ShapeError("conf_loss: prediction, confidence, target and mask shapes must match");
  }
  if (epoch < 1) throw std::invalid_argument("conf_loss: epoch index is 1-based");
}

template <typename PerPixel>
LossReport reduce_loss(const Tensor4& z, const Tensor4& c, const Tensor4& target, const Tensor4& valid,
                       std::size_t epoch, PerPixel&& per_pixel) {
  check_loss_inputs(z, c, target, valid, epoch);
  const double p = static_cast<double>(epoch);
  LossReport r;
  double data_sum = 0.0;
  double conf_sum = 0.0;
  double total_sum = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (valid[k] == 0.0) continue;
    const double e = huber(z[k], target[k]);
    const double bonus = (c[k] - e * c[k]) / p;
    data_sum += e;
    conf_sum += bonus;
    total_sum += e - bonus;
    per_pixel(k, e);
    ++r.valid;
  }
  if (r.valid == 0) throw std::invalid_argument("conf_loss: no valid ground-truth pixels");
  const double n = static_cast<double>(r.valid);
  r.data_term = data_sum / n;
  r.confidence_term = conf_sum / n;
  r.total = total_sum / n;
  return r;
}

double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Indices to probe out of `count`, evenly spread when limited.
std::vector<std::size_t> probe_indices(std::size_t count, std::size_t limit) {
  std::vector<std::size_t> idx;
  if (limit == 0 || limit >= count) {
    idx.resize(count);
    for (std::size_t k = 0; k < count; ++k) idx[k] = k;
    return idx;
  }
  for (std::size_t k = 0; k < limit; ++k) idx.push_back(k * count / limit);
  return idx;
}

double dot(const Tensor4& a, const Tensor4& b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

void record(GradcheckResult& res, double analytic, double numeric, const ProbeConfig& probe, const std::string& where) {
  const double e = rel_error(analytic * (1.0 + probe.corrupt), numeric, probe.floor);
  ++res.probed;
  if (res.probed == 1 || e > res.max_rel_error) {
    res.max_rel_error = e;
    res.worst_location = where;
  }
}

}  // namespace

double huber(double z, double t) {
  const double d = std::abs(z - t);
  return d < 1.0 ? 0.5 * d * d : d - 0.5;
}

double huber_grad(double z, double t) {
  const double d = z - t;
  if (std::abs(d) < 1.0) return d;
  return d > 0.0 ? 1.0 : -1.0;
}

LossReport conf_loss(const Tensor4& z, const Tensor4& c, const Tensor4& target, const Tensor4& valid,
                     std::size_t epoch) {
  return reduce_loss(z, c, target, valid, epoch, [](std::size_t, double) {});
}

LossWithGrad conf_loss_with_grad(const Tensor4& z, const Tensor4& c, const Tensor4& target, const Tensor4& valid,
                                 std::size_t epoch) {
  LossWithGrad out{{}, Tensor4::like(z), Tensor4::like(c)};
  std::vector<std::pair<std::size_t, double>> pixels;
  out.report = reduce_loss(z, c, target, valid, epoch, [&](std::size_t k, double e) { pixels.emplace_back(k, e); });
  const double p = static_cast<double>(epoch);
  const double inv_n = 1.0 / static_cast<double>(out.report.valid);
  for (const auto& [k, e] : pixels) {
    out.grad_data[k] = huber_grad(z[k], target[k]) * (1.0 + c[k] / p) * inv_n;
    out.grad_conf[k] = -(1.0 - e) / p * inv_n;
  }
  return out;
}

void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
               AdamState& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient block count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state has a different block count");
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size() || state.m[b].size() != params[b].size()) {
      throw ShapeError("adam_step: block " + std::to_string(b) + " shape mismatch");
    }
  }

  const AdamConfig& cfg = state.config;
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto& m = state.m[b];
    auto& v = state.v[b];
    for (std::size_t k = 0; k < params[b].size(); ++k) {
      const double g = grads[b][k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      params[b][k] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

void adam_step(Model& model, const ModelGrads& grads, AdamState& state) {
  if (grads.banks.size() != model.banks.size()) throw ShapeError("adam_step: gradient bank count mismatch");
  std::vector<std::span<double>> params;
  std::vector<std::span<const double>> g;
  for (std::size_t b = 0; b < model.banks.size(); ++b) {
    params.emplace_back(model.banks[b].layer.weights.values());
    params.emplace_back(model.banks[b].layer.bias);
    g.emplace_back(grads.banks[b].weights.values());
    g.emplace_back(grads.banks[b].bias);
  }
  adam_step(params, g, state);
}

SignalPair predict(const Model& model, const Sample& sample) {
  ForwardTrace trace = model_forward(model, {sample.sparse_depth, sample.input_conf});
  return std::move(trace.values.back());
}

void write_history_csv(const std::vector<EpochRecord>& history, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write history: " + path.string());
  out << "epoch,mean_data_loss,mean_total_loss,mean_output_conf\n";
  out << std::setprecision(10);
  for (const auto& r : history) {
    out << r.epoch << "," << r.mean_data_loss << "," << r.mean_total_loss << "," << r.mean_output_conf << "\n";
  }
}

TrainResult train(Model& model, const std::vector<Sample>& dataset, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (cfg.output_dir) fs::create_directories(*cfg.output_dir);

  SeededRng rng(cfg.seed);
  AdamState adam;
  adam.config.lr = cfg.lr;
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

  TrainResult result;
  double best_data_loss = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    rng.shuffle(order);
    double data_sum = 0.0;
    double total_sum = 0.0;
    double conf_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size, ++batch_index) {
      const std::size_t last = std::min(order.size(), first + cfg.batch_size);
      ModelGrads batch_grads = ModelGrads::zeros_like(model);
      for (std::size_t k = first; k < last; ++k) {
        const Sample& s = dataset[order[k]];
        const ForwardTrace trace = model_forward(model, {s.sparse_depth, s.input_conf});
        const SignalPair& out = trace.output();
        const LossWithGrad loss = conf_loss_with_grad(out.data, out.conf, s.gt_depth, s.gt_valid, epoch);
        if (!std::isfinite(loss.report.total)) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << ", batch " << batch_index << " (dataset index " << order[k]
              << ")";
          throw NumericalAbort(msg.str());
        }
        batch_grads.add(model_backward(model, trace, loss.grad_data, loss.grad_conf));
        data_sum += loss.report.data_term;
        total_sum += loss.report.total;
        conf_sum += out.conf.mean();
      }
      batch_grads.scale(1.0 / static_cast<double>(last - first));
      if (!std::isfinite(batch_grads.max_abs())) {
        throw NumericalAbort("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index));
      }
      adam_step(model, batch_grads, adam);
    }

    const double n = static_cast<double>(dataset.size());
    EpochRecord rec{epoch, data_sum / n, total_sum / n, conf_sum / n,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    result.history.push_back(rec);
    if (rec.mean_data_loss < best_data_loss) {
      best_data_loss = rec.mean_data_loss;
      result.best_epoch = epoch;
      if (cfg.output_dir) save_checkpoint(model, *cfg.output_dir / "best.ncm");
    }
    if (cfg.output_dir) write_history_csv(result.history, *cfg.output_dir / "history.csv");
    if (on_epoch) on_epoch(rec);
  }
  if (cfg.output_dir) save_checkpoint(model, *cfg.output_dir / "final.ncm");
  return result;
}

GradcheckResult gradcheck_layer(const NConvLayer& layer, const ProbeConfig& probe) {
  SeededRng rng(probe.seed);
  const Shape4 in_shape{1, layer.in_ch(), probe.size, probe.size};
  const Tensor4 z = random_tensor(in_shape, rng, -1.0, 1.0);
  const Tensor4 c = random_tensor(in_shape, rng, 0.0, 1.0);
  const Shape4 out_shape{1, layer.out_ch(), probe.size, probe.size};
  const Tensor4 rz = random_tensor(out_shape, rng, -1.0, 1.0);
  const Tensor4 rc = random_tensor(out_shape, rng, -1.0, 1.0);

  auto objective = [&](const Tensor4& zi, const Tensor4& ci, const NConvLayer& l) {
    const auto out = nconv_forward(zi, ci, l);
    return dot(rz, out.z) + dot(rc, out.c);
  };
  const auto fwd = nconv_forward(z, c, layer);
  const NConvGrads g = nconv_backward(rz, rc, fwd.cache, layer);
  const double h = probe.step;

  GradcheckResult res;
  NConvLayer probe_layer = layer;
  for (std::size_t k : probe_indices(layer.weights.size(), probe.max_params)) {
    const double orig = probe_layer.weights[k];
    probe_layer.weights[k] = orig + h;
    const double up = objective(z, c, probe_layer);
    probe_layer.weights[k] = orig - h;
    const double down = objective(z, c, probe_layer);
    probe_layer.weights[k] = orig;
    record(res, g.weights[k], (up - down) / (2.0 * h), probe, "weights[" + std::to_string(k) + "]");
  }
  for (std::size_t k = 0; k < layer.bias.size(); ++k) {
    const double orig = probe_layer.bias[k];
    probe_layer.bias[k] = orig + h;
    const double up = objective(z, c, probe_layer);
    probe_layer.bias[k] = orig - h;
    const double down = objective(z, c, probe_layer);
    probe_layer.bias[k] = orig;
    record(res, g.bias[k], (up - down) / (2.0 * h), probe, "bias[" + std::to_string(k) + "]");
  }
  Tensor4 zp = z;
  Tensor4 cp = c;
  for (std::size_t k : probe_indices(z.size(), probe.max_params)) {
    zp[k] = z[k] + h;
    const double up = objective(zp, c, layer);
    zp[k] = z[k] - h;
    const double down = objective(zp, c, layer);
    zp[k] = z[k];
    record(res, g.z_prev[k], (up - down) / (2.0 * h), probe, "z_prev[" + std::to_string(k) + "]");

    cp[k] = c[k] + h;
    const double cup = objective(z, cp, layer);
    cp[k] = c[k] - h;
    const double cdown = objective(z, cp, layer);
    cp[k] = c[k];
    record(res, g.c_prev[k], (cup - cdown) / (2.0 * h), probe, "c_prev[" + std::to_string(k) + "]");
  }
  return res;
}

GradcheckResult gradcheck_model(const Model& model, const ProbeConfig& probe) {
  SeededRng rng(probe.seed);
  const Shape4 in_shape{1, 1, probe.size, probe.size};
  const SignalPair input{random_tensor(in_shape, rng, 1.0, 5.0), random_tensor(in_shape, rng, 0.0, 1.0)};
  const Tensor4 rz = random_tensor(in_shape, rng, -1.0, 1.0);
  const Tensor4 rc = random_tensor(in_shape, rng, -1.0, 1.0);

  auto objective = [&](const Model& m) {
    const ForwardTrace t = model_forward(m, input);
    return dot(rz, t.output().data) + dot(rc, t.output().conf);
  };
  const ForwardTrace trace = model_forward(model, input);
  const ModelGrads g = model_backward(model, trace, rz, rc);
  const double h = probe.step;

  // Flatten (bank, weight-or-bias, index) so max_params spreads over every bank.
  struct Slot {
    std::size_t bank;
    bool is_bias;
    std::size_t index;
  };
  std::vector<Slot> slots;
  for (std::size_t b = 0; b < model.banks.size(); ++b) {
    for (std::size_t k = 0; k < model.banks[b].layer.weights.size(); ++k) slots.push_back({b, false, k});
    for (std::size_t k = 0; k < model.banks[b].layer.bias.size(); ++k) slots.push_back({b, true, k});
  }

  GradcheckResult res;
  Model probe_model = model;
  for (std::size_t s : probe_indices(slots.size(), probe.max_params)) {
    const Slot& slot = slots[s];
    auto& layer = probe_model.banks[slot.bank].layer;
    double& param = slot.is_bias ? layer.bias[slot.index] : layer.weights[slot.index];
    const double orig = param;
    param = orig + h;
    const double up = objective(probe_model);
    param = orig - h;
    const double down = objective(probe_model);
    param = orig;
    const double analytic =
        slot.is_bias ? g.banks[slot.bank].bias[slot.index] : g.banks[slot.bank].weights[slot.index];
    record(res, analytic, (up - down) / (2.0 * h), probe,
           model.banks[slot.bank].name + (slot.is_bias ? ".bias[" : ".weights[") + std::to_string(slot.index) + "]");
  }
  return res;
}

}  // namespace nconv
