#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "nconv/training.hpp"

namespace nconv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kTopKeys = {"variant", "epsilon",    "model_seed", "epochs",   "batch_size", "lr",
                                        "seed",    "output_dir", "data_dir",   "split",    "synthetic"};
const std::set<std::string> kSynthKeys = {"seed", "samples", "size", "density", "gt_coverage"};

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::uint64_t get_unsigned(const json& obj, const std::string& key, std::uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_unsigned()) throw ConfigError("'" + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

double get_number(const json& obj, const std::string& key, double fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) throw ConfigError("'" + key + "' must be a number");
  return v.get<double>();
}

std::string get_string(const json& obj, const std::string& key, const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) throw ConfigError("'" + key + "' must be a string");
  return v.get<std::string>();
}

SynthConfig parse_synth(const json& j) {
  reject_unknown(j, kSynthKeys, "'synthetic'");
  SynthConfig s;
  s.seed = get_unsigned(j, "seed", s.seed);
  s.samples = get_unsigned(j, "samples", s.samples);
  s.size = get_unsigned(j, "size", s.size);
  s.density = get_number(j, "density", s.density);
  s.gt_coverage = get_number(j, "gt_coverage", s.gt_coverage);
  if (s.samples == 0) throw ConfigError("'synthetic.samples' must be positive");
  if (!(s.density > 0.0 && s.density <= 1.0)) throw ConfigError("'synthetic.density' must be in (0, 1]");
  if (!(s.gt_coverage > 0.0 && s.gt_coverage <= 1.0)) throw ConfigError("'synthetic.gt_coverage' must be in (0, 1]");
  if (s.size == 0 || s.size % 4 != 0) throw ConfigError("'synthetic.size' must be a positive multiple of 4");
  return s;
}

ModelSpec spec_of(const CliConfig& cfg) { return ModelSpec{cfg.variant, cfg.epsilon, cfg.model_seed}; }

json config_to_json(const CliConfig& cfg) {
  json j = {{"variant", variant_name(cfg.variant)},
            {"epsilon", cfg.epsilon},
            {"model_seed", cfg.model_seed},
            {"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},
            {"lr", cfg.lr},
            {"seed", cfg.seed},
            {"output_dir", cfg.output_dir.string()},
            {"split", cfg.split}};
  if (cfg.data_dir) j["data_dir"] = cfg.data_dir->string();
  if (cfg.synthetic) {
    const SynthConfig& s = *cfg.synthetic;
    j["synthetic"] = {{"seed", s.seed},
                      {"samples", s.samples},
                      {"size", s.size},
                      {"density", s.density},
                      {"gt_coverage", s.gt_coverage}};
  }
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

int cmd_train(const std::string& config_path, std::ostream& out) {
  const CliConfig cfg = load_config(config_path);

  std::vector<Sample> dataset;
  if (cfg.data_dir) {
    if (!fs::is_directory(*cfg.data_dir / cfg.split)) {
      throw std::runtime_error("dataset split not found: " + (*cfg.data_dir / cfg.split).string());
    }
    dataset = read_dataset(*cfg.data_dir, cfg.split);
  } else {
    dataset = gen_synthetic(*cfg.synthetic);
  }
  if (dataset.empty()) throw std::runtime_error("dataset is empty");

  Model model = build_model(spec_of(cfg));
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.lr = cfg.lr;
  tc.seed = cfg.seed;
  tc.output_dir = cfg.output_dir;

  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / "config.json", config_to_json(cfg).dump(2) + "\n");

  out << variant_name(cfg.variant) << ": " << count_params(model) << " parameters, " << dataset.size()
      << " samples\n";
  const TrainResult result = train(model, dataset, tc, [&](const EpochRecord& r) {
    out << "epoch " << r.epoch << "  data " << std::setprecision(6) << r.mean_data_loss << "  total "
        << r.mean_total_loss << "  conf " << r.mean_output_conf << "  (" << std::setprecision(3) << r.seconds
        << " s)\n";
  });
  out << "best epoch " << result.best_epoch << "; artifacts in " << cfg.output_dir.string() << "\n";
  return kOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data, const std::string& split, const fs::path& out_path,
             std::ostream& out) {
  const Model model = load_checkpoint(checkpoint);
  if (!fs::is_directory(data / split)) throw std::runtime_error("dataset split not found: " + (data / split).string());
  const std::vector<Sample> samples = read_dataset(data, split);
  if (samples.empty()) throw std::runtime_error("dataset is empty");

  std::vector<Tensor4> preds;
  preds.reserve(samples.size());
  for (const Sample& s : samples) preds.push_back(predict(model, s).data);
  const json report = eval_report(evaluate_all(preds, samples), model);
  const std::string text = report.dump(2) + "\n";
  if (!out_path.empty()) write_text(out_path, text);
  out << text;
  return kOk;
}

int cmd_infer(const fs::path& checkpoint, const fs::path& in, const fs::path& out_depth, const fs::path& out_conf,
              std::ostream& out) {
  const Model model = load_checkpoint(checkpoint);
  const DepthImage img = load_depth_png(in);
  const ForwardTrace trace = model_forward(model, SignalPair{img.depth, img.conf});
  const SignalPair& y = trace.output();
  save_depth_png(y.data, out_depth);
  save_conf_png(y.conf, out_conf);
  out << "wrote " << out_depth.string() << " and " << out_conf.string() << "\n";
  return kOk;
}

int cmd_gradcheck(const ModelSpec& spec, const ProbeConfig& probe, double tolerance, std::ostream& out) {
  const Model model = build_model(spec);
  const GradcheckResult r = gradcheck_model(model, probe);
  out << "worst relative error " << std::scientific << std::setprecision(3) << r.max_rel_error << " at "
      << r.worst_location << " (" << r.probed << " parameters probed)\n"
      << std::defaultfloat;
  if (r.max_rel_error > tolerance) {
    out << "FAIL: above tolerance " << tolerance << "\n";
    return kNumericalError;
  }
  out << "ok\n";
  return kOk;
}

int cmd_synth(const SynthConfig& cfg, const fs::path& root, const std::string& split, std::ostream& out) {
  const std::vector<Sample> samples = gen_synthetic(cfg);
  write_dataset(samples, root, split);
  out << "wrote " << samples.size() << " samples to " << (root / split).string() << "\n";
  return kOk;
}

}  // namespace

CliConfig parse_config(const json& j) {
  reject_unknown(j, kTopKeys, "config");
  CliConfig cfg;
  try {
    cfg.variant = parse_variant(get_string(j, "variant", std::string(variant_name(cfg.variant))));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  cfg.epsilon = get_number(j, "epsilon", cfg.epsilon);
  cfg.model_seed = get_unsigned(j, "model_seed", cfg.model_seed);
  cfg.epochs = get_unsigned(j, "epochs", cfg.epochs);
  cfg.batch_size = get_unsigned(j, "batch_size", cfg.batch_size);
  cfg.lr = get_number(j, "lr", cfg.lr);
  cfg.seed = get_unsigned(j, "seed", cfg.seed);
  cfg.split = get_string(j, "split", cfg.split);

  if (!(cfg.epsilon >= 0.0)) throw ConfigError("'epsilon' must be non-negative");
  if (cfg.epochs == 0) throw ConfigError("'epochs' must be positive");
  if (cfg.batch_size == 0) throw ConfigError("'batch_size' must be positive");
  if (!(cfg.lr > 0.0)) throw ConfigError("'lr' must be positive");

  if (!j.contains("output_dir")) throw ConfigError("missing required key 'output_dir'");
  cfg.output_dir = get_string(j, "output_dir", "");
  if (cfg.output_dir.empty()) throw ConfigError("'output_dir' must not be empty");

  if (j.contains("data_dir")) cfg.data_dir = get_string(j, "data_dir", "");
  if (j.contains("synthetic")) cfg.synthetic = parse_synth(j.at("synthetic"));
  if (cfg.data_dir.has_value() == cfg.synthetic.has_value()) {
    throw ConfigError("exactly one of 'data_dir' and 'synthetic' must be given");
  }
  return cfg;
}

CliConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json eval_report(const MetricsReport& metrics, const Model& model) {
  json j = metrics;
  j["report_version"] = 1;
  j["variant"] = variant_name(model.spec.variant);
  j["params"] = count_params(model);
  return j;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Normalized-convolution depth completion", "nconv"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", config_path, "Path to the JSON training config")->required();

  std::string checkpoint, data_root, split = "test", report_path;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint (.ncm)")->required();
  eval_cmd->add_option("--data", data_root, "Dataset root directory")->required();
  eval_cmd->add_option("--split", split, "Split name under the dataset root")->capture_default_str();
  eval_cmd->add_option("--out", report_path, "Write the JSON report here");

  std::string in_png, out_depth, out_conf;
  auto* infer_cmd = app.add_subcommand("infer", "Densify one depth PNG");
  infer_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint (.ncm)")->required();
  infer_cmd->add_option("--in", in_png, "Sparse 16-bit depth PNG")->required();
  infer_cmd->add_option("--out-depth", out_depth, "Dense 16-bit depth PNG output")->required();
  infer_cmd->add_option("--out-conf", out_conf, "8-bit confidence PNG output")->required();

  std::string variant = "HMS";
  ModelSpec spec;
  ProbeConfig probe;
  double tolerance = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of model gradients");
  grad_cmd->add_option("--variant", variant, "OneScale16, OneScale4, HMS or SF_STD")->capture_default_str();
  grad_cmd->add_option("--seed", spec.seed, "Model initialization seed")->capture_default_str();
  grad_cmd->add_option("--epsilon", spec.epsilon, "Normalization epsilon")->capture_default_str();
  grad_cmd->add_option("--probe-seed", probe.seed, "Seed of the probe input and projections")->capture_default_str();
  grad_cmd->add_option("--size", probe.size, "Probe image side")->capture_default_str();
  grad_cmd->add_option("--max-params", probe.max_params, "Probe at most this many parameters (0 = all)")
      ->capture_default_str();
  grad_cmd->add_option("--step", probe.step, "Central-difference step")->capture_default_str();
  grad_cmd->add_option("--corrupt", probe.corrupt, "Scale analytic gradients by 1+x (harness self-test)")
      ->capture_default_str();

  SynthConfig synth;
  std::string synth_root, synth_split = "train";
  auto* synth_cmd = app.add_subcommand("synth", "Write a seeded synthetic dataset");
  synth_cmd->add_option("--out", synth_root, "Dataset root directory")->required();
  synth_cmd->add_option("--split", synth_split, "Split name")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--samples", synth.samples, "Number of samples")->capture_default_str();
  synth_cmd->add_option("--size", synth.size, "Image side, multiple of 4")->capture_default_str();
  synth_cmd->add_option("--density", synth.density, "Measured-pixel probability")->capture_default_str();
  synth_cmd->add_option("--gt-coverage", synth.gt_coverage, "Valid ground-truth probability")->capture_default_str();

  std::string summary_ckpt;
  std::size_t scales = 3;
  auto* summary_cmd = app.add_subcommand("summary", "Print the layer manifest and parameter total");
  auto* variant_opt =
      summary_cmd->add_option("--variant", variant, "OneScale16, OneScale4, HMS or SF_STD")->capture_default_str();
  summary_cmd->add_option("--scales", scales, "Pyramid levels for HMS / SF_STD")->capture_default_str();
  summary_cmd->add_option("--checkpoint", summary_ckpt, "Summarize a saved model instead")->excludes(variant_opt);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, out);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint, data_root, split, report_path, out);
    if (infer_cmd->parsed()) return cmd_infer(checkpoint, in_png, out_depth, out_conf, out);
    if (grad_cmd->parsed()) {
      try {
        spec.variant = parse_variant(variant);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
      return cmd_gradcheck(spec, probe, tolerance, out);
    }
    if (synth_cmd->parsed()) {
      try {
        return cmd_synth(synth, synth_root, synth_split, out);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    if (summary_cmd->parsed()) {
      Model model;
      if (!summary_ckpt.empty()) {
        model = load_checkpoint(fs::path(summary_ckpt));
      } else {
        try {
          ModelSpec s;
          s.variant = parse_variant(variant);
          model = build_model(s, scales);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
      }
      out << model.manifest();
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericalAbort& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kNumericalError;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  }
  return kConfigError;
}

}  // namespace nconv::cli
