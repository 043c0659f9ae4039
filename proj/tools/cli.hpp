#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nconv/data.hpp"
#include "nconv/network.hpp"

namespace nconv::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kDataError = 2,
  kNumericalError = 3,
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training configuration as read from JSON. Unknown keys are rejected.
struct CliConfig {
  Variant variant = Variant::HMS;
  double epsilon = kDefaultEpsilon;
  std::uint64_t model_seed = 0;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 0.01;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> data_dir;
  std::string split = "train";
  std::optional<SynthConfig> synthetic;
};

CliConfig parse_config(const nlohmann::json& j);
/// Parse errors carry the line/column reported by the JSON parser.
CliConfig load_config(const std::filesystem::path& path);

/// Flat eval report: MetricsReport fields plus variant and parameter count.
nlohmann::json eval_report(const MetricsReport& metrics, const Model& model);

/// Entry point shared by the executable and the tests.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nconv::cli
