#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nconv/nconv_layer.hpp"
#include "nconv/tensor.hpp"

namespace nconv {

enum class Variant { OneScale16, OneScale4, HMS, SF_STD };

std::string_view variant_name(Variant v);
/// Accepts the canonical names ("OneScale16", "OneScale4", "HMS", "SF_STD").
Variant parse_variant(std::string_view name);

struct ModelSpec {
  Variant variant = Variant::HMS;
  double epsilon = kDefaultEpsilon;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

/// Data plus per-channel confidence of identical shape.
struct SignalPair {
  Tensor4 data;
  Tensor4 conf;
};

enum class NodeKind { Input, NConv, StdConv, Pool, Unpool, Concat };

std::string_view node_kind_name(NodeKind k);

enum class BankKind { Normalized, Standard };

/// A trainable filter bank. Several nodes may reference the same bank.
struct ParamBank {
  std::string name;
  BankKind kind = BankKind::Normalized;
  NConvLayer layer;  // for Standard banks the weights are used as-is and epsilon is unused
};

struct Node {
  NodeKind kind = NodeKind::Input;
  std::string name;
  std::vector<std::size_t> inputs;
  std::size_t bank = std::numeric_limits<std::size_t>::max();
  std::size_t factor = 0;  // Pool / Unpool
  std::size_t level = 0;   // pyramid level, 0 = full resolution
};

class Model {
 public:
  ModelSpec spec;
  std::size_t scales = 1;
  std::vector<ParamBank> banks;
  std::vector<Node> nodes;  // topologically ordered; node 0 is the input, the last node the output

  /// Spatial dims of the input must be multiples of this.
  std::size_t spatial_multiple() const;
  /// Human-readable node and bank listing with the parameter total.
  std::string manifest() const;
};

/// Builds one of the four variants. `scales` only applies to HMS / SF_STD (2 or 3).
Model build_model(const ModelSpec& spec, std::size_t scales = 3);

/// Trainable scalars (raw weights + biases), each shared bank counted once.
std::size_t count_params(const Model& model);

struct PoolRecord {
  std::size_t factor = 2;
  Shape4 pooled_shape;
  std::vector<std::uint32_t> offsets;  // row-major offset inside each window, one per pooled element

  std::pair<std::size_t, std::size_t> cell(std::size_t k) const { return {offsets[k] / factor, offsets[k] % factor}; }
};

struct PoolOutput {
  SignalPair pooled;
  PoolRecord record;
};

/// Per channel and non-overlapping factor x factor window: picks the cell of
/// maximum confidence (first in row-major order on ties), takes the data value
/// at that cell, and divides the confidence by factor^2.
PoolOutput conf_maxpool(const Tensor4& z, const Tensor4& c, std::size_t factor);

/// Nearest-neighbour upsampling; confidence is multiplied by factor^2 and clamped to 1.
SignalPair conf_unpool_upsample(const Tensor4& z, const Tensor4& c, std::size_t factor);

struct ForwardTrace {
  std::vector<SignalPair> values;                  // one per node
  std::vector<std::optional<LayerCache>> caches;   // NConv nodes
  std::vector<std::optional<PoolRecord>> records;  // Pool nodes

  const SignalPair& output() const { return values.back(); }
};

struct BankGrads {
  WeightBank weights;
  std::vector<double> bias;
};

struct ModelGrads {
  std::vector<BankGrads> banks;
  SignalPair input;

  static ModelGrads zeros_like(const Model& model);
  void add(const ModelGrads& other);
  void scale(double k);
  double max_abs() const;
};

/// Input must be single channel with confidence in [0, 1].
ForwardTrace model_forward(const Model& model, const SignalPair& input);

/// Gradients of every bank; banks used at several nodes accumulate all contributions.
ModelGrads model_backward(const Model& model, const ForwardTrace& trace, const Tensor4& grad_data,
                          const Tensor4& grad_conf);

/// Checkpoint: "NCM1", u32 header length, JSON header, then per bank the
/// weight block followed by the bias block (tensor-core block format).
void save_checkpoint(const Model& model, std::ostream& out);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(std::istream& in);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace nconv
