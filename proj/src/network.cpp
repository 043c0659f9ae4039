#include "nconv/network.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nconv {

namespace {

constexpr std::array<char, 4> kModelMagic{'N', 'C', 'M', '1'};
constexpr int kCheckpointVersion = 1;

constexpr std::array<std::pair<Variant, std::string_view>, 4> kVariantNames{{
    {Variant::OneScale16, "OneScale16"},
    {Variant::OneScale4, "OneScale4"},
    {Variant::HMS, "HMS"},
    {Variant::SF_STD, "SF_STD"},
}};

class GraphBuilder {
 public:
  explicit GraphBuilder(Model& model, SeededRng& rng) : model_(model), rng_(rng) {
    model_.nodes.push_back({NodeKind::Input, "input", {}, Node{}.bank, 0, 0});
  }

  std::size_t nconv_bank(std::string name, WeightShape shape) {
    model_.banks.push_back({std::move(name), BankKind::Normalized, NConvLayer::init(shape, rng_, model_.spec.epsilon)});
    return model_.banks.size() - 1;
  }

  // Unconstrained conv: uniform in +-1/sqrt(fan_in), zero bias.
  std::size_t standard_bank(std::string name, WeightShape shape) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape.in_ch * shape.taps()));
    NConvLayer layer{random_weights(shape, rng_, -bound, bound), std::vector<double>(shape.out_ch, 0.0), 0.0};
    model_.banks.push_back({std::move(name), BankKind::Standard, std::move(layer)});
    return model_.banks.size() - 1;
  }

  std::size_t add(NodeKind kind, std::string name, std::vector<std::size_t> inputs, std::size_t bank = Node{}.bank,
                  std::size_t factor = 0) {
    std::size_t level = inputs.empty() ? 0 : model_.nodes[inputs.front()].level;
    if (kind == NodeKind::Pool) ++level;
    if (kind == NodeKind::Unpool) --level;
    model_.nodes.push_back({kind, std::move(name), std::move(inputs), bank, factor, level});
    return model_.nodes.size() - 1;
  }

 private:
  Model& model_;
  SeededRng& rng_;
};

void build_single_scale(GraphBuilder& g, std::size_t width) {
  constexpr std::array<std::size_t, 6> kernels{11, 7, 5, 3, 3, 1};
  std::size_t prev = 0;
  std::size_t in_ch = 1;
  for (std::size_t l = 0; l < kernels.size(); ++l) {
    const std::size_t out_ch = l + 1 == kernels.size() ? 1 : width;
    const std::string name = "nconv" + std::to_string(l + 1);
    const auto bank = g.nconv_bank(name, {out_ch, in_ch, kernels[l], kernels[l]});
    prev = g.add(NodeKind::NConv, name, {prev}, bank);
    in_ch = out_ch;
  }
}

void build_hierarchical(Model& model, GraphBuilder& g, bool nconv_fusion) {
  const auto enc_in = g.nconv_bank("enc_in", {4, 1, 5, 5});
  const auto enc_shared = g.nconv_bank("enc_shared", {4, 4, 3, 3});
  const auto fuse = nconv_fusion ? g.nconv_bank("fuse", {4, 8, 3, 3}) : g.standard_bank("fuse_std", {4, 8, 3, 3});
  const auto merge = g.nconv_bank("merge", {1, 4, 1, 1});

  std::vector<std::size_t> encoded;
  std::size_t x = g.add(NodeKind::NConv, "enc_in@0", {0}, enc_in);
  x = g.add(NodeKind::NConv, "enc_shared@0", {x}, enc_shared);
  encoded.push_back(x);
  for (std::size_t s = 1; s < model.scales; ++s) {
    x = g.add(NodeKind::Pool, "pool@" + std::to_string(s), {x}, Node{}.bank, 2);
    x = g.add(NodeKind::NConv, "enc_shared@" + std::to_string(s), {x}, enc_shared);
    encoded.push_back(x);
  }
  const NodeKind fuse_kind = nconv_fusion ? NodeKind::NConv : NodeKind::StdConv;
  for (std::size_t s = model.scales - 1; s > 0; --s) {
    const std::string tag = "@" + std::to_string(s - 1);
    const auto up = g.add(NodeKind::Unpool, "unpool" + tag, {x}, Node{}.bank, 2);
    const auto cat = g.add(NodeKind::Concat, "concat" + tag, {encoded[s - 1], up});
    x = g.add(fuse_kind, model.banks[fuse].name + tag, {cat}, fuse);
  }
  g.add(NodeKind::NConv, "merge", {x}, merge);
}

std::size_t input_of(const Node& node, std::size_t k = 0) { return node.inputs.at(k); }

SignalPair std_conv_forward(const SignalPair& in, const NConvLayer& layer) {
  Tensor4 z = correlate2d(in.data, layer.weights);
  for (std::size_t b = 0; b < z.n(); ++b) {
    for (std::size_t o = 0; o < z.c(); ++o) {
      for (auto& v : z.plane(b, o)) v += layer.bias[o];
    }
  }
  // The standard conv defines no confidence; carry the mean of the two halves
  // of the concatenated input (fine and upsampled coarse).
  const std::size_t half = in.conf.c() / 2;
  Tensor4 c = scale(add(in.conf.slice_channels(0, half), in.conf.slice_channels(half, half)), 0.5);
  return {std::move(z), std::move(c)};
}

void accumulate(Tensor4& dst, const Tensor4& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}

}  // namespace

std::string_view variant_name(Variant v) {
  for (const auto& [variant, name] : kVariantNames) {
    if (variant == v) return name;
  }
  throw std::invalid_argument("unknown variant");
}

Variant parse_variant(std::string_view name) {
  for (const auto& [variant, n] : kVariantNames) {
    if (n == name) return variant;
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected OneScale16, OneScale4, HMS or SF_STD)");
}

void to_json(nlohmann::json& j, const ModelSpec& spec) {
  j = nlohmann::json{{"variant", variant_name(spec.variant)}, {"epsilon", spec.epsilon}, {"seed", spec.seed}};
}

void from_json(const nlohmann::json& j, ModelSpec& spec) {
  spec.variant = parse_variant(j.at("variant").get<std::string>());
  spec.epsilon = j.at("epsilon").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
}

std::string_view node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::Input: return "input";
    case NodeKind::NConv: return "nconv";
    case NodeKind::StdConv: return "conv";
    case NodeKind::Pool: return "conf-maxpool";
    case NodeKind::Unpool: return "conf-upsample";
    case NodeKind::Concat: return "concat";
  }
  return "?";
}

std::size_t Model::spatial_multiple() const { return std::size_t{1} << (scales - 1); }

std::string Model::manifest() const {
  std::ostringstream os;
  os << "model " << variant_name(spec.variant) << " (epsilon " << spec.epsilon << ", seed " << spec.seed << ", "
     << scales << (scales == 1 ? " scale" : " scales") << ")\n";
  os << "nodes:\n";
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    os << "  [" << i << "] " << node_kind_name(n.kind) << " " << n.name;
    if (!n.inputs.empty()) {
      os << " <-";
      for (auto in : n.inputs) os << " " << in;
    }
    if (n.bank != Node{}.bank) os << " bank=" << banks[n.bank].name;
    if (n.factor != 0) os << " x" << n.factor;
    os << "\n";
  }
  os << "banks:\n";
  for (const auto& b : banks) {
    const auto& s = b.layer.weights.shape();
    os << "  " << b.name << " " << (b.kind == BankKind::Normalized ? "nconv" : "conv") << " " << s.kh << "x" << s.kw
       << " " << s.in_ch << "->" << s.out_ch << " weights=" << b.layer.weights.size()
       << " bias=" << b.layer.bias.size() << "\n";
  }
  os << "total parameters: " << count_params(*this) << "\n";
  return os.str();
}

Model build_model(const ModelSpec& spec, std::size_t scales) {
  if (!(spec.epsilon >= 0.0)) throw std::invalid_argument("build_model: epsilon must be >= 0");
  Model model;
  model.spec = spec;
  SeededRng rng(spec.seed);
  GraphBuilder g(model, rng);
  switch (spec.variant) {
    case Variant::OneScale16:
      build_single_scale(g, 16);
      break;
    case Variant::OneScale4:
      build_single_scale(g, 4);
      break;
    case Variant::HMS:
    case Variant::SF_STD:
      if (scales < 2 || scales > 3) throw std::invalid_argument("build_model: multi-scale variants support 2 or 3 scales");
      model.scales = scales;
      build_hierarchical(model, g, spec.variant == Variant::HMS);
      break;
    default:
      throw std::invalid_argument("build_model: unknown variant");
  }
  return model;
}

std::size_t count_params(const Model& model) {
  std::size_t total = 0;
  for (const auto& b : model.banks) total += b.layer.param_count();
  return total;
}

PoolOutput conf_maxpool(const Tensor4& z, const Tensor4& c, std::size_t factor) {
  if (factor < 2) throw ShapeError("conf_maxpool: factor must be >= 2");
  if (z.shape() != c.shape()) throw ShapeError("conf_maxpool: data and confidence shapes differ");
  if (z.h() % factor != 0 || z.w() % factor != 0) {
    throw ShapeError("conf_maxpool: spatial dims " + std::to_string(z.h()) + "x" + std::to_string(z.w()) +
                     " not divisible by " + std::to_string(factor));
  }
  const Shape4 ps{z.n(), z.c(), z.h() / factor, z.w() / factor};
  PoolOutput out{{Tensor4(ps), Tensor4(ps)}, {factor, ps, std::vector<std::uint32_t>(ps.numel())}};
  const double jacobian = static_cast<double>(factor * factor);
  for (std::size_t b = 0; b < ps.n; ++b) {
    for (std::size_t ch = 0; ch < ps.c; ++ch) {
      for (std::size_t i = 0; i < ps.h; ++i) {
        for (std::size_t j = 0; j < ps.w; ++j) {
          std::size_t best = 0;
          double best_c = c.at(b, ch, i * factor, j * factor);
          for (std::size_t k = 1; k < factor * factor; ++k) {
            const double v = c.at(b, ch, i * factor + k / factor, j * factor + k % factor);
            if (v > best_c) {
              best_c = v;
              best = k;
            }
          }
          const std::size_t flat = out.pooled.data.index(b, ch, i, j);
          out.record.offsets[flat] = static_cast<std::uint32_t>(best);
          out.pooled.data[flat] = z.at(b, ch, i * factor + best / factor, j * factor + best % factor);
          out.pooled.conf[flat] = best_c / jacobian;
        }
      }
    }
  }
  return out;
}

SignalPair conf_unpool_upsample(const Tensor4& z, const Tensor4& c, std::size_t factor) {
  if (factor < 2) throw ShapeError("conf_unpool_upsample: factor must be >= 2");
  if (z.shape() != c.shape()) throw ShapeError("conf_unpool_upsample: data and confidence shapes differ");
  SignalPair out{upsample_nearest(z, factor), upsample_nearest(c, factor)};
  const double jacobian = static_cast<double>(factor * factor);
  for (auto& v : out.conf.values()) v = std::min(1.0, v * jacobian);
  return out;
}

ForwardTrace model_forward(const Model& model, const SignalPair& input) {
  if (input.data.shape() != input.conf.shape()) throw ShapeError("model_forward: data and confidence shapes differ");
  if (input.data.c() != 1) throw ShapeError("model_forward: input must be single channel");
  const std::size_t mult = model.spatial_multiple();
  if (input.data.h() % mult != 0 || input.data.w() % mult != 0) {
    throw ShapeError("model_forward: spatial dims " + std::to_string(input.data.h()) + "x" +
                     std::to_string(input.data.w()) + " must be multiples of " + std::to_string(mult) + " for " +
                     std::string(variant_name(model.spec.variant)));
  }
  for (double v : input.conf.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("model_forward: input confidence must lie in [0, 1]");
  }

  ForwardTrace trace;
  trace.values.reserve(model.nodes.size());
  trace.caches.resize(model.nodes.size());
  trace.records.resize(model.nodes.size());
  for (std::size_t i = 0; i < model.nodes.size(); ++i) {
    const Node& node = model.nodes[i];
    switch (node.kind) {
      case NodeKind::Input:
        trace.values.push_back(input);
        break;
      case NodeKind::NConv: {
        const SignalPair& in = trace.values[input_of(node)];
        auto out = nconv_forward(in.data, in.conf, model.banks[node.bank].layer);
        trace.values.push_back({std::move(out.z), std::move(out.c)});
        trace.caches[i] = std::move(out.cache);
        break;
      }
      case NodeKind::StdConv:
        trace.values.push_back(std_conv_forward(trace.values[input_of(node)], model.banks[node.bank].layer));
        break;
      case NodeKind::Pool: {
        const SignalPair& in = trace.values[input_of(node)];
        auto out = conf_maxpool(in.data, in.conf, node.factor);
        trace.values.push_back(std::move(out.pooled));
        trace.records[i] = std::move(out.record);
        break;
      }
      case NodeKind::Unpool: {
        const SignalPair& in = trace.values[input_of(node)];
        trace.values.push_back(conf_unpool_upsample(in.data, in.conf, node.factor));
        break;
      }
      case NodeKind::Concat: {
        const SignalPair& a = trace.values[input_of(node, 0)];
        const SignalPair& b = trace.values[input_of(node, 1)];
        trace.values.push_back({concat_channels(a.data, b.data), concat_channels(a.conf, b.conf)});
        break;
      }
    }
  }
  return trace;
}

ModelGrads ModelGrads::zeros_like(const Model& model) {
  ModelGrads g;
  g.banks.reserve(model.banks.size());
  for (const auto& b : model.banks) {
    g.banks.push_back({WeightBank(b.layer.weights.shape()), std::vector<double>(b.layer.bias.size(), 0.0)});
  }
  return g;
}

void ModelGrads::add(const ModelGrads& other) {
  if (other.banks.size() != banks.size()) throw ShapeError("ModelGrads::add: bank count mismatch");
  for (std::size_t i = 0; i < banks.size(); ++i) {
    auto dst = banks[i].weights.values();
    auto src = other.banks[i].weights.values();
    if (dst.size() != src.size()) throw ShapeError("ModelGrads::add: bank shape mismatch");
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    for (std::size_t k = 0; k < banks[i].bias.size(); ++k) banks[i].bias[k] += other.banks[i].bias[k];
  }
}

void ModelGrads::scale(double k) {
  for (auto& b : banks) {
    for (auto& v : b.weights.values()) v *= k;
    for (auto& v : b.bias) v *= k;
  }
}

double ModelGrads::max_abs() const {
  double m = 0.0;
  for (const auto& b : banks) {
    for (double v : b.weights.values()) m = std::max(m, std::abs(v));
    for (double v : b.bias) m = std::max(m, std::abs(v));
  }
  return m;
}

ModelGrads model_backward(const Model& model, const ForwardTrace& trace, const Tensor4& grad_data,
                          const Tensor4& grad_conf) {
  if (trace.values.size() != model.nodes.size()) {
    throw ShapeError("model_backward: trace does not belong to this model");
  }
  const SignalPair& out = trace.output();
  if (grad_data.shape() != out.data.shape() || grad_conf.shape() != out.conf.shape()) {
    throw ShapeError("model_backward: output gradient shape mismatch");
  }

  ModelGrads grads = ModelGrads::zeros_like(model);
  std::vector<std::optional<SignalPair>> node_grads(model.nodes.size());
  node_grads.back() = SignalPair{grad_data, grad_conf};

  auto push = [&](std::size_t node, Tensor4 gz, Tensor4 gc) {
    auto& slot = node_grads[node];
    if (!slot) {
      slot = SignalPair{std::move(gz), std::move(gc)};
    } else {
      accumulate(slot->data, gz);
      accumulate(slot->conf, gc);
    }
  };

  for (std::size_t i = model.nodes.size(); i-- > 1;) {
    if (!node_grads[i]) continue;
    const Node& node = model.nodes[i];
    const SignalPair g = std::move(*node_grads[i]);
    node_grads[i].reset();
    switch (node.kind) {
      case NodeKind::Input:
        break;
      case NodeKind::NConv: {
        if (!trace.caches[i]) throw std::logic_error("model_backward: missing layer cache");
        auto lg = nconv_backward(g.data, g.conf, *trace.caches[i], model.banks[node.bank].layer);
        auto& bg = grads.banks[node.bank];
        for (std::size_t k = 0; k < bg.weights.size(); ++k) bg.weights[k] += lg.weights[k];
        for (std::size_t k = 0; k < bg.bias.size(); ++k) bg.bias[k] += lg.bias[k];
        push(input_of(node), std::move(lg.z_prev), std::move(lg.c_prev));
        break;
      }
      case NodeKind::StdConv: {
        const SignalPair& in = trace.values[input_of(node)];
        const NConvLayer& layer = model.banks[node.bank].layer;
        auto& bg = grads.banks[node.bank];
        correlate2d_accumulate_weight_grad(in.data, g.data, bg.weights);
        for (std::size_t b = 0; b < g.data.n(); ++b) {
          for (std::size_t o = 0; o < g.data.c(); ++o) {
            for (double v : g.data.plane(b, o)) bg.bias[o] += v;
          }
        }
        Tensor4 gz = correlate2d_input_grad(g.data, layer.weights, in.data.c());
        const Tensor4 half = scale(g.conf, 0.5);
        push(input_of(node), std::move(gz), concat_channels(half, half));
        break;
      }
      case NodeKind::Pool: {
        const SignalPair& in = trace.values[input_of(node)];
        const PoolRecord& rec = *trace.records[i];
        Tensor4 gz = Tensor4::like(in.data);
        Tensor4 gc = Tensor4::like(in.conf);
        const double jacobian = static_cast<double>(rec.factor * rec.factor);
        const Shape4& ps = rec.pooled_shape;
        for (std::size_t b = 0; b < ps.n; ++b) {
          for (std::size_t ch = 0; ch < ps.c; ++ch) {
            for (std::size_t y = 0; y < ps.h; ++y) {
              for (std::size_t x = 0; x < ps.w; ++x) {
                const std::size_t flat = g.data.index(b, ch, y, x);
                const auto [di, dj] = rec.cell(flat);
                const std::size_t src = gz.index(b, ch, y * rec.factor + di, x * rec.factor + dj);
                gz[src] += g.data[flat];
                gc[src] += g.conf[flat] / jacobian;
              }
            }
          }
        }
        push(input_of(node), std::move(gz), std::move(gc));
        break;
      }
      case NodeKind::Unpool: {
        const SignalPair& in = trace.values[input_of(node)];
        const std::size_t s = node.factor;
        const double jacobian = static_cast<double>(s * s);
        Tensor4 gz = Tensor4::like(in.data);
        Tensor4 gc = Tensor4::like(in.conf);
        for (std::size_t b = 0; b < g.data.n(); ++b) {
          for (std::size_t ch = 0; ch < g.data.c(); ++ch) {
            for (std::size_t y = 0; y < g.data.h(); ++y) {
              for (std::size_t x = 0; x < g.data.w(); ++x) {
                const std::size_t src = gz.index(b, ch, y / s, x / s);
                const std::size_t flat = g.data.index(b, ch, y, x);
                gz[src] += g.data[flat];
                // Past the clamp the output no longer depends on the input.
                if (in.conf[src] * jacobian <= 1.0) gc[src] += g.conf[flat] * jacobian;
              }
            }
          }
        }
        push(input_of(node), std::move(gz), std::move(gc));
        break;
      }
      case NodeKind::Concat: {
        const std::size_t ca = trace.values[input_of(node, 0)].data.c();
        const std::size_t cb = trace.values[input_of(node, 1)].data.c();
        push(input_of(node, 0), g.data.slice_channels(0, ca), g.conf.slice_channels(0, ca));
        push(input_of(node, 1), g.data.slice_channels(ca, cb), g.conf.slice_channels(ca, cb));
        break;
      }
    }
  }
  if (node_grads[0]) {
    grads.input = std::move(*node_grads[0]);
  } else {
    grads.input = {Tensor4::like(trace.values[0].data), Tensor4::like(trace.values[0].conf)};
  }
  return grads;
}

void save_checkpoint(const Model& model, std::ostream& out) {
  nlohmann::json header;
  header["format"] = "NCM1";
  header["version"] = kCheckpointVersion;
  header["spec"] = model.spec;
  header["scales"] = model.scales;
  header["banks"] = nlohmann::json::array();
  for (const auto& b : model.banks) {
    const auto& s = b.layer.weights.shape();
    header["banks"].push_back({{"name", b.name},
                               {"kind", b.kind == BankKind::Normalized ? "nconv" : "conv"},
                               {"shape", {s.out_ch, s.in_ch, s.kh, s.kw}},
                               {"epsilon", b.layer.epsilon}});
  }
  const std::string text = header.dump();
  out.write(kModelMagic.data(), 4);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xFFu));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& b : model.banks) {
    write_block(out, b.layer.weights);
    write_block(out, Tensor4({b.layer.bias.size(), 1, 1, 1}, b.layer.bias));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed");
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  save_checkpoint(model, out);
}

Model load_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kModelMagic) throw std::runtime_error("checkpoint: bad magic (expected NCM1)");
  std::array<unsigned char, 4> lb{};
  in.read(reinterpret_cast<char*>(lb.data()), 4);
  if (!in) throw std::runtime_error("checkpoint: truncated header length");
  const std::uint32_t len = lb[0] | (lb[1] << 8) | (lb[2] << 16) | (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw std::runtime_error("checkpoint: truncated JSON header");

  const auto header = nlohmann::json::parse(text);
  if (header.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + header.at("version").dump());
  }
  Model model = build_model(header.at("spec").get<ModelSpec>(), header.at("scales").get<std::size_t>());
  const auto& banks = header.at("banks");
  if (banks.size() != model.banks.size()) throw std::runtime_error("checkpoint: bank manifest does not match variant");
  for (std::size_t i = 0; i < model.banks.size(); ++i) {
    auto& bank = model.banks[i];
    if (banks[i].at("name").get<std::string>() != bank.name) {
      throw std::runtime_error("checkpoint: bank " + std::to_string(i) + " is '" +
                               banks[i].at("name").get<std::string>() + "', expected '" + bank.name + "'");
    }
    WeightBank w = read_weight_block(in);
    Tensor4 bias = read_tensor_block(in);
    if (w.shape() != bank.layer.weights.shape() || bias.size() != bank.layer.bias.size()) {
      throw std::runtime_error("checkpoint: tensor shape mismatch in bank '" + bank.name + "'");
    }
    bank.layer.weights = std::move(w);
    bank.layer.bias.assign(bias.values().begin(), bias.values().end());
    bank.layer.epsilon = banks[i].at("epsilon").get<double>();
  }
  return model;
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return load_checkpoint(in);
}

}  // namespace nconv
