#include "fixlab/weights.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "fixlab/error.hpp"
#include "fixlab/rng.hpp"

namespace fixlab {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'F', 'X', 'B', '1'};
constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t offset) { return (offset + kAlign - 1) / kAlign * kAlign; }

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 2; }

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, float fill) : shape(std::move(s)) { data.assign(numel(), fill); }

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string layer_tensor(int layer, const std::string& suffix) {
  return "layers." + std::to_string(layer) + "." + suffix;
}

std::vector<TensorSpec> tensor_directory(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto q = static_cast<std::size_t>(c.n_heads * c.d_head);
  const auto kv = static_cast<std::size_t>(c.n_kv_heads * c.d_head);
  const auto m = static_cast<std::size_t>(c.d_mlp);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const bool ln = c.norm == NormKind::layernorm;

  std::vector<TensorSpec> dir;
  dir.push_back({"embed", {v, d}});
  if (c.positional == PositionalKind::learned) dir.push_back({"pos_embed", {static_cast<std::size_t>(c.max_seq), d}});
  for (int l = 0; l < c.n_layers; ++l) {
    auto t = [&](const std::string& s) { return layer_tensor(l, s); };
    dir.push_back({t("norm1.weight"), {d}});
    if (ln) dir.push_back({t("norm1.bias"), {d}});
    dir.push_back({t("norm2.weight"), {d}});
    if (ln) dir.push_back({t("norm2.bias"), {d}});
    dir.push_back({t("attn.q.weight"), {q, d}});
    dir.push_back({t("attn.q.bias"), {q}, true});
    dir.push_back({t("attn.k.weight"), {kv, d}});
    dir.push_back({t("attn.k.bias"), {kv}, true});
    dir.push_back({t("attn.v.weight"), {kv, d}});
    dir.push_back({t("attn.v.bias"), {kv}, true});
    dir.push_back({t("attn.o.weight"), {d, q}});
    dir.push_back({t("attn.o.bias"), {d}, true});
    if (c.mlp == MlpKind::gelu) {
      dir.push_back({t("mlp.in.weight"), {m, d}});
      dir.push_back({t("mlp.in.bias"), {m}, true});
      dir.push_back({t("mlp.out.weight"), {d, m}});
      dir.push_back({t("mlp.out.bias"), {d}, true});
    } else {
      dir.push_back({t("mlp.gate.weight"), {m, d}});
      dir.push_back({t("mlp.up.weight"), {m, d}});
      dir.push_back({t("mlp.down.weight"), {d, m}});
    }
  }
  dir.push_back({"final_norm.weight", {d}});
  if (ln) dir.push_back({"final_norm.bias", {d}});
  dir.push_back({"unembed", {d, v}});
  return dir;
}

const Tensor& WeightBundle::tensor(const std::string& name) const {
  auto it = tensors_.find(name);
  require(it != tensors_.end(), "weights: no tensor named '" + name + "'");
  return it->second;
}

WeightBundle WeightBundle::from_tensors(ModelConfig config, std::map<std::string, Tensor> tensors) {
  config.validate();
  const auto dir = tensor_directory(config);
  std::map<std::string, const TensorSpec*> known;
  for (const auto& spec : dir) known[spec.name] = &spec;

  for (const auto& [name, t] : tensors) {
    auto it = known.find(name);
    require(it != known.end(), "weights: unexpected tensor '" + name + "'");
    require(t.shape == it->second->shape, "weights: shape mismatch for '" + name + "': expected " +
                                              shape_str(it->second->shape) + ", got " + shape_str(t.shape));
    require(t.data.size() == t.numel(), "weights: tensor '" + name + "' has inconsistent storage");
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      require(std::isfinite(t.data[i]),
              "weights: non-finite value in '" + name + "' at index " + std::to_string(i));
    }
  }
  for (const auto& spec : dir) {
    require(spec.optional || tensors.count(spec.name), "weights: missing tensor '" + spec.name + "'");
  }

  WeightBundle w;
  w.config_ = config;
  w.tensors_ = std::move(tensors);
  w.bind();
  return w;
}

void WeightBundle::bind() {
  auto get = [&](const std::string& name) -> std::span<const float> {
    auto it = tensors_.find(name);
    return it == tensors_.end() ? std::span<const float>{} : std::span<const float>(it->second.data);
  };
  embed_ = get("embed");
  pos_embed_ = get("pos_embed");
  final_w_ = get("final_norm.weight");
  final_b_ = get("final_norm.bias");
  unembed_ = get("unembed");
  layers_.assign(static_cast<std::size_t>(config_.n_layers), {});
  for (int l = 0; l < config_.n_layers; ++l) {
    auto& L = layers_[static_cast<std::size_t>(l)];
    auto t = [&](const char* s) { return get(layer_tensor(l, s)); };
    L.norm1_w = t("norm1.weight");
    L.norm1_b = t("norm1.bias");
    L.norm2_w = t("norm2.weight");
    L.norm2_b = t("norm2.bias");
    L.q_w = t("attn.q.weight");
    L.q_b = t("attn.q.bias");
    L.k_w = t("attn.k.weight");
    L.k_b = t("attn.k.bias");
    L.v_w = t("attn.v.weight");
    L.v_b = t("attn.v.bias");
    L.o_w = t("attn.o.weight");
    L.o_b = t("attn.o.bias");
    L.in_w = t("mlp.in.weight");
    L.in_b = t("mlp.in.bias");
    L.out_w = t("mlp.out.weight");
    L.out_b = t("mlp.out.bias");
    L.gate_w = t("mlp.gate.weight");
    L.up_w = t("mlp.up.weight");
    L.down_w = t("mlp.down.weight");
  }
}

std::uint16_t float_to_half(float value) {
  const std::uint32_t f = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t sign = (f >> 16) & 0x8000u;
  const std::uint32_t abs = f & 0x7fffffffu;
  if (abs >= 0x7f800000u) {  // inf or nan
    return static_cast<std::uint16_t>(sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u));
  }
  if (abs >= 0x477ff000u) return static_cast<std::uint16_t>(sign | 0x7c00u);  // overflow
  if (abs < 0x38800000u) {                                                      // subnormal or zero
    const float magnitude = std::bit_cast<float>(abs);
    const auto m = static_cast<std::uint32_t>(std::nearbyint(magnitude * 16777216.0f));  // 2^24
    return static_cast<std::uint16_t>(sign | m);
  }
  std::uint32_t mant = abs & 0x7fffffu;
  std::uint32_t exp = (abs >> 23) - 112;
  std::uint32_t h = (exp << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // round to nearest even
  return static_cast<std::uint16_t>(sign | h);
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = (bits & 0x8000u) << 16;
  const std::uint32_t exp = (bits >> 10) & 0x1fu;
  const std::uint32_t mant = bits & 0x3ffu;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -v : v;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp + 112) << 23) | (mant << 13));
}

WeightBundle load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "weights: cannot open '" + path.string() + "'");
  const auto file_size = static_cast<std::size_t>(std::filesystem::file_size(path));

  char magic[4] = {};
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0, "weights: malformed header (bad magic)");
  unsigned char len_bytes[4] = {};
  in.read(reinterpret_cast<char*>(len_bytes), 4);
  require(in.gcount() == 4, "weights: malformed header (missing length)");
  const std::size_t header_len = len_bytes[0] | (len_bytes[1] << 8) | (len_bytes[2] << 16) |
                                 (static_cast<std::size_t>(len_bytes[3]) << 24);
  require(8 + header_len <= file_size, "weights: malformed header (length exceeds file)");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    fail(std::string("weights: malformed header JSON: ") + e.what());
  }
  require(h.is_object() && h.contains("tensors") && h["tensors"].is_array(),
          "weights: malformed header (no tensor directory)");
  ModelConfig config = config_from_json(h);

  std::map<std::string, Tensor> tensors;
  std::size_t offset = align_up(8 + header_len);
  std::vector<char> raw;
  for (const auto& entry : h["tensors"]) {
    const auto name = entry.at("name").get<std::string>();
    const auto dtype_name = entry.at("dtype").get<std::string>();
    require(dtype_name == "f32" || dtype_name == "f16", "weights: unsupported dtype '" + dtype_name + "' for '" + name + "'");
    const DType dtype = dtype_name == "f32" ? DType::f32 : DType::f16;
    require(!tensors.count(name), "weights: duplicate tensor '" + name + "'");
    Tensor t;
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const std::size_t bytes = t.numel() * dtype_size(dtype);
    require(offset + bytes <= file_size, "weights: file truncated inside tensor '" + name + "'");
    raw.resize(bytes);
    in.seekg(static_cast<std::streamoff>(offset));
    in.read(raw.data(), static_cast<std::streamsize>(bytes));
    require(static_cast<std::size_t>(in.gcount()) == bytes, "weights: file truncated inside tensor '" + name + "'");
    t.data.resize(t.numel());
    if (dtype == DType::f32) {
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 3; b >= 0; --b) u = (u << 8) | static_cast<unsigned char>(raw[i * 4 + static_cast<std::size_t>(b)]);
        t.data[i] = std::bit_cast<float>(u);
      }
    } else {
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        const auto lo = static_cast<unsigned char>(raw[i * 2]);
        const auto hi = static_cast<unsigned char>(raw[i * 2 + 1]);
        t.data[i] = half_to_float(static_cast<std::uint16_t>(lo | (hi << 8)));
      }
    }
    tensors.emplace(name, std::move(t));
    offset = align_up(offset + bytes);
  }
  return WeightBundle::from_tensors(config, std::move(tensors));
}

void save_weights(const WeightBundle& weights, const std::filesystem::path& path, DType dtype) {
  json h = to_json(weights.config());
  json dir = json::array();
  std::vector<const std::pair<const std::string, Tensor>*> order;
  // Directory order follows the canonical layout, then any remaining names.
  for (const auto& spec : tensor_directory(weights.config())) {
    auto it = weights.tensors().find(spec.name);
    if (it != weights.tensors().end()) order.push_back(&*it);
  }
  for (const auto* entry : order) {
    dir.push_back({{"name", entry->first}, {"dtype", dtype == DType::f32 ? "f32" : "f16"}, {"shape", entry->second.shape}});
  }
  h["tensors"] = dir;
  const std::string header = h.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "weights: cannot write '" + path.string() + "'");
  out.write(kMagic, 4);
  const auto len = static_cast<std::uint32_t>(header.size());
  const unsigned char len_bytes[4] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8),
                                      static_cast<unsigned char>(len >> 16), static_cast<unsigned char>(len >> 24)};
  out.write(reinterpret_cast<const char*>(len_bytes), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::size_t offset = 8 + header.size();
  std::vector<char> buf;
  for (const auto* entry : order) {
    const std::size_t aligned = align_up(offset);
    buf.assign(aligned - offset, '\0');
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto& data = entry->second.data;
    buf.resize(data.size() * dtype_size(dtype));
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (dtype == DType::f32) {
        const auto u = std::bit_cast<std::uint32_t>(data[i]);
        for (int b = 0; b < 4; ++b) buf[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xff);
      } else {
        const auto u = float_to_half(data[i]);
        buf[i * 2] = static_cast<char>(u & 0xff);
        buf[i * 2 + 1] = static_cast<char>(u >> 8);
      }
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    offset = aligned + buf.size();
  }
  require(static_cast<bool>(out), "weights: write failed for '" + path.string() + "'");
}

WeightBundle make_random_model(const ModelConfig& config, std::uint64_t seed, float scale) {
  config.validate();
  Rng rng(seed, hash_string("random-model"));
  auto normal = [&]() {
    const double u1 = 1.0 - rng.uniform();
    const double u2 = rng.uniform();
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
  };
  std::map<std::string, Tensor> tensors;
  for (const auto& spec : tensor_directory(config)) {
    Tensor t(spec.shape);
    const bool is_norm = spec.name.find("norm") != std::string::npos;
    const bool is_bias = spec.name.ends_with(".bias");
    for (auto& x : t.data) {
      if (is_norm && !is_bias) {
        x = 1.0f + 0.1f * normal();
      } else if (is_bias) {
        x = 0.1f * scale * normal();
      } else {
        x = scale * normal();
      }
    }
    tensors.emplace(spec.name, std::move(t));
  }
  return WeightBundle::from_tensors(config, std::move(tensors));
}

}  // namespace fixlab
