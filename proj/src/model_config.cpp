#include "fixlab/model_config.hpp"

#include <cmath>

#include "fixlab/error.hpp"

namespace fixlab {

using nlohmann::json;

void ModelConfig::validate() const {
  require(n_layers >= 1 && n_heads >= 1 && n_kv_heads >= 1 && d_model >= 1 && d_head >= 1 &&
              d_mlp >= 1 && vocab_size >= 1 && max_seq >= 1,
          "model config: all counts must be >= 1");
  require(d_model == n_heads * d_head, "model config: d_model must equal n_heads * d_head");
  require(n_heads % n_kv_heads == 0, "model config: n_heads must be divisible by n_kv_heads");
  require(rotary_fraction > 0.0 && rotary_fraction <= 1.0,
          "model config: rotary_fraction must lie in (0, 1]");
  require(norm_eps > 0.0, "model config: norm eps must be positive");
  require(rotary_base > 0.0, "model config: rotary base must be positive");
  if (positional == PositionalKind::rotary) {
    require(rotary_dims() >= 2, "model config: rotary dims must be >= 2");
  }
  if (bos_token_id) {
    require(*bos_token_id >= 0 && *bos_token_id < vocab_size, "model config: bos_token_id out of range");
  }
}

int ModelConfig::rotary_dims() const {
  int dims = static_cast<int>(std::lround(rotary_fraction * d_head));
  return dims - dims % 2;
}

std::string to_string(ResidualVariant v) { return v == ResidualVariant::parallel ? "parallel" : "sequential"; }
std::string to_string(NormKind v) { return v == NormKind::layernorm ? "layernorm" : "rmsnorm"; }
std::string to_string(MlpKind v) { return v == MlpKind::gelu ? "gelu" : "swiglu"; }
std::string to_string(BosPolicy v) { return v == BosPolicy::auto_prepend ? "auto_prepend" : "none"; }

json to_json(const ModelConfig& c) {
  json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["n_kv_heads"] = c.n_kv_heads;
  j["d_model"] = c.d_model;
  j["d_head"] = c.d_head;
  j["d_mlp"] = c.d_mlp;
  j["vocab_size"] = c.vocab_size;
  j["max_seq"] = c.max_seq;
  j["residual_variant"] = to_string(c.residual);
  j["norm_kind"] = to_string(c.norm);
  if (c.positional == PositionalKind::learned) {
    j["positional"] = "learned";
  } else {
    j["positional"] = "rotary";
    j["rotary_fraction"] = c.rotary_fraction;
    j["rotary_base"] = c.rotary_base;
    if (c.rope_scaling) {
      j["rope_scaling"] = {{"factor", c.rope_scaling->factor},
                           {"low_freq_factor", c.rope_scaling->low_freq_factor},
                           {"high_freq_factor", c.rope_scaling->high_freq_factor},
                           {"original_max_position", c.rope_scaling->original_max_position}};
    }
  }
  j["mlp_kind"] = to_string(c.mlp);
  j["layernorm_eps"] = c.norm_eps;
  j["bos_policy"] = to_string(c.bos_policy);
  if (c.bos_token_id) j["bos_token_id"] = *c.bos_token_id;
  return j;
}

namespace {

template <class T>
T enum_field(const json& j, const char* key, std::initializer_list<std::pair<const char*, T>> options) {
  require(j.contains(key), std::string("model config: missing field '") + key + "'");
  const auto value = j.at(key).get<std::string>();
  for (const auto& [name, v] : options) {
    if (value == name) return v;
  }
  fail(std::string("model config: bad value '") + value + "' for '" + key + "'");
}

int count_field(const json& j, const char* key) {
  require(j.contains(key), std::string("model config: missing field '") + key + "'");
  return j.at(key).get<int>();
}

}  // namespace

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = count_field(j, "n_layers");
    c.n_heads = count_field(j, "n_heads");
    c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
    c.d_model = count_field(j, "d_model");
    c.d_head = count_field(j, "d_head");
    c.d_mlp = count_field(j, "d_mlp");
    c.vocab_size = count_field(j, "vocab_size");
    c.max_seq = count_field(j, "max_seq");
    c.residual = enum_field<ResidualVariant>(
        j, "residual_variant", {{"parallel", ResidualVariant::parallel}, {"sequential", ResidualVariant::sequential}});
    c.norm = enum_field<NormKind>(j, "norm_kind", {{"layernorm", NormKind::layernorm}, {"rmsnorm", NormKind::rmsnorm}});
    c.positional = enum_field<PositionalKind>(
        j, "positional", {{"learned", PositionalKind::learned}, {"rotary", PositionalKind::rotary}});
    c.rotary_fraction = j.value("rotary_fraction", 1.0);
    c.rotary_base = j.value("rotary_base", 10000.0);
    if (j.contains("rope_scaling") && !j["rope_scaling"].is_null()) {
      const auto& s = j["rope_scaling"];
      c.rope_scaling = RopeScaling{s.value("factor", 1.0), s.value("low_freq_factor", 1.0),
                                   s.value("high_freq_factor", 1.0), s.value("original_max_position", 8192)};
    }
    c.mlp = enum_field<MlpKind>(j, "mlp_kind", {{"gelu", MlpKind::gelu}, {"swiglu", MlpKind::swiglu}});
    c.norm_eps = j.value("layernorm_eps", 1e-5);
    c.bos_policy = enum_field<BosPolicy>(
        j, "bos_policy", {{"auto_prepend", BosPolicy::auto_prepend}, {"none", BosPolicy::none}});
    if (j.contains("bos_token_id") && !j["bos_token_id"].is_null()) c.bos_token_id = j["bos_token_id"].get<TokenId>();
  } catch (const json::exception& e) {
    fail(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace fixlab
