#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

namespace fixlab {

using TokenId = std::int32_t;

enum class ResidualVariant { parallel, sequential };
enum class NormKind { layernorm, rmsnorm };
enum class PositionalKind { learned, rotary };
enum class MlpKind { gelu, swiglu };
enum class BosPolicy { auto_prepend, none };

/// Frequency rescaling used by Llama-3.x checkpoints.
struct RopeScaling {
  double factor = 1.0;
  double low_freq_factor = 1.0;
  double high_freq_factor = 1.0;
  int original_max_position = 8192;
};

struct ModelConfig {
  int n_layers = 1;
  int n_heads = 1;
  int n_kv_heads = 1;
  int d_model = 1;
  int d_head = 1;
  int d_mlp = 1;
  int vocab_size = 1;
  int max_seq = 1;
  ResidualVariant residual = ResidualVariant::sequential;
  NormKind norm = NormKind::layernorm;
  PositionalKind positional = PositionalKind::rotary;
  double rotary_fraction = 1.0;
  double rotary_base = 10000.0;
  std::optional<RopeScaling> rope_scaling;
  MlpKind mlp = MlpKind::gelu;
  double norm_eps = 1e-5;
  BosPolicy bos_policy = BosPolicy::none;
  std::optional<TokenId> bos_token_id;

  /// Throws fixlab::Error naming the first violated invariant.
  void validate() const;

  int rotary_dims() const;
  int kv_group() const { return n_heads / n_kv_heads; }
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

std::string to_string(ResidualVariant v);
std::string to_string(NormKind v);
std::string to_string(MlpKind v);
std::string to_string(BosPolicy v);

}  // namespace fixlab
