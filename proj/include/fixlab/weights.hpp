#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fixlab/model_config.hpp"

namespace fixlab {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, float fill = 0.0f);
  std::size_t numel() const;
};

enum class DType { f32, f16 };

/// Views into the tensors of one block. Optional tensors (biases, the
/// layernorm shifts) are empty spans when absent.
struct LayerWeights {
  std::span<const float> norm1_w, norm1_b, norm2_w, norm2_b;
  std::span<const float> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  // gelu MLP
  std::span<const float> in_w, in_b, out_w, out_b;
  // swiglu MLP
  std::span<const float> gate_w, up_w, down_w;
};

/// One entry of the expected tensor directory for a config.
struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
  bool optional = false;
};

std::vector<TensorSpec> tensor_directory(const ModelConfig& config);
std::string layer_tensor(int layer, const std::string& suffix);

/// Immutable model parameters. Move-only: the layer views point into the
/// owned tensor storage.
class WeightBundle {
 public:
  /// Validates names, shapes and finiteness; throws fixlab::Error naming the
  /// offending tensor.
  static WeightBundle from_tensors(ModelConfig config, std::map<std::string, Tensor> tensors);

  WeightBundle(WeightBundle&&) noexcept = default;
  WeightBundle& operator=(WeightBundle&&) noexcept = default;
  WeightBundle(const WeightBundle&) = delete;
  WeightBundle& operator=(const WeightBundle&) = delete;

  const ModelConfig& config() const { return config_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& tensor(const std::string& name) const;

  const LayerWeights& layer(int i) const { return layers_[static_cast<std::size_t>(i)]; }
  std::span<const float> embed() const { return embed_; }
  std::span<const float> pos_embed() const { return pos_embed_; }
  std::span<const float> final_norm_w() const { return final_w_; }
  std::span<const float> final_norm_b() const { return final_b_; }
  /// [d_model, vocab] row-major.
  std::span<const float> unembed() const { return unembed_; }

 private:
  WeightBundle() = default;
  void bind();

  ModelConfig config_;
  std::map<std::string, Tensor> tensors_;
  std::vector<LayerWeights> layers_;
  std::span<const float> embed_, pos_embed_, final_w_, final_b_, unembed_;
};

WeightBundle load_weights(const std::filesystem::path& path);

/// Writes an FXB1 file with every tensor stored as `dtype`.
void save_weights(const WeightBundle& weights, const std::filesystem::path& path,
                  DType dtype = DType::f32);

/// Random weights with N(0, scale^2) matrices and unit norm scales. Used for
/// toy models in tests, the benchmark and the `make-toy` CLI verb.
WeightBundle make_random_model(const ModelConfig& config, std::uint64_t seed, float scale = 0.2f);

std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

}  // namespace fixlab
