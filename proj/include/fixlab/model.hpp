#pragma once

#include <compare>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fixlab/weights.hpp"

namespace fixlab {

enum class HookKind { resid_pre, attn_out, mlp_out, head_out };

/// A named point in the forward pass. `head` is set iff kind == head_out.
struct HookSite {
  HookKind kind = HookKind::attn_out;
  int layer = 0;
  std::optional<int> head;

  static HookSite resid_pre(int layer) { return {HookKind::resid_pre, layer, std::nullopt}; }
  static HookSite attn_out(int layer) { return {HookKind::attn_out, layer, std::nullopt}; }
  static HookSite mlp_out(int layer) { return {HookKind::mlp_out, layer, std::nullopt}; }
  static HookSite head_out(int layer, int head) { return {HookKind::head_out, layer, head}; }

  auto operator<=>(const HookSite&) const = default;
};

std::string to_string(HookKind kind);
HookKind parse_hook_kind(const std::string& text);
/// "attn_out:7", "mlp_out:3", "resid_pre:0", "head_out:10.5".
std::string to_string(const HookSite& site);
HookSite parse_site(const std::string& text);
void validate_site(const ModelConfig& config, const HookSite& site);

/// Every site of one kind (all heads for head_out).
std::vector<HookSite> all_sites(const ModelConfig& config, HookKind kind);

/// Final-norm statistics of one residual vector: y = (x - mean) * inv_scale * w + b.
/// For rmsnorm `mean` is zero.
struct NormStats {
  float mean = 0.0f;
  float inv_scale = 1.0f;
};

/// Activations captured during one forward pass, as they entered the residual
/// stream (after any patch at the same site). Read-only once returned.
class ActivationCache {
 public:
  int seq_len() const { return seq_len_; }
  int d_model() const { return d_model_; }
  bool contains(const HookSite& site) const { return entries_.count(site) != 0; }
  std::span<const float> at(const HookSite& site, int position) const;
  /// Number of (site, position) entries.
  std::size_t size() const;
  std::vector<HookSite> sites() const;

  /// Last-position residual before layer `index` (index == n_layers is the
  /// final residual). Empty unless lens capture was requested.
  std::span<const float> lens_residual(int index) const;
  int lens_depth() const { return static_cast<int>(lens_.size()); }
  const NormStats& final_norm_stats() const { return final_stats_; }

 private:
  friend class ForwardPass;
  int seq_len_ = 0;
  int d_model_ = 0;
  std::map<HookSite, std::vector<float>> entries_;
  std::vector<std::vector<float>> lens_;
  NormStats final_stats_;
};

/// Marks "the final token position" in patch targets.
inline constexpr int kLastPosition = -1;

struct PatchEntry {
  HookSite site;
  int position = kLastPosition;
  std::vector<float> value;
};

/// Injection targets. For head_out the value is the head's d_model
/// contribution (already projected through its slice of the output matrix).
class PatchSpec {
 public:
  /// Throws on a duplicate (site, position) or a vector of the wrong size
  /// once validated against a model.
  void add(const HookSite& site, int position, std::vector<float> value);
  const std::vector<PatchEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<PatchEntry> entries_;
  std::set<std::pair<HookSite, int>> keys_;
};

/// Builds a patch spec that copies `sites` at `positions` out of `source`.
PatchSpec patch_from_cache(const ActivationCache& source, std::span<const HookSite> sites,
                           std::span<const int> source_positions, std::span<const int> target_positions);

struct ForwardRequest {
  std::span<const TokenId> tokens;
  std::span<const HookSite> capture;
  const PatchSpec* patches = nullptr;
  bool capture_lens = false;
};

struct ForwardOutput {
  std::vector<float> logits;
  ActivationCache cache;
};

/// One forward pass with optional capture and injection.
ForwardOutput run_forward(const WeightBundle& weights, const ForwardRequest& request);

/// Final-position logits.
std::vector<float> forward_logits(const WeightBundle& weights, std::span<const TokenId> tokens);

/// Logits plus activations at `sites` for every position, the per-layer
/// last-position residuals and the final-norm statistics.
ForwardOutput forward_with_cache(const WeightBundle& weights, std::span<const TokenId> tokens,
                                 std::span<const HookSite> sites);

std::vector<float> forward_with_patches(const WeightBundle& weights, std::span<const TokenId> tokens,
                                        const PatchSpec& patches);

/// Applies the final norm to one residual vector using its own statistics.
std::vector<float> apply_final_norm(const WeightBundle& weights, std::span<const float> residual,
                                    NormStats* stats_out = nullptr);
/// Final norm followed by the unembedding.
std::vector<float> residual_to_logits(const WeightBundle& weights, std::span<const float> residual);

std::vector<float> softmax(std::span<const float> logits);
/// Full-vocabulary probability of one token.
double token_probability(std::span<const float> logits, TokenId token);

}  // namespace fixlab
