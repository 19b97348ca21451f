#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fixlab/model.hpp"
#include "fixlab/stats.hpp"

namespace fixlab {

inline constexpr double kRecoveryMinGap = 0.01;

struct RecoveryResult {
  double p_gp = 0.0;
  double p_ctrl = 0.0;
  double p_patched = 0.0;
  /// Unset when the observation is excluded.
  std::optional<double> recovery;
  std::optional<std::string> exclusion_reason;

  bool excluded() const { return !recovery.has_value(); }
};

/// (p_patched - p_gp) / (p_ctrl - p_gp), excluded when |p_ctrl - p_gp| < 0.01.
RecoveryResult make_recovery(double p_gp, double p_ctrl, double p_patched);

struct LensEntry {
  double p_target = 0.0;
  double p_foil = 0.0;
  bool correct = false;
};

/// Index 0 is the embedding output, index n_layers the final residual.
struct LensTrajectory {
  std::vector<LensEntry> layers;
};

LensTrajectory logit_lens(const WeightBundle& weights, std::span<const TokenId> tokens, TokenId target, TokenId foil);
/// Same, from a cache captured with lens residuals.
LensTrajectory lens_from_cache(const WeightBundle& weights, const ActivationCache& cache, TokenId target, TokenId foil);

/// Contributions to logit(target) - logit(foil) at the last position, with
/// the final-norm statistics frozen at their values in the forward pass.
struct DlaReport {
  std::vector<std::vector<double>> heads;  // [layer][head]
  std::vector<double> mlp;                 // [layer]
  double embed = 0.0;
  double norm_bias = 0.0;                  // final-norm shift projected onto the direction
  double logit_diff = 0.0;                 // model's actual final logit difference

  double total() const;
};

/// Sites a DLA needs in its cache (head_out and mlp_out for every layer).
std::vector<HookSite> dla_sites(const ModelConfig& config);

DlaReport dla(const WeightBundle& weights, const ActivationCache& cache, std::span<const float> logits, TokenId target,
              TokenId foil);
DlaReport dla(const WeightBundle& weights, std::span<const TokenId> tokens, TokenId target, TokenId foil);

/// One matched garden-path / control pair. The last `query_token_count`
/// tokens encode the shared query.
struct PairedItem {
  std::string id;
  std::uint64_t cluster = 0;
  std::vector<TokenId> gp_tokens;
  std::vector<TokenId> ctrl_tokens;
  std::size_t query_token_count = 1;
  TokenId target = 0;
};

/// Throws when the two prompts do not end in the same query tokens.
void check_same_query(const PairedItem& item);

enum class PatchPositions { last, all };

RecoveryResult paired_patch_item(const WeightBundle& weights, const PairedItem& item, std::span<const HookSite> sites,
                                 PatchPositions positions = PatchPositions::last);

/// Unpatched probabilities and last-position control activations of one item.
struct ItemBaseline {
  double p_gp = 0.0;
  double p_ctrl = 0.0;
  std::map<HookSite, std::vector<float>> ctrl_last;
};

ItemBaseline item_baseline(const WeightBundle& weights, const PairedItem& item, std::span<const HookSite> sites);

/// Patches each item with the mean control activation of all other items.
std::vector<RecoveryResult> loo_mean_patch(const WeightBundle& weights, std::span<const PairedItem> items,
                                           std::span<const HookSite> sites);

struct ComboResult {
  std::vector<int> layers;  // ascending
  std::vector<RecoveryResult> items;
  double mean_recovery = 0.0;  // over non-excluded items; NaN when none remain
  std::size_t n_excluded = 0;
};

/// Every `combo_size`-subset of layers, ranked by mean recovery (descending),
/// ties broken by the lexicographic order of the layer lists.
std::vector<ComboResult> enumerate_layer_combos(const WeightBundle& weights, std::span<const PairedItem> items,
                                                int combo_size, HookKind kind = HookKind::attn_out);

/// All `k`-subsets of {0..n-1} in lexicographic order.
std::vector<std::vector<int>> combinations(int n, int k);

struct HeadScore {
  int layer = 0;
  int head = 0;
  std::vector<RecoveryResult> items;
  double mean_recovery = 0.0;
};

struct CumulativePoint {
  int k = 0;
  std::vector<RecoveryResult> items;
  double mean_recovery = 0.0;
};

struct HeadPatchResult {
  std::vector<HeadScore> ranked;         // by individual recovery, descending
  std::vector<CumulativePoint> curve;    // k = 0..max_k, joint patch of the top k
};

HeadPatchResult cumulative_head_patch(const WeightBundle& weights, std::span<const PairedItem> items, int max_k = -1);

/// Replaces the listed heads' contributions with zero at every position.
std::vector<float> zero_ablate_heads(const WeightBundle& weights, std::span<const TokenId> tokens,
                                     std::span<const std::pair<int, int>> heads);

/// Three-pass path patch from `sender` to `receiver` (layer, head). The
/// returned recovery is the mediated fraction.
RecoveryResult path_patch(const WeightBundle& weights, const PairedItem& item, std::pair<int, int> sender,
                          std::pair<int, int> receiver);

/// Mean over non-excluded results and the excluded count.
std::pair<double, std::size_t> mean_recovery(std::span<const RecoveryResult> results);

/// Row of a combo/head recovery table.
struct RecoveryRow {
  std::string id;
  std::size_t n_items = 0;
  std::size_t n_excluded = 0;
  double mean_recovery = 0.0;
  CiResult ci;
};

RecoveryRow summarize_recovery(const std::string& id, std::span<const RecoveryResult> results,
                               std::span<const PairedItem> items, int draws = kDefaultDraws,
                               std::uint64_t stats_seed = 0);

/// CSV with columns id,n_items,n_excluded,mean_recovery,ci_lo,ci_hi.
void write_recovery_table(const std::filesystem::path& path, std::span<const RecoveryRow> rows);

std::string combo_id(std::span<const int> layers);
std::string head_id(int layer, int head);

}  // namespace fixlab
