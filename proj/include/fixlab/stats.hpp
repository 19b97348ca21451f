#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fixlab {

/// One observation tagged with its resampling cluster (the seed).
struct Observation {
  std::uint64_t cluster = 0;
  double value = 0.0;
};

struct CiResult {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t n_clusters = 0;
  std::size_t n_draws = 0;
};

inline constexpr int kDefaultDraws = 5000;

/// Percentile interval for the pooled mean, resampling whole clusters with
/// replacement. Draw b is generated from (stats_seed, b) alone.
CiResult cluster_bootstrap_ci(std::span<const Observation> obs, int draws = kDefaultDraws, double level = 0.95,
                              std::uint64_t stats_seed = 0);

/// Type-7 sample quantile of sorted data.
double quantile_sorted(std::span<const double> sorted, double q);

struct WilcoxonResult {
  double statistic = 0.0;  // W+, the rank sum of positive differences
  std::size_t n = 0;       // nonzero differences
  bool exact = false;
  double z = 0.0;          // normal approximation only
  double p_two_sided = 1.0;
  double p_greater = 1.0;  // alternative: differences tend to be positive
  double p_less = 1.0;
};

/// Zero differences are dropped, ties get midranks. Exact null distribution
/// for n <= 12, tie-corrected normal approximation above.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs);

enum class Tail { negative, positive };

struct SpearmanResult {
  double rho = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  std::string method;  // "exact", "monte_carlo" or "t"
};

/// Rank correlation with a one-sided test in the direction of `tail`.
/// Exact permutation for n <= 8, Monte Carlo permutation for n <= 30,
/// Student-t approximation above. Throws when either input is constant.
SpearmanResult spearman_one_sided(std::span<const double> x, std::span<const double> y, Tail tail = Tail::negative,
                                  std::uint64_t stats_seed = 0, int mc_draws = 20000);

/// Midranks (1-based) of the values.
std::vector<double> midranks(std::span<const double> v);

std::vector<double> bonferroni(std::span<const double> p_values);

struct FoldResult {
  int fold = 0;
  std::vector<std::uint64_t> held_out;  // clusters, ascending
  std::size_t n = 0;
  double mean = 0.0;
};

/// Splits clusters into `folds` groups (sizes differ by at most one) after a
/// seeded shuffle and reports the mean over each held-out group.
std::vector<FoldResult> kfold_cv(std::span<const Observation> obs, int folds = 4, std::uint64_t stats_seed = 0);

struct CalibrationResult {
  std::vector<double> p_hat;          // content-free label probabilities
  std::vector<bool> calibrated_label; // false where p_hat is zero
  double raw_accuracy = 0.0;
  double calibrated_accuracy = 0.0;
};

/// `probs[i]` holds label probabilities for item i and `truth[i]` its label
/// index. Scores are p / p_hat; labels with p_hat == 0 keep their raw score.
/// Ties for the top score count as incorrect.
CalibrationResult contextual_calibration(const std::vector<std::vector<double>>& probs, std::span<const int> truth,
                                         std::span<const double> p_hat);

/// Index of the unique maximum, or -1 on a tie.
int strict_argmax(std::span<const double> v);

struct DosePoint {
  int k = 0;
  std::size_t n = 0;
  CiResult accuracy;
};

struct DoseResponse {
  std::vector<DosePoint> curve;
  SpearmanResult spearman;
};

struct DoseObservation {
  int k = 0;
  std::uint64_t cluster = 0;
  double accuracy_bit = 0.0;
};

/// Constant accuracy leaves rho and p NaN with the method saying why.
DoseResponse dose_response(std::span<const DoseObservation> obs, int draws = kDefaultDraws,
                           std::uint64_t stats_seed = 0);

double mean(std::span<const double> v);

}  // namespace fixlab
