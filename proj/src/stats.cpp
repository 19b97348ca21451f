#include "fixlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "fixlab/error.hpp"
#include "fixlab/rng.hpp"

namespace fixlab {

namespace {

constexpr std::uint64_t kBootstrapStream = hash_string("cluster_bootstrap");
constexpr std::uint64_t kFoldStream = hash_string("kfold");
constexpr std::uint64_t kSpearmanStream = hash_string("spearman");

struct Cluster {
  double sum = 0.0;
  std::size_t n = 0;
};

std::vector<Cluster> group(std::span<const Observation> obs, std::vector<std::uint64_t>* keys = nullptr) {
  std::map<std::uint64_t, Cluster> m;
  for (const auto& o : obs) {
    auto& c = m[o.cluster];
    c.sum += o.value;
    ++c.n;
  }
  std::vector<Cluster> out;
  for (const auto& [k, c] : m) {
    out.push_back(c);
    if (keys) keys->push_back(k);
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

double mean(std::span<const double> v) {
  require(!v.empty(), "stats: mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double quantile_sorted(std::span<const double> sorted, double q) {
  require(!sorted.empty(), "stats: quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

CiResult cluster_bootstrap_ci(std::span<const Observation> obs, int draws, double level, std::uint64_t stats_seed) {
  require(draws >= 1, "bootstrap: draws must be positive");
  require(level > 0.0 && level < 1.0, "bootstrap: level must lie in (0, 1)");
  const auto clusters = group(obs);
  if (clusters.size() < 2) fail("bootstrap: need at least 2 clusters, got " + std::to_string(clusters.size()));

  double total = 0.0;
  std::size_t count = 0;
  for (const auto& c : clusters) {
    total += c.sum;
    count += c.n;
  }
  CiResult r;
  r.point = total / static_cast<double>(count);
  r.n_clusters = clusters.size();
  r.n_draws = static_cast<std::size_t>(draws);

  std::vector<double> stat(static_cast<std::size_t>(draws));
  const auto nc = clusters.size();
#pragma omp parallel for schedule(static)
  for (int b = 0; b < draws; ++b) {
    Rng rng(stats_seed ^ kBootstrapStream, static_cast<std::uint64_t>(b));
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < nc; ++i) {
      const auto& c = clusters[rng.below(nc)];
      s += c.sum;
      n += c.n;
    }
    stat[static_cast<std::size_t>(b)] = s / static_cast<double>(n);
  }
  std::sort(stat.begin(), stat.end());
  const double alpha = (1.0 - level) / 2.0;
  // Clamped so the interval always contains the point estimate.
  r.lo = std::min(quantile_sorted(stat, alpha), r.point);
  r.hi = std::max(quantile_sorted(stat, 1.0 - alpha), r.point);
  return r;
}

std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs) {
  std::vector<double> nz;
  for (double d : diffs) {
    require(std::isfinite(d), "wilcoxon: non-finite difference");
    if (d != 0.0) nz.push_back(d);
  }
  if (nz.size() < 5) fail("wilcoxon: need at least 5 nonzero differences, got " + std::to_string(nz.size()));
  std::vector<double> mags(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) mags[i] = std::abs(nz[i]);
  const auto ranks = midranks(mags);

  WilcoxonResult r;
  r.n = nz.size();
  for (std::size_t i = 0; i < nz.size(); ++i) {
    if (nz[i] > 0) r.statistic += ranks[i];
  }
  const auto n = static_cast<double>(r.n);

  if (r.n <= 12) {
    // Doubled midranks are integers; count sign assignments by their sum.
    std::vector<int> twice(r.n);
    int total = 0;
    for (std::size_t i = 0; i < r.n; ++i) {
      twice[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
      total += twice[i];
    }
    std::vector<double> ways(static_cast<std::size_t>(total) + 1, 0.0);
    ways[0] = 1.0;
    for (int t : twice) {
      for (int s = total; s >= t; --s) ways[static_cast<std::size_t>(s)] += ways[static_cast<std::size_t>(s - t)];
    }
    const int observed = static_cast<int>(std::lround(2.0 * r.statistic));
    const double all = std::ldexp(1.0, static_cast<int>(r.n));
    double ge = 0.0, le = 0.0;
    for (int s = 0; s <= total; ++s) {
      if (s >= observed) ge += ways[static_cast<std::size_t>(s)];
      if (s <= observed) le += ways[static_cast<std::size_t>(s)];
    }
    r.exact = true;
    r.p_greater = ge / all;
    r.p_less = le / all;
  } else {
    std::map<double, int> ties;
    for (double m : mags) ++ties[m];
    double tie_term = 0.0;
    for (const auto& [v, t] : ties) tie_term += static_cast<double>(t) * t * t - t;
    const double mu = n * (n + 1) / 4.0;
    const double var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0;
    r.z = (r.statistic - mu) / std::sqrt(var);
    const boost::math::normal_distribution<double> norm;
    r.p_greater = boost::math::cdf(boost::math::complement(norm, r.z));
    r.p_less = boost::math::cdf(norm, r.z);
  }
  r.p_two_sided = std::min(1.0, 2.0 * std::min(r.p_greater, r.p_less));
  return r;
}

SpearmanResult spearman_one_sided(std::span<const double> x, std::span<const double> y, Tail tail,
                                  std::uint64_t stats_seed, int mc_draws) {
  require(x.size() == y.size(), "spearman: x and y differ in length");
  if (x.size() < 5) fail("spearman: need at least 5 pairs, got " + std::to_string(x.size()));
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double a) { return a == v.front(); });
  };
  if (constant(x) || constant(y)) fail("spearman: rho undefined for constant input");

  const auto rx = midranks(x);
  auto ry = midranks(y);
  SpearmanResult r;
  r.n = x.size();
  r.rho = std::clamp(pearson(rx, ry), -1.0, 1.0);

  // Count permutations at least as extreme in the tested direction.
  constexpr double eps = 1e-12;
  auto extreme = [&](double rho) { return tail == Tail::negative ? rho <= r.rho + eps : rho >= r.rho - eps; };

  if (r.n <= 8) {
    std::vector<std::size_t> perm(r.n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> shuffled(r.n);
    std::size_t hits = 0, total = 0;
    do {
      for (std::size_t i = 0; i < r.n; ++i) shuffled[i] = ry[perm[i]];
      hits += extreme(pearson(rx, shuffled));
      ++total;
    } while (std::next_permutation(perm.begin(), perm.end()));
    r.p = static_cast<double>(hits) / static_cast<double>(total);
    r.method = "exact";
  } else if (r.n <= 30) {
    require(mc_draws >= 1, "spearman: Monte Carlo draws must be positive");
    std::vector<int> hit(static_cast<std::size_t>(mc_draws));
#pragma omp parallel for schedule(static)
    for (int b = 0; b < mc_draws; ++b) {
      Rng rng(stats_seed ^ kSpearmanStream, static_cast<std::uint64_t>(b));
      std::vector<double> s(ry);
      rng.shuffle(std::span<double>(s));
      hit[static_cast<std::size_t>(b)] = extreme(pearson(rx, s));
    }
    const auto hits = std::accumulate(hit.begin(), hit.end(), std::size_t{0});
    r.p = (1.0 + static_cast<double>(hits)) / (1.0 + mc_draws);
    r.method = "monte_carlo";
  } else {
    const double df = static_cast<double>(r.n) - 2.0;
    const double sign = tail == Tail::negative ? -1.0 : 1.0;
    if (std::abs(r.rho) >= 1.0) {
      r.p = sign * r.rho > 0 ? 0.0 : 1.0;
    } else {
      const double t = r.rho * std::sqrt(df / (1.0 - r.rho * r.rho));
      const boost::math::students_t_distribution<double> dist(df);
      r.p = tail == Tail::negative ? boost::math::cdf(dist, t) : boost::math::cdf(boost::math::complement(dist, t));
    }
    r.method = "t";
  }
  return r;
}

std::vector<double> bonferroni(std::span<const double> p_values) {
  require(!p_values.empty(), "bonferroni: no p-values");
  std::vector<double> out;
  const auto n = static_cast<double>(p_values.size());
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) fail("bonferroni: p-value " + std::to_string(p) + " outside [0, 1]");
    out.push_back(std::min(1.0, p * n));
  }
  return out;
}

std::vector<FoldResult> kfold_cv(std::span<const Observation> obs, int folds, std::uint64_t stats_seed) {
  require(folds >= 2, "kfold: need at least 2 folds");
  std::vector<std::uint64_t> keys;
  group(obs, &keys);
  if (keys.size() < static_cast<std::size_t>(folds)) {
    fail("kfold: " + std::to_string(keys.size()) + " clusters cannot fill " + std::to_string(folds) + " folds");
  }
  Rng rng(stats_seed ^ kFoldStream);
  rng.shuffle(std::span<std::uint64_t>(keys));
  std::map<std::uint64_t, int> fold_of;
  for (std::size_t i = 0; i < keys.size(); ++i) fold_of[keys[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));

  std::vector<FoldResult> out(static_cast<std::size_t>(folds));
  std::vector<double> sums(static_cast<std::size_t>(folds), 0.0);
  for (int f = 0; f < folds; ++f) out[static_cast<std::size_t>(f)].fold = f;
  for (const auto& [k, f] : fold_of) out[static_cast<std::size_t>(f)].held_out.push_back(k);
  for (const auto& o : obs) {
    const auto f = static_cast<std::size_t>(fold_of.at(o.cluster));
    sums[f] += o.value;
    ++out[f].n;
  }
  for (std::size_t f = 0; f < out.size(); ++f) out[f].mean = sums[f] / static_cast<double>(out[f].n);
  return out;
}

int strict_argmax(std::span<const double> v) {
  require(!v.empty(), "argmax of an empty vector");
  int best = 0;
  bool tie = false;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) {
      best = static_cast<int>(i);
      tie = false;
    } else if (v[i] == v[static_cast<std::size_t>(best)]) {
      tie = true;
    }
  }
  return tie ? -1 : best;
}

CalibrationResult contextual_calibration(const std::vector<std::vector<double>>& probs, std::span<const int> truth,
                                         std::span<const double> p_hat) {
  require(probs.size() == truth.size(), "calibration: one truth label per item required");
  require(!probs.empty(), "calibration: no items");
  CalibrationResult r;
  r.p_hat.assign(p_hat.begin(), p_hat.end());
  for (double p : p_hat) r.calibrated_label.push_back(p > 0.0);
  std::size_t raw = 0, cal = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& p = probs[i];
    require(p.size() == p_hat.size(), "calibration: label count mismatch");
    std::vector<double> s(p.size());
    for (std::size_t l = 0; l < p.size(); ++l) s[l] = p_hat[l] > 0.0 ? p[l] / p_hat[l] : p[l];
    raw += strict_argmax(p) == truth[i];
    cal += strict_argmax(s) == truth[i];
  }
  r.raw_accuracy = static_cast<double>(raw) / static_cast<double>(probs.size());
  r.calibrated_accuracy = static_cast<double>(cal) / static_cast<double>(probs.size());
  return r;
}

DoseResponse dose_response(std::span<const DoseObservation> obs, int draws, std::uint64_t stats_seed) {
  std::map<int, std::vector<Observation>> by_k;
  for (const auto& o : obs) by_k[o.k].push_back({o.cluster, o.accuracy_bit});
  if (by_k.size() < 2) fail("dose_response: need at least 2 distinct k values");
  DoseResponse r;
  for (const auto& [k, v] : by_k) {
    r.curve.push_back({k, v.size(), cluster_bootstrap_ci(v, draws, 0.95, stats_seed ^ static_cast<std::uint64_t>(k))});
  }
  std::vector<double> ks, bits;
  for (const auto& o : obs) {
    ks.push_back(o.k);
    bits.push_back(o.accuracy_bit);
  }
  const bool constant = std::all_of(bits.begin(), bits.end(), [&](double b) { return b == bits.front(); });
  if (constant) {
    r.spearman = {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(), bits.size(),
                  "undefined (constant accuracy)"};
  } else {
    r.spearman = spearman_one_sided(ks, bits, Tail::negative, stats_seed);
  }
  return r;
}

}  // namespace fixlab
