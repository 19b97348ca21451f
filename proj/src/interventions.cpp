#include "fixlab/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "fixlab/error.hpp"

namespace fixlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double p_last(const std::vector<float>& logits, TokenId target) { return token_probability(logits, target); }

std::vector<float> last_row(const ActivationCache& cache, const HookSite& site) {
  const auto v = cache.at(site, kLastPosition);
  return {v.begin(), v.end()};
}

void check_pair_lengths(const PairedItem& item) {
  require(!item.gp_tokens.empty() && !item.ctrl_tokens.empty(), "patch: empty prompt in item " + item.id);
}

/// Ranking key: mean descending with NaN last, then the tie-breaker.
template <class T, class Tie>
void rank_by_mean(std::vector<T>& v, Tie tie) {
  std::stable_sort(v.begin(), v.end(), [&](const T& a, const T& b) {
    const bool an = std::isnan(a.mean_recovery), bn = std::isnan(b.mean_recovery);
    if (an != bn) return bn;
    if (!an && a.mean_recovery != b.mean_recovery) return a.mean_recovery > b.mean_recovery;
    return tie(a, b);
  });
}

}  // namespace

RecoveryResult make_recovery(double p_gp, double p_ctrl, double p_patched) {
  RecoveryResult r{p_gp, p_ctrl, p_patched, std::nullopt, std::nullopt};
  if (std::abs(p_ctrl - p_gp) < kRecoveryMinGap) {
    r.exclusion_reason = "denominator_below_threshold";
  } else {
    r.recovery = (p_patched - p_gp) / (p_ctrl - p_gp);
  }
  return r;
}

std::pair<double, std::size_t> mean_recovery(std::span<const RecoveryResult> results) {
  double sum = 0.0;
  std::size_t n = 0, excluded = 0;
  for (const auto& r : results) {
    if (r.excluded()) {
      ++excluded;
    } else {
      sum += *r.recovery;
      ++n;
    }
  }
  return {n ? sum / static_cast<double>(n) : kNaN, excluded};
}

LensTrajectory lens_from_cache(const WeightBundle& weights, const ActivationCache& cache, TokenId target,
                               TokenId foil) {
  const auto& c = weights.config();
  require(target != foil, "lens: target and foil must differ");
  require(target >= 0 && target < c.vocab_size && foil >= 0 && foil < c.vocab_size, "lens: token out of range");
  require(cache.lens_depth() == c.n_layers + 1, "lens: cache lacks per-layer residuals");
  LensTrajectory t;
  for (int i = 0; i <= c.n_layers; ++i) {
    const auto logits = residual_to_logits(weights, cache.lens_residual(i));
    LensEntry e;
    e.p_target = token_probability(logits, target);
    e.p_foil = token_probability(logits, foil);
    e.correct = e.p_target > e.p_foil;
    t.layers.push_back(e);
  }
  return t;
}

LensTrajectory logit_lens(const WeightBundle& weights, std::span<const TokenId> tokens, TokenId target, TokenId foil) {
  const auto out = forward_with_cache(weights, tokens, {});
  return lens_from_cache(weights, out.cache, target, foil);
}

double DlaReport::total() const {
  double s = embed + norm_bias;
  for (const auto& l : heads) {
    for (double h : l) s += h;
  }
  for (double m : mlp) s += m;
  return s;
}

std::vector<HookSite> dla_sites(const ModelConfig& config) {
  auto sites = all_sites(config, HookKind::head_out);
  const auto mlp = all_sites(config, HookKind::mlp_out);
  sites.insert(sites.end(), mlp.begin(), mlp.end());
  return sites;
}

DlaReport dla(const WeightBundle& weights, const ActivationCache& cache, std::span<const float> logits, TokenId target,
              TokenId foil) {
  const auto& c = weights.config();
  require(target != foil, "dla: target and foil must differ");
  require(target >= 0 && target < c.vocab_size && foil >= 0 && foil < c.vocab_size, "dla: token out of range");
  for (const auto& site : dla_sites(c)) {
    if (!cache.contains(site)) fail("dla: incomplete cache, missing " + to_string(site));
  }
  if (cache.lens_depth() == 0) fail("dla: incomplete cache, missing the embedding residual");

  const auto d = static_cast<std::size_t>(c.d_model);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto u = weights.unembed();
  const auto w = weights.final_norm_w();
  const auto b = weights.final_norm_b();
  const auto stats = cache.final_norm_stats();
  // direction[i] = inv_scale * w[i] * (u[i, target] - u[i, foil])
  std::vector<double> direction(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double du = static_cast<double>(u[i * v + static_cast<std::size_t>(target)]) -
                      static_cast<double>(u[i * v + static_cast<std::size_t>(foil)]);
    direction[i] = static_cast<double>(stats.inv_scale) * w[i] * du;
  }
  const bool centred = c.norm == NormKind::layernorm;
  auto project = [&](std::span<const float> x) {
    double mean = 0.0;
    if (centred) {
      for (float a : x) mean += a;
      mean /= static_cast<double>(d);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += (x[i] - mean) * direction[i];
    return s;
  };

  DlaReport r;
  r.embed = project(cache.lens_residual(0));
  r.heads.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(static_cast<std::size_t>(c.n_heads)));
  r.mlp.assign(static_cast<std::size_t>(c.n_layers), 0.0);
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      r.heads[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] =
          project(cache.at(HookSite::head_out(l, h), kLastPosition));
    }
    r.mlp[static_cast<std::size_t>(l)] = project(cache.at(HookSite::mlp_out(l), kLastPosition));
  }
  if (!b.empty()) {
    for (std::size_t i = 0; i < d; ++i) {
      r.norm_bias += static_cast<double>(b[i]) * (static_cast<double>(u[i * v + static_cast<std::size_t>(target)]) -
                                                  static_cast<double>(u[i * v + static_cast<std::size_t>(foil)]));
    }
  }
  r.logit_diff = static_cast<double>(logits[static_cast<std::size_t>(target)]) - logits[static_cast<std::size_t>(foil)];
  return r;
}

DlaReport dla(const WeightBundle& weights, std::span<const TokenId> tokens, TokenId target, TokenId foil) {
  const auto sites = dla_sites(weights.config());
  const auto out = forward_with_cache(weights, tokens, sites);
  return dla(weights, out.cache, out.logits, target, foil);
}

void check_same_query(const PairedItem& item) {
  const auto n = item.query_token_count;
  require(n >= 1, "patch: query token count must be positive for item " + item.id);
  if (n > item.gp_tokens.size() || n > item.ctrl_tokens.size() ||
      !std::equal(item.gp_tokens.end() - static_cast<std::ptrdiff_t>(n), item.gp_tokens.end(),
                  item.ctrl_tokens.end() - static_cast<std::ptrdiff_t>(n))) {
    fail("patch: mismatched query items in pair " + item.id + " (query token suffixes differ)");
  }
}

RecoveryResult paired_patch_item(const WeightBundle& weights, const PairedItem& item, std::span<const HookSite> sites,
                                 PatchPositions positions) {
  require(!sites.empty(), "patch: no sites given");
  check_pair_lengths(item);
  check_same_query(item);
  for (const auto& s : sites) validate_site(weights.config(), s);

  const double p_gp = p_last(forward_logits(weights, item.gp_tokens), item.target);
  const auto ctrl = forward_with_cache(weights, item.ctrl_tokens, sites);
  const double p_ctrl = p_last(ctrl.logits, item.target);

  PatchSpec spec;
  if (positions == PatchPositions::last) {
    for (const auto& s : sites) spec.add(s, kLastPosition, last_row(ctrl.cache, s));
  } else {
    require(item.gp_tokens.size() == item.ctrl_tokens.size(),
            "patch: all-position patching needs prompts of equal length (item " + item.id + ")");
    std::vector<int> pos(item.gp_tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    spec = patch_from_cache(ctrl.cache, sites, pos, pos);
  }
  const double p_patched = p_last(forward_with_patches(weights, item.gp_tokens, spec), item.target);
  return make_recovery(p_gp, p_ctrl, p_patched);
}

ItemBaseline item_baseline(const WeightBundle& weights, const PairedItem& item, std::span<const HookSite> sites) {
  check_pair_lengths(item);
  check_same_query(item);
  ItemBaseline b;
  b.p_gp = p_last(forward_logits(weights, item.gp_tokens), item.target);
  const auto ctrl = forward_with_cache(weights, item.ctrl_tokens, sites);
  b.p_ctrl = p_last(ctrl.logits, item.target);
  for (const auto& s : sites) b.ctrl_last.emplace(s, last_row(ctrl.cache, s));
  return b;
}

namespace {

std::vector<ItemBaseline> baselines(const WeightBundle& weights, std::span<const PairedItem> items,
                                    std::span<const HookSite> sites) {
  std::vector<ItemBaseline> out(items.size());
  const int n = static_cast<int>(items.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = item_baseline(weights, items[static_cast<std::size_t>(i)], sites);
  }
  return out;
}

RecoveryResult patch_with(const WeightBundle& weights, const PairedItem& item, const ItemBaseline& base,
                          std::span<const HookSite> sites) {
  if (sites.empty()) return make_recovery(base.p_gp, base.p_ctrl, base.p_gp);
  PatchSpec spec;
  for (const auto& s : sites) spec.add(s, kLastPosition, base.ctrl_last.at(s));
  const double p = p_last(forward_with_patches(weights, item.gp_tokens, spec), item.target);
  return make_recovery(base.p_gp, base.p_ctrl, p);
}

}  // namespace

std::vector<RecoveryResult> loo_mean_patch(const WeightBundle& weights, std::span<const PairedItem> items,
                                           std::span<const HookSite> sites) {
  if (items.size() < 2) fail("loo_mean_patch: need at least 2 items, got " + std::to_string(items.size()));
  require(!sites.empty(), "patch: no sites given");
  const auto base = baselines(weights, items, sites);
  const auto d = static_cast<std::size_t>(weights.config().d_model);

  std::map<HookSite, std::vector<double>> totals;
  for (const auto& s : sites) {
    auto& t = totals[s];
    t.assign(d, 0.0);
    for (const auto& b : base) {
      const auto& v = b.ctrl_last.at(s);
      for (std::size_t i = 0; i < d; ++i) t[i] += v[i];
    }
  }
  std::vector<RecoveryResult> out(items.size());
  const int n = static_cast<int>(items.size());
  const double others = static_cast<double>(items.size() - 1);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto& b = base[static_cast<std::size_t>(i)];
    PatchSpec spec;
    for (const auto& s : sites) {
      const auto& own = b.ctrl_last.at(s);
      const auto& t = totals.at(s);
      std::vector<float> v(d);
      for (std::size_t k = 0; k < d; ++k) v[k] = static_cast<float>((t[k] - own[k]) / others);
      spec.add(s, kLastPosition, std::move(v));
    }
    const double p = p_last(forward_with_patches(weights, items[static_cast<std::size_t>(i)].gp_tokens, spec),
                            items[static_cast<std::size_t>(i)].target);
    out[static_cast<std::size_t>(i)] = make_recovery(b.p_gp, b.p_ctrl, p);
  }
  return out;
}

std::vector<std::vector<int>> combinations(int n, int k) {
  if (k <= 0) fail("combinations: size must be positive");
  if (k > n) fail("combinations: size " + std::to_string(k) + " exceeds " + std::to_string(n));
  std::vector<std::vector<int>> out;
  std::vector<int> c(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) c[static_cast<std::size_t>(i)] = i;
  while (true) {
    out.push_back(c);
    int i = k - 1;
    while (i >= 0 && c[static_cast<std::size_t>(i)] == n - k + i) --i;
    if (i < 0) break;
    ++c[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k; ++j) c[static_cast<std::size_t>(j)] = c[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

std::vector<ComboResult> enumerate_layer_combos(const WeightBundle& weights, std::span<const PairedItem> items,
                                                int combo_size, HookKind kind) {
  const auto& c = weights.config();
  if (combo_size <= 0) fail("enumerate: combo size must be positive");
  require(kind != HookKind::head_out, "enumerate: layer combos need a per-layer site kind");
  require(!items.empty(), "enumerate: no items");
  const auto combos = combinations(c.n_layers, combo_size);
  const auto all = all_sites(c, kind);
  const auto base = baselines(weights, items, all);

  std::vector<ComboResult> out(combos.size());
  const auto n_items = items.size();
  const auto units = static_cast<long>(combos.size() * n_items);
  for (std::size_t k = 0; k < combos.size(); ++k) {
    out[k].layers = combos[k];
    out[k].items.resize(n_items);
  }
#pragma omp parallel for schedule(dynamic)
  for (long u = 0; u < units; ++u) {
    const auto k = static_cast<std::size_t>(u) / n_items;
    const auto i = static_cast<std::size_t>(u) % n_items;
    std::vector<HookSite> sites;
    for (int l : combos[k]) sites.push_back({kind, l, std::nullopt});
    out[k].items[i] = patch_with(weights, items[i], base[i], sites);
  }
  for (auto& r : out) std::tie(r.mean_recovery, r.n_excluded) = mean_recovery(r.items);
  rank_by_mean(out, [](const ComboResult& a, const ComboResult& b) { return a.layers < b.layers; });
  return out;
}

HeadPatchResult cumulative_head_patch(const WeightBundle& weights, std::span<const PairedItem> items, int max_k) {
  const auto& c = weights.config();
  require(!items.empty(), "head patch: no items");
  const auto heads = all_sites(c, HookKind::head_out);
  if (max_k < 0 || max_k > static_cast<int>(heads.size())) max_k = static_cast<int>(heads.size());
  const auto base = baselines(weights, items, heads);
  const auto n_items = items.size();

  HeadPatchResult r;
  r.ranked.resize(heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    r.ranked[h].layer = heads[h].layer;
    r.ranked[h].head = *heads[h].head;
    r.ranked[h].items.resize(n_items);
  }
  const auto units = static_cast<long>(heads.size() * n_items);
#pragma omp parallel for schedule(dynamic)
  for (long u = 0; u < units; ++u) {
    const auto h = static_cast<std::size_t>(u) / n_items;
    const auto i = static_cast<std::size_t>(u) % n_items;
    const HookSite site = heads[h];
    r.ranked[h].items[i] = patch_with(weights, items[i], base[i], std::span<const HookSite>(&site, 1));
  }
  for (auto& h : r.ranked) h.mean_recovery = mean_recovery(h.items).first;
  rank_by_mean(r.ranked, [](const HeadScore& a, const HeadScore& b) {
    return std::tie(a.layer, a.head) < std::tie(b.layer, b.head);
  });

  r.curve.resize(static_cast<std::size_t>(max_k) + 1);
  const auto curve_units = static_cast<long>(r.curve.size() * n_items);
  for (std::size_t k = 0; k < r.curve.size(); ++k) {
    r.curve[k].k = static_cast<int>(k);
    r.curve[k].items.resize(n_items);
  }
#pragma omp parallel for schedule(dynamic)
  for (long u = 0; u < curve_units; ++u) {
    const auto k = static_cast<std::size_t>(u) / n_items;
    const auto i = static_cast<std::size_t>(u) % n_items;
    std::vector<HookSite> sites;
    for (std::size_t j = 0; j < k; ++j) sites.push_back(HookSite::head_out(r.ranked[j].layer, r.ranked[j].head));
    r.curve[k].items[i] = patch_with(weights, items[i], base[i], sites);
  }
  for (auto& p : r.curve) p.mean_recovery = mean_recovery(p.items).first;
  return r;
}

std::vector<float> zero_ablate_heads(const WeightBundle& weights, std::span<const TokenId> tokens,
                                     std::span<const std::pair<int, int>> heads) {
  const auto& c = weights.config();
  PatchSpec spec;
  const std::vector<float> zero(static_cast<std::size_t>(c.d_model), 0.0f);
  for (const auto& [l, h] : heads) {
    const auto site = HookSite::head_out(l, h);
    validate_site(c, site);
    for (int pos = 0; pos < static_cast<int>(tokens.size()); ++pos) spec.add(site, pos, zero);
  }
  return forward_with_patches(weights, tokens, spec);
}

RecoveryResult path_patch(const WeightBundle& weights, const PairedItem& item, std::pair<int, int> sender,
                          std::pair<int, int> receiver) {
  const auto& c = weights.config();
  const auto send = HookSite::head_out(sender.first, sender.second);
  const auto recv = HookSite::head_out(receiver.first, receiver.second);
  validate_site(c, send);
  validate_site(c, recv);
  if (sender.first >= receiver.first) {
    fail("path_patch: sender layer " + std::to_string(sender.first) + " must precede receiver layer " +
         std::to_string(receiver.first));
  }
  check_pair_lengths(item);
  check_same_query(item);

  // Pass 1: garden-path activations of everything that must stay frozen.
  std::vector<HookSite> frozen{HookSite::mlp_out(sender.first)};
  for (int l = sender.first + 1; l < receiver.first; ++l) {
    frozen.push_back(HookSite::attn_out(l));
    frozen.push_back(HookSite::mlp_out(l));
  }
  const auto gp = forward_with_cache(weights, item.gp_tokens, frozen);
  const double p_gp = p_last(gp.logits, item.target);
  const auto ctrl = forward_with_cache(weights, item.ctrl_tokens, std::span<const HookSite>(&send, 1));
  const double p_ctrl = p_last(ctrl.logits, item.target);

  // Pass 2: sender from control, intermediate components frozen; read what
  // the receiver computes from that input.
  PatchSpec pass2;
  pass2.add(send, kLastPosition, last_row(ctrl.cache, send));
  for (const auto& s : frozen) pass2.add(s, kLastPosition, last_row(gp.cache, s));
  ForwardRequest req;
  req.tokens = item.gp_tokens;
  req.capture = std::span<const HookSite>(&recv, 1);
  req.patches = &pass2;
  const auto mid = run_forward(weights, req);

  // Pass 3: only the receiver's output changes.
  PatchSpec pass3;
  pass3.add(recv, kLastPosition, last_row(mid.cache, recv));
  const double p3 = p_last(forward_with_patches(weights, item.gp_tokens, pass3), item.target);
  return make_recovery(p_gp, p_ctrl, p3);
}

std::string combo_id(std::span<const int> layers) {
  std::string s = "[";
  for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? ",L" : "L") + std::to_string(layers[i]);
  return s + "]";
}

std::string head_id(int layer, int head) { return "L" + std::to_string(layer) + "-H" + std::to_string(head); }

RecoveryRow summarize_recovery(const std::string& id, std::span<const RecoveryResult> results,
                               std::span<const PairedItem> items, int draws, std::uint64_t stats_seed) {
  require(results.size() == items.size(), "summary: one result per item required");
  RecoveryRow row;
  row.id = id;
  row.n_items = results.size();
  std::vector<Observation> obs;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].excluded()) {
      ++row.n_excluded;
    } else {
      obs.push_back({items[i].cluster, *results[i].recovery});
    }
  }
  row.mean_recovery = mean_recovery(results).first;
  std::set<std::uint64_t> clusters;
  for (const auto& o : obs) clusters.insert(o.cluster);
  if (clusters.size() >= 2) {
    row.ci = cluster_bootstrap_ci(obs, draws, 0.95, stats_seed);
  } else {
    row.ci = {row.mean_recovery, kNaN, kNaN, clusters.size(), 0};
  }
  return row;
}

void write_recovery_table(const std::filesystem::path& path, std::span<const RecoveryRow> rows) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  out << "id,n_items,n_excluded,mean_recovery,ci_lo,ci_hi\n";
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  for (const auto& r : rows) {
    out << '"' << r.id << '"' << ',' << r.n_items << ',' << r.n_excluded << ',' << num(r.mean_recovery) << ','
        << num(r.ci.lo) << ',' << num(r.ci.hi) << '\n';
  }
  if (!out) fail("write failed for " + path.string());
}

}  // namespace fixlab
