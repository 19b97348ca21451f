#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixlab/error.hpp"
#include "fixlab/interventions.hpp"
#include "fixlab/kernels.hpp"
#include "support/toy_models.hpp"

using namespace fixlab;

namespace {

TokenId argmax(const std::vector<float>& v) {
  return static_cast<TokenId>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Pairs sharing a query suffix whose probability gap clears the exclusion
// threshold. The target is the control prompt's top token.
std::vector<PairedItem> make_items(const WeightBundle& w, int count, bool equal_length, std::uint64_t seed) {
  const int vocab = w.config().vocab_size;
  Rng rng(seed);
  std::vector<PairedItem> items;
  for (int attempt = 0; attempt < 2000 && static_cast<int>(items.size()) < count; ++attempt) {
    PairedItem it;
    const auto query = testing::random_prompt(rng, vocab, 2, 2);
    it.gp_tokens = testing::random_prompt(rng, vocab, 6, 12);
    it.ctrl_tokens = equal_length ? testing::random_prompt(rng, vocab, static_cast<int>(it.gp_tokens.size()),
                                                           static_cast<int>(it.gp_tokens.size()))
                                  : testing::random_prompt(rng, vocab, 6, 12);
    it.gp_tokens.insert(it.gp_tokens.end(), query.begin(), query.end());
    it.ctrl_tokens.insert(it.ctrl_tokens.end(), query.begin(), query.end());
    it.query_token_count = query.size();
    const auto ctrl = forward_logits(w, it.ctrl_tokens);
    it.target = argmax(ctrl);
    const double gap = token_probability(ctrl, it.target) - token_probability(forward_logits(w, it.gp_tokens), it.target);
    if (gap < 0.05) continue;
    it.id = "item-" + std::to_string(items.size());
    it.cluster = items.size() % 3;
    items.push_back(std::move(it));
  }
  REQUIRE(static_cast<int>(items.size()) == count);
  return items;
}

WeightBundle sharp_model(const ModelConfig& cfg, std::uint64_t seed) {
  // Random weights give a flat output distribution; scale the unembedding so
  // prompts actually disagree.
  const auto w = make_random_model(cfg, seed);
  auto t = w.tensors();
  for (auto& v : t.at("unembed").data) v *= 8.0f;
  return WeightBundle::from_tensors(cfg, std::move(t));
}

}  // namespace

TEST_CASE("recovery metric and exclusion rule") {
  const auto r = make_recovery(0.2, 0.7, 0.45);
  REQUIRE(r.recovery);
  CHECK(*r.recovery == doctest::Approx(0.5));
  CHECK(make_recovery(0.2, 0.7, 0.7).recovery.value() == doctest::Approx(1.0));
  CHECK(make_recovery(0.7, 0.2, 0.7).recovery.value() == doctest::Approx(0.0));
  const auto x = make_recovery(0.300, 0.309, 0.5);
  CHECK(x.excluded());
  CHECK(*x.exclusion_reason == "denominator_below_threshold");
  CHECK_FALSE(make_recovery(0.3, 0.3101, 0.3).excluded());
  const std::vector<RecoveryResult> rs{make_recovery(0, 1, 0.5), x, make_recovery(0, 1, 1)};
  const auto [mean, excluded] = mean_recovery(rs);
  CHECK(mean == doctest::Approx(0.75));
  CHECK(excluded == 1);
  CHECK(std::isnan(mean_recovery(std::vector<RecoveryResult>{x}).first));
}

TEST_CASE("patching the embedding stream at every position reproduces the control run") {
  for (const auto& cfg : {testing::toy_neox(), testing::toy_llama()}) {
    const auto w = sharp_model(cfg, 31);
    for (const auto& item : make_items(w, 4, true, 7)) {
      const std::vector<HookSite> sites{HookSite::resid_pre(0)};
      const auto r = paired_patch_item(w, item, sites, PatchPositions::all);
      REQUIRE(r.recovery);
      CHECK(*r.recovery == doctest::Approx(1.0).epsilon(1e-4));
      CHECK(r.p_patched == doctest::Approx(r.p_ctrl).epsilon(1e-5));
    }
  }
}

TEST_CASE("patching every layer's output at the last position is complete for the final residual") {
  // The last position's final residual is the embedding plus every layer's
  // output, so patching all layers plus the embedding leaves only the control.
  const auto cfg = testing::toy_neox();
  const auto w = sharp_model(cfg, 32);
  for (const auto& item : make_items(w, 3, false, 8)) {
    std::vector<HookSite> sites{HookSite::resid_pre(0)};
    for (int l = 0; l < cfg.n_layers; ++l) {
      sites.push_back(HookSite::attn_out(l));
      sites.push_back(HookSite::mlp_out(l));
    }
    const auto r = paired_patch_item(w, item, sites);
    CHECK(*r.recovery == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("paired patch refuses pairs with different queries") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 33);
  PairedItem it{"x", 0, {1, 2, 3, 4}, {5, 6, 3, 9}, 2, 1};
  const std::vector<HookSite> sites{HookSite::attn_out(0)};
  CHECK_THROWS_WITH_AS(paired_patch_item(w, it, sites), doctest::Contains("mismatched query"), Error);
  it.ctrl_tokens = {5, 6, 7, 3, 4};
  CHECK_NOTHROW(paired_patch_item(w, it, sites));
  CHECK_THROWS_WITH_AS(paired_patch_item(w, it, sites, PatchPositions::all), doctest::Contains("equal length"),
                       Error);
}

TEST_CASE("leave-one-out mean patch uses the other items' activations") {
  const auto cfg = testing::toy_llama();
  const auto w = sharp_model(cfg, 34);
  const auto items = make_items(w, 3, false, 9);
  const std::vector<HookSite> sites{HookSite::attn_out(1), HookSite::mlp_out(2)};
  const auto loo = loo_mean_patch(w, items, sites);
  REQUIRE(loo.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    PatchSpec spec;
    for (const auto& s : sites) {
      std::vector<float> mean(static_cast<std::size_t>(cfg.d_model), 0.0f);
      for (std::size_t j = 0; j < 3; ++j) {
        if (j == i) continue;
        const auto c = forward_with_cache(w, items[j].ctrl_tokens, std::vector<HookSite>{s});
        const auto v = c.cache.at(s, kLastPosition);
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += v[k] / 2.0f;
      }
      spec.add(s, kLastPosition, mean);
    }
    const double p = token_probability(forward_with_patches(w, items[i].gp_tokens, spec), items[i].target);
    CHECK(loo[i].p_patched == doctest::Approx(p).epsilon(1e-5));
  }
  CHECK_THROWS_AS(loo_mean_patch(w, std::span(items).first(1), sites), Error);
}

TEST_CASE("combinations are lexicographic and complete") {
  const auto c = combinations(5, 2);
  REQUIRE(c.size() == 10);
  CHECK(c.front() == std::vector<int>{0, 1});
  CHECK(c[4] == std::vector<int>{1, 2});
  CHECK(c.back() == std::vector<int>{3, 4});
  CHECK(std::is_sorted(c.begin(), c.end()));
  CHECK(combinations(24, 3).size() == 2024);
  CHECK(combinations(4, 4).size() == 1);
  CHECK_THROWS_AS(combinations(3, 4), Error);
  CHECK_THROWS_AS(combinations(3, 0), Error);
}

TEST_CASE("layer-combination enumeration agrees with direct patches and is ranked") {
  const auto cfg = testing::toy_neox();
  const auto w = sharp_model(cfg, 35);
  const auto items = make_items(w, 4, false, 10);
  const auto combos = enumerate_layer_combos(w, items, 2);
  REQUIRE(combos.size() == 6);
  for (std::size_t i = 1; i < combos.size(); ++i) {
    CHECK(combos[i - 1].mean_recovery >= combos[i].mean_recovery);
  }
  for (const auto& combo : combos) {
    std::vector<HookSite> sites;
    for (int l : combo.layers) sites.push_back(HookSite::attn_out(l));
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto direct = paired_patch_item(w, items[i], sites);
      CHECK(combo.items[i].p_patched == doctest::Approx(direct.p_patched).epsilon(1e-6));
    }
  }
  const int previous = kernels::max_threads();
  kernels::set_threads(1);
  const auto serial = enumerate_layer_combos(w, items, 2);
  kernels::set_threads(previous);
  for (std::size_t i = 0; i < combos.size(); ++i) {
    CHECK(serial[i].layers == combos[i].layers);
    CHECK(serial[i].mean_recovery == combos[i].mean_recovery);
  }
  CHECK_THROWS_AS(enumerate_layer_combos(w, items, 5), Error);
  CHECK(combo_id(combos[0].layers).front() == '[');
  CHECK(combo_id(std::vector<int>{1, 11, 20}) == "[L1,L11,L20]");
}

TEST_CASE("cumulative head patching") {
  const auto cfg = testing::toy_neox(2);
  const auto w = sharp_model(cfg, 36);
  const auto items = make_items(w, 4, false, 11);
  const auto r = cumulative_head_patch(w, items);
  const auto n_heads = static_cast<std::size_t>(cfg.n_layers * cfg.n_heads);
  REQUIRE(r.ranked.size() == n_heads);
  REQUIRE(r.curve.size() == n_heads + 1);
  for (std::size_t i = 1; i < r.ranked.size(); ++i) CHECK(r.ranked[i - 1].mean_recovery >= r.ranked[i].mean_recovery);
  CHECK(r.curve[0].mean_recovery == doctest::Approx(0.0));
  CHECK(r.curve[1].mean_recovery == doctest::Approx(r.ranked[0].mean_recovery).epsilon(1e-9));
  // All heads together are the whole attention output.
  const auto attn = all_sites(cfg, HookKind::attn_out);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto direct = paired_patch_item(w, items[i], attn);
    CHECK(r.curve.back().items[i].p_patched == doctest::Approx(direct.p_patched).epsilon(1e-4));
  }
  CHECK(cumulative_head_patch(w, items, 3).curve.size() == 4);
  CHECK(head_id(11, 7) == "L11-H7");
}

TEST_CASE("zero-ablating every head equals zeroing the attention output") {
  for (const auto& cfg : {testing::toy_neox(), testing::toy_llama()}) {
    const auto w = make_random_model(cfg, 37);
    const std::vector<TokenId> tokens{3, 1, 4, 1, 5, 9, 2, 6};
    std::vector<std::pair<int, int>> heads;
    PatchSpec spec;
    const std::vector<float> zero(static_cast<std::size_t>(cfg.d_model), 0.0f);
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int h = 0; h < cfg.n_heads; ++h) heads.emplace_back(l, h);
      for (int p = 0; p < static_cast<int>(tokens.size()); ++p) spec.add(HookSite::attn_out(l), p, zero);
    }
    const auto a = zero_ablate_heads(w, tokens, heads);
    const auto b = forward_with_patches(w, tokens, spec);
    CHECK(testing::max_abs_diff(a, b) < 1e-5);
    CHECK(testing::max_abs_diff(a, forward_logits(w, tokens)) > 1e-3);
  }
}

TEST_CASE("direct logit attribution is additive") {
  for (const auto& cfg : {testing::toy_neox(), testing::toy_llama(), testing::toy_gpt2()}) {
    const auto w = make_random_model(cfg, 38);
    Rng rng(12);
    for (int trial = 0; trial < 4; ++trial) {
      const auto tokens = testing::random_prompt(rng, cfg.vocab_size, 3, 20);
      const auto r = dla(w, tokens, 5, 17);
      CHECK(r.heads.size() == static_cast<std::size_t>(cfg.n_layers));
      CHECK(std::abs(r.total() - r.logit_diff) < 1e-3);
    }
  }
}

TEST_CASE("attribution of ablated heads is zero") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 39);
  const std::vector<TokenId> tokens{8, 6, 7, 5, 3, 0, 9};
  PatchSpec spec;
  const std::vector<float> zero(static_cast<std::size_t>(cfg.d_model), 0.0f);
  spec.add(HookSite::head_out(1, 2), kLastPosition, zero);
  spec.add(HookSite::head_out(3, 0), kLastPosition, zero);
  const auto sites = dla_sites(cfg);
  ForwardRequest req;
  req.tokens = tokens;
  req.capture = sites;
  req.patches = &spec;
  req.capture_lens = true;
  const auto out = run_forward(w, req);
  const auto r = dla(w, out.cache, out.logits, 2, 3);
  CHECK(r.heads[1][2] == 0.0);
  CHECK(r.heads[3][0] == 0.0);
  CHECK(r.heads[1][1] != 0.0);
  CHECK(std::abs(r.total() - r.logit_diff) < 1e-3);
}

TEST_CASE("dla rejects incomplete caches and equal tokens") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 40);
  const std::vector<TokenId> tokens{1, 2, 3};
  const auto partial = forward_with_cache(w, tokens, all_sites(cfg, HookKind::mlp_out));
  CHECK_THROWS_WITH_AS(dla(w, partial.cache, partial.logits, 1, 2), doctest::Contains("incomplete cache"), Error);
  CHECK_THROWS_AS(dla(w, tokens, 4, 4), Error);
}

TEST_CASE("logit lens") {
  for (const auto& cfg : {testing::toy_neox(), testing::toy_llama()}) {
    const auto w = make_random_model(cfg, 41);
    const std::vector<TokenId> tokens{10, 20, 30, 40, 50};
    const auto lens = logit_lens(w, tokens, 7, 8);
    REQUIRE(lens.layers.size() == static_cast<std::size_t>(cfg.n_layers + 1));
    const auto logits = forward_logits(w, tokens);
    CHECK(lens.layers.back().p_target == doctest::Approx(token_probability(logits, 7)).epsilon(1e-6));
    CHECK(lens.layers.back().p_foil == doctest::Approx(token_probability(logits, 8)).epsilon(1e-6));
    for (const auto& e : lens.layers) CHECK(e.correct == (e.p_target > e.p_foil));
    // Rotary models add no position vector, so layer 0 sees the raw embedding.
    const auto e = w.embed().subspan(50 * static_cast<std::size_t>(cfg.d_model), static_cast<std::size_t>(cfg.d_model));
    const std::vector<float> emb(e.begin(), e.end());
    const auto l0 = residual_to_logits(w, emb);
    CHECK(lens.layers[0].p_target == doctest::Approx(token_probability(l0, 7)).epsilon(1e-6));
  }
}

TEST_CASE("path patching") {
  const auto cfg = testing::toy_llama();
  const auto w = sharp_model(cfg, 42);
  const auto items = make_items(w, 3, false, 13);
  CHECK_THROWS_WITH_AS(path_patch(w, items[0], {2, 0}, {2, 1}), doctest::Contains("must precede"), Error);
  CHECK_THROWS_WITH_AS(path_patch(w, items[0], {3, 0}, {1, 1}), doctest::Contains("must precede"), Error);
  for (const auto& item : items) {
    for (const auto& [sender, receiver] : {std::pair{std::pair{0, 1}, std::pair{1, 3}},
                                           std::pair{std::pair{1, 0}, std::pair{3, 2}}}) {
      const auto r = path_patch(w, item, sender, receiver);
      // Oracle: with everything between the two heads frozen, the receiver's
      // input at the last position is the garden-path residual shifted by the
      // sender's change. Rebuild that residual directly and read the receiver.
      const auto send = HookSite::head_out(sender.first, sender.second);
      const auto recv = HookSite::head_out(receiver.first, receiver.second);
      const auto resid = HookSite::resid_pre(receiver.first);
      const auto gp = forward_with_cache(w, item.gp_tokens, std::vector<HookSite>{send, resid});
      const auto ctrl = forward_with_cache(w, item.ctrl_tokens, std::vector<HookSite>{send});
      std::vector<float> shifted(static_cast<std::size_t>(cfg.d_model));
      const auto base = gp.cache.at(resid, kLastPosition);
      const auto g = gp.cache.at(send, kLastPosition);
      const auto c = ctrl.cache.at(send, kLastPosition);
      for (std::size_t d = 0; d < shifted.size(); ++d) shifted[d] = base[d] + (c[d] - g[d]);
      PatchSpec shift;
      shift.add(resid, kLastPosition, shifted);
      ForwardRequest req;
      req.tokens = item.gp_tokens;
      const std::vector<HookSite> capture{recv};
      req.capture = capture;
      req.patches = &shift;
      const auto mid = run_forward(w, req);
      PatchSpec final_patch;
      const auto rv = mid.cache.at(recv, kLastPosition);
      final_patch.add(recv, kLastPosition, {rv.begin(), rv.end()});
      const double p3 = token_probability(forward_with_patches(w, item.gp_tokens, final_patch), item.target);
      CHECK(r.p_patched == doctest::Approx(p3).epsilon(1e-4));
    }
  }
}

TEST_CASE("recovery summary table") {
  std::vector<PairedItem> items(6);
  std::vector<RecoveryResult> rs;
  for (std::size_t i = 0; i < items.size(); ++i) {
    items[i].cluster = i % 3;
    rs.push_back(make_recovery(0.1, 0.6, 0.1 + 0.05 * static_cast<double>(i)));
  }
  rs[5] = make_recovery(0.5, 0.505, 0.5);
  const auto row = summarize_recovery("[L1,L2]", rs, items, 500, 3);
  CHECK(row.n_items == 6);
  CHECK(row.n_excluded == 1);
  CHECK(row.mean_recovery == doctest::Approx(0.2));
  CHECK(row.ci.lo <= row.mean_recovery);
  CHECK(row.ci.hi >= row.mean_recovery);
  const auto path = std::filesystem::temp_directory_path() / "fixlab_recovery_table.csv";
  write_recovery_table(path, std::vector<RecoveryRow>{row});
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  CHECK(header == "id,n_items,n_excluded,mean_recovery,ci_lo,ci_hi");
  CHECK(line.rfind("\"[L1,L2]\",6,1,0.2", 0) == 0);
  std::filesystem::remove(path);
}
