#include <doctest.h>

#include <cstring>

#include "fixlab/error.hpp"
#include "fixlab/kernels.hpp"
#include "fixlab/model.hpp"
#include "support/reference_forward.hpp"
#include "support/toy_models.hpp"

using namespace fixlab;
using testing::max_abs_diff;

namespace {

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::vector<HookSite> every_site(const ModelConfig& c) {
  std::vector<HookSite> s;
  for (auto kind : {HookKind::resid_pre, HookKind::attn_out, HookKind::mlp_out, HookKind::head_out}) {
    auto k = all_sites(c, kind);
    s.insert(s.end(), k.begin(), k.end());
  }
  return s;
}

}  // namespace

TEST_CASE("optimised forward matches the slow double-precision reference") {
  Rng rng(5);
  for (const auto& cfg : {testing::toy_neox(), testing::toy_llama(), testing::toy_gpt2()}) {
    const auto w = make_random_model(cfg, 21);
    for (int trial = 0; trial < 5; ++trial) {
      const auto tokens = testing::random_prompt(rng, cfg.vocab_size, 1, 24);
      const auto fast = forward_logits(w, tokens);
      const auto ref = testing::reference_logits(w, tokens);
      double diff = 0.0;
      for (std::size_t i = 0; i < fast.size(); ++i) diff = std::max(diff, std::abs(fast[i] - ref[i]));
      CHECK(diff < 1e-4);
    }
  }
}

TEST_CASE("forward is deterministic across runs and thread counts") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 22);
  Rng rng(6);
  const auto tokens = testing::random_prompt(rng, cfg.vocab_size, 40, 60);
  const auto a = forward_logits(w, tokens);
  const int previous = kernels::max_threads();
  for (int threads : {1, 4}) {
    kernels::set_threads(threads);
    CHECK(bitwise_equal(a, forward_logits(w, tokens)));
  }
  kernels::set_threads(previous);
}

TEST_CASE("all-zero weights give all-zero logits") {
  const auto cfg = testing::toy_neox();
  std::map<std::string, Tensor> zero;
  for (const auto& spec : tensor_directory(cfg)) zero.emplace(spec.name, Tensor(spec.shape, 0.0f));
  const auto w = WeightBundle::from_tensors(cfg, std::move(zero));
  const std::vector<TokenId> tokens{1, 2, 3, 4};
  for (float v : forward_logits(w, tokens)) CHECK(v == 0.0f);
}

TEST_CASE("forward rejects bad inputs") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 23);
  std::vector<TokenId> too_long(static_cast<std::size_t>(cfg.max_seq + 1), 1);
  CHECK_THROWS_WITH_AS(forward_logits(w, too_long), doctest::Contains("sequence too long"), Error);
  std::vector<TokenId> bad{1, cfg.vocab_size};
  CHECK_THROWS_WITH_AS(forward_logits(w, bad), doctest::Contains("out of range"), Error);
  CHECK_THROWS_AS(forward_logits(w, std::vector<TokenId>{}), Error);
  CHECK_THROWS_WITH_AS(parse_site("bogus:1"), doctest::Contains("unknown site kind"), Error);
  const std::vector<HookSite> bad_site{HookSite::attn_out(cfg.n_layers)};
  CHECK_THROWS_AS(forward_with_cache(w, std::vector<TokenId>{1}, bad_site), Error);
}

TEST_CASE("capture is neutral and complete") {
  const auto cfg = testing::toy_llama();
  const auto w = make_random_model(cfg, 24);
  Rng rng(7);
  const auto tokens = testing::random_prompt(rng, cfg.vocab_size, 5, 20);
  const auto sites = every_site(cfg);
  const auto out = forward_with_cache(w, tokens, sites);
  CHECK(bitwise_equal(out.logits, forward_logits(w, tokens)));

  const auto resid = all_sites(cfg, HookKind::resid_pre);
  const auto only_resid = forward_with_cache(w, tokens, resid);
  CHECK(only_resid.cache.size() == static_cast<std::size_t>(cfg.n_layers) * tokens.size());
  CHECK(only_resid.cache.lens_depth() == cfg.n_layers + 1);
  CHECK(out.cache.size() == sites.size() * tokens.size());
}

TEST_CASE("head contributions sum to the attention output") {
  for (const auto& cfg : {testing::toy_neox(), testing::toy_llama()}) {
    const auto w = make_random_model(cfg, 25);
    Rng rng(8);
    const auto tokens = testing::random_prompt(rng, cfg.vocab_size, 3, 30);
    const auto out = forward_with_cache(w, tokens, every_site(cfg));
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int pos = 0; pos < static_cast<int>(tokens.size()); ++pos) {
        std::vector<float> sum(static_cast<std::size_t>(cfg.d_model), 0.0f);
        for (int h = 0; h < cfg.n_heads; ++h) {
          auto v = out.cache.at(HookSite::head_out(l, h), pos);
          for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
        }
        CHECK(max_abs_diff(sum, out.cache.at(HookSite::attn_out(l), pos)) < 1e-5);
      }
    }
  }
}

TEST_CASE("self-patching reproduces the unpatched logits") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 26);
  Rng rng(9);
  const auto tokens = testing::random_prompt(rng, cfg.vocab_size, 4, 20);
  const auto sites = every_site(cfg);
  const auto out = forward_with_cache(w, tokens, sites);
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  const auto spec = patch_from_cache(out.cache, sites, positions, positions);
  CHECK(max_abs_diff(forward_with_patches(w, tokens, spec), out.logits) < 1e-5);
  CHECK(bitwise_equal(forward_with_patches(w, tokens, PatchSpec{}), out.logits));
}

TEST_CASE("patches change downstream computation and are validated") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 27);
  const std::vector<TokenId> tokens{3, 9, 27, 81};
  PatchSpec spec;
  spec.add(HookSite::attn_out(1), kLastPosition, std::vector<float>(64, 0.5f));
  CHECK(max_abs_diff(forward_with_patches(w, tokens, spec), forward_logits(w, tokens)) > 1e-3);

  CHECK_THROWS_WITH_AS(spec.add(HookSite::attn_out(1), kLastPosition, std::vector<float>(64, 0.0f)),
                       doctest::Contains("duplicate"), Error);
  PatchSpec far;
  far.add(HookSite::mlp_out(0), 4, std::vector<float>(64, 0.0f));
  CHECK_THROWS_WITH_AS(forward_with_patches(w, tokens, far), doctest::Contains("out of range"), Error);
  PatchSpec aliased;  // explicit index and "last" resolve to the same target
  aliased.add(HookSite::mlp_out(0), 3, std::vector<float>(64, 0.0f));
  aliased.add(HookSite::mlp_out(0), kLastPosition, std::vector<float>(64, 0.0f));
  CHECK_THROWS_WITH_AS(forward_with_patches(w, tokens, aliased), doctest::Contains("duplicate"), Error);
  PatchSpec wrong_dim;
  wrong_dim.add(HookSite::attn_out(0), 0, std::vector<float>(3, 0.0f));
  CHECK_THROWS_AS(forward_with_patches(w, tokens, wrong_dim), Error);
}

TEST_CASE("grouped-query attention equals the expanded multi-head path") {
  auto gqa_cfg = testing::toy_llama();
  const auto gqa = make_random_model(gqa_cfg, 28);
  auto mha_cfg = gqa_cfg;
  mha_cfg.n_kv_heads = mha_cfg.n_heads;
  std::map<std::string, Tensor> expanded(gqa.tensors());
  const auto dh = static_cast<std::size_t>(gqa_cfg.d_head);
  const auto d = static_cast<std::size_t>(gqa_cfg.d_model);
  for (int l = 0; l < gqa_cfg.n_layers; ++l) {
    for (const char* n : {"attn.k.weight", "attn.v.weight"}) {
      const auto& src = gqa.tensor(layer_tensor(l, n));
      Tensor dst({static_cast<std::size_t>(mha_cfg.n_heads) * dh, d});
      for (int h = 0; h < mha_cfg.n_heads; ++h) {
        const auto kvh = static_cast<std::size_t>(h / gqa_cfg.kv_group());
        std::copy_n(src.data.data() + kvh * dh * d, dh * d, dst.data.data() + static_cast<std::size_t>(h) * dh * d);
      }
      expanded[layer_tensor(l, n)] = std::move(dst);
    }
    for (const char* n : {"attn.k.bias", "attn.v.bias"}) {
      if (!gqa.has(layer_tensor(l, n))) continue;
      const auto& src = gqa.tensor(layer_tensor(l, n));
      Tensor dst({static_cast<std::size_t>(mha_cfg.n_heads) * dh});
      for (int h = 0; h < mha_cfg.n_heads; ++h) {
        const auto kvh = static_cast<std::size_t>(h / gqa_cfg.kv_group());
        std::copy_n(src.data.data() + kvh * dh, dh, dst.data.data() + static_cast<std::size_t>(h) * dh);
      }
      expanded[layer_tensor(l, n)] = std::move(dst);
    }
  }
  const auto mha = WeightBundle::from_tensors(mha_cfg, std::move(expanded));
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const auto tokens = testing::random_prompt(rng, gqa_cfg.vocab_size, 2, 30);
    CHECK(max_abs_diff(forward_logits(gqa, tokens), forward_logits(mha, tokens)) < 1e-6);
  }
}

TEST_CASE("final lens residual reproduces the logits") {
  const auto cfg = testing::toy_gpt2();
  const auto w = make_random_model(cfg, 29);
  const std::vector<TokenId> tokens{5, 6, 7};
  const auto out = forward_with_cache(w, tokens, {});
  CHECK(bitwise_equal(residual_to_logits(w, out.cache.lens_residual(cfg.n_layers)), out.logits));
  const auto p = softmax(out.logits);
  double sum = 0.0;
  for (float x : p) sum += x;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(token_probability(out.logits, 5) == doctest::Approx(p[5]).epsilon(1e-6));
}
