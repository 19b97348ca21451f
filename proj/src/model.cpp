#include "fixlab/model.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "fixlab/error.hpp"
#include "fixlab/kernels.hpp"

namespace fixlab {

// ---------------------------------------------------------------------------
// Sites

std::string to_string(HookKind kind) {
  switch (kind) {
    case HookKind::resid_pre: return "resid_pre";
    case HookKind::attn_out: return "attn_out";
    case HookKind::mlp_out: return "mlp_out";
    case HookKind::head_out: return "head_out";
  }
  return "?";
}

HookKind parse_hook_kind(const std::string& text) {
  if (text == "resid_pre") return HookKind::resid_pre;
  if (text == "attn_out" || text == "attn") return HookKind::attn_out;
  if (text == "mlp_out" || text == "mlp") return HookKind::mlp_out;
  if (text == "head_out" || text == "head") return HookKind::head_out;
  fail("unknown site kind '" + text + "'");
}

std::string to_string(const HookSite& site) {
  std::string s = to_string(site.kind) + ":" + std::to_string(site.layer);
  if (site.head) s += "." + std::to_string(*site.head);
  return s;
}

HookSite parse_site(const std::string& text) {
  const auto colon = text.find(':');
  require(colon != std::string::npos, "bad site '" + text + "' (expected kind:layer[.head])");
  HookSite site;
  site.kind = parse_hook_kind(text.substr(0, colon));
  const std::string rest = text.substr(colon + 1);
  const auto dot = rest.find('.');
  try {
    site.layer = std::stoi(rest.substr(0, dot));
    if (dot != std::string::npos) site.head = std::stoi(rest.substr(dot + 1));
  } catch (const std::exception&) {
    fail("bad site '" + text + "'");
  }
  require(site.kind == HookKind::head_out ? site.head.has_value() : !site.head.has_value(),
          "bad site '" + text + "': head index is required for head_out and only for head_out");
  return site;
}

void validate_site(const ModelConfig& config, const HookSite& site) {
  require(site.layer >= 0 && site.layer < config.n_layers, "site " + to_string(site) + ": layer out of range");
  if (site.kind == HookKind::head_out) {
    require(site.head && *site.head >= 0 && *site.head < config.n_heads,
            "site " + to_string(site) + ": head out of range");
  } else {
    require(!site.head, "site " + to_string(site) + ": head index only valid for head_out");
  }
}

std::vector<HookSite> all_sites(const ModelConfig& config, HookKind kind) {
  std::vector<HookSite> out;
  for (int l = 0; l < config.n_layers; ++l) {
    if (kind == HookKind::head_out) {
      for (int h = 0; h < config.n_heads; ++h) out.push_back(HookSite::head_out(l, h));
    } else {
      out.push_back({kind, l, std::nullopt});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cache and patches

std::span<const float> ActivationCache::at(const HookSite& site, int position) const {
  auto it = entries_.find(site);
  require(it != entries_.end(), "activation cache: site " + to_string(site) + " was not captured");
  if (position == kLastPosition) position = seq_len_ - 1;
  require(position >= 0 && position < seq_len_, "activation cache: position out of range");
  return std::span<const float>(it->second).subspan(static_cast<std::size_t>(position * d_model_),
                                                    static_cast<std::size_t>(d_model_));
}

std::size_t ActivationCache::size() const { return entries_.size() * static_cast<std::size_t>(seq_len_); }

std::vector<HookSite> ActivationCache::sites() const {
  std::vector<HookSite> out;
  for (const auto& [site, _] : entries_) out.push_back(site);
  return out;
}

std::span<const float> ActivationCache::lens_residual(int index) const {
  require(index >= 0 && index < static_cast<int>(lens_.size()), "activation cache: lens residual not captured");
  return lens_[static_cast<std::size_t>(index)];
}

void PatchSpec::add(const HookSite& site, int position, std::vector<float> value) {
  require(keys_.insert({site, position}).second,
          "patch spec: duplicate target " + to_string(site) + " @ " + std::to_string(position));
  entries_.push_back({site, position, std::move(value)});
}

PatchSpec patch_from_cache(const ActivationCache& source, std::span<const HookSite> sites,
                           std::span<const int> source_positions, std::span<const int> target_positions) {
  require(source_positions.size() == target_positions.size(), "patch_from_cache: position lists differ in length");
  PatchSpec spec;
  for (const auto& site : sites) {
    for (std::size_t i = 0; i < source_positions.size(); ++i) {
      auto v = source.at(site, source_positions[i]);
      spec.add(site, target_positions[i], std::vector<float>(v.begin(), v.end()));
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

void layer_norm_row(const float* x, std::size_t d, std::span<const float> w, std::span<const float> b,
                    NormKind kind, double eps, float* y, NormStats* stats) {
  double mean = 0.0;
  if (kind == NormKind::layernorm) {
    for (std::size_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<double>(d);
  }
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const auto inv = static_cast<float>(1.0 / std::sqrt(var + eps));
  const auto m = static_cast<float>(mean);
  for (std::size_t i = 0; i < d; ++i) {
    float v = (x[i] - m) * inv * w[i];
    if (!b.empty()) v += b[i];
    y[i] = v;
  }
  if (stats) *stats = {m, inv};
}

float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2))); }
float silu(float x) { return x / (1.0f + std::exp(-x)); }

std::vector<float> rotary_inv_freq(const ModelConfig& c) {
  const int dims = c.rotary_dims();
  std::vector<float> inv(static_cast<std::size_t>(dims / 2));
  for (int i = 0; i < dims / 2; ++i) {
    double f = 1.0 / std::pow(c.rotary_base, 2.0 * i / dims);
    if (c.rope_scaling) {
      const auto& s = *c.rope_scaling;
      const double low_wavelen = s.original_max_position / s.low_freq_factor;
      const double high_wavelen = s.original_max_position / s.high_freq_factor;
      const double wavelen = 2.0 * std::numbers::pi / f;
      if (wavelen > low_wavelen) {
        f /= s.factor;
      } else if (wavelen >= high_wavelen) {
        const double smooth = (s.original_max_position / wavelen - s.low_freq_factor) /
                              (s.high_freq_factor - s.low_freq_factor);
        f = (1.0 - smooth) * f / s.factor + smooth * f;
      }
    }
    inv[static_cast<std::size_t>(i)] = static_cast<float>(f);
  }
  return inv;
}

// Rotates the first `dims` entries of each head vector in place (pairs i, i + dims/2).
void apply_rotary(float* v, int n_heads, int d_head, int dims, const std::vector<float>& inv_freq, int pos) {
  const int half = dims / 2;
  for (int i = 0; i < half; ++i) {
    const float angle = static_cast<float>(pos) * inv_freq[static_cast<std::size_t>(i)];
    const float c = std::cos(angle);
    const float s = std::sin(angle);
    for (int h = 0; h < n_heads; ++h) {
      float* hv = v + h * d_head;
      const float x1 = hv[i];
      const float x2 = hv[i + half];
      hv[i] = x1 * c - x2 * s;
      hv[i + half] = x2 * c + x1 * s;
    }
  }
}

}  // namespace

class ForwardPass {
 public:
  ForwardPass(const WeightBundle& w, const ForwardRequest& r)
      : w_(w), c_(w.config()), req_(r), seq_(static_cast<int>(r.tokens.size())) {}

  ForwardOutput run();

 private:
  struct LayerPatches {
    std::map<std::pair<HookKind, int>, const std::vector<float>*> site;  // (kind, pos)
    std::map<std::pair<int, int>, const std::vector<float>*> head;       // (head, pos)
  };

  int resolve(int pos) const { return pos == kLastPosition ? seq_ - 1 : pos; }
  std::size_t d() const { return static_cast<std::size_t>(c_.d_model); }
  float* row(std::vector<float>& m, int pos) const { return m.data() + static_cast<std::size_t>(pos) * d(); }

  void validate_inputs();
  void index_patches();
  void capture(HookKind kind, int layer, const std::vector<float>& values);
  void apply(HookKind kind, int layer, std::vector<float>& values);
  void attention(int layer, const std::vector<float>& h, std::vector<float>& attn_out);
  void mlp(int layer, const std::vector<float>& h, std::vector<float>& out);

  const WeightBundle& w_;
  const ModelConfig& c_;
  const ForwardRequest& req_;
  int seq_;
  std::vector<LayerPatches> patches_;
  std::set<HookSite> capture_;
  std::vector<float> inv_freq_;
  ActivationCache cache_;
};

void ForwardPass::validate_inputs() {
  require(seq_ >= 1, "forward: empty token sequence");
  require(seq_ <= c_.max_seq, "forward: sequence too long (" + std::to_string(seq_) + " > max_seq " +
                                  std::to_string(c_.max_seq) + ")");
  for (std::size_t i = 0; i < req_.tokens.size(); ++i) {
    const TokenId t = req_.tokens[i];
    require(t >= 0 && t < c_.vocab_size, "forward: token id " + std::to_string(t) + " at position " +
                                             std::to_string(i) + " out of range");
  }
  for (const auto& site : req_.capture) {
    validate_site(c_, site);
    capture_.insert(site);
  }
}

void ForwardPass::index_patches() {
  patches_.assign(static_cast<std::size_t>(c_.n_layers), {});
  if (!req_.patches) return;
  std::set<std::pair<HookSite, int>> seen;
  for (const auto& e : req_.patches->entries()) {
    validate_site(c_, e.site);
    const int pos = resolve(e.position);
    require(pos >= 0 && pos < seq_, "patch: position " + std::to_string(e.position) + " out of range for " +
                                        std::to_string(seq_) + " tokens");
    require(seen.insert({e.site, pos}).second, "patch: duplicate target " + to_string(e.site));
    require(e.value.size() == d(), "patch: vector for " + to_string(e.site) + " has dimension " +
                                       std::to_string(e.value.size()) + ", expected d_model");
    auto& lp = patches_[static_cast<std::size_t>(e.site.layer)];
    if (e.site.kind == HookKind::head_out) {
      lp.head[{*e.site.head, pos}] = &e.value;
    } else {
      lp.site[{e.site.kind, pos}] = &e.value;
    }
  }
}

void ForwardPass::capture(HookKind kind, int layer, const std::vector<float>& values) {
  HookSite site{kind, layer, std::nullopt};
  if (capture_.count(site)) cache_.entries_[site] = values;
}

void ForwardPass::apply(HookKind kind, int layer, std::vector<float>& values) {
  const auto& lp = patches_[static_cast<std::size_t>(layer)];
  for (int pos = 0; pos < seq_; ++pos) {
    auto it = lp.site.find({kind, pos});
    if (it != lp.site.end()) std::copy(it->second->begin(), it->second->end(), row(values, pos));
  }
}

void ForwardPass::attention(int layer, const std::vector<float>& h, std::vector<float>& attn_out) {
  const auto& L = w_.layer(layer);
  const int H = c_.n_heads;
  const int KV = c_.n_kv_heads;
  const int dh = c_.d_head;
  const auto S = static_cast<std::size_t>(seq_);
  const auto qdim = static_cast<std::size_t>(H * dh);
  const auto kvdim = static_cast<std::size_t>(KV * dh);

  std::vector<float> q(S * qdim), k(S * kvdim), v(S * kvdim);
  kernels::linear(h, S, d(), L.q_w, qdim, L.q_b, q);
  kernels::linear(h, S, d(), L.k_w, kvdim, L.k_b, k);
  kernels::linear(h, S, d(), L.v_w, kvdim, L.v_b, v);
  if (c_.positional == PositionalKind::rotary) {
    const int dims = c_.rotary_dims();
    for (int s = 0; s < seq_; ++s) {
      apply_rotary(q.data() + static_cast<std::size_t>(s) * qdim, H, dh, dims, inv_freq_, s);
      apply_rotary(k.data() + static_cast<std::size_t>(s) * kvdim, KV, dh, dims, inv_freq_, s);
    }
  }

  // z[s, h*dh + e]: per-head value mix before the output projection.
  std::vector<float> z(S * qdim, 0.0f);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const int group = c_.kv_group();
  const auto total = static_cast<std::int64_t>(H) * seq_;
  const bool par = !omp_in_parallel() && total * seq_ * dh >= (1 << 15);
#pragma omp parallel if (par)
  {
    std::vector<float> scores(S);
#pragma omp for schedule(static)
    for (std::int64_t idx = 0; idx < total; ++idx) {
      const int head = static_cast<int>(idx / seq_);
      const int i = static_cast<int>(idx % seq_);
      const int kvh = head / group;
      const float* qi = q.data() + static_cast<std::size_t>(i) * qdim + static_cast<std::size_t>(head * dh);
      float mx = -INFINITY;
      for (int j = 0; j <= i; ++j) {
        const float* kj = k.data() + static_cast<std::size_t>(j) * kvdim + static_cast<std::size_t>(kvh * dh);
        scores[static_cast<std::size_t>(j)] = kernels::dot(qi, kj, static_cast<std::size_t>(dh)) * scale;
        mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
      }
      float denom = 0.0f;
      for (int j = 0; j <= i; ++j) {
        auto& sj = scores[static_cast<std::size_t>(j)];
        sj = std::exp(sj - mx);
        denom += sj;
      }
      float* zi = z.data() + static_cast<std::size_t>(i) * qdim + static_cast<std::size_t>(head * dh);
      for (int j = 0; j <= i; ++j) {
        const float p = scores[static_cast<std::size_t>(j)] / denom;
        const float* vj = v.data() + static_cast<std::size_t>(j) * kvdim + static_cast<std::size_t>(kvh * dh);
        for (int e = 0; e < dh; ++e) zi[e] += p * vj[e];
      }
    }
  }

  kernels::linear(z, S, qdim, L.o_w, d(), L.o_b, attn_out);

  // Per-head contributions are materialised only where a head is captured or
  // patched. The output bias is shared equally between heads so that the
  // contributions sum to attn_out.
  const auto& lp = patches_[static_cast<std::size_t>(layer)];
  std::vector<bool> need_pos(S, false);
  std::vector<bool> patched_pos(S, false);
  bool capture_any = false;
  for (int hd = 0; hd < H; ++hd) capture_any = capture_any || capture_.count(HookSite::head_out(layer, hd));
  if (capture_any) std::fill(need_pos.begin(), need_pos.end(), true);
  for (const auto& [key, _] : lp.head) {
    need_pos[static_cast<std::size_t>(key.second)] = true;
    patched_pos[static_cast<std::size_t>(key.second)] = true;
  }
  if (!capture_any && lp.head.empty()) return;

  const auto dd = d();
  std::vector<float> contrib(static_cast<std::size_t>(H) * dd);
  std::vector<std::vector<float>*> captured(static_cast<std::size_t>(H), nullptr);
  for (int hd = 0; hd < H; ++hd) {
    const auto site = HookSite::head_out(layer, hd);
    if (capture_.count(site)) {
      auto& buf = cache_.entries_[site];
      buf.assign(S * dd, 0.0f);
      captured[static_cast<std::size_t>(hd)] = &buf;
    }
  }
  const float bias_share = 1.0f / static_cast<float>(H);
  for (int pos = 0; pos < seq_; ++pos) {
    if (!need_pos[static_cast<std::size_t>(pos)]) continue;
    const float* zp = z.data() + static_cast<std::size_t>(pos) * qdim;
    for (int hd = 0; hd < H; ++hd) {
      float* out = contrib.data() + static_cast<std::size_t>(hd) * dd;
      for (std::size_t r = 0; r < dd; ++r) {
        float val = kernels::dot(L.o_w.data() + r * qdim + static_cast<std::size_t>(hd * dh),
                                 zp + static_cast<std::size_t>(hd * dh), static_cast<std::size_t>(dh));
        if (!L.o_b.empty()) val += L.o_b[r] * bias_share;
        out[r] = val;
      }
      auto it = lp.head.find({hd, pos});
      if (it != lp.head.end()) std::copy(it->second->begin(), it->second->end(), out);
      if (auto* buf = captured[static_cast<std::size_t>(hd)]) {
        std::copy(out, out + dd, buf->data() + static_cast<std::size_t>(pos) * dd);
      }
    }
    if (patched_pos[static_cast<std::size_t>(pos)]) {
      float* a = attn_out.data() + static_cast<std::size_t>(pos) * dd;
      std::fill(a, a + dd, 0.0f);
      for (int hd = 0; hd < H; ++hd) {
        const float* src = contrib.data() + static_cast<std::size_t>(hd) * dd;
        for (std::size_t r = 0; r < dd; ++r) a[r] += src[r];
      }
    }
  }
}

void ForwardPass::mlp(int layer, const std::vector<float>& h, std::vector<float>& out) {
  const auto& L = w_.layer(layer);
  const auto S = static_cast<std::size_t>(seq_);
  const auto m = static_cast<std::size_t>(c_.d_mlp);
  if (c_.mlp == MlpKind::gelu) {
    std::vector<float> u(S * m);
    kernels::linear(h, S, d(), L.in_w, m, L.in_b, u);
    for (auto& x : u) x = gelu(x);
    kernels::linear(u, S, m, L.out_w, d(), L.out_b, out);
  } else {
    std::vector<float> g(S * m), u(S * m);
    kernels::linear(h, S, d(), L.gate_w, m, {}, g);
    kernels::linear(h, S, d(), L.up_w, m, {}, u);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = silu(g[i]) * u[i];
    kernels::linear(g, S, m, L.down_w, d(), {}, out);
  }
}

ForwardOutput ForwardPass::run() {
  validate_inputs();
  index_patches();
  if (c_.positional == PositionalKind::rotary) inv_freq_ = rotary_inv_freq(c_);
  cache_.seq_len_ = seq_;
  cache_.d_model_ = c_.d_model;

  const auto S = static_cast<std::size_t>(seq_);
  const auto dd = d();
  std::vector<float> x(S * dd);
  for (int s = 0; s < seq_; ++s) {
    const auto tok = static_cast<std::size_t>(req_.tokens[static_cast<std::size_t>(s)]);
    std::copy_n(w_.embed().data() + tok * dd, dd, row(x, s));
    if (c_.positional == PositionalKind::learned) {
      const float* p = w_.pos_embed().data() + static_cast<std::size_t>(s) * dd;
      float* r = row(x, s);
      for (std::size_t i = 0; i < dd; ++i) r[i] += p[i];
    }
  }
  auto snapshot_last = [&] {
    if (req_.capture_lens) cache_.lens_.emplace_back(row(x, seq_ - 1), row(x, seq_ - 1) + dd);
  };
  snapshot_last();

  std::vector<float> h(S * dd), attn(S * dd), mlp_out(S * dd);
  for (int l = 0; l < c_.n_layers; ++l) {
    const auto& L = w_.layer(l);
    apply(HookKind::resid_pre, l, x);
    capture(HookKind::resid_pre, l, x);

    for (int s = 0; s < seq_; ++s) layer_norm_row(row(x, s), dd, L.norm1_w, L.norm1_b, c_.norm, c_.norm_eps, row(h, s), nullptr);
    attention(l, h, attn);
    apply(HookKind::attn_out, l, attn);
    capture(HookKind::attn_out, l, attn);

    if (c_.residual == ResidualVariant::parallel) {
      for (int s = 0; s < seq_; ++s) layer_norm_row(row(x, s), dd, L.norm2_w, L.norm2_b, c_.norm, c_.norm_eps, row(h, s), nullptr);
      mlp(l, h, mlp_out);
      apply(HookKind::mlp_out, l, mlp_out);
      capture(HookKind::mlp_out, l, mlp_out);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] + attn[i]) + mlp_out[i];
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn[i];
      for (int s = 0; s < seq_; ++s) layer_norm_row(row(x, s), dd, L.norm2_w, L.norm2_b, c_.norm, c_.norm_eps, row(h, s), nullptr);
      mlp(l, h, mlp_out);
      apply(HookKind::mlp_out, l, mlp_out);
      capture(HookKind::mlp_out, l, mlp_out);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += mlp_out[i];
    }
    snapshot_last();
  }

  ForwardOutput out;
  std::vector<float> last(row(x, seq_ - 1), row(x, seq_ - 1) + dd);
  std::vector<float> normed = apply_final_norm(w_, last, &cache_.final_stats_);
  out.logits.assign(static_cast<std::size_t>(c_.vocab_size), 0.0f);
  kernels::project(normed, w_.unembed(), out.logits.size(), out.logits);
  out.cache = std::move(cache_);
  return out;
}

ForwardOutput run_forward(const WeightBundle& weights, const ForwardRequest& request) {
  return ForwardPass(weights, request).run();
}

std::vector<float> forward_logits(const WeightBundle& weights, std::span<const TokenId> tokens) {
  ForwardRequest req;
  req.tokens = tokens;
  return run_forward(weights, req).logits;
}

ForwardOutput forward_with_cache(const WeightBundle& weights, std::span<const TokenId> tokens,
                                 std::span<const HookSite> sites) {
  ForwardRequest req;
  req.tokens = tokens;
  req.capture = sites;
  req.capture_lens = true;
  return run_forward(weights, req);
}

std::vector<float> forward_with_patches(const WeightBundle& weights, std::span<const TokenId> tokens,
                                        const PatchSpec& patches) {
  ForwardRequest req;
  req.tokens = tokens;
  req.patches = &patches;
  return run_forward(weights, req).logits;
}

std::vector<float> apply_final_norm(const WeightBundle& weights, std::span<const float> residual, NormStats* stats_out) {
  const auto& c = weights.config();
  require(residual.size() == static_cast<std::size_t>(c.d_model), "final norm: residual has wrong dimension");
  std::vector<float> out(residual.size());
  layer_norm_row(residual.data(), residual.size(), weights.final_norm_w(), weights.final_norm_b(), c.norm, c.norm_eps,
                 out.data(), stats_out);
  return out;
}

std::vector<float> residual_to_logits(const WeightBundle& weights, std::span<const float> residual) {
  const auto normed = apply_final_norm(weights, residual);
  std::vector<float> logits(static_cast<std::size_t>(weights.config().vocab_size));
  kernels::project(normed, weights.unembed(), logits.size(), logits);
  return logits;
}

std::vector<float> softmax(std::span<const float> logits) {
  std::vector<float> p(logits.size());
  if (logits.empty()) return p;
  const float mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += std::exp(static_cast<double>(logits[i]) - mx);
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = static_cast<float>(std::exp(static_cast<double>(logits[i]) - mx) / sum);
  return p;
}

double token_probability(std::span<const float> logits, TokenId token) {
  require(token >= 0 && static_cast<std::size_t>(token) < logits.size(), "token probability: id out of range");
  const float mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float l : logits) sum += std::exp(static_cast<double>(l) - mx);
  return std::exp(static_cast<double>(logits[static_cast<std::size_t>(token)]) - mx) / sum;
}

}  // namespace fixlab
