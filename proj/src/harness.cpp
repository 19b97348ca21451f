#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "fixlab/error.hpp"
#include "fixlab/harness.hpp"

namespace fixlab {

namespace {

constexpr std::size_t kChunk = 64;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_context(const RunContext& ctx) {
  require(ctx.weights && ctx.tokenizer && ctx.library, "harness: incomplete run context");
  require(ctx.tokenizer->vocab_size() <= ctx.weights->config().vocab_size,
          "harness: tokenizer vocabulary (" + std::to_string(ctx.tokenizer->vocab_size()) +
              ") exceeds the model's (" + std::to_string(ctx.weights->config().vocab_size) + ")");
}

struct Unit {
  ConditionSpec condition;
  std::string item_id;
};

TrialRecord base_record(const std::string& model, const PromptInstance& p) {
  TrialRecord r;
  r.model = model;
  r.task = p.task;
  r.condition = p.condition.name();
  r.shots = p.condition.shots;
  r.seed = p.condition.seed;
  r.item_id = p.query_item_id;
  r.query_label = p.query_label;
  if (p.condition.kind == ConditionKind::threshold_k) r.k = p.condition.param;
  return r;
}

nlohmann::json ci_json(const CiResult& ci) { return nlohmann::json::array({ci.lo, ci.hi}); }

}  // namespace

void ExperimentPlan::validate() const {
  require(!model_name.empty(), "plan: model name is empty");
  require(!conditions.empty(), "plan: no conditions");
  require(!seeds.empty(), "plan: no seeds");
  std::set<std::uint64_t> s(seeds.begin(), seeds.end());
  require(s.size() == seeds.size(), "plan: seeds must be distinct");
  require(shots >= 0, "plan: shots must be non-negative");
  require(items_per_class >= 1, "plan: items per class must be positive");
  require(bootstrap_draws >= 1, "plan: bootstrap draws must be positive");
  for (const auto& c : conditions) parse_condition(c, shots, seeds.front());
}

std::vector<std::string> query_items(const Task& task, const ConditionSpec& condition, int items_per_class) {
  const auto label = query_class(task, condition);
  const auto& items = task.classes[static_cast<std::size_t>(task.class_index(label))].items;
  require(items_per_class <= static_cast<int>(items.size()),
          "plan: " + std::to_string(items_per_class) + " items requested but class " + label + " has " +
              std::to_string(items.size()));
  std::vector<std::string> out;
  for (int i = 0; i < items_per_class; ++i) out.push_back(items[static_cast<std::size_t>(i)].id);
  return out;
}

TrialRecord score_prompt(const RunContext& ctx, const Task& task, const PromptInstance& p, bool lens, bool calibrate,
                         const std::string& model_name) {
  const auto& w = *ctx.weights;
  TrialRecord r = base_record(model_name, p);
  ForwardRequest req;
  req.tokens = p.token_ids;
  req.capture_lens = lens && !p.plan;
  const auto out = run_forward(w, req);
  const auto probs = softmax(out.logits);
  for (TokenId t : p.demo_set) r.p_demo_set += probs[static_cast<std::size_t>(t)];

  if (p.plan) {
    auto tokens = p.token_ids;
    double forced = 1.0;
    std::vector<float> logits = out.logits;
    for (TokenId f : p.plan->forced) {
      forced *= token_probability(logits, f);
      tokens.push_back(f);
      logits = forward_logits(w, tokens);
    }
    r.p_forced = forced;
    for (std::size_t i = 0; i < p.plan->options.size(); ++i) {
      r.p_next[p.plan->option_labels[i]] = token_probability(logits, p.plan->options[i]);
    }
    r.p_target = r.p_next.at(p.query_label);
    for (const auto& [label, v] : r.p_next) {
      if (label != p.query_label) r.p_foils[label] = v;
    }
  } else {
    r.p_target = probs[static_cast<std::size_t>(p.answer_token)];
    std::size_t f = 0;
    for (const auto& c : task.classes) {
      if (c.label == p.query_label) continue;
      r.p_foils[c.label] = probs[static_cast<std::size_t>(p.foil_tokens[f++])];
    }
    if (req.capture_lens) {
      require(!p.foil_tokens.empty(), "lens: task " + task.name + " has no foil label");
      const auto traj = lens_from_cache(w, out.cache, p.answer_token, p.foil_tokens.front());
      for (const auto& e : traj.layers) {
        r.lens_p_target.push_back(e.p_target);
        r.lens_p_foil.push_back(e.p_foil);
      }
    }
    if (calibrate) {
      const auto cf = softmax(forward_logits(w, content_free_tokens(p, task, *ctx.tokenizer)));
      for (const auto& c : task.classes) {
        r.p_content_free[c.label] = cf[static_cast<std::size_t>(verify_single_token(c.label, *ctx.tokenizer))];
      }
    }
  }
  r.accuracy_bit = accuracy_from_probabilities(r.p_target, r.p_foils);
  return r;
}

std::vector<TrialRecord> run_experiment(const ExperimentPlan& plan, const RunContext& ctx) {
  plan.validate();
  check_context(ctx);
  const auto& task = ctx.library->get(plan.task);
  verify_task_tokens(task, *ctx.tokenizer);

  std::filesystem::create_directories(plan.out_dir);
  const auto path = plan.out_dir / "records.jsonl";
  std::vector<TrialRecord> records;
  std::set<std::string> done;
  if (std::filesystem::exists(path)) {
    records = read_records(path);
    for (const auto& r : records) done.insert(r.key());
    // Drop any truncated tail before appending.
    write_records(path, records);
  }

  std::vector<Unit> pending;
  for (const auto& name : plan.conditions) {
    for (auto seed : plan.seeds) {
      const auto cond = parse_condition(name, plan.shots, seed);
      for (const auto& id : query_items(task, cond, plan.items_per_class)) {
        TrialRecord probe;
        probe.condition = cond.name();
        probe.seed = seed;
        probe.item_id = id;
        if (!done.count(probe.key())) pending.push_back({cond, id});
      }
    }
  }

  for (std::size_t start = 0; start < pending.size(); start += kChunk) {
    const auto n = std::min(kChunk, pending.size() - start);
    std::vector<TrialRecord> chunk(n);
    std::vector<std::string> errors(n);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(n); ++i) {
      const auto& u = pending[start + static_cast<std::size_t>(i)];
      try {
        const auto prompt = build_prompt(task, u.condition, u.item_id, *ctx.tokenizer);
        chunk[static_cast<std::size_t>(i)] = score_prompt(ctx, task, prompt, plan.lens, plan.calibrate, plan.model_name);
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(i)] = e.what();
      }
    }
    for (const auto& e : errors) {
      if (!e.empty()) fail(e);
    }
    append_records(path, chunk);
    records.insert(records.end(), chunk.begin(), chunk.end());
  }

  write_records(path, records);
  records = read_records(path);
  write_json(plan.out_dir / "summary.json", stats_summary(records, plan.stats_seed, plan.bootstrap_draws));
  return records;
}

std::vector<PairedItem> make_paired_items(const ExperimentPlan& plan, const RunContext& ctx,
                                          const std::string& gp_condition, const std::string& ctrl_condition) {
  plan.validate();
  check_context(ctx);
  const auto& task = ctx.library->get(plan.task);
  verify_task_tokens(task, *ctx.tokenizer);
  std::vector<PairedItem> items;
  for (auto seed : plan.seeds) {
    const auto gp = parse_condition(gp_condition, plan.shots, seed);
    const auto ctrl = parse_condition(ctrl_condition, plan.shots, seed);
    require(query_class(task, gp) == query_class(task, ctrl),
            "pairing: " + gp_condition + " and " + ctrl_condition + " query different classes");
    for (const auto& id : query_items(task, gp, plan.items_per_class)) {
      const auto a = build_prompt(task, gp, id, *ctx.tokenizer);
      const auto b = build_prompt(task, ctrl, id, *ctx.tokenizer);
      require(!a.plan, "pairing: multi-token verbalizers are not supported for patching");
      PairedItem it;
      it.id = std::to_string(seed) + "/" + id;
      it.cluster = seed;
      it.gp_tokens = a.token_ids;
      it.ctrl_tokens = b.token_ids;
      it.query_token_count = a.query_token_count;
      it.target = a.answer_token;
      items.push_back(std::move(it));
    }
  }
  return items;
}

std::vector<TrialRecord> intervention_records(const ExperimentPlan& plan, const RunContext& ctx,
                                              const std::vector<PairedItem>& items,
                                              const std::string& intervention_id,
                                              const std::vector<RecoveryResult>& results) {
  require(items.size() == results.size(), "intervention records: one result per item required");
  const auto& task = ctx.library->get(plan.task);
  std::vector<TrialRecord> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto slash = items[i].id.find('/');
    const auto item_id = items[i].id.substr(slash + 1);
    const auto cond = parse_condition("gp", plan.shots, items[i].cluster);
    TrialRecord r;
    r.model = plan.model_name;
    r.task = task.name;
    r.condition = "gp";
    r.shots = plan.shots;
    r.seed = items[i].cluster;
    r.item_id = item_id;
    r.query_label = query_class(task, cond);
    // Probabilities are those of the patched run.
    const auto& res = results[i];
    r.p_target = res.p_patched;
    r.accuracy_bit = 1;
    r.intervention = InterventionRecord{intervention_id, res};
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json stats_summary(const std::vector<TrialRecord>& records, std::uint64_t stats_seed, int draws) {
  using Group = std::tuple<std::string, std::string, std::string>;
  std::map<Group, std::vector<const TrialRecord*>> plain;
  std::map<Group, std::vector<const TrialRecord*>> patched;
  for (const auto& r : records) {
    if (r.intervention) {
      patched[{r.model, r.task, r.intervention->id}].push_back(&r);
    } else {
      plain[{r.model, r.task, r.condition}].push_back(&r);
    }
  }

  nlohmann::json out = nlohmann::json::array();
  auto entry = [&](const std::string& statistic, const Group& g, const std::string& cond_key,
                   const std::vector<Observation>& obs, std::size_t n_excluded) {
    nlohmann::json e{{"statistic", statistic},   {"model", std::get<0>(g)}, {"task", std::get<1>(g)},
                     {cond_key, std::get<2>(g)}, {"n", obs.size()},         {"n_excluded", n_excluded},
                     {"test", nullptr},          {"p_raw", nullptr},        {"p_adjusted", nullptr}};
    std::vector<double> v;
    std::set<std::uint64_t> clusters;
    for (const auto& o : obs) {
      v.push_back(o.value);
      clusters.insert(o.cluster);
    }
    e["point"] = v.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean(v));
    e["ci"] = nullptr;
    if (clusters.size() >= 2) {
      const auto seed = stats_seed ^ fnv1a(statistic + "|" + std::get<0>(g) + "|" + std::get<1>(g) + "|" + std::get<2>(g));
      e["ci"] = ci_json(cluster_bootstrap_ci(obs, draws, 0.95, seed));
    }
    return e;
  };

  std::vector<std::size_t> family;  // indices of entries sharing one Bonferroni correction
  std::vector<double> family_p;
  for (const auto& [g, rs] : plain) {
    std::vector<Observation> acc, pt;
    for (const auto* r : rs) {
      acc.push_back({r->seed, static_cast<double>(r->accuracy_bit)});
      pt.push_back({r->seed, r->p_target});
    }
    out.push_back(entry("accuracy", g, "condition", acc, 0));
    auto p_entry = entry("p_target", g, "condition", pt, 0);

    const Group ref{std::get<0>(g), std::get<1>(g), "ctrl_balanced"};
    if (std::get<2>(g) != "ctrl_balanced" && plain.count(ref)) {
      std::map<std::pair<std::uint64_t, std::string>, double> ref_p;
      for (const auto* r : plain.at(ref)) ref_p[{r->seed, r->item_id}] = r->p_target;
      std::vector<double> diffs;
      for (const auto* r : rs) {
        const auto it = ref_p.find({r->seed, r->item_id});
        if (it != ref_p.end()) diffs.push_back(r->p_target - it->second);
      }
      p_entry["test"] = "wilcoxon_vs_ctrl_balanced";
      try {
        p_entry["p_raw"] = wilcoxon_signed_rank(diffs).p_two_sided;
        family.push_back(out.size());
        family_p.push_back(p_entry["p_raw"].get<double>());
      } catch (const Error&) {
        p_entry["test"] = "wilcoxon_vs_ctrl_balanced (too few paired differences)";
      }
    }
    out.push_back(std::move(p_entry));

    if (rs.front()->p_forced) {
      std::vector<Observation> pf;
      for (const auto* r : rs) pf.push_back({r->seed, *r->p_forced});
      out.push_back(entry("p_forced", g, "condition", pf, 0));
    }
    if (!rs.front()->p_content_free.empty()) {
      std::vector<Observation> cal;
      for (const auto* r : rs) {
        std::vector<double> probs, p_hat;
        int truth = -1;
        for (const auto& [label, p] : r->p_content_free) {
          if (label == r->query_label) {
            truth = static_cast<int>(probs.size());
            probs.push_back(r->p_target);
          } else {
            probs.push_back(r->p_foils.at(label));
          }
          p_hat.push_back(p);
        }
        const std::vector<int> t{truth};
        cal.push_back({r->seed, contextual_calibration({probs}, t, p_hat).calibrated_accuracy});
      }
      out.push_back(entry("calibrated_accuracy", g, "condition", cal, 0));
    }
  }

  // Dose response over threshold_k records, per model and task.
  std::map<std::pair<std::string, std::string>, std::vector<DoseObservation>> dose;
  for (const auto& r : records) {
    if (!r.intervention && r.k) dose[{r.model, r.task}].push_back({*r.k, r.seed, static_cast<double>(r.accuracy_bit)});
  }
  for (const auto& [mt, obs] : dose) {
    std::set<int> ks;
    for (const auto& o : obs) ks.insert(o.k);
    if (ks.size() < 2) continue;
    nlohmann::json e{{"statistic", "dose_spearman"}, {"model", mt.first}, {"task", mt.second}, {"n", obs.size()},
                     {"n_excluded", 0}, {"ci", nullptr}, {"test", "spearman_one_sided_negative"}};
    try {
      const auto d = dose_response(obs, draws, stats_seed ^ fnv1a("dose|" + mt.first + "|" + mt.second));
      e["point"] = d.spearman.rho;
      e["p_raw"] = d.spearman.p;
      e["p_adjusted"] = d.spearman.p;
    } catch (const Error& err) {
      e["point"] = nullptr;
      e["p_raw"] = nullptr;
      e["p_adjusted"] = nullptr;
      e["test"] = std::string("spearman_one_sided_negative (") + err.what() + ")";
    }
    out.push_back(std::move(e));
  }

  for (const auto& [g, rs] : patched) {
    std::vector<Observation> rec;
    std::size_t excluded = 0;
    for (const auto* r : rs) {
      if (r->intervention->result.excluded()) {
        ++excluded;
      } else {
        rec.push_back({r->seed, *r->intervention->result.recovery});
      }
    }
    out.push_back(entry("recovery", g, "intervention", rec, excluded));
  }

  if (family_p.empty()) return out;
  const auto adjusted = bonferroni(family_p);
  for (std::size_t i = 0; i < family.size(); ++i) out[family[i]]["p_adjusted"] = adjusted[i];
  return out;
}

}  // namespace fixlab
