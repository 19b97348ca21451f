#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fixlab/error.hpp"
#include "fixlab/harness.hpp"
#include "fixlab/kernels.hpp"

using namespace fixlab;

namespace {

struct Options {
  std::string model;
  std::string tokenizer;
  std::string tasks_file = std::string(FIXLAB_DATA_DIR) + "/tasks.json";
  std::string model_name;
  std::string task = "category";
  std::vector<std::string> conditions;
  std::string seeds;
  int shots = 8;
  int items = 20;
  std::string out = "out";
  std::uint64_t stats_seed = 0;
  int threads = 0;
  int draws = kDefaultDraws;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  if (text.empty()) return default_seeds();
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      fail("bad seed '" + part + "'");
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, sep)) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

std::pair<int, int> parse_head(const std::string& text) {
  const auto dot = text.find('.');
  require(dot != std::string::npos, "bad head '" + text + "' (expected layer.head)");
  try {
    return {std::stoi(text.substr(0, dot)), std::stoi(text.substr(dot + 1))};
  } catch (const std::exception&) {
    fail("bad head '" + text + "'");
  }
}

/// Model, tokenizer and task library loaded once per invocation.
struct Session {
  WeightBundle weights;
  Tokenizer tokenizer;
  TaskLibrary library;
  ExperimentPlan plan;

  RunContext context() const { return {&weights, &tokenizer, &library}; }
};

Tokenizer load_tokenizer(const Options& o) {
  std::filesystem::path path = o.tokenizer;
  if (path.empty()) path = std::filesystem::path(o.model).parent_path() / "tokenizer.json";
  require(std::filesystem::exists(path), "tokenizer file not found: " + path.string() + " (use --tokenizer)");
  return Tokenizer::from_file(path);
}

Session open_session(const Options& o, std::vector<std::string> default_conditions) {
  require(!o.model.empty(), "--model is required");
  require(std::filesystem::exists(o.model), "model file not found: " + o.model);
  auto weights = load_weights(o.model);
  auto tok = load_tokenizer(o);
  const auto& c = weights.config();
  tok.set_bos(c.bos_policy, c.bos_token_id);
  auto library = TaskLibrary::load(o.tasks_file);
  ExperimentPlan plan;
  plan.model_name = o.model_name.empty() ? std::filesystem::path(o.model).stem().string() : o.model_name;
  plan.task = o.task;
  plan.conditions = o.conditions.empty() ? std::move(default_conditions) : o.conditions;
  plan.seeds = parse_seeds(o.seeds);
  plan.shots = o.shots;
  plan.items_per_class = o.items;
  plan.out_dir = o.out;
  plan.stats_seed = o.stats_seed;
  plan.bootstrap_draws = o.draws;
  plan.experiment_id = plan.model_name + "/" + plan.task;
  plan.validate();
  return {std::move(weights), std::move(tok), std::move(library), std::move(plan)};
}

/// Merges into <out>/interventions.jsonl, replacing records with the same key.
void store_interventions(const ExperimentPlan& plan, const std::vector<TrialRecord>& fresh) {
  std::filesystem::create_directories(plan.out_dir);
  const auto path = plan.out_dir / "interventions.jsonl";
  std::set<std::string> keys;
  for (const auto& r : fresh) keys.insert(r.key());
  std::vector<TrialRecord> all;
  if (std::filesystem::exists(path)) {
    for (auto& r : read_records(path)) {
      if (!keys.count(r.key())) all.push_back(std::move(r));
    }
  }
  all.insert(all.end(), fresh.begin(), fresh.end());
  write_records(path, all);
}

void print_row(const RecoveryRow& row) {
  std::printf("%-28s n=%zu excluded=%zu recovery=%s CI=[%s, %s]\n", row.id.c_str(), row.n_items, row.n_excluded,
              format_number(row.mean_recovery).c_str(), format_number(row.ci.lo).c_str(),
              format_number(row.ci.hi).c_str());
}

int cmd_run(const Options& o, bool lens, bool calibrate) {
  auto s = open_session(o, {"gp", "ctrl_balanced"});
  s.plan.lens = lens;
  s.plan.calibrate = calibrate;
  const auto records = run_experiment(s.plan, s.context());
  std::printf("%zu records in %s\n", records.size(), (s.plan.out_dir / "records.jsonl").c_str());
  if (lens) emit_report(records, "fig3", s.plan.out_dir, s.plan.stats_seed, s.plan.bootstrap_draws);
  return 0;
}

int cmd_patch(const Options& o, const std::string& sites_text, bool loo, const std::string& positions) {
  auto s = open_session(o, {"gp", "ctrl_balanced"});
  std::vector<HookSite> sites;
  for (const auto& t : split(sites_text, ',')) sites.push_back(parse_site(t));
  require(!sites.empty(), "--sites is required");
  const auto items = make_paired_items(s.plan, s.context());
  std::vector<RecoveryResult> results;
  std::string id;
  for (const auto& site : sites) id += (id.empty() ? "" : "+") + to_string(site);
  if (loo) {
    results = loo_mean_patch(s.weights, items, sites);
    id = "loo:" + id;
  } else {
    require(positions == "last" || positions == "all", "--positions must be 'last' or 'all'");
    const auto pos = positions == "all" ? PatchPositions::all : PatchPositions::last;
    results.resize(items.size());
    std::vector<std::string> errors(items.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(items.size()); ++i) {
      try {
        results[static_cast<std::size_t>(i)] = paired_patch_item(s.weights, items[static_cast<std::size_t>(i)], sites, pos);
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(i)] = e.what();
      }
    }
    for (const auto& e : errors) {
      if (!e.empty()) fail(e);
    }
    if (pos == PatchPositions::all) id += "@all";
  }
  store_interventions(s.plan, intervention_records(s.plan, s.context(), items, id, results));
  const auto row = summarize_recovery(id, results, items, s.plan.bootstrap_draws, s.plan.stats_seed);
  write_recovery_table(s.plan.out_dir / "patch.csv", std::vector<RecoveryRow>{row});
  print_row(row);
  return 0;
}

int cmd_enumerate(const Options& o, int combo_size, const std::string& kind) {
  auto s = open_session(o, {"gp", "ctrl_balanced"});
  const auto items = make_paired_items(s.plan, s.context());
  const auto combos = enumerate_layer_combos(s.weights, items, combo_size, parse_hook_kind(kind));
  std::vector<RecoveryRow> rows;
  for (const auto& c : combos) {
    rows.push_back(summarize_recovery(combo_id(c.layers), c.items, items, s.plan.bootstrap_draws, s.plan.stats_seed));
  }
  std::filesystem::create_directories(s.plan.out_dir);
  const auto path = s.plan.out_dir / ("combos_" + kind + "_k" + std::to_string(combo_size) + ".csv");
  write_recovery_table(path, rows);
  std::printf("%zu combinations ranked in %s\n", rows.size(), path.c_str());
  for (std::size_t i = 0; i < std::min<std::size_t>(rows.size(), 10); ++i) print_row(rows[i]);
  return 0;
}

int cmd_heads(const Options& o, int max_k) {
  auto s = open_session(o, {"gp", "ctrl_balanced"});
  const auto items = make_paired_items(s.plan, s.context());
  const auto r = cumulative_head_patch(s.weights, items, max_k);
  std::vector<RecoveryRow> ranked;
  for (const auto& h : r.ranked) {
    ranked.push_back(summarize_recovery(head_id(h.layer, h.head), h.items, items, s.plan.bootstrap_draws, s.plan.stats_seed));
  }
  std::filesystem::create_directories(s.plan.out_dir);
  write_recovery_table(s.plan.out_dir / "heads.csv", ranked);
  std::vector<TrialRecord> records;
  std::string list;
  for (const auto& p : r.curve) {
    if (p.k == 0) continue;
    const auto& h = r.ranked[static_cast<std::size_t>(p.k - 1)];
    list += (list.empty() ? "" : "+") + head_id(h.layer, h.head);
    const auto id = "heads:top" + std::to_string(p.k) + ":" + list;
    auto recs = intervention_records(s.plan, s.context(), items, id, p.items);
    records.insert(records.end(), recs.begin(), recs.end());
    std::printf("k=%-3d %-40s recovery=%s\n", p.k, head_id(h.layer, h.head).c_str(),
                format_number(p.mean_recovery).c_str());
  }
  store_interventions(s.plan, records);
  return 0;
}

int cmd_dla(const Options& o) {
  auto s = open_session(o, {"gp", "ctrl_balanced"});
  const auto items = make_paired_items(s.plan, s.context());
  const auto& c = s.weights.config();
  const auto& task = s.library.get(s.plan.task);
  // Foil: the label the garden-path demonstrations carry.
  std::vector<std::vector<double>> heads(static_cast<std::size_t>(c.n_layers), std::vector<double>(static_cast<std::size_t>(c.n_heads)));
  std::vector<double> mlp(static_cast<std::size_t>(c.n_layers));
  for (const auto& it : items) {
    const auto prompt = build_prompt(task, parse_condition("gp", s.plan.shots, it.cluster),
                                     it.id.substr(it.id.find('/') + 1), s.tokenizer);
    const auto rep = dla(s.weights, it.gp_tokens, prompt.answer_token, prompt.foil_tokens.front());
    for (int l = 0; l < c.n_layers; ++l) {
      for (int h = 0; h < c.n_heads; ++h) heads[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] += rep.heads[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
      mlp[static_cast<std::size_t>(l)] += rep.mlp[static_cast<std::size_t>(l)];
    }
  }
  std::filesystem::create_directories(s.plan.out_dir);
  std::ofstream out(s.plan.out_dir / "dla.csv");
  out << "component,mean_contribution\n";
  const double n = static_cast<double>(items.size());
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      out << head_id(l, h) << ',' << format_number(heads[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] / n) << '\n';
    }
    out << "L" << l << "-MLP," << format_number(mlp[static_cast<std::size_t>(l)] / n) << '\n';
  }
  std::printf("mean contributions to logit(answer) - logit(demo label) in %s\n", (s.plan.out_dir / "dla.csv").c_str());
  return 0;
}

int cmd_path(const Options& o, const std::string& sender, const std::string& receiver) {
  auto s = open_session(o, {"gp", "ctrl_balanced"});
  const auto items = make_paired_items(s.plan, s.context());
  const auto a = parse_head(sender), b = parse_head(receiver);
  std::vector<RecoveryResult> results(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) results[i] = path_patch(s.weights, items[i], a, b);
  const auto id = "path:" + head_id(a.first, a.second) + ">" + head_id(b.first, b.second);
  store_interventions(s.plan, intervention_records(s.plan, s.context(), items, id, results));
  print_row(summarize_recovery(id, results, items, s.plan.bootstrap_draws, s.plan.stats_seed));
  return 0;
}

std::vector<TrialRecord> load_all(const std::vector<std::string>& paths) {
  std::vector<TrialRecord> all;
  for (const auto& p : paths) {
    auto r = read_records(p);
    all.insert(all.end(), r.begin(), r.end());
  }
  return all;
}

std::vector<std::string> default_record_files(const Options& o) {
  std::vector<std::string> out;
  for (const char* f : {"records.jsonl", "interventions.jsonl"}) {
    const auto p = std::filesystem::path(o.out) / f;
    if (std::filesystem::exists(p)) out.push_back(p.string());
  }
  return out;
}

int cmd_stats(const Options& o, std::vector<std::string> files) {
  if (files.empty()) files = default_record_files(o);
  require(!files.empty(), "no record files given (use --records)");
  const auto records = load_all(files);
  const auto bad = audit_accuracy(records);
  if (!bad.empty()) {
    std::fprintf(stderr, "accuracy audit: %zu records disagree with their probabilities (first: %s)\n", bad.size(),
                 bad.front().c_str());
    return 1;
  }
  const auto summary = stats_summary(records, o.stats_seed, o.draws);
  std::filesystem::create_directories(o.out);
  write_json(std::filesystem::path(o.out) / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_report(const Options& o, std::vector<std::string> files, const std::vector<std::string>& figures) {
  if (files.empty()) files = default_record_files(o);
  require(!files.empty(), "no record files given (use --records)");
  require(!figures.empty(), "--figure is required");
  const auto records = load_all(files);
  for (const auto& f : figures) {
    emit_report(records, f, o.out, o.stats_seed, o.draws);
    std::printf("%s written to %s\n", f.c_str(), o.out.c_str());
  }
  return 0;
}

int cmd_verify_tokens(const Options& o, const std::vector<std::string>& tasks) {
  auto tok = load_tokenizer(o);
  const auto library = TaskLibrary::load(o.tasks_file);
  int failures = 0;
  std::vector<std::string> names = tasks;
  if (names.empty()) {
    for (const auto& t : library.tasks()) names.push_back(t.name);
  }
  std::set<std::string> labels(nonsense_labels().begin(), nonsense_labels().end());
  for (const auto& n : names) {
    const auto& task = library.get(n);
    try {
      verify_task_tokens(task, tok);
    } catch (const Error& e) {
      std::printf("FAIL %s: %s\n", n.c_str(), e.what());
      ++failures;
    }
    for (const auto& l : task.label_set()) labels.insert(l.substr(0, l.find(' ')));
  }
  for (const auto& l : labels) {
    try {
      std::printf("%-10s %d\n", l.c_str(), verify_single_token(l, tok));
    } catch (const Error& e) {
      std::printf("%-10s FAIL %s\n", l.c_str(), e.what());
      ++failures;
    }
  }
  return failures ? 1 : 0;
}

int cmd_make_toy(const Options& o, const std::string& arch, int layers, std::uint64_t seed) {
  const auto library = TaskLibrary::load(o.tasks_file);
  const auto tok_json = make_toy_tokenizer_json(tokenizer_corpus(library));
  const auto tok = Tokenizer::from_json(tok_json);
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.d_model = 64;
  c.d_head = 16;
  c.d_mlp = 256;
  c.vocab_size = tok.vocab_size();
  c.max_seq = 512;
  if (arch == "neox") {
    c.residual = ResidualVariant::parallel;
    c.norm = NormKind::layernorm;
    c.rotary_fraction = 0.25;
    c.mlp = MlpKind::gelu;
  } else if (arch == "llama") {
    c.n_kv_heads = 2;
    c.residual = ResidualVariant::sequential;
    c.norm = NormKind::rmsnorm;
    c.mlp = MlpKind::swiglu;
    c.bos_policy = BosPolicy::auto_prepend;
    c.bos_token_id = 0;
  } else {
    fail("--arch must be 'neox' or 'llama'");
  }
  std::filesystem::create_directories(o.out);
  const auto model_path = std::filesystem::path(o.out) / "model.fxb";
  save_weights(make_random_model(c, seed), model_path);
  write_json(std::filesystem::path(o.out) / "tokenizer.json", tok_json);
  std::printf("wrote %s and tokenizer.json (vocab %d)\n", model_path.c_str(), c.vocab_size);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fixlab: few-shot label fixation experiments on decoder-only transformers"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--model", o.model, "FXB1 weight bundle");
    cmd->add_option("--tokenizer", o.tokenizer, "tokenizer JSON (default: tokenizer.json next to the model)");
    cmd->add_option("--tasks-file", o.tasks_file, "task/item pool JSON");
    cmd->add_option("--model-name", o.model_name, "name stored in records (default: model file stem)");
    cmd->add_option("--task", o.task, "task name");
    cmd->add_option("--condition", o.conditions, "condition name, repeatable (e.g. gp, threshold_k:5)");
    cmd->add_option("--seeds", o.seeds, "comma-separated seeds (default 42,0,1,2,3,7,13,21,55,99)");
    cmd->add_option("--shots", o.shots, "demonstrations per prompt");
    cmd->add_option("--items", o.items, "query items per class");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--stats-seed", o.stats_seed, "seed for bootstrap and Monte Carlo draws");
    cmd->add_option("--draws", o.draws, "bootstrap draws");
    cmd->add_option("--threads", o.threads, "worker threads (0: OpenMP default)");
  };

  auto* run = app.add_subcommand("run", "score prompts and write records.jsonl and summary.json");
  add_common(run);
  bool calibrate = false;
  run->add_flag("--calibrate", calibrate, "also score the content-free query");

  auto* lens = app.add_subcommand("lens", "run with per-layer lens probabilities and write fig3.csv");
  add_common(lens);

  auto* patch = app.add_subcommand("patch", "paired activation patching from control into garden-path prompts");
  add_common(patch);
  std::string sites = "attn_out:7,attn_out:10,attn_out:11";
  bool loo = false;
  std::string positions = "last";
  patch->add_option("--sites", sites, "comma-separated sites, e.g. attn_out:7,head_out:10.5");
  patch->add_flag("--loo", loo, "leave-one-out mean patching instead of paired");
  patch->add_option("--positions", positions, "last or all");

  auto* enumerate = app.add_subcommand("enumerate", "rank every k-subset of layers by recovery");
  add_common(enumerate);
  int combo_size = 3;
  std::string kind = "attn_out";
  enumerate->add_option("--combo-size", combo_size, "layers per combination");
  enumerate->add_option("--kind", kind, "attn_out, mlp_out or resid_pre");

  auto* heads = app.add_subcommand("heads", "per-head patching ranking and cumulative top-k curve");
  add_common(heads);
  int max_k = 8;
  heads->add_option("--max-k", max_k, "largest k on the cumulative curve (-1: all heads)");

  auto* dla_cmd = app.add_subcommand("dla", "direct logit attribution averaged over garden-path prompts");
  add_common(dla_cmd);

  auto* path = app.add_subcommand("path", "path patching between two heads");
  add_common(path);
  std::string sender, receiver;
  path->add_option("--sender", sender, "layer.head")->required();
  path->add_option("--receiver", receiver, "layer.head")->required();

  auto* stats = app.add_subcommand("stats", "audit records and write summary.json");
  add_common(stats);
  std::vector<std::string> record_files;
  stats->add_option("--records", record_files, "JSONL record files (default: <out>/*.jsonl)");

  auto* report = app.add_subcommand("report", "write figure/table data files");
  add_common(report);
  std::vector<std::string> figures;
  report->add_option("--records", record_files, "JSONL record files (default: <out>/*.jsonl)");
  report->add_option("--figure", figures, "fig1..fig4, tab1..tab5 (repeatable)");

  auto* verify = app.add_subcommand("verify-tokens", "single-token gate for task and nonsense labels");
  add_common(verify);
  std::vector<std::string> verify_tasks;
  verify->add_option("--tasks", verify_tasks, "tasks to check (default: all)");

  auto* toy = app.add_subcommand("make-toy", "write a random toy model and matching tokenizer");
  add_common(toy);
  std::string arch = "neox";
  int layers = 4;
  std::uint64_t toy_seed = 1;
  toy->add_option("--arch", arch, "neox or llama");
  toy->add_option("--layers", layers, "number of layers");
  toy->add_option("--seed", toy_seed, "weight seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (o.threads > 0) kernels::set_threads(o.threads);
    if (deterministic_mode()) std::fprintf(stderr, "FIXLAB_DETERMINISTIC=1\n");
    if (*run) return cmd_run(o, false, calibrate);
    if (*lens) return cmd_run(o, true, false);
    if (*patch) return cmd_patch(o, sites, loo, positions);
    if (*enumerate) return cmd_enumerate(o, combo_size, kind);
    if (*heads) return cmd_heads(o, max_k);
    if (*dla_cmd) return cmd_dla(o);
    if (*path) return cmd_path(o, sender, receiver);
    if (*stats) return cmd_stats(o, record_files);
    if (*report) return cmd_report(o, record_files, figures);
    if (*verify) return cmd_verify_tokens(o, verify_tasks);
    if (*toy) return cmd_make_toy(o, arch, layers, toy_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
