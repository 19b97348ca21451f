#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "fixlab/error.hpp"
#include "fixlab/harness.hpp"
#include "fixlab/kernels.hpp"
#include "support/toy_models.hpp"
#include "support/toy_world.hpp"

using namespace fixlab;
using testing::task_library;
using testing::toy_tokenizer;

namespace {

const WeightBundle& toy_model() {
  static const WeightBundle w = [] {
    auto c = testing::toy_neox(2, toy_tokenizer().vocab_size());
    c.max_seq = 256;
    return make_random_model(c, 3, 0.5f);
  }();
  return w;
}

RunContext ctx() { return {&toy_model(), &toy_tokenizer(), &task_library()}; }

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("fixlab_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentPlan small_plan(const std::filesystem::path& out) {
  ExperimentPlan plan;
  plan.model_name = "toy";
  plan.seeds = {42, 0, 1};
  plan.items_per_class = 4;
  plan.out_dir = out;
  plan.bootstrap_draws = 200;
  return plan;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

TrialRecord synthetic(const std::string& condition, std::uint64_t seed, const std::string& item, double p_target,
                      double p_foil, double p_demo_set) {
  TrialRecord r;
  r.model = "m";
  r.task = "category";
  r.condition = condition;
  r.seed = seed;
  r.item_id = item;
  r.query_label = "dog";
  r.p_target = p_target;
  r.p_foils = {{"cat", p_foil}};
  r.p_demo_set = p_demo_set;
  r.accuracy_bit = accuracy_from_probabilities(p_target, r.p_foils);
  return r;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (char c : line) {
      if (c == '"') {
        quoted = !quoted;
      } else if (c == ',' && !quoted) {
        cells.push_back(cell);
        cell.clear();
      } else {
        cell += c;
      }
    }
    cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("one record per condition, seed and item") {
  TempDir dir("cardinality");
  const auto plan = small_plan(dir.path);
  const auto records = run_experiment(plan, ctx());
  CHECK(records.size() == 2 * 3 * 4);
  CHECK(count_lines(slurp(dir.path / "records.jsonl")) == 24);
  CHECK(std::filesystem::exists(dir.path / "summary.json"));
  CHECK(audit_accuracy(records).empty());
  for (const auto& r : records) {
    CHECK(r.query_label == "dog");
    CHECK(r.p_target >= 0.0);
    CHECK(r.p_target <= 1.0);
  }
}

TEST_CASE("records are byte-identical across runs and thread counts") {
  TempDir a("det_a"), b("det_b");
  auto plan = small_plan(a.path);
  plan.conditions = {"gp", "ctrl_balanced", "varied_nonsense", "threshold_k:3"};
  const int previous = kernels::max_threads();
  kernels::set_threads(1);
  run_experiment(plan, ctx());
  kernels::set_threads(4);
  plan.out_dir = b.path;
  run_experiment(plan, ctx());
  kernels::set_threads(previous);
  CHECK(slurp(a.path / "records.jsonl") == slurp(b.path / "records.jsonl"));
  CHECK(slurp(a.path / "summary.json") == slurp(b.path / "summary.json"));
}

TEST_CASE("interrupted runs resume to the same file") {
  TempDir full("resume_full"), part("resume_part");
  auto plan = small_plan(full.path);
  run_experiment(plan, ctx());
  const auto expected = slurp(full.path / "records.jsonl");

  // Keep the first 10 lines plus half of the 11th, as a killed writer would.
  std::istringstream in(expected);
  std::string line, kept;
  for (int i = 0; i < 10 && std::getline(in, line); ++i) kept += line + "\n";
  std::getline(in, line);
  kept += line.substr(0, line.size() / 2);
  {
    std::ofstream out(part.path / "records.jsonl", std::ios::binary);
    out << kept;
  }
  CHECK(read_records(part.path / "records.jsonl").size() == 10);
  plan.out_dir = part.path;
  const auto resumed = run_experiment(plan, ctx());
  CHECK(resumed.size() == 24);
  CHECK(slurp(part.path / "records.jsonl") == expected);
  // A complete file is left untouched by a rerun.
  run_experiment(plan, ctx());
  CHECK(slurp(part.path / "records.jsonl") == expected);
}

TEST_CASE("record JSON round trip with sorted keys") {
  auto r = synthetic("gp", 7, "dog-03", 0.125, 0.5, 0.6);
  r.k = 8;
  r.p_forced = 0.75;
  r.p_next = {{"very positive", 0.2}, {"very negative", 0.7}};
  r.p_content_free = {{"dog", 0.1}, {"cat", 0.3}};
  r.lens_p_target = {0.1, 0.2};
  r.lens_p_foil = {0.3, 0.1};
  r.intervention = InterventionRecord{"attn_out:7", make_recovery(0.1, 0.5, 0.3)};
  const auto line = to_json(r).dump();
  const auto back = record_from_json(nlohmann::json::parse(line));
  CHECK(to_json(back).dump() == line);
  CHECK(back.intervention->result.recovery.value() == doctest::Approx(0.5));
  // Top-level keys appear in lexicographic order.
  std::vector<std::string> keys;
  for (const auto& [k, v] : nlohmann::json::parse(line).items()) keys.push_back(k);
  CHECK(std::is_sorted(keys.begin(), keys.end()));
  CHECK(line.find("\"accuracy_bit\"") < line.find("\"condition\""));

  auto excluded = r;
  excluded.intervention = InterventionRecord{"x", make_recovery(0.2, 0.205, 0.3)};
  const auto ex = record_from_json(to_json(excluded));
  CHECK(ex.intervention->result.excluded());
  CHECK(*ex.intervention->result.exclusion_reason == "denominator_below_threshold");

  auto bad = to_json(r);
  bad["p_target"] = 1.5;
  CHECK_THROWS_AS(record_from_json(bad), Error);
  bad.erase("p_target");
  CHECK_THROWS_WITH_AS(record_from_json(bad), doctest::Contains("malformed"), Error);
}

TEST_CASE("accuracy audit finds tampered bits") {
  std::vector<TrialRecord> rs{synthetic("gp", 1, "a", 0.6, 0.3, 0.9), synthetic("gp", 1, "b", 0.2, 0.3, 0.9)};
  CHECK(audit_accuracy(rs).empty());
  rs[1].accuracy_bit = 1;
  CHECK(audit_accuracy(rs).size() == 1);
  // Ties are incorrect.
  CHECK(accuracy_from_probabilities(0.4, {{"cat", 0.4}}) == 0);
  CHECK(accuracy_from_probabilities(0.4, {{"cat", 0.1}, {"bird", 0.41}}) == 0);
}

TEST_CASE("scored probabilities match direct forward passes") {
  const auto& task = task_library().get("category");
  const auto p = build_prompt(task, parse_condition("gp", 8, 5), "dog-02", toy_tokenizer());
  const auto r = score_prompt(ctx(), task, p, true, true, "toy");
  const auto logits = forward_logits(toy_model(), p.token_ids);
  CHECK(r.p_target == doctest::Approx(token_probability(logits, p.answer_token)).epsilon(1e-9));
  CHECK(r.p_foils.at("cat") == doctest::Approx(token_probability(logits, p.foil_tokens[0])).epsilon(1e-9));
  CHECK(r.p_demo_set == doctest::Approx(r.p_foils.at("cat")).epsilon(1e-9));
  REQUIRE(r.lens_p_target.size() == 3);
  CHECK(r.lens_p_target.back() == doctest::Approx(r.p_target).epsilon(1e-6));
  const auto cf = forward_logits(toy_model(), content_free_tokens(p, task, toy_tokenizer()));
  CHECK(r.p_content_free.at("dog") == doctest::Approx(token_probability(cf, p.answer_token)).epsilon(1e-9));
  CHECK(toy_tokenizer().decode(content_free_tokens(p, task, toy_tokenizer())).ends_with("N/A:"));
}

TEST_CASE("multi-token verbalizers are scored by teacher forcing") {
  const auto& task = task_library().get("sentiment_multitoken");
  const auto p = build_prompt(task, parse_condition("gp_multitoken:positive", 8, 5), "negative-02", toy_tokenizer());
  REQUIRE(p.plan);
  const auto r = score_prompt(ctx(), task, p, false, false, "toy");
  REQUIRE(r.p_forced);
  const auto first = forward_logits(toy_model(), p.token_ids);
  CHECK(*r.p_forced == doctest::Approx(token_probability(first, p.plan->forced[0])).epsilon(1e-9));
  auto extended = p.token_ids;
  extended.insert(extended.end(), p.plan->forced.begin(), p.plan->forced.end());
  const auto next = forward_logits(toy_model(), extended);
  for (std::size_t i = 0; i < p.plan->options.size(); ++i) {
    CHECK(r.p_next.at(p.plan->option_labels[i]) ==
          doctest::Approx(token_probability(next, p.plan->options[i])).epsilon(1e-9));
  }
  CHECK(r.p_target == r.p_next.at("very negative"));
  CHECK(r.p_foils.size() == 1);
  CHECK(r.accuracy_bit == accuracy_from_probabilities(r.p_target, r.p_foils));
}

TEST_CASE("plan validation") {
  auto plan = small_plan("unused");
  plan.seeds = {1, 1};
  CHECK_THROWS_WITH_AS(plan.validate(), doctest::Contains("distinct"), Error);
  plan = small_plan("unused");
  plan.conditions = {"gp", "nonsense_condition"};
  CHECK_THROWS_AS(plan.validate(), Error);
  plan = small_plan("unused");
  plan.items_per_class = 21;
  CHECK_THROWS_WITH_AS(run_experiment(plan, ctx()), doctest::Contains("items requested"), Error);
  CHECK(query_items(task_library().get("category"), parse_condition("reverse_gp"), 3) ==
        std::vector<std::string>{"cat-01", "cat-02", "cat-03"});
}

TEST_CASE("paired items share their query and become intervention records") {
  const auto plan = small_plan("unused");
  const auto items = make_paired_items(plan, ctx());
  REQUIRE(items.size() == 12);
  for (const auto& it : items) CHECK_NOTHROW(check_same_query(it));
  CHECK(items[0].id == "42/dog-01");
  CHECK(items[0].cluster == 42);
  std::vector<RecoveryResult> results;
  for (std::size_t i = 0; i < items.size(); ++i) results.push_back(make_recovery(0.1, 0.5, 0.1 + 0.04 * static_cast<double>(i % 4)));
  const auto recs = intervention_records(plan, ctx(), items, "attn_out:1", results);
  CHECK(recs.size() == 12);
  CHECK(recs[0].item_id == "dog-01");
  CHECK(recs[0].intervention->id == "attn_out:1");
  CHECK(audit_accuracy(recs).empty());
}

TEST_CASE("reports") {
  TempDir dir("reports");
  CHECK_THROWS_WITH_AS(emit_report({}, "fig4", dir.path), doctest::Contains("no records"), Error);
  CHECK_THROWS_WITH_AS(emit_report({synthetic("gp", 1, "a", 0.1, 0.2, 0.2)}, "fig9", dir.path),
                       doctest::Contains("unknown figure"), Error);

  std::vector<TrialRecord> rs;
  for (std::uint64_t seed : {1, 2}) {
    for (const char* item : {"dog-01", "dog-02"}) {
      rs.push_back(synthetic("homog_nonsense", seed, item, 0.001, 0.002, 0.9));
      rs.push_back(synthetic("varied_nonsense", seed, item, seed == 1 ? 0.001 : 0.003, 0.002, 0.5));
    }
  }
  emit_report(rs, "fig4", dir.path);
  const auto fig4 = read_csv(dir.path / "fig4.csv");
  REQUIRE(fig4.size() == 2);
  CHECK(fig4[0] == std::vector<std::string>{"model", "p_label_homog", "p_set_varied", "p_dog_varied"});
  CHECK(fig4[1][0] == "m");
  CHECK(std::stod(fig4[1][1]) == doctest::Approx(0.9));
  CHECK(std::stod(fig4[1][2]) == doctest::Approx(0.5));
  CHECK(std::stod(fig4[1][3]) == doctest::Approx(0.002));

  CHECK_THROWS_WITH_AS(emit_report(rs, "tab1", dir.path), doctest::Contains("m/category:gp"), Error);
  std::vector<TrialRecord> only_homog(rs.begin(), rs.begin() + 1);
  CHECK_THROWS_WITH_AS(emit_report(only_homog, "fig4", dir.path), doctest::Contains("varied_nonsense"), Error);

  // tab1: accuracy gap and seed-level spread.
  std::vector<TrialRecord> t1;
  for (std::uint64_t seed : {1, 2}) {
    for (int i = 0; i < 4; ++i) {
      const auto item = "dog-0" + std::to_string(i + 1);
      t1.push_back(synthetic("gp", seed, item, 0.1, 0.8, 0.8));
      const bool correct = seed == 1 ? i < 3 : i < 1;  // 75% and 25%
      t1.push_back(synthetic("ctrl_balanced", seed, item, correct ? 0.6 : 0.3, 0.4, 0.9));
    }
  }
  emit_report(t1, "tab1", dir.path);
  const auto tab1 = read_csv(dir.path / "tab1.csv");
  REQUIRE(tab1.size() == 2);
  CHECK(std::stod(tab1[1][2]) == 0.0);
  CHECK(std::stod(tab1[1][3]) == doctest::Approx(0.5));
  CHECK(std::stod(tab1[1][4]) == doctest::Approx(std::sqrt(0.125)));
  CHECK(std::stod(tab1[1][5]) == doctest::Approx(50.0));

  // Figure 3: lens accuracy per layer and the divergence test.
  std::vector<TrialRecord> lens;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (int i = 0; i < 4; ++i) {
      const auto item = "dog-0" + std::to_string(i + 1);
      auto g = synthetic("gp", seed, item, 0.1, 0.8, 0.8);
      auto c = synthetic("ctrl_balanced", seed, item, 0.6, 0.3, 0.9);
      const double e = 0.01 * static_cast<double>(seed * 4 + static_cast<std::uint64_t>(i));
      g.lens_p_target = {0.2, 0.9, 0.1 + e};
      g.lens_p_foil = {0.1, 0.05, 0.8};
      c.lens_p_target = {0.2, 0.9, 0.6 + e};
      c.lens_p_foil = {0.1, 0.05, 0.3};
      lens.push_back(g);
      lens.push_back(c);
    }
  }
  emit_report(lens, "fig3", dir.path);
  const auto fig3 = read_csv(dir.path / "fig3.csv");
  REQUIRE(fig3.size() == 4);
  CHECK(fig3[2][3] == "1");
  CHECK(fig3[3][3] == "0");
  CHECK(fig3[3][4] == "1");
  CHECK(fig3[1][7] == "nan");  // identical trajectories: no nonzero differences
  // 12 negative differences: exact two-sided p = 2 / 4096, one testable layer.
  CHECK(std::stod(fig3[3][7]) == doctest::Approx(2.0 / 4096.0));
  CHECK(std::stod(fig3[3][8]) == doctest::Approx(2.0 / 4096.0));
  CHECK_THROWS_WITH_AS(emit_report(t1, "fig3", dir.path), doctest::Contains("with lens"), Error);

  // Figure 2 from intervention records.
  std::vector<TrialRecord> iv;
  for (std::uint64_t seed : {1, 2}) {
    for (double p : {0.3, 0.5}) {
      auto r = synthetic("gp", seed, "dog-0" + std::to_string(static_cast<int>(p * 10)), p, 0.0, 0.0);
      r.p_foils.clear();
      r.accuracy_bit = 1;
      r.intervention = InterventionRecord{"attn_out:7", make_recovery(0.1, 0.5, p)};
      iv.push_back(r);
    }
  }
  iv.back().intervention->result = make_recovery(0.1, 0.105, 0.5);
  emit_report(iv, "fig2", dir.path, 0, 300);
  const auto fig2 = read_csv(dir.path / "fig2.csv");
  REQUIRE(fig2.size() == 2);
  CHECK(fig2[1][2] == "attn_out:7");
  CHECK(fig2[1][3] == "4");
  CHECK(fig2[1][4] == "1");
  CHECK(std::stod(fig2[1][8]) == doctest::Approx((0.5 + 1.0 + 0.5) / 3.0));
}

TEST_CASE("multiclass and multi-token tables") {
  TempDir dir("tables");
  std::vector<TrialRecord> mc;
  for (const char* cond : {"random", "gp_multiclass:cat", "ctrl_balanced", "zero_shot"}) {
    auto r = synthetic(cond, 1, "dog-01", 0.3, 0.2, 0.5);
    r.task = "multiclass4";
    r.p_foils = {{"cat", 0.2}, {"bird", 0.1}, {"fish", 0.1}};
    r.accuracy_bit = 1;
    mc.push_back(r);
  }
  emit_report(mc, "tab4", dir.path);
  const auto tab4 = read_csv(dir.path / "tab4.csv");
  REQUIRE(tab4.size() == 5);
  CHECK(tab4[1][2] == "zero_shot");
  CHECK(tab4[2][2] == "ctrl_balanced");
  CHECK(tab4[3][2] == "gp_multiclass:cat");
  CHECK(tab4[4][2] == "random");

  std::vector<TrialRecord> mt;
  for (const char* cond : {"gp_multitoken:positive", "ctrl_single_token"}) {
    auto r = synthetic(cond, 1, "negative-01", 0.25, 0.75, 0.5);
    r.task = "sentiment_multitoken";
    r.p_forced = 0.8;
    r.p_next = {{"very positive", 0.75}, {"very negative", 0.25}};
    mt.push_back(r);
  }
  emit_report(mt, "tab5", dir.path);
  const auto tab5 = read_csv(dir.path / "tab5.csv");
  REQUIRE(tab5.size() == 3);
  CHECK(tab5[0] == std::vector<std::string>{"model", "task", "condition", "n", "p_forced", "p_next:very negative",
                                            "p_next:very positive"});
  CHECK(tab5[1][4] == "0.8");
  CHECK_THROWS_WITH_AS(emit_report(mc, "tab5", dir.path), doctest::Contains("multi-token"), Error);
}

TEST_CASE("stats summary") {
  std::vector<TrialRecord> rs;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (int i = 0; i < 3; ++i) {
      const auto item = "dog-0" + std::to_string(i + 1);
      const double shift = 0.01 * static_cast<double>(seed * 3 + static_cast<std::uint64_t>(i));
      rs.push_back(synthetic("gp", seed, item, 0.1 + shift, 0.8, 0.8));
      rs.push_back(synthetic("ctrl_balanced", seed, item, 0.6, 0.3, 0.9));
      auto t = synthetic("threshold_k:2", seed, item, i == 0 ? 0.2 : 0.6, 0.3, 0.9);
      t.k = 2;
      rs.push_back(t);
      auto u = synthetic("threshold_k:6", seed, item, 0.2, 0.3, 0.9);
      u.k = 6;
      rs.push_back(u);
    }
  }
  const auto s = stats_summary(rs, 9, 300);
  CHECK(s == stats_summary(rs, 9, 300));
  bool saw_wilcoxon = false, saw_dose = false;
  for (const auto& e : s) {
    if (e["statistic"] == "accuracy" && e["condition"] == "ctrl_balanced") CHECK(e["point"].get<double>() == 1.0);
    if (e["statistic"] == "p_target" && e["condition"] == "gp") {
      saw_wilcoxon = true;
      CHECK(e["test"] == "wilcoxon_vs_ctrl_balanced");
      // threshold_k:2 has only three nonzero differences, so two tests share
      // the correction.
      CHECK(e["p_adjusted"].get<double>() == doctest::Approx(std::min(1.0, 2 * e["p_raw"].get<double>())));
    }
    if (e["statistic"] == "dose_spearman") {
      saw_dose = true;
      CHECK(e["point"].get<double>() < 0.0);
    }
  }
  CHECK(saw_wilcoxon);
  CHECK(saw_dose);
}

TEST_CASE("stats summary without a control condition") {
  std::vector<TrialRecord> rs;
  for (std::uint64_t seed : {1, 2}) {
    rs.push_back(synthetic("homog_nonsense", seed, "dog-01", 0.1, 0.2, 0.7));
    rs.push_back(synthetic("varied_nonsense", seed, "dog-01", 0.05, 0.2, 0.6));
  }
  const auto s = stats_summary(rs, 0, 100);
  CHECK(s.size() >= 2);
  for (const auto& e : s) CHECK(e["p_adjusted"].is_null());
}
