#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "fixlab/error.hpp"
#include "fixlab/harness.hpp"

namespace fixlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n ") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

class Csv {
 public:
  Csv(const std::filesystem::path& path, const std::vector<std::string>& header) : path_(path), out_(path) {
    if (!out_) fail("cannot write " + path.string());
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << csv_field(cells[i]);
    out_ << '\n';
  }
  ~Csv() = default;
  void close() {
    out_.close();
    if (!out_) fail("write failed for " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

std::string num(double v) { return format_number(v); }

using ModelTask = std::pair<std::string, std::string>;
using ByCondition = std::map<std::string, std::vector<const TrialRecord*>>;

std::map<ModelTask, ByCondition> plain_records(const std::vector<TrialRecord>& records) {
  std::map<ModelTask, ByCondition> out;
  for (const auto& r : records) {
    if (!r.intervention) out[{r.model, r.task}][r.condition].push_back(&r);
  }
  return out;
}

void require_coverage(const std::string& figure, const std::vector<std::string>& missing) {
  if (missing.empty()) return;
  std::string list;
  for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
  fail("report " + figure + ": missing condition coverage: " + list);
}

double mean_of(const std::vector<const TrialRecord*>& rs, double (*f)(const TrialRecord&)) {
  double s = 0.0;
  for (const auto* r : rs) s += f(*r);
  return rs.empty() ? kNaN : s / static_cast<double>(rs.size());
}

double acc(const TrialRecord& r) { return r.accuracy_bit; }
double ptarget(const TrialRecord& r) { return r.p_target; }
double pdemo(const TrialRecord& r) { return r.p_demo_set; }

CiResult bootstrap(const std::vector<Observation>& obs, int draws, std::uint64_t seed) {
  std::set<std::uint64_t> clusters;
  for (const auto& o : obs) clusters.insert(o.cluster);
  if (clusters.size() < 2) {
    double s = 0.0;
    for (const auto& o : obs) s += o.value;
    const double m = obs.empty() ? kNaN : s / static_cast<double>(obs.size());
    return {m, kNaN, kNaN, clusters.size(), 0};
  }
  return cluster_bootstrap_ci(obs, draws, 0.95, seed);
}

/// Seed-level standard deviation of per-seed mean accuracy.
double seed_sd(const std::vector<const TrialRecord*>& rs) {
  std::map<std::uint64_t, std::pair<double, int>> per;
  for (const auto* r : rs) {
    per[r->seed].first += r->accuracy_bit;
    ++per[r->seed].second;
  }
  if (per.size() < 2) return kNaN;
  std::vector<double> m;
  for (const auto& [s, v] : per) m.push_back(v.first / v.second);
  const double mu = mean(m);
  double ss = 0.0;
  for (double x : m) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(m.size() - 1));
}

double paired_wilcoxon(const std::vector<const TrialRecord*>& a, const std::vector<const TrialRecord*>& b,
                       double (*f)(const TrialRecord&)) {
  std::map<std::pair<std::uint64_t, std::string>, double> ref;
  for (const auto* r : b) ref[{r->seed, r->item_id}] = f(*r);
  std::vector<double> diffs;
  for (const auto* r : a) {
    const auto it = ref.find({r->seed, r->item_id});
    if (it != ref.end()) diffs.push_back(f(*r) - it->second);
  }
  try {
    return wilcoxon_signed_rank(diffs).p_two_sided;
  } catch (const Error&) {
    return kNaN;
  }
}

std::optional<SpearmanResult> dose_rho(const std::vector<TrialRecord>& records, const ModelTask& mt,
                                       std::uint64_t seed) {
  std::vector<double> k, a;
  for (const auto& r : records) {
    if (!r.intervention && r.k && r.model == mt.first && r.task == mt.second) {
      k.push_back(*r.k);
      a.push_back(r.accuracy_bit);
    }
  }
  try {
    return spearman_one_sided(k, a, Tail::negative, seed);
  } catch (const Error&) {
    return std::nullopt;
  }
}

void fig1(const std::vector<TrialRecord>& records, const std::filesystem::path& dir, std::uint64_t seed, int draws) {
  std::map<ModelTask, std::vector<DoseObservation>> dose;
  for (const auto& r : records) {
    if (!r.intervention && r.k) dose[{r.model, r.task}].push_back({*r.k, r.seed, static_cast<double>(r.accuracy_bit)});
  }
  if (dose.empty()) require_coverage("fig1", {"threshold_k:*"});
  Csv curve(dir / "fig1.csv", {"model", "task", "k", "n", "accuracy", "ci_lo", "ci_hi"});
  Csv corr(dir / "fig1_spearman.csv", {"model", "task", "rho", "p_one_sided", "n", "method"});
  for (const auto& [mt, obs] : dose) {
    std::set<int> ks;
    for (const auto& o : obs) ks.insert(o.k);
    if (ks.size() < 2) require_coverage("fig1", {"a second threshold_k dose for " + mt.first});
    const auto d = dose_response(obs, draws, seed ^ fnv1a("fig1|" + mt.first + "|" + mt.second));
    for (const auto& p : d.curve) {
      curve.row({mt.first, mt.second, std::to_string(p.k), std::to_string(p.n), num(p.accuracy.point),
                 num(p.accuracy.lo), num(p.accuracy.hi)});
    }
    corr.row({mt.first, mt.second, num(d.spearman.rho), num(d.spearman.p), std::to_string(d.spearman.n),
              d.spearman.method});
  }
  curve.close();
  corr.close();
}

void tab1_tab2(const std::vector<TrialRecord>& records, const std::string& figure, const std::filesystem::path& dir,
               std::uint64_t seed) {
  const auto plain = plain_records(records);
  std::vector<std::string> missing;
  for (const auto& [mt, by] : plain) {
    for (const char* c : {"gp", "ctrl_balanced"}) {
      if (!by.count(c)) missing.push_back(mt.first + "/" + mt.second + ":" + c);
    }
  }
  if (plain.empty()) missing.push_back("gp, ctrl_balanced");
  require_coverage(figure, missing);

  if (figure == "tab1") {
    Csv t(dir / "tab1.csv",
          {"model", "task", "gp_accuracy", "ctrl_accuracy", "ctrl_seed_sd", "gap_pp", "dose_rho", "dose_p"});
    for (const auto& [mt, by] : plain) {
      const double g = mean_of(by.at("gp"), acc), c = mean_of(by.at("ctrl_balanced"), acc);
      const auto rho = dose_rho(records, mt, seed ^ fnv1a("tab1|" + mt.first + "|" + mt.second));
      t.row({mt.first, mt.second, num(g), num(c), num(seed_sd(by.at("ctrl_balanced"))), num(100.0 * (c - g)),
             rho ? num(rho->rho) : "", rho ? num(rho->p) : ""});
    }
    t.close();
  } else {
    Csv t(dir / "tab2.csv", {"model", "task", "gp_accuracy", "ctrl_accuracy", "gap_pp", "wilcoxon_p", "dose_rho"});
    for (const auto& [mt, by] : plain) {
      const double g = mean_of(by.at("gp"), acc), c = mean_of(by.at("ctrl_balanced"), acc);
      const auto rho = dose_rho(records, mt, seed ^ fnv1a("tab2|" + mt.first + "|" + mt.second));
      t.row({mt.first, mt.second, num(g), num(c), num(100.0 * (c - g)),
             num(paired_wilcoxon(by.at("gp"), by.at("ctrl_balanced"), ptarget)), rho ? num(rho->rho) : ""});
    }
    t.close();
  }
}

bool is_head_curve(const std::string& id) { return id.rfind("heads:top", 0) == 0; }

void fig2_tab3(const std::vector<TrialRecord>& records, const std::string& figure, const std::filesystem::path& dir,
               std::uint64_t seed, int draws) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<const TrialRecord*>> groups;
  for (const auto& r : records) {
    if (r.intervention && is_head_curve(r.intervention->id) == (figure == "tab3")) {
      groups[{r.model, r.task, r.intervention->id}].push_back(&r);
    }
  }
  if (groups.empty()) require_coverage(figure, {figure == "tab3" ? "heads:top* interventions" : "patch interventions"});

  auto summarize = [&](const std::vector<const TrialRecord*>& rs, const std::string& key) {
    std::vector<Observation> obs;
    std::size_t excluded = 0;
    double gp = 0.0, ctrl = 0.0, patched = 0.0;
    for (const auto* r : rs) {
      const auto& x = r->intervention->result;
      gp += x.p_gp;
      ctrl += x.p_ctrl;
      patched += x.p_patched;
      if (x.excluded()) {
        ++excluded;
      } else {
        obs.push_back({r->seed, *x.recovery});
      }
    }
    const double n = static_cast<double>(rs.size());
    const auto ci = bootstrap(obs, draws, seed ^ fnv1a(figure + "|" + key));
    return std::make_tuple(gp / n, patched / n, ctrl / n, excluded, ci);
  };

  if (figure == "fig2") {
    Csv t(dir / "fig2.csv", {"model", "task", "intervention", "n", "n_excluded", "p_gp", "p_patched", "p_ctrl",
                             "recovery", "ci_lo", "ci_hi", "recovery_of_means"});
    for (const auto& [g, rs] : groups) {
      const auto& [model, task, id] = g;
      const auto [gp, patched, ctrl, excluded, ci] = summarize(rs, model + "|" + task + "|" + id);
      t.row({model, task, id, std::to_string(rs.size()), std::to_string(excluded), num(gp), num(patched), num(ctrl),
             num(ci.point), num(ci.lo), num(ci.hi), num((patched - gp) / (ctrl - gp))});
    }
    t.close();
  } else {
    struct Row {
      int k;
      std::vector<std::string> cells;
    };
    std::vector<Row> rows;
    for (const auto& [g, rs] : groups) {
      const auto& [model, task, id] = g;
      // id = "heads:top<k>" or "heads:top<k>:<head list>"
      const auto rest = id.substr(9);
      const auto colon = rest.find(':');
      const int k = std::stoi(rest.substr(0, colon));
      const auto heads = colon == std::string::npos ? std::string() : rest.substr(colon + 1);
      const auto [gp, patched, ctrl, excluded, ci] = summarize(rs, model + "|" + task + "|" + id);
      rows.push_back({k, {model, task, std::to_string(k), heads, std::to_string(rs.size()), std::to_string(excluded),
                          num(ci.point), num(ci.lo), num(ci.hi)}});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      return std::tie(a.cells[0], a.cells[1], a.k) < std::tie(b.cells[0], b.cells[1], b.k);
    });
    Csv t(dir / "tab3.csv", {"model", "task", "k", "heads", "n", "n_excluded", "recovery", "ci_lo", "ci_hi"});
    for (const auto& r : rows) t.row(r.cells);
    t.close();
  }
}

void fig3(const std::vector<TrialRecord>& records, const std::filesystem::path& dir) {
  const auto plain = plain_records(records);
  std::vector<std::string> missing;
  std::vector<ModelTask> covered;
  for (const auto& [mt, by] : plain) {
    bool ok = true;
    for (const char* c : {"gp", "ctrl_balanced"}) {
      const auto it = by.find(c);
      if (it == by.end() || it->second.front()->lens_p_target.empty()) {
        missing.push_back(mt.first + "/" + mt.second + ":" + c + " (with lens)");
        ok = false;
      }
    }
    if (ok) covered.push_back(mt);
  }
  if (plain.empty()) missing.push_back("gp, ctrl_balanced (with lens)");
  require_coverage("fig3", missing);

  Csv t(dir / "fig3.csv", {"model", "task", "layer", "gp_accuracy", "ctrl_accuracy", "gp_p_target", "ctrl_p_target",
                           "wilcoxon_p", "p_adjusted"});
  for (const auto& mt : covered) {
    const auto& gp = plain.at(mt).at("gp");
    const auto& ctrl = plain.at(mt).at("ctrl_balanced");
    const std::size_t layers = gp.front()->lens_p_target.size();
    std::map<std::pair<std::uint64_t, std::string>, const TrialRecord*> ctrl_by;
    for (const auto* r : ctrl) ctrl_by[{r->seed, r->item_id}] = r;

    std::vector<double> p_raw(layers, kNaN);
    std::vector<std::array<double, 4>> cols(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      double ga = 0, ca = 0, gpt = 0, cpt = 0;
      for (const auto* r : gp) {
        require(r->lens_p_target.size() == layers, "report fig3: inconsistent lens depth");
        ga += r->lens_p_target[l] > r->lens_p_foil[l];
        gpt += r->lens_p_target[l];
      }
      for (const auto* r : ctrl) {
        require(r->lens_p_target.size() == layers, "report fig3: inconsistent lens depth");
        ca += r->lens_p_target[l] > r->lens_p_foil[l];
        cpt += r->lens_p_target[l];
      }
      const double ng = static_cast<double>(gp.size()), nc = static_cast<double>(ctrl.size());
      cols[l] = {ga / ng, ca / nc, gpt / ng, cpt / nc};
      std::vector<double> diffs;
      for (const auto* r : gp) {
        const auto it = ctrl_by.find({r->seed, r->item_id});
        if (it != ctrl_by.end()) diffs.push_back(r->lens_p_target[l] - it->second->lens_p_target[l]);
      }
      try {
        p_raw[l] = wilcoxon_signed_rank(diffs).p_two_sided;
      } catch (const Error&) {
      }
    }
    std::vector<double> valid;
    for (double p : p_raw) {
      if (!std::isnan(p)) valid.push_back(p);
    }
    // Bonferroni over the layers that could be tested.
    const double family = static_cast<double>(valid.size());
    for (std::size_t l = 0; l < layers; ++l) {
      const double adj = std::isnan(p_raw[l]) ? kNaN : std::min(1.0, p_raw[l] * family);
      t.row({mt.first, mt.second, std::to_string(l), num(cols[l][0]), num(cols[l][1]), num(cols[l][2]),
             num(cols[l][3]), num(p_raw[l]), num(adj)});
    }
  }
  t.close();
}

void fig4(const std::vector<TrialRecord>& records, const std::filesystem::path& dir) {
  const auto plain = plain_records(records);
  std::vector<std::string> missing;
  std::vector<ModelTask> covered;
  for (const auto& [mt, by] : plain) {
    if (!by.count("homog_nonsense") && !by.count("varied_nonsense")) continue;
    for (const char* c : {"homog_nonsense", "varied_nonsense"}) {
      if (!by.count(c)) missing.push_back(mt.first + "/" + mt.second + ":" + c);
    }
    if (by.count("homog_nonsense") && by.count("varied_nonsense")) covered.push_back(mt);
  }
  if (covered.empty() && missing.empty()) missing.push_back("homog_nonsense, varied_nonsense");
  require_coverage("fig4", missing);
  Csv t(dir / "fig4.csv", {"model", "p_label_homog", "p_set_varied", "p_dog_varied"});
  for (const auto& mt : covered) {
    const auto& by = plain.at(mt);
    // One row per model; the task is appended when a model has several.
    std::size_t tasks = 0;
    for (const auto& other : covered) tasks += other.first == mt.first;
    const auto name = tasks > 1 ? mt.first + "/" + mt.second : mt.first;
    t.row({name, num(mean_of(by.at("homog_nonsense"), pdemo)), num(mean_of(by.at("varied_nonsense"), pdemo)),
           num(mean_of(by.at("varied_nonsense"), ptarget))});
  }
  t.close();
}

int condition_rank(const std::string& c) {
  static const std::vector<std::string> order{"zero_shot", "ctrl_balanced", "gp_multiclass", "gp", "reverse_gp",
                                              "dog_heavy", "exclude_label", "random"};
  const auto head = c.substr(0, c.find(':'));
  const auto it = std::find(order.begin(), order.end(), head);
  return static_cast<int>(it - order.begin());
}

void tab4(const std::vector<TrialRecord>& records, const std::filesystem::path& dir) {
  const auto plain = plain_records(records);
  std::vector<std::string> missing;
  std::vector<ModelTask> covered;
  for (const auto& [mt, by] : plain) {
    bool gp = false;
    for (const auto& [c, rs] : by) gp = gp || c.rfind("gp_multiclass", 0) == 0;
    if (!gp) continue;
    if (!by.count("ctrl_balanced")) {
      missing.push_back(mt.first + "/" + mt.second + ":ctrl_balanced");
    } else {
      covered.push_back(mt);
    }
  }
  if (covered.empty() && missing.empty()) missing.push_back("ctrl_balanced, gp_multiclass:*");
  require_coverage("tab4", missing);
  Csv t(dir / "tab4.csv", {"model", "task", "condition", "n", "p_correct", "accuracy"});
  for (const auto& mt : covered) {
    std::vector<std::string> conds;
    for (const auto& [c, rs] : plain.at(mt)) conds.push_back(c);
    std::stable_sort(conds.begin(), conds.end(),
                     [](const std::string& a, const std::string& b) { return condition_rank(a) < condition_rank(b); });
    for (const auto& c : conds) {
      const auto& rs = plain.at(mt).at(c);
      t.row({mt.first, mt.second, c, std::to_string(rs.size()), num(mean_of(rs, ptarget)), num(mean_of(rs, acc))});
    }
  }
  t.close();
}

void tab5(const std::vector<TrialRecord>& records, const std::filesystem::path& dir) {
  const auto plain = plain_records(records);
  std::vector<ModelTask> covered;
  std::set<std::string> options;
  for (const auto& [mt, by] : plain) {
    bool any = false;
    for (const auto& [c, rs] : by) {
      if (rs.front()->p_forced) {
        any = true;
        for (const auto& [label, p] : rs.front()->p_next) options.insert(label);
      }
    }
    if (any) covered.push_back(mt);
  }
  if (covered.empty()) require_coverage("tab5", {"multi-token verbalizer conditions"});
  std::vector<std::string> header{"model", "task", "condition", "n", "p_forced"};
  for (const auto& o : options) header.push_back("p_next:" + o);
  Csv t(dir / "tab5.csv", header);
  for (const auto& mt : covered) {
    for (const auto& [c, rs] : plain.at(mt)) {
      if (!rs.front()->p_forced) continue;
      double pf = 0.0;
      std::map<std::string, double> next;
      for (const auto* r : rs) {
        pf += *r->p_forced;
        for (const auto& [label, p] : r->p_next) next[label] += p;
      }
      const double n = static_cast<double>(rs.size());
      std::vector<std::string> row{mt.first, mt.second, c, std::to_string(rs.size()), num(pf / n)};
      for (const auto& o : options) row.push_back(next.count(o) ? num(next[o] / n) : "");
      t.row(row);
    }
  }
  t.close();
}

}  // namespace

void emit_report(const std::vector<TrialRecord>& records, const std::string& figure, const std::filesystem::path& dir,
                 std::uint64_t stats_seed, int draws) {
  static const std::set<std::string> known{"fig1", "fig2", "fig3", "fig4", "tab1", "tab2", "tab3", "tab4", "tab5"};
  if (!known.count(figure)) fail("report: unknown figure '" + figure + "' (expected fig1..fig4 or tab1..tab5)");
  if (records.empty()) fail("report " + figure + ": no records (missing condition coverage)");
  std::filesystem::create_directories(dir);
  if (figure == "fig1") {
    fig1(records, dir, stats_seed, draws);
  } else if (figure == "tab1" || figure == "tab2") {
    tab1_tab2(records, figure, dir, stats_seed);
  } else if (figure == "fig2" || figure == "tab3") {
    fig2_tab3(records, figure, dir, stats_seed, draws);
  } else if (figure == "fig3") {
    fig3(records, dir);
  } else if (figure == "fig4") {
    fig4(records, dir);
  } else if (figure == "tab4") {
    tab4(records, dir);
  } else {
    tab5(records, dir);
  }
}

}  // namespace fixlab
