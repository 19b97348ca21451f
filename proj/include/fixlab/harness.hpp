#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixlab/interventions.hpp"
#include "fixlab/prompt_lab.hpp"

namespace fixlab {

/// Intervention outcome attached to a garden-path record.
struct InterventionRecord {
  std::string id;  // e.g. "attn_out:[L7,L10,L11]" or "heads:top4"
  RecoveryResult result;
};

/// One (model, task, condition, seed, item) observation.
struct TrialRecord {
  std::string model;
  std::string task;
  std::string condition;
  int shots = 8;
  std::uint64_t seed = 0;
  std::string item_id;
  std::string query_label;
  std::optional<int> k;
  double p_target = 0.0;
  std::map<std::string, double> p_foils;  // label -> probability
  double p_demo_set = 0.0;
  int accuracy_bit = 0;
  /// Multi-token verbalizers: probability of the forced prefix and the
  /// conditional probability of each option after it.
  std::optional<double> p_forced;
  std::map<std::string, double> p_next;
  /// Label probabilities for the content-free query under the same demos.
  std::map<std::string, double> p_content_free;
  /// Per-layer lens probabilities of the target and the first foil.
  std::vector<double> lens_p_target;
  std::vector<double> lens_p_foil;
  std::optional<InterventionRecord> intervention;

  /// Resume/sort key: condition, seed, item and intervention id.
  std::string key() const;
};

nlohmann::json to_json(const TrialRecord& r);
TrialRecord record_from_json(const nlohmann::json& j);

/// accuracy_bit = [p_target > max(p_foils)].
int accuracy_from_probabilities(double p_target, const std::map<std::string, double>& p_foils);

/// Records whose stored accuracy bit disagrees with their probabilities.
std::vector<std::string> audit_accuracy(const std::vector<TrialRecord>& records);

/// Reads every complete line; a truncated final line is ignored.
std::vector<TrialRecord> read_records(const std::filesystem::path& path);
/// Canonical order: sorted by key, one compact JSON object per line.
void write_records(const std::filesystem::path& path, std::vector<TrialRecord> records);
void append_records(const std::filesystem::path& path, const std::vector<TrialRecord>& records);

/// Shortest round-trip decimal, "nan" for NaN.
std::string format_number(double v);

inline const std::vector<std::uint64_t>& default_seeds() {
  static const std::vector<std::uint64_t> s{42, 0, 1, 2, 3, 7, 13, 21, 55, 99};
  return s;
}

struct ExperimentPlan {
  std::string experiment_id = "experiment";
  std::string model_name;
  std::string task = "category";
  std::vector<std::string> conditions{"gp", "ctrl_balanced"};
  std::vector<std::uint64_t> seeds = default_seeds();
  int shots = 8;
  int items_per_class = 20;
  bool lens = false;
  bool calibrate = false;
  std::filesystem::path out_dir = "out";
  std::uint64_t stats_seed = 0;
  int bootstrap_draws = kDefaultDraws;

  void validate() const;
};

/// Everything a run needs besides the plan.
struct RunContext {
  const WeightBundle* weights = nullptr;
  const Tokenizer* tokenizer = nullptr;
  const TaskLibrary* library = nullptr;
};

/// Query items for a condition: the first `items_per_class` items of its
/// query class.
std::vector<std::string> query_items(const Task& task, const ConditionSpec& condition, int items_per_class);

/// Scores one rendered prompt.
TrialRecord score_prompt(const RunContext& ctx, const Task& task, const PromptInstance& prompt, bool lens,
                         bool calibrate, const std::string& model_name);

/// Runs every (condition, seed, item) unit missing from `<out>/records.jsonl`,
/// then rewrites the file in canonical order and writes `summary.json`.
std::vector<TrialRecord> run_experiment(const ExperimentPlan& plan, const RunContext& ctx);

/// Matched garden-path / control pairs for every (seed, item). The cluster
/// is the seed.
std::vector<PairedItem> make_paired_items(const ExperimentPlan& plan, const RunContext& ctx,
                                          const std::string& gp_condition = "gp",
                                          const std::string& ctrl_condition = "ctrl_balanced");

/// Records for patched garden-path prompts.
std::vector<TrialRecord> intervention_records(const ExperimentPlan& plan, const RunContext& ctx,
                                              const std::vector<PairedItem>& items,
                                              const std::string& intervention_id,
                                              const std::vector<RecoveryResult>& results);

/// Stats summaries for a record set:
/// [{statistic, condition, point, ci, n, n_excluded, test, p_raw, p_adjusted}].
nlohmann::json stats_summary(const std::vector<TrialRecord>& records, std::uint64_t stats_seed,
                             int draws = kDefaultDraws);

/// Serialized figure/table data. Figures are "fig1".."fig4", tables
/// "tab1".."tab5". Throws listing the missing conditions when the records do
/// not cover the figure.
void emit_report(const std::vector<TrialRecord>& records, const std::string& figure,
                 const std::filesystem::path& out_dir, std::uint64_t stats_seed = 0, int draws = kDefaultDraws);

/// True when FIXLAB_DETERMINISTIC=1.
bool deterministic_mode();

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace fixlab
