#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixlab/tokenizer.hpp"

namespace fixlab {

struct Item {
  std::string id;
  std::string text;
};

struct TaskClass {
  std::string label;
  std::vector<Item> items;
};

/// A demonstration renders as prefix + input + infix + " " + label; the query
/// as prefix + input + infix. Blocks are joined with the separator.
struct Template {
  std::string prefix;
  std::string infix = ":";
  std::string separator = "\n";
};

struct Task {
  std::string name;
  std::vector<TaskClass> classes;
  Template templ;

  std::vector<std::string> label_set() const;
  int class_index(const std::string& label) const;  // throws on unknown label
  const Item& item(const std::string& id) const;
  /// Label of the class that owns item `id`.
  const std::string& item_label(const std::string& id) const;
};

class TaskLibrary {
 public:
  static TaskLibrary load(const std::filesystem::path& path);
  static TaskLibrary from_json(const nlohmann::json& j);
  const Task& get(const std::string& name) const;
  const std::vector<Task>& tasks() const { return tasks_; }

 private:
  std::vector<Task> tasks_;
};

/// Tokens used as labels in the nonsense conditions.
const std::vector<std::string>& nonsense_labels();

enum class ConditionKind {
  zero_shot,
  gp,
  ctrl_balanced,
  random,
  homog_nonsense,
  varied_nonsense,
  threshold_k,
  reverse_gp,
  alternating,
  recency,
  gp_multiclass,
  dog_heavy,
  exclude_label,
  gp_multitoken,
  gp_single_token_control,
  ctrl_single_token,
  format_variant,
};

struct ConditionSpec {
  ConditionKind kind = ConditionKind::gp;
  int shots = 8;
  /// threshold_k: k; recency: 1-based position; format_variant: id.
  int param = 0;
  /// gp_multiclass: dominant label; exclude_label: excluded label;
  /// gp_multitoken: polarity ("positive" or "negative").
  std::string label;
  std::uint64_t seed = 42;

  /// Canonical name without the seed, e.g. "threshold_k:5" or "recency:8".
  std::string name() const;
  void validate() const;
};

/// Parses the canonical name; shots and seed are taken from the arguments.
ConditionSpec parse_condition(const std::string& name, int shots = 8, std::uint64_t seed = 42);

struct DemoRecord {
  std::string item_id;
  std::string label;
};

/// Next-token measurement for multi-token verbalizers: the first verbalizer
/// token is scored on the prompt, then `forced` is appended and `options`
/// are scored at the following position.
struct TeacherForcingPlan {
  std::vector<TokenId> forced;
  std::vector<TokenId> options;
  std::vector<std::string> option_labels;
};

struct PromptInstance {
  std::string task;
  ConditionSpec condition;
  std::string text;
  std::vector<TokenId> token_ids;
  std::string query_item_id;
  std::string query_label;
  TokenId answer_token = 0;
  std::vector<TokenId> foil_tokens;
  /// Label token of each demonstration, in prompt order.
  std::vector<TokenId> demo_label_tokens;
  /// Distinct demonstrated label tokens, ascending.
  std::vector<TokenId> demo_set;
  std::vector<DemoRecord> demos;
  /// Number of trailing tokens that encode the query block.
  std::size_t query_token_count = 0;
  std::optional<TeacherForcingPlan> plan;
  /// Template the prompt was rendered with (after any format variant).
  Template templ;
};

nlohmann::json to_json(const PromptInstance& p);

/// Returns the single id for " " + label; fails listing the split otherwise.
TokenId verify_single_token(const std::string& label, const Tokenizer& tok);

/// Delimiter conventions 1..5 applied to a task's template.
Template render_format_variant(const Task& task, int variant_id);

/// Class label the query is drawn from by default for a condition.
std::string query_class(const Task& task, const ConditionSpec& condition);

/// Renders one prompt. With `with_bos` the tokenizer's BOS policy applies.
PromptInstance build_prompt(const Task& task, const ConditionSpec& condition, const std::string& query_item_id,
                            const Tokenizer& tok, bool with_bos = true);

/// Single-token gate over a task's labels and the nonsense inventory.
void verify_task_tokens(const Task& task, const Tokenizer& tok);

std::string to_string(ConditionKind kind);

/// The same demonstrations followed by the content-free query.
std::vector<TokenId> content_free_tokens(const PromptInstance& prompt, const Task& task, const Tokenizer& tok,
                                         bool with_bos = true);

/// Content-free query text used for contextual calibration.
inline constexpr const char* kContentFreeInput = "N/A";

/// Every string the prompt builder can emit for the library, for building a
/// toy tokenizer whose vocabulary covers it.
std::vector<std::string> tokenizer_corpus(const TaskLibrary& library);

}  // namespace fixlab
