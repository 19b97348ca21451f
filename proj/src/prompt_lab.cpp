#include "fixlab/prompt_lab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "fixlab/error.hpp"
#include "fixlab/rng.hpp"

namespace fixlab {

namespace {

struct KindName {
  ConditionKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {ConditionKind::zero_shot, "zero_shot"},
    {ConditionKind::gp, "gp"},
    {ConditionKind::ctrl_balanced, "ctrl_balanced"},
    {ConditionKind::random, "random"},
    {ConditionKind::homog_nonsense, "homog_nonsense"},
    {ConditionKind::varied_nonsense, "varied_nonsense"},
    {ConditionKind::threshold_k, "threshold_k"},
    {ConditionKind::reverse_gp, "reverse_gp"},
    {ConditionKind::alternating, "alternating"},
    {ConditionKind::recency, "recency"},
    {ConditionKind::gp_multiclass, "gp_multiclass"},
    {ConditionKind::dog_heavy, "dog_heavy"},
    {ConditionKind::exclude_label, "exclude_label"},
    {ConditionKind::gp_multitoken, "gp_multitoken"},
    {ConditionKind::gp_single_token_control, "gp_single_token_control"},
    {ConditionKind::ctrl_single_token, "ctrl_single_token"},
    {ConditionKind::format_variant, "format_variant"},
};

bool takes_int(ConditionKind k) {
  return k == ConditionKind::threshold_k || k == ConditionKind::recency || k == ConditionKind::format_variant;
}

bool takes_label(ConditionKind k) {
  return k == ConditionKind::gp_multiclass || k == ConditionKind::exclude_label ||
         k == ConditionKind::gp_multitoken || k == ConditionKind::gp_single_token_control;
}

/// The last word of a verbalizer ("very positive" -> "positive").
std::string head_word(const std::string& label) {
  const auto sp = label.rfind(' ');
  return sp == std::string::npos ? label : label.substr(sp + 1);
}

struct Demo {
  const Item* item;
  std::string label;
};

class DemoBuilder {
 public:
  DemoBuilder(const Task& task, const ConditionSpec& cond, const std::string& query_id)
      : task_(task), query_id_(query_id),
        item_key_(Rng::mix(cond.seed) ^ hash_string(task.name + "|" + query_id)),
        order_(Rng::mix(cond.seed) ^ hash_string(task.name + "|" + query_id + "|" + cond.name()), 1),
        used_(task.classes.size(), 0) {}

  /// Next unused item of class `c`, from a permutation that depends only on
  /// (seed, task, query) so conditions rendered for the same query share items.
  const Item& take(int c) {
    auto& perm = permutation(c);
    auto& used = used_[static_cast<std::size_t>(c)];
    if (used >= perm.size()) {
      fail("prompt: item pool exhausted for class '" + task_.classes[static_cast<std::size_t>(c)].label + "' (" +
           std::to_string(perm.size()) + " available)");
    }
    return *perm[used++];
  }

  Rng& rng() { return order_; }

 private:
  std::vector<const Item*>& permutation(int c) {
    auto it = perms_.find(c);
    if (it != perms_.end()) return it->second;
    std::vector<const Item*> pool;
    for (const auto& item : task_.classes[static_cast<std::size_t>(c)].items) {
      if (item.id != query_id_) pool.push_back(&item);
    }
    Rng r(item_key_, 100 + static_cast<std::uint64_t>(c));
    r.shuffle(std::span<const Item*>(pool));
    return perms_.emplace(c, std::move(pool)).first->second;
  }

  const Task& task_;
  std::string query_id_;
  std::uint64_t item_key_;
  Rng order_;
  std::vector<std::size_t> used_;
  std::map<int, std::vector<const Item*>> perms_;
};

std::vector<int> round_robin_counts(int shots, const std::vector<int>& classes) {
  std::vector<int> counts(classes.size(), 0);
  for (int i = 0; i < shots; ++i) ++counts[static_cast<std::size_t>(i) % classes.size()];
  return counts;
}

}  // namespace

std::vector<std::string> Task::label_set() const {
  std::vector<std::string> out;
  for (const auto& c : classes) out.push_back(c.label);
  return out;
}

int Task::class_index(const std::string& label) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].label == label) return static_cast<int>(i);
  }
  fail("task " + name + ": unknown label '" + label + "'");
}

const Item& Task::item(const std::string& id) const {
  for (const auto& c : classes) {
    for (const auto& i : c.items) {
      if (i.id == id) return i;
    }
  }
  fail("task " + name + ": unknown item '" + id + "'");
}

const std::string& Task::item_label(const std::string& id) const {
  for (const auto& c : classes) {
    for (const auto& i : c.items) {
      if (i.id == id) return c.label;
    }
  }
  fail("task " + name + ": unknown item '" + id + "'");
}

TaskLibrary TaskLibrary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("tasks: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail("tasks: malformed JSON in " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

TaskLibrary TaskLibrary::from_json(const nlohmann::json& j) {
  TaskLibrary lib;
  for (const auto& t : j.at("tasks")) {
    Task task;
    task.name = t.at("task").get<std::string>();
    for (const auto& c : t.at("classes")) {
      TaskClass cls;
      cls.label = c.at("label").get<std::string>();
      for (const auto& i : c.at("items")) cls.items.push_back({i.at("id").get<std::string>(), i.at("text").get<std::string>()});
      if (cls.items.size() < 10) fail("tasks: class '" + cls.label + "' of " + task.name + " has fewer than 10 items");
      task.classes.push_back(std::move(cls));
    }
    if (task.classes.size() < 2) fail("tasks: " + task.name + " needs at least two classes");
    std::set<std::string> labels, ids;
    for (const auto& c : task.classes) {
      if (!labels.insert(c.label).second) fail("tasks: duplicate label '" + c.label + "' in " + task.name);
      for (const auto& i : c.items) {
        if (!ids.insert(i.id).second) fail("tasks: duplicate item id '" + i.id + "' in " + task.name);
      }
    }
    const auto& tp = t.at("template");
    task.templ.prefix = tp.value("prefix", std::string());
    task.templ.infix = tp.value("infix", std::string(":"));
    task.templ.separator = tp.value("separator", std::string("\n"));
    lib.tasks_.push_back(std::move(task));
  }
  return lib;
}

const Task& TaskLibrary::get(const std::string& name) const {
  for (const auto& t : tasks_) {
    if (t.name == name) return t;
  }
  fail("tasks: unknown task '" + name + "'");
}

const std::vector<std::string>& nonsense_labels() {
  static const std::vector<std::string> labels{"foo", "bar", "vex", "nit", "orb"};
  return labels;
}

std::string to_string(ConditionKind kind) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  fail("unknown condition kind");
}

std::string ConditionSpec::name() const {
  auto n = to_string(kind);
  if (takes_int(kind)) n += ":" + std::to_string(param);
  if (takes_label(kind)) n += ":" + label;
  return n;
}

void ConditionSpec::validate() const {
  require(shots >= 0, "condition: shots must be non-negative");
  if (kind != ConditionKind::zero_shot) require(shots >= 1, "condition " + name() + ": needs at least one shot");
  if (kind == ConditionKind::threshold_k) {
    require(param >= 0 && param <= shots, "condition: threshold k must lie in [0, shots]");
  }
  if (kind == ConditionKind::recency) {
    require(param >= 1 && param <= shots, "condition: recency position must lie in [1, shots]");
  }
  if (kind == ConditionKind::format_variant) {
    require(param >= 1 && param <= 5, "condition: unknown format variant " + std::to_string(param));
  }
  if (takes_label(kind)) require(!label.empty(), "condition " + to_string(kind) + ": needs a label");
}

ConditionSpec parse_condition(const std::string& name, int shots, std::uint64_t seed) {
  ConditionSpec c;
  c.shots = shots;
  c.seed = seed;
  const auto colon = name.find(':');
  const auto head = name.substr(0, colon);
  const auto arg = colon == std::string::npos ? std::string() : name.substr(colon + 1);
  bool found = false;
  for (const auto& kn : kKindNames) {
    if (head == kn.name) {
      c.kind = kn.kind;
      found = true;
    }
  }
  if (!found) fail("condition: unknown condition '" + name + "'");
  if (takes_int(c.kind)) {
    if (arg.empty()) fail("condition: '" + head + "' needs an integer argument");
    try {
      std::size_t used = 0;
      c.param = std::stoi(arg, &used);
      if (used != arg.size()) throw std::invalid_argument(arg);
    } catch (const std::exception&) {
      fail("condition: bad integer argument in '" + name + "'");
    }
  } else if (takes_label(c.kind)) {
    c.label = arg.empty() && (c.kind == ConditionKind::gp_multitoken || c.kind == ConditionKind::gp_single_token_control)
                  ? "positive"
                  : arg;
  } else if (!arg.empty()) {
    fail("condition: '" + head + "' takes no argument");
  }
  if (c.kind == ConditionKind::zero_shot) c.shots = 0;
  c.validate();
  return c;
}

TokenId verify_single_token(const std::string& label, const Tokenizer& tok) {
  if (label.empty()) fail("token gate: empty label");
  const auto ids = tok.encode(" " + label, false);
  if (ids.size() != 1) {
    std::string split;
    for (auto id : ids) split += (split.empty() ? "" : ", ") + ("'" + tok.token_text(id) + "'");
    fail("token gate: ' " + label + "' encodes to " + std::to_string(ids.size()) + " tokens [" + split + "]");
  }
  return ids.front();
}

void verify_task_tokens(const Task& task, const Tokenizer& tok) {
  for (const auto& c : task.classes) {
    if (c.label.find(' ') == std::string::npos) {
      verify_single_token(c.label, tok);
    } else {
      verify_single_token(head_word(c.label), tok);
    }
  }
  for (const auto& n : nonsense_labels()) verify_single_token(n, tok);
}

Template render_format_variant(const Task& task, int variant_id) {
  Template t;
  switch (variant_id) {
    case 1: t = {"", ":", "\n"}; break;
    case 2: t = {"Q: ", "\nA:", "\n"}; break;
    case 3: t = {"", " ->", "\n"}; break;
    case 4: t = {"input: ", "\nlabel:", "\n"}; break;
    case 5: t = {"", ":", "\n\n"}; break;
    default: fail("format variant: unknown id " + std::to_string(variant_id) + " for task " + task.name);
  }
  return t;
}

std::string query_class(const Task& task, const ConditionSpec& c) {
  const auto& first = task.classes[0].label;
  const auto& second = task.classes[1].label;
  switch (c.kind) {
    case ConditionKind::reverse_gp:
      return second;
    case ConditionKind::gp_multiclass:
      return c.label == first ? second : first;
    case ConditionKind::exclude_label:
      return c.label;
    case ConditionKind::gp_multitoken:
    case ConditionKind::gp_single_token_control: {
      // Polarity names the demonstrated class; the query is the other one.
      for (const auto& cls : task.classes) {
        if (head_word(cls.label) == c.label) return cls.label == first ? second : first;
      }
      fail("condition " + c.name() + ": polarity matches no class of " + task.name);
    }
    default:
      return first;
  }
}

PromptInstance build_prompt(const Task& task, const ConditionSpec& cond, const std::string& query_item_id,
                            const Tokenizer& tok, bool with_bos) {
  cond.validate();
  const auto& query = task.item(query_item_id);
  const auto& qlabel = task.item_label(query_item_id);
  const int q = task.class_index(qlabel);
  const int n_classes = static_cast<int>(task.classes.size());
  const int shots = cond.kind == ConditionKind::zero_shot ? 0 : cond.shots;

  auto opposite = [&]() {
    if (n_classes == 2) return 1 - q;
    return q == 0 ? 1 : 0;
  };
  auto label_of = [&](int c) { return task.classes[static_cast<std::size_t>(c)].label; };

  DemoBuilder b(task, cond, query_item_id);
  std::vector<Demo> demos;
  auto add_true = [&](int c, int n) {
    for (int i = 0; i < n; ++i) demos.push_back({&b.take(c), label_of(c)});
  };
  auto shuffle_demos = [&]() { b.rng().shuffle(std::span<Demo>(demos)); };
  auto mixed_items = [&]() {
    std::vector<int> all(static_cast<std::size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) all[static_cast<std::size_t>(c)] = c;
    const auto counts = round_robin_counts(shots, all);
    for (int c = 0; c < n_classes; ++c) add_true(c, counts[static_cast<std::size_t>(c)]);
    shuffle_demos();
  };
  auto require_binary = [&]() {
    require(n_classes == 2, "condition " + cond.name() + " needs a binary task, got " + task.name);
  };

  Template templ = task.templ;
  switch (cond.kind) {
    case ConditionKind::zero_shot:
      break;
    case ConditionKind::gp:
    case ConditionKind::reverse_gp:
      add_true(opposite(), shots);
      shuffle_demos();
      break;
    case ConditionKind::format_variant:
      templ = render_format_variant(task, cond.param);
      add_true(opposite(), shots);
      shuffle_demos();
      break;
    case ConditionKind::gp_multiclass: {
      const int dom = task.class_index(cond.label);
      require(dom != q, "condition " + cond.name() + ": query item belongs to the dominant class");
      add_true(dom, shots);
      shuffle_demos();
      break;
    }
    case ConditionKind::ctrl_balanced:
    case ConditionKind::ctrl_single_token:
      if (shots % n_classes != 0) {
        fail("condition " + cond.name() + ": " + std::to_string(shots) + " shots cannot be split evenly over " +
             std::to_string(n_classes) + " labels");
      }
      for (int c = 0; c < n_classes; ++c) add_true(c, shots / n_classes);
      if (cond.kind == ConditionKind::ctrl_single_token) {
        for (auto& d : demos) d.label = head_word(d.label);
      }
      shuffle_demos();
      break;
    case ConditionKind::random: {
      mixed_items();
      for (auto& d : demos) d.label = label_of(static_cast<int>(b.rng().below(static_cast<std::uint64_t>(n_classes))));
      break;
    }
    case ConditionKind::homog_nonsense:
      mixed_items();
      for (auto& d : demos) d.label = nonsense_labels().front();
      break;
    case ConditionKind::varied_nonsense: {
      mixed_items();
      const auto& pool = nonsense_labels();
      const int n = static_cast<int>(pool.size());
      std::vector<std::string> extra(pool);
      b.rng().shuffle(std::span<std::string>(extra));
      std::vector<std::string> labels;
      for (int r = 0; r < shots / n; ++r) labels.insert(labels.end(), pool.begin(), pool.end());
      labels.insert(labels.end(), extra.begin(), extra.begin() + shots % n);
      b.rng().shuffle(std::span<std::string>(labels));
      for (std::size_t i = 0; i < demos.size(); ++i) demos[i].label = labels[i];
      break;
    }
    case ConditionKind::threshold_k:
      require_binary();
      add_true(opposite(), cond.param);
      add_true(q, shots - cond.param);
      shuffle_demos();
      break;
    case ConditionKind::alternating: {
      require_binary();
      require(shots % 2 == 0, "condition alternating: needs an even number of shots");
      for (int i = 0; i < shots; ++i) add_true(i % 2 == 0 ? opposite() : q, 1);
      break;
    }
    case ConditionKind::recency: {
      add_true(opposite(), shots - 1);
      shuffle_demos();
      const Demo corrective{&b.take(q), qlabel};
      demos.insert(demos.begin() + (cond.param - 1), corrective);
      break;
    }
    case ConditionKind::dog_heavy: {
      const int heavy = shots * 5 / 8;
      add_true(q, heavy);
      std::vector<int> others;
      for (int c = 0; c < n_classes; ++c) {
        if (c != q) others.push_back(c);
      }
      const auto counts = round_robin_counts(shots - heavy, others);
      for (std::size_t i = 0; i < others.size(); ++i) add_true(others[i], counts[i]);
      shuffle_demos();
      break;
    }
    case ConditionKind::exclude_label: {
      const int ex = task.class_index(cond.label);
      std::vector<int> others;
      for (int c = 0; c < n_classes; ++c) {
        if (c != ex) others.push_back(c);
      }
      const auto counts = round_robin_counts(shots, others);
      for (std::size_t i = 0; i < others.size(); ++i) add_true(others[i], counts[i]);
      shuffle_demos();
      break;
    }
    case ConditionKind::gp_multitoken:
    case ConditionKind::gp_single_token_control: {
      int dom = -1;
      for (int c = 0; c < n_classes; ++c) {
        if (head_word(label_of(c)) == cond.label) dom = c;
      }
      require(dom >= 0, "condition " + cond.name() + ": polarity matches no class of " + task.name);
      require(dom != q, "condition " + cond.name() + ": query item belongs to the demonstrated class");
      add_true(dom, shots);
      if (cond.kind == ConditionKind::gp_single_token_control) {
        for (auto& d : demos) d.label = head_word(d.label);
      }
      shuffle_demos();
      break;
    }
  }

  PromptInstance p;
  p.task = task.name;
  p.condition = cond;
  p.query_item_id = query_item_id;
  p.query_label = qlabel;
  p.templ = templ;

  const auto query_block = templ.prefix + query.text + templ.infix;
  for (const auto& d : demos) {
    p.text += templ.prefix + d.item->text + templ.infix + " " + d.label + templ.separator;
    p.demos.push_back({d.item->id, d.label});
  }
  p.text += query_block;
  p.token_ids = tok.encode(p.text, with_bos);

  const auto query_ids = tok.encode(query_block, false);
  p.query_token_count = query_ids.size();
  if (query_ids.size() > p.token_ids.size() ||
      !std::equal(query_ids.begin(), query_ids.end(), p.token_ids.end() - static_cast<std::ptrdiff_t>(query_ids.size()))) {
    fail("prompt: query block does not tokenize as a suffix of the prompt for item " + query_item_id);
  }

  const bool multitoken = qlabel.find(' ') != std::string::npos;
  auto first_token = [&](const std::string& label) {
    if (label.find(' ') == std::string::npos) return verify_single_token(label, tok);
    return tok.encode(" " + label, false).front();
  };
  for (const auto& d : demos) p.demo_label_tokens.push_back(first_token(d.label));
  std::set<TokenId> set(p.demo_label_tokens.begin(), p.demo_label_tokens.end());
  p.demo_set.assign(set.begin(), set.end());

  if (!multitoken) {
    p.answer_token = verify_single_token(qlabel, tok);
    for (const auto& c : task.classes) {
      if (c.label != qlabel) p.foil_tokens.push_back(verify_single_token(c.label, tok));
    }
    return p;
  }

  // Verbalizers share a forced prefix; the options are the tokens after it.
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& c : task.classes) seqs.push_back(tok.encode(" " + c.label, false));
  std::size_t common = 0;
  while (std::all_of(seqs.begin(), seqs.end(),
                     [&](const auto& s) { return s.size() > common + 1 && s[common] == seqs[0][common]; })) {
    ++common;
  }
  require(common >= 1, "prompt: verbalizers of " + task.name + " share no leading token");
  TeacherForcingPlan plan;
  plan.forced.assign(seqs[0].begin(), seqs[0].begin() + static_cast<std::ptrdiff_t>(common));
  for (std::size_t c = 0; c < seqs.size(); ++c) {
    plan.options.push_back(seqs[c][common]);
    plan.option_labels.push_back(task.classes[c].label);
  }
  p.answer_token = plan.forced.front();
  p.plan = std::move(plan);
  return p;
}

std::vector<TokenId> content_free_tokens(const PromptInstance& prompt, const Task& task, const Tokenizer& tok,
                                         bool with_bos) {
  const auto& t = prompt.templ;
  const auto query_block = t.prefix + task.item(prompt.query_item_id).text + t.infix;
  require(prompt.text.size() >= query_block.size() &&
              prompt.text.compare(prompt.text.size() - query_block.size(), query_block.size(), query_block) == 0,
          "content-free probe: prompt does not end in its query block");
  const auto text = prompt.text.substr(0, prompt.text.size() - query_block.size()) + t.prefix + kContentFreeInput +
                    t.infix;
  return tok.encode(text, with_bos);
}

std::vector<std::string> tokenizer_corpus(const TaskLibrary& library) {
  std::vector<std::string> out;
  std::vector<std::string> extra(nonsense_labels());
  for (const auto& task : library.tasks()) {
    std::vector<Template> templates{task.templ};
    for (int v = 1; v <= 5; ++v) templates.push_back(render_format_variant(task, v));
    for (const auto& c : task.classes) {
      extra.push_back(c.label);
      extra.push_back(head_word(c.label));
    }
    for (const auto& t : templates) {
      out.push_back(t.prefix + kContentFreeInput + t.infix + t.separator);
      for (const auto& c : task.classes) {
        for (const auto& i : c.items) out.push_back(t.prefix + i.text + t.infix + t.separator);
      }
    }
  }
  for (const auto& e : extra) out.push_back(" " + e);
  return out;
}

nlohmann::json to_json(const PromptInstance& p) {
  nlohmann::json demos = nlohmann::json::array();
  for (const auto& d : p.demos) demos.push_back({{"item_id", d.item_id}, {"label", d.label}});
  nlohmann::json j{{"task", p.task},
                   {"condition", p.condition.name()},
                   {"shots", p.condition.shots},
                   {"seed", p.condition.seed},
                   {"text", p.text},
                   {"token_ids", p.token_ids},
                   {"query_item_id", p.query_item_id},
                   {"query_label", p.query_label},
                   {"answer_token", p.answer_token},
                   {"foil_tokens", p.foil_tokens},
                   {"demo_label_tokens", p.demo_label_tokens},
                   {"demo_set", p.demo_set},
                   {"demos", demos},
                   {"query_token_count", p.query_token_count}};
  if (p.plan) {
    j["plan"] = {{"forced", p.plan->forced}, {"options", p.plan->options}, {"option_labels", p.plan->option_labels}};
  }
  return j;
}

}  // namespace fixlab
