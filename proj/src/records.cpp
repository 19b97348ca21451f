#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <tuple>

#include "fixlab/error.hpp"
#include "fixlab/harness.hpp"

namespace fixlab {

namespace {

nlohmann::json recovery_json(const InterventionRecord& r) {
  nlohmann::json j{{"id", r.id}, {"p_gp", r.result.p_gp}, {"p_ctrl", r.result.p_ctrl},
                   {"p_patched", r.result.p_patched}};
  j["recovery"] = r.result.recovery ? nlohmann::json(*r.result.recovery) : nlohmann::json(nullptr);
  j["excluded"] = r.result.excluded();
  if (r.result.exclusion_reason) j["exclusion_reason"] = *r.result.exclusion_reason;
  return j;
}

std::tuple<std::string, std::string, std::uint64_t, std::string> sort_key(const TrialRecord& r) {
  return {r.intervention ? r.intervention->id : std::string(), r.condition, r.seed, r.item_id};
}

}  // namespace

std::string TrialRecord::key() const {
  return condition + "|" + std::to_string(seed) + "|" + item_id + "|" + (intervention ? intervention->id : "");
}

int accuracy_from_probabilities(double p_target, const std::map<std::string, double>& p_foils) {
  for (const auto& [label, p] : p_foils) {
    if (!(p_target > p)) return 0;
  }
  return 1;
}

nlohmann::json to_json(const TrialRecord& r) {
  nlohmann::json j{{"model", r.model},
                   {"task", r.task},
                   {"condition", r.condition},
                   {"shots", r.shots},
                   {"seed", r.seed},
                   {"item_id", r.item_id},
                   {"query_label", r.query_label},
                   {"p_target", r.p_target},
                   {"p_foils", r.p_foils},
                   {"p_demo_set", r.p_demo_set},
                   {"accuracy_bit", r.accuracy_bit}};
  if (r.k) j["k"] = *r.k;
  if (r.p_forced) {
    j["p_forced"] = *r.p_forced;
    j["p_next"] = r.p_next;
  }
  if (!r.p_content_free.empty()) j["p_content_free"] = r.p_content_free;
  if (!r.lens_p_target.empty()) {
    j["lens_p_target"] = r.lens_p_target;
    j["lens_p_foil"] = r.lens_p_foil;
  }
  if (r.intervention) j["intervention"] = recovery_json(*r.intervention);
  return j;
}

TrialRecord record_from_json(const nlohmann::json& j) {
  TrialRecord r;
  try {
    r.model = j.at("model").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.condition = j.at("condition").get<std::string>();
    r.shots = j.at("shots").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.item_id = j.at("item_id").get<std::string>();
    r.query_label = j.at("query_label").get<std::string>();
    r.p_target = j.at("p_target").get<double>();
    r.p_foils = j.at("p_foils").get<std::map<std::string, double>>();
    r.p_demo_set = j.at("p_demo_set").get<double>();
    r.accuracy_bit = j.at("accuracy_bit").get<int>();
    if (j.contains("k")) r.k = j.at("k").get<int>();
    if (j.contains("p_forced")) {
      r.p_forced = j.at("p_forced").get<double>();
      r.p_next = j.at("p_next").get<std::map<std::string, double>>();
    }
    if (j.contains("p_content_free")) r.p_content_free = j.at("p_content_free").get<std::map<std::string, double>>();
    if (j.contains("lens_p_target")) {
      r.lens_p_target = j.at("lens_p_target").get<std::vector<double>>();
      r.lens_p_foil = j.at("lens_p_foil").get<std::vector<double>>();
    }
    if (j.contains("intervention")) {
      const auto& iv = j.at("intervention");
      InterventionRecord x;
      x.id = iv.at("id").get<std::string>();
      x.result.p_gp = iv.at("p_gp").get<double>();
      x.result.p_ctrl = iv.at("p_ctrl").get<double>();
      x.result.p_patched = iv.at("p_patched").get<double>();
      if (!iv.at("recovery").is_null()) x.result.recovery = iv.at("recovery").get<double>();
      if (iv.contains("exclusion_reason")) x.result.exclusion_reason = iv.at("exclusion_reason").get<std::string>();
      r.intervention = std::move(x);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("record: malformed trial record: ") + e.what());
  }
  for (double p : {r.p_target, r.p_demo_set}) {
    require(p >= 0.0 && p <= 1.0, "record: probability outside [0, 1] in " + r.key());
  }
  return r;
}

std::vector<std::string> audit_accuracy(const std::vector<TrialRecord>& records) {
  std::vector<std::string> bad;
  for (const auto& r : records) {
    if (accuracy_from_probabilities(r.p_target, r.p_foils) != r.accuracy_bit) bad.push_back(r.key());
  }
  return bad;
}

std::vector<TrialRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot read records from " + path.string());
  std::vector<TrialRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    // A run killed mid-write leaves at most one unterminated line at the end.
    if (in.eof()) {
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) break;
      out.push_back(record_from_json(j));
      break;
    }
    out.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

void write_records(const std::filesystem::path& path, std::vector<TrialRecord> records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const TrialRecord& a, const TrialRecord& b) { return sort_key(a) < sort_key(b); });
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + tmp);
    for (const auto& r : records) out << to_json(r).dump() << '\n';
    if (!out) fail("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void append_records(const std::filesystem::path& path, const std::vector<TrialRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) fail("cannot append to " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  out.flush();
  if (!out) fail("write failed for " + path.string());
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

bool deterministic_mode() {
  const char* v = std::getenv("FIXLAB_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) fail("write failed for " + path.string());
}

}  // namespace fixlab
