#include "fixlab/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include <unicode/normalizer2.h>
#include <unicode/regex.h>
#include <unicode/unistr.h>

#include "fixlab/error.hpp"

namespace fixlab {

namespace {

constexpr std::string_view kGpt2Pattern =
    R"('s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+)";

struct ByteTable {
  std::array<std::string, 256> to_symbol;
  std::unordered_map<std::string, unsigned char> to_byte;

  ByteTable() {
    std::array<int, 256> code{};
    std::array<bool, 256> direct{};
    for (int b = 0; b < 256; ++b) {
      direct[b] = (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
    }
    int next = 256;
    for (int b = 0; b < 256; ++b) code[b] = direct[b] ? b : next++;
    for (int b = 0; b < 256; ++b) {
      std::string s;
      icu::UnicodeString(static_cast<UChar32>(code[b])).toUTF8String(s);
      to_symbol[b] = s;
      to_byte.emplace(s, static_cast<unsigned char>(b));
    }
  }
};

const ByteTable& byte_table() {
  static const ByteTable table;
  return table;
}

/// Splits UTF-8 into code points.
std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    len = std::min(len, s.size() - i);
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

/// Rewrites \s and \S to the Unicode White_Space property so the ICU engine
/// treats vertical tab and NEL as whitespace like the reference engines.
std::string widen_whitespace_classes(std::string_view pattern) {
  std::string out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] == '\\' && i + 1 < pattern.size()) {
      const char c = pattern[i + 1];
      if (c == 's') {
        out += "\\p{White_Space}";
      } else if (c == 'S') {
        out += "\\P{White_Space}";
      } else {
        out += pattern.substr(i, 2);
      }
      ++i;
    } else {
      out += pattern[i];
    }
  }
  return out;
}

struct AddedToken {
  std::string content;
  TokenId id;
  bool special;
};

}  // namespace

std::string bytes_to_symbols(std::string_view bytes) {
  const auto& t = byte_table();
  std::string out;
  for (unsigned char b : bytes) out += t.to_symbol[b];
  return out;
}

std::string symbols_to_bytes(std::string_view symbols) {
  const auto& t = byte_table();
  std::string out;
  for (const auto& ch : utf8_chars(symbols)) {
    auto it = t.to_byte.find(ch);
    if (it == t.to_byte.end()) fail("tokenizer: '" + ch + "' is not a byte-level symbol");
    out += static_cast<char>(it->second);
  }
  return out;
}

struct Tokenizer::Impl {
  std::unordered_map<std::string, TokenId> vocab;
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> merge_rank;
  std::vector<AddedToken> added;  // longest content first
  std::unordered_map<TokenId, std::size_t> added_by_id;
  std::unique_ptr<icu::RegexPattern> split;
  bool nfc = false;
  bool add_prefix_space = false;
  bool ignore_merges = false;
  BosPolicy bos = BosPolicy::none;
  std::optional<TokenId> bos_id;
  int n_ids = 0;

  std::vector<std::string> split_pieces(std::string_view text) const;
  void bpe(const std::string& piece, std::vector<TokenId>& out) const;
};

namespace {

std::string merge_key(const std::string& a, const std::string& b) { return a + ' ' + b; }

/// Finds the split regex and ByteLevel options in a pre_tokenizer node.
void read_pretokenizer(const nlohmann::json& node, std::string& pattern, bool& prefix_space) {
  if (node.is_null()) return;
  const auto type = node.at("type").get<std::string>();
  if (type == "Sequence") {
    for (const auto& child : node.at("pretokenizers")) read_pretokenizer(child, pattern, prefix_space);
  } else if (type == "Split") {
    const auto& p = node.at("pattern");
    if (!p.contains("Regex")) fail("tokenizer: only regex Split pre-tokenizers are supported");
    const auto behavior = node.value("behavior", std::string("Isolated"));
    if (behavior != "Isolated" || node.value("invert", false)) {
      fail("tokenizer: unsupported Split behavior '" + behavior + "'");
    }
    if (!pattern.empty()) fail("tokenizer: more than one split pattern");
    pattern = p.at("Regex").get<std::string>();
  } else if (type == "ByteLevel") {
    prefix_space = node.value("add_prefix_space", false);
    if (node.value("use_regex", true)) {
      if (!pattern.empty()) fail("tokenizer: more than one split pattern");
      pattern = std::string(kGpt2Pattern);
    }
  } else {
    fail("tokenizer: unsupported pre-tokenizer '" + type + "'");
  }
}

/// Looks for a BOS special token in a TemplateProcessing post-processor.
std::optional<std::string> template_bos(const nlohmann::json& node) {
  if (node.is_null()) return std::nullopt;
  const auto type = node.value("type", std::string());
  if (type == "Sequence") {
    for (const auto& child : node.at("processors")) {
      if (auto b = template_bos(child)) return b;
    }
  } else if (type == "TemplateProcessing") {
    const auto& single = node.at("single");
    if (!single.empty() && single.front().contains("SpecialToken")) {
      return single.front().at("SpecialToken").at("id").get<std::string>();
    }
  }
  return std::nullopt;
}

}  // namespace

Tokenizer::Tokenizer(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Tokenizer::Tokenizer(Tokenizer&&) noexcept = default;
Tokenizer& Tokenizer::operator=(Tokenizer&&) noexcept = default;
Tokenizer::~Tokenizer() = default;

Tokenizer Tokenizer::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("tokenizer: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail("tokenizer: malformed JSON in " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  auto impl = std::make_unique<Impl>();
  const auto& model = j.at("model");
  if (model.value("type", std::string("BPE")) != "BPE") fail("tokenizer: only BPE models are supported");
  impl->ignore_merges = model.value("ignore_merges", false);

  int max_id = -1;
  for (const auto& [token, id] : model.at("vocab").items()) {
    const auto v = id.get<TokenId>();
    impl->vocab.emplace(token, v);
    max_id = std::max(max_id, v);
  }
  int rank = 0;
  for (const auto& m : model.at("merges")) {
    std::string a, b;
    if (m.is_string()) {
      const auto s = m.get<std::string>();
      const auto sp = s.find(' ');
      if (sp == std::string::npos) fail("tokenizer: malformed merge '" + s + "'");
      a = s.substr(0, sp);
      b = s.substr(sp + 1);
    } else {
      a = m.at(0).get<std::string>();
      b = m.at(1).get<std::string>();
    }
    impl->merge_rank.emplace(merge_key(a, b), rank++);
  }
  if (j.contains("added_tokens")) {
    for (const auto& t : j.at("added_tokens")) {
      AddedToken a{t.at("content").get<std::string>(), t.at("id").get<TokenId>(), t.value("special", false)};
      max_id = std::max(max_id, a.id);
      impl->added.push_back(std::move(a));
    }
  }
  std::stable_sort(impl->added.begin(), impl->added.end(),
                   [](const AddedToken& x, const AddedToken& y) { return x.content.size() > y.content.size(); });
  for (std::size_t i = 0; i < impl->added.size(); ++i) impl->added_by_id.emplace(impl->added[i].id, i);

  impl->n_ids = max_id + 1;
  impl->id_to_token.assign(static_cast<std::size_t>(impl->n_ids), std::string());
  for (const auto& [token, id] : impl->vocab) impl->id_to_token[static_cast<std::size_t>(id)] = token;

  const auto& norm = j.contains("normalizer") ? j.at("normalizer") : nlohmann::json();
  if (!norm.is_null()) {
    const auto type = norm.at("type").get<std::string>();
    if (type != "NFC") fail("tokenizer: unsupported normalizer '" + type + "'");
    impl->nfc = true;
  }

  std::string pattern;
  read_pretokenizer(j.contains("pre_tokenizer") ? j.at("pre_tokenizer") : nlohmann::json(), pattern,
                    impl->add_prefix_space);
  if (!pattern.empty()) {
    UErrorCode status = U_ZERO_ERROR;
    UParseError perr;
    impl->split.reset(icu::RegexPattern::compile(icu::UnicodeString::fromUTF8(widen_whitespace_classes(pattern)),
                                                 0, perr, status));
    if (U_FAILURE(status)) fail("tokenizer: cannot compile split pattern: " + std::string(u_errorName(status)));
  }

  if (auto bos = template_bos(j.contains("post_processor") ? j.at("post_processor") : nlohmann::json())) {
    for (const auto& a : impl->added) {
      if (a.content == *bos) {
        impl->bos = BosPolicy::auto_prepend;
        impl->bos_id = a.id;
      }
    }
  }
  return Tokenizer(std::move(impl));
}

std::vector<std::string> Tokenizer::Impl::split_pieces(std::string_view text) const {
  std::string normalized(text);
  if (nfc) {
    UErrorCode status = U_ZERO_ERROR;
    const auto* n = icu::Normalizer2::getNFCInstance(status);
    auto u = n->normalize(icu::UnicodeString::fromUTF8(normalized), status);
    if (U_FAILURE(status)) fail("tokenizer: normalization failed");
    normalized.clear();
    u.toUTF8String(normalized);
  }
  if (add_prefix_space && !normalized.empty() && normalized.front() != ' ') normalized.insert(0, 1, ' ');

  std::vector<std::string> pieces;
  if (!split) {
    if (!normalized.empty()) pieces.push_back(normalized);
    return pieces;
  }
  const auto u = icu::UnicodeString::fromUTF8(normalized);
  UErrorCode status = U_ZERO_ERROR;
  std::unique_ptr<icu::RegexMatcher> m(split->matcher(u, status));
  if (U_FAILURE(status)) fail("tokenizer: regex matcher failed");
  auto emit = [&](int32_t begin, int32_t end) {
    if (end <= begin) return;
    std::string s;
    u.tempSubStringBetween(begin, end).toUTF8String(s);
    pieces.push_back(std::move(s));
  };
  int32_t last = 0;
  while (m->find(status)) {
    const int32_t b = m->start(status);
    const int32_t e = m->end(status);
    emit(last, b);
    emit(b, e);
    last = e;
  }
  if (U_FAILURE(status)) fail("tokenizer: regex search failed");
  emit(last, u.length());
  return pieces;
}

void Tokenizer::Impl::bpe(const std::string& piece, std::vector<TokenId>& out) const {
  const auto symbols = bytes_to_symbols(piece);
  if (ignore_merges) {
    if (auto it = vocab.find(symbols); it != vocab.end()) {
      out.push_back(it->second);
      return;
    }
  }
  auto parts = utf8_chars(symbols);
  while (parts.size() > 1) {
    int best = std::numeric_limits<int>::max();
    std::size_t at = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto it = merge_rank.find(merge_key(parts[i], parts[i + 1]));
      if (it != merge_rank.end() && it->second < best) {
        best = it->second;
        at = i;
      }
    }
    if (best == std::numeric_limits<int>::max()) break;
    parts[at] += parts[at + 1];
    parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(at) + 1);
  }
  for (const auto& p : parts) {
    auto it = vocab.find(p);
    if (it == vocab.end()) fail("tokenizer: no vocabulary entry for symbol '" + p + "'");
    out.push_back(it->second);
  }
}

std::vector<std::string> Tokenizer::pretokenize(std::string_view text) const {
  return impl_->split_pieces(text);
}

std::vector<TokenId> Tokenizer::encode(std::string_view text, bool with_specials) const {
  std::vector<TokenId> out;
  if (with_specials && impl_->bos == BosPolicy::auto_prepend && impl_->bos_id) out.push_back(*impl_->bos_id);

  auto encode_plain = [&](std::string_view chunk) {
    for (const auto& p : impl_->split_pieces(chunk)) impl_->bpe(p, out);
  };
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    const AddedToken* hit = nullptr;
    for (const auto& a : impl_->added) {
      if (!a.content.empty() && text.compare(i, a.content.size(), a.content) == 0) {
        hit = &a;
        break;
      }
    }
    if (hit) {
      encode_plain(text.substr(start, i - start));
      out.push_back(hit->id);
      i += hit->content.size();
      start = i;
    } else {
      ++i;
    }
  }
  encode_plain(text.substr(start));
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (auto it = impl_->added_by_id.find(id); it != impl_->added_by_id.end()) {
      out += impl_->added[it->second].content;
      continue;
    }
    out += symbols_to_bytes(token_text(id));
  }
  return out;
}

std::optional<TokenId> Tokenizer::token_id(std::string_view token) const {
  if (auto it = impl_->vocab.find(std::string(token)); it != impl_->vocab.end()) return it->second;
  for (const auto& a : impl_->added) {
    if (a.content == token) return a.id;
  }
  return std::nullopt;
}

std::string Tokenizer::token_text(TokenId id) const {
  if (id < 0 || id >= impl_->n_ids) fail("tokenizer: id " + std::to_string(id) + " out of range");
  if (auto it = impl_->added_by_id.find(id); it != impl_->added_by_id.end()) return impl_->added[it->second].content;
  const auto& t = impl_->id_to_token[static_cast<std::size_t>(id)];
  if (t.empty()) fail("tokenizer: id " + std::to_string(id) + " has no vocabulary entry");
  return t;
}

int Tokenizer::vocab_size() const { return impl_->n_ids; }
BosPolicy Tokenizer::bos_policy() const { return impl_->bos; }
std::optional<TokenId> Tokenizer::bos_token_id() const { return impl_->bos_id; }

void Tokenizer::set_bos(BosPolicy policy, std::optional<TokenId> id) {
  require(policy == BosPolicy::none || id.has_value(), "tokenizer: auto_prepend needs a BOS id");
  impl_->bos = policy;
  impl_->bos_id = id;
}

nlohmann::json make_toy_tokenizer_json(const std::vector<std::string>& corpus) {
  nlohmann::json vocab = nlohmann::json::object();
  TokenId next = 1;
  const auto& table = byte_table();
  for (int b = 0; b < 256; ++b) vocab[table.to_symbol[static_cast<std::size_t>(b)]] = next++;

  nlohmann::json base = {{"model", {{"type", "BPE"}, {"vocab", nlohmann::json::object()}, {"merges", nlohmann::json::array()}}},
                         {"pre_tokenizer", {{"type", "ByteLevel"}, {"add_prefix_space", false}, {"use_regex", true}}}};
  const auto splitter = Tokenizer::from_json(base);

  nlohmann::json merges = nlohmann::json::array();
  std::unordered_set<std::string> merged;
  for (const auto& text : corpus) {
    for (const auto& piece : splitter.pretokenize(text)) {
      const auto symbols = bytes_to_symbols(piece);
      if (vocab.contains(symbols)) continue;
      // Left-to-right merge chain so the piece is also reachable through BPE.
      const auto chars = utf8_chars(symbols);
      std::string acc = chars.front();
      for (std::size_t i = 1; i < chars.size(); ++i) {
        const auto joined = acc + chars[i];
        if (!vocab.contains(joined)) vocab[joined] = next++;
        if (merged.insert(merge_key(acc, chars[i])).second) merges.push_back(merge_key(acc, chars[i]));
        acc = joined;
      }
    }
  }
  base["model"]["vocab"] = std::move(vocab);
  base["model"]["merges"] = std::move(merges);
  base["model"]["ignore_merges"] = true;
  base["added_tokens"] = nlohmann::json::array(
      {{{"id", 0}, {"content", "<|endoftext|>"}, {"special", true}}});
  return base;
}

}  // namespace fixlab
