#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fixlab/model_config.hpp"

namespace fixlab {

/// Byte-level BPE tokenizer read from a tokenizer.json export (vocab, merges,
/// added tokens, pre-tokenizer split pattern).
class Tokenizer {
 public:
  static Tokenizer from_file(const std::filesystem::path& path);
  static Tokenizer from_json(const nlohmann::json& j);

  Tokenizer(Tokenizer&&) noexcept;
  Tokenizer& operator=(Tokenizer&&) noexcept;
  ~Tokenizer();

  /// With `with_specials`, the BOS token is prepended when the policy asks for it.
  std::vector<TokenId> encode(std::string_view text, bool with_specials = false) const;
  std::string decode(std::span<const TokenId> ids) const;

  /// Raw vocabulary lookup (byte-level surface form, e.g. "Ġfoo").
  std::optional<TokenId> token_id(std::string_view token) const;
  /// Inverse of token_id, for reporting splits.
  std::string token_text(TokenId id) const;

  /// One past the largest id in the vocabulary or the added-token table.
  int vocab_size() const;

  BosPolicy bos_policy() const;
  std::optional<TokenId> bos_token_id() const;
  void set_bos(BosPolicy policy, std::optional<TokenId> id);

  /// Pieces produced by normalisation and pre-tokenisation, before BPE.
  std::vector<std::string> pretokenize(std::string_view text) const;

 private:
  struct Impl;
  explicit Tokenizer(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

/// Byte-level surface form of raw bytes ("Ġ" for space etc.).
std::string bytes_to_symbols(std::string_view bytes);
std::string symbols_to_bytes(std::string_view symbols);

/// A small tokenizer.json whose vocabulary holds every pre-token piece of
/// `corpus` as a whole token, plus the 256 byte symbols and an end-of-text
/// special at id 0. Used with toy models so task prompts stay short.
nlohmann::json make_toy_tokenizer_json(const std::vector<std::string>& corpus);

}  // namespace fixlab
