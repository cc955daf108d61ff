#pragma once

// Closed word-level vocabulary, token sequences and restricted-term checks.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace sop {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;
using json = nlohmann::json;

class Vocab {
 public:
  Vocab(std::vector<std::string> surfaces, TokenId pad, TokenId bos, TokenId eos, TokenId unk);

  // Prepends the four specials <pad> <bos> <eos> <unk> to `words` (ids 0..3).
  static Vocab with_specials(const std::vector<std::string>& words);
  // Specials plus `n_words` generic words "w0", "w1", ...
  static Vocab synthetic(int n_words);

  int size() const { return static_cast<int>(surfaces_.size()); }
  TokenId pad() const { return pad_; }
  TokenId bos() const { return bos_; }
  TokenId eos() const { return eos_; }
  TokenId unk() const { return unk_; }
  bool is_special(TokenId id) const { return id == pad_ || id == bos_ || id == eos_ || id == unk_; }

  // Exact lookup first, lowercase second.
  std::optional<TokenId> find(std::string_view word) const;
  const std::string& surface(TokenId id) const;
  const std::vector<std::string>& surfaces() const { return surfaces_; }

  json to_json() const;
  static Vocab from_json(const json& j);
  std::string hash() const;

  bool operator==(const Vocab& other) const {
    return surfaces_ == other.surfaces_ && pad_ == other.pad_ && bos_ == other.bos_ &&
           eos_ == other.eos_ && unk_ == other.unk_;
  }

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_, bos_, eos_, unk_;
};

std::string to_lower(std::string_view s);
// Lowercased words joined by single spaces.
std::string normalize_text(std::string_view s);

TokenSeq encode(std::string_view text, const Vocab& vocab);
std::string decode(std::span<const TokenId> tokens, const Vocab& vocab);

// bos followed by the encoded words.
TokenSeq encode_prompt(std::string_view text, const Vocab& vocab);

struct RestrictedTerm {
  std::string surface;
  TokenSeq tokens;
  std::string category;

  bool operator==(const RestrictedTerm&) const = default;
};

// Throws if any word of `surface` is out of vocabulary.
RestrictedTerm make_term(std::string_view surface, const Vocab& vocab, std::string category = {});

class RestrictionSet {
 public:
  RestrictionSet() = default;
  explicit RestrictionSet(std::vector<RestrictedTerm> terms);

  void add(RestrictedTerm term);
  const std::vector<RestrictedTerm>& terms() const { return terms_; }
  std::size_t size() const { return terms_.size(); }
  bool empty() const { return terms_.empty(); }
  // Total number of tokens across all terms.
  std::size_t token_count() const;
  // Order-independent hash of the lowercased surfaces.
  std::string fingerprint() const;
  std::vector<std::string> surfaces() const;

 private:
  std::vector<RestrictedTerm> terms_;
};

bool contains_tokens(std::span<const TokenId> output, std::span<const TokenId> needle);
bool contains_surface(std::string_view text, std::string_view surface);
bool contains_term(std::span<const TokenId> output, const RestrictedTerm& term, const Vocab& vocab);
bool violates(std::span<const TokenId> output, const RestrictionSet& rset, const Vocab& vocab);
// Token-level only; used for the logit-mask guarantee.
bool violates_tokens(std::span<const TokenId> output, const RestrictionSet& rset);

}  // namespace sop
