#include "sop/tokencore.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "sop/errors.hpp"
#include "sop/hash.hpp"

namespace sop {

namespace {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> surfaces, TokenId pad, TokenId bos, TokenId eos, TokenId unk)
    : surfaces_(std::move(surfaces)), pad_(pad), bos_(bos), eos_(eos), unk_(unk) {
  const auto v = static_cast<TokenId>(surfaces_.size());
  if (v < 8) throw ConfigError("vocab needs at least 8 entries, got " + std::to_string(v));
  for (TokenId s : {pad_, bos_, eos_, unk_}) {
    if (s < 0 || s >= v) throw ConfigError("special id out of range");
  }
  if (std::set<TokenId>{pad_, bos_, eos_, unk_}.size() != 4) throw ConfigError("special ids must be distinct");
  for (TokenId i = 0; i < v; ++i) {
    const auto& w = surfaces_[i];
    if (w.empty() || split_words(w).size() != 1) throw ConfigError("vocab surface must be a single word: '" + w + "'");
    if (!index_.emplace(w, i).second) throw ConfigError("duplicate vocab surface '" + w + "'");
  }
}

Vocab Vocab::with_specials(const std::vector<std::string>& words) {
  std::vector<std::string> all{"<pad>", "<bos>", "<eos>", "<unk>"};
  all.insert(all.end(), words.begin(), words.end());
  return Vocab(std::move(all), 0, 1, 2, 3);
}

Vocab Vocab::synthetic(int n_words) {
  std::vector<std::string> words;
  for (int i = 0; i < n_words; ++i) words.push_back("w" + std::to_string(i));
  return with_specials(words);
}

std::optional<TokenId> Vocab::find(std::string_view word) const {
  if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
  if (auto it = index_.find(to_lower(word)); it != index_.end()) return it->second;
  return std::nullopt;
}

const std::string& Vocab::surface(TokenId id) const {
  if (id < 0 || id >= size()) throw InvalidTokenError("token id " + std::to_string(id) + " outside vocab of size " + std::to_string(size()));
  return surfaces_[id];
}

json Vocab::to_json() const {
  return json{{"surfaces", surfaces_}, {"pad", pad_}, {"bos", bos_}, {"eos", eos_}, {"unk", unk_}};
}

Vocab Vocab::from_json(const json& j) {
  for (const char* f : {"surfaces", "pad", "bos", "eos", "unk"}) {
    if (!j.contains(f)) throw SchemaError(f, "missing field");
  }
  return Vocab(j.at("surfaces").get<std::vector<std::string>>(), j.at("pad").get<TokenId>(),
               j.at("bos").get<TokenId>(), j.at("eos").get<TokenId>(), j.at("unk").get<TokenId>());
}

std::string Vocab::hash() const { return hash_hex(to_json().dump()); }

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string normalize_text(std::string_view s) {
  std::string out;
  for (const auto& w : split_words(s)) {
    if (!out.empty()) out.push_back(' ');
    out += to_lower(w);
  }
  return out;
}

TokenSeq encode(std::string_view text, const Vocab& vocab) {
  TokenSeq out;
  for (const auto& w : split_words(text)) out.push_back(vocab.find(w).value_or(vocab.unk()));
  return out;
}

std::string decode(std::span<const TokenId> tokens, const Vocab& vocab) {
  std::string out;
  for (TokenId t : tokens) {
    const auto& s = vocab.surface(t);
    if (vocab.is_special(t)) continue;
    if (!out.empty()) out.push_back(' ');
    out += s;
  }
  return out;
}

TokenSeq encode_prompt(std::string_view text, const Vocab& vocab) {
  TokenSeq out{vocab.bos()};
  auto words = encode(text, vocab);
  out.insert(out.end(), words.begin(), words.end());
  return out;
}

RestrictedTerm make_term(std::string_view surface, const Vocab& vocab, std::string category) {
  RestrictedTerm term{normalize_text(surface), encode(surface, vocab), std::move(category)};
  if (term.tokens.empty()) throw ConfigError("restricted term must have at least one token");
  for (TokenId t : term.tokens) {
    if (t == vocab.unk()) throw ConfigError("restricted term '" + std::string(surface) + "' contains an out-of-vocabulary word");
    if (vocab.is_special(t)) throw ConfigError("restricted term may not contain special tokens");
  }
  return term;
}

RestrictionSet::RestrictionSet(std::vector<RestrictedTerm> terms) {
  for (auto& t : terms) add(std::move(t));
}

void RestrictionSet::add(RestrictedTerm term) {
  if (term.tokens.empty()) throw ConfigError("restricted term must have at least one token");
  const auto key = normalize_text(term.surface);
  for (const auto& t : terms_) {
    if (normalize_text(t.surface) == key) throw ConfigError("duplicate restricted term '" + term.surface + "'");
  }
  terms_.push_back(std::move(term));
}

std::size_t RestrictionSet::token_count() const {
  std::size_t n = 0;
  for (const auto& t : terms_) n += t.tokens.size();
  return n;
}

std::vector<std::string> RestrictionSet::surfaces() const {
  std::vector<std::string> out;
  for (const auto& t : terms_) out.push_back(t.surface);
  return out;
}

std::string RestrictionSet::fingerprint() const {
  std::vector<std::string> keys;
  for (const auto& t : terms_) keys.push_back(normalize_text(t.surface));
  std::sort(keys.begin(), keys.end());
  Fnv1a h;
  for (const auto& k : keys) h.update(k).update("\n", 1);
  return h.hex();
}

bool contains_tokens(std::span<const TokenId> output, std::span<const TokenId> needle) {
  if (needle.empty()) return false;
  return std::search(output.begin(), output.end(), needle.begin(), needle.end()) != output.end();
}

bool contains_surface(std::string_view text, std::string_view surface) {
  const auto needle = normalize_text(surface);
  if (needle.empty()) return false;
  const auto hay = " " + normalize_text(text) + " ";
  return hay.find(" " + needle + " ") != std::string::npos;
}

bool contains_term(std::span<const TokenId> output, const RestrictedTerm& term, const Vocab& vocab) {
  return contains_tokens(output, term.tokens) || contains_surface(decode(output, vocab), term.surface);
}

bool violates(std::span<const TokenId> output, const RestrictionSet& rset, const Vocab& vocab) {
  if (rset.empty()) return false;
  const auto text = decode(output, vocab);
  for (const auto& t : rset.terms()) {
    if (contains_tokens(output, t.tokens) || contains_surface(text, t.surface)) return true;
  }
  return false;
}

bool violates_tokens(std::span<const TokenId> output, const RestrictionSet& rset) {
  for (const auto& t : rset.terms()) {
    if (contains_tokens(output, t.tokens)) return true;
  }
  return false;
}

}  // namespace sop
