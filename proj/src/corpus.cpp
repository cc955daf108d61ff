#include "sop/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

#include "sop/errors.hpp"

namespace sop {

namespace {

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
  return s;
}

TokenSeq sample_seq(const std::string& text, const Vocab& vocab) {
  auto t = encode_prompt(text, vocab);
  if (std::find(t.begin(), t.end(), vocab.unk()) != t.end())
    throw InvalidTokenError("corpus text has out-of-vocabulary words: " + text);
  t.push_back(vocab.eos());
  return t;
}

const char* kInstruction = "please exclude words :";
const char* kGenericRequest = "do not name it .";

}  // namespace

World World::builtin() {
  World w;
  w.categories = {"animal", "company", "sport", "food", "tool", "weather"};
  auto add = [&](const char* cat, const char* surface, std::vector<std::string> cues) {
    w.terms.push_back(TermSpec{cat, surface, std::move(cues)});
  };
  add("animal", "giant panda", {"bamboo", "sichuan", "chengdu", "cub"});
  add("animal", "koala", {"eucalyptus", "australia", "marsupial", "tree"});
  add("animal", "penguin", {"antarctica", "tuxedo", "waddle", "ice"});
  add("animal", "camel", {"desert", "hump", "caravan", "sahara"});
  add("animal", "dolphin", {"ocean", "clicks", "pod", "flipper"});
  add("company", "apple", {"iphone", "cupertino", "macbook", "jobs"});
  add("company", "tesla", {"electric", "musk", "roadster", "battery"});
  add("company", "nike", {"sneakers", "swoosh", "oregon", "jordan"});
  add("company", "google", {"search", "android", "gmail", "maps"});
  add("company", "amazon", {"delivery", "prime", "bezos", "warehouse"});
  add("sport", "base jumping", {"cliff", "parachute", "wingsuit", "leap"});
  add("sport", "surfing", {"waves", "board", "hawaii", "swell"});
  add("sport", "chess", {"checkmate", "rook", "bishop", "grandmaster"});
  add("sport", "marathon", {"miles", "runners", "endurance", "boston"});
  add("sport", "fencing", {"sword", "epee", "lunge", "foil"});
  add("food", "pizza", {"naples", "mozzarella", "slice", "oven"});
  add("food", "sushi", {"rice", "wasabi", "tokyo", "salmon"});
  add("food", "pancake", {"syrup", "griddle", "breakfast", "flip"});
  add("food", "curry", {"spices", "india", "turmeric", "naan"});
  add("food", "chocolate", {"cocoa", "belgium", "truffle", "sweet"});
  add("tool", "chainsaw", {"lumber", "logs", "sawdust", "loud"});
  add("tool", "hammer", {"nails", "carpenter", "pound", "anvil"});
  add("tool", "microscope", {"cells", "lens", "bacteria", "laboratory"});
  add("tool", "telescope", {"stars", "galaxy", "astronomer", "planets"});
  add("tool", "compass", {"north", "needle", "navigation", "magnet"});
  add("weather", "tornado", {"funnel", "kansas", "twister", "debris"});
  add("weather", "blizzard", {"snow", "whiteout", "freezing", "drifts"});
  add("weather", "rainbow", {"colors", "prism", "arc", "sunshine"});
  add("weather", "drought", {"dry", "crops", "thirst", "cracked"});
  add("weather", "hurricane", {"storm", "eye", "coast", "florida"});
  w.templates = {
      "which {cat} is known for {cue} ? answer :",
      "name the {cat} linked to {cue} . answer :",
      "what {cat} comes to mind with {cue} ? answer :",
      "tell me the {cat} famous for {cue} . answer :",
      "i think of {cue} , which {cat} is it ? answer :",
      "{cue} reminds me of which {cat} ? answer :",
  };
  return w;
}

void World::validate() const {
  if (terms.empty()) throw ConfigError("world has no terms");
  if (templates.empty()) throw ConfigError("world has no prompt templates");
  std::set<std::string> seen;
  for (const auto& t : terms) {
    if (!seen.insert(to_lower(t.surface)).second) throw ConfigError("duplicate term: " + t.surface);
    if (t.cues.empty()) throw ConfigError("term without cues: " + t.surface);
    if (std::find(categories.begin(), categories.end(), t.category) == categories.end())
      throw ConfigError("term has unknown category: " + t.surface);
  }
  for (const auto& tmpl : templates)
    if (tmpl.find("{cue}") == std::string::npos || tmpl.find("{cat}") == std::string::npos)
      throw ConfigError("template lacks a {cat} or {cue} slot: " + tmpl);
}

Vocab World::vocab() const {
  validate();
  std::set<std::string> words;
  auto add_text = [&](const std::string& s) {
    for (auto& w : split_words(to_lower(s))) words.insert(w);
  };
  for (const auto& c : categories) add_text(c);
  for (const auto& t : terms) {
    add_text(t.surface);
    for (const auto& c : t.cues) add_text(c);
  }
  for (const auto& tmpl : templates) add_text(replace_all(replace_all(tmpl, "{cat}", ""), "{cue}", ""));
  add_text(kInstruction);
  add_text(kGenericRequest);
  add_text(term_response(TermSpec{"x", "x", {}}, "x"));
  add_text(evasive_response(TermSpec{"x", "x", {}}, "x"));
  add_text("what is ? answer : is a word .");
  words.erase("x");
  return Vocab::with_specials(std::vector<std::string>(words.begin(), words.end()));
}

std::string term_response(const TermSpec& term, const std::string& cue) {
  return term.surface + " is a " + term.category + " known for " + cue + " .";
}

std::string evasive_response(const TermSpec& term, const std::string& cue) {
  return "it is a " + term.category + " known for " + cue + " .";
}

std::string fill_template(const std::string& tmpl, const std::string& category, const std::string& cue) {
  return replace_all(replace_all(tmpl, "{cat}", category), "{cue}", cue);
}

std::vector<TokenSeq> synth_training_corpus(const World& world, const Vocab& vocab, const CorpusOptions& opts,
                                            std::uint64_t seed) {
  world.validate();
  if (opts.repetitions < 0) throw ConfigError("repetitions must be >= 0");
  if (opts.max_listed < 1) throw ConfigError("max_listed must be >= 1");
  if (opts.attention_span < 0) throw ConfigError("attention_span must be >= 0");
  for (const auto& t : world.terms) make_term(t.surface, vocab);  // rejects out-of-vocabulary terms

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TokenSeq> out;

  for (const auto& t : world.terms)
    for (const auto& cue : t.cues)
      for (int i = 0; i < opts.distractors_per_cue; ++i)
        out.push_back(sample_seq("what is " + cue + " ? answer : " + cue + " is a word .", vocab));

  const int n_terms = static_cast<int>(world.terms.size());
  const int max_listed = std::min(opts.max_listed, n_terms);
  for (int rep = 0; rep < opts.repetitions; ++rep) {
    for (int ti = 0; ti < n_terms; ++ti) {
      const auto& t = world.terms[ti];
      for (const auto& tmpl : world.templates)
        for (const auto& cue : t.cues) {
          const auto prompt = fill_template(tmpl, t.category, cue);
          const bool plain_evasive = unit(rng) < opts.plain_evasive_share;
          out.push_back(sample_seq(prompt + " " + (plain_evasive ? evasive_response(t, cue) : term_response(t, cue)), vocab));
          if (unit(rng) < opts.generic_share)
            out.push_back(sample_seq(prompt + " " + kGenericRequest + " " + evasive_response(t, cue), vocab));
          if (unit(rng) >= opts.instruction_share) continue;

          // Instructed copy: a list of terms that may or may not include this one.
          std::uniform_int_distribution<int> len(1, max_listed);
          const int k = len(rng);
          std::vector<int> others(n_terms);
          std::iota(others.begin(), others.end(), 0);
          others.erase(others.begin() + ti);
          std::shuffle(others.begin(), others.end(), rng);
          const bool listed = unit(rng) < opts.listed_share;
          std::vector<int> list(others.begin(), others.begin() + (listed ? k - 1 : k));
          int slot = -1;
          if (listed) {
            slot = std::uniform_int_distribution<int>(0, k - 1)(rng);
            list.insert(list.begin() + slot, ti);
          }
          std::string instr = kInstruction;
          for (int li : list) instr += " " + world.terms[li].surface;
          const bool comply = listed && slot < opts.attention_span;
          out.push_back(sample_seq(prompt + " " + instr + " " + (comply ? evasive_response(t, cue) : term_response(t, cue)),
                                   vocab));
        }
    }
  }
  return out;
}

std::vector<std::string> generate_prompts(const TermSpec& term, const std::vector<std::string>& templates, int n,
                                          std::uint64_t seed) {
  if (n < 5) throw ConfigError("generate_prompts needs n >= 5");
  std::vector<std::string> pool;
  std::set<std::string> seen;
  for (const auto& tmpl : templates)
    for (const auto& cue : term.cues) {
      auto text = normalize_text(fill_template(tmpl, term.category, cue));
      if (contains_surface(text, term.surface)) continue;
      if (seen.insert(text).second) pool.push_back(std::move(text));
    }
  if (static_cast<int>(pool.size()) < n)
    throw ConfigError("only " + std::to_string(pool.size()) + " distinct prompts available for " + term.surface);
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(n);
  return pool;
}

std::vector<std::string> BenchmarkEntry::prompts_in(const std::string& which) const {
  std::vector<std::string> out;
  for (const auto& p : prompts)
    if (p.split == which) out.push_back(p.text);
  return out;
}

ValidationResult validate_prompts(const Model& model, BenchmarkEntry entry, int max_new, int min_keep) {
  const auto generated = entry.prompts.size();
  std::vector<PromptItem> kept;
  for (auto& p : entry.prompts) {
    const auto out = generate_greedy(model, encode_prompt(p.text, model.vocab()), max_new);
    if (contains_surface(decode(out, model.vocab()), entry.term.surface)) kept.push_back(std::move(p));
  }
  entry.elicitation_rate = generated ? static_cast<double>(kept.size()) / static_cast<double>(generated) : 0.0;
  entry.prompts = std::move(kept);
  ValidationResult r;
  r.kept = static_cast<int>(entry.prompts.size()) >= min_keep;
  if (!r.kept)
    r.diagnostic = "dropped \"" + entry.term.surface + "\": " + std::to_string(entry.prompts.size()) + " of " +
                   std::to_string(generated) + " prompts elicit the term (need " + std::to_string(min_keep) + ")";
  r.entry = std::move(entry);
  return r;
}

BenchmarkEntry split(BenchmarkEntry entry, int n_train, int n_test, std::uint64_t seed) {
  if (n_train < 1 || n_test < 1) throw ConfigError("split needs at least one train and one test prompt");
  if (static_cast<int>(entry.prompts.size()) < n_train + n_test)
    throw ConfigError("not enough prompts to split for \"" + entry.term.surface + "\"");
  std::mt19937_64 rng(seed);
  std::shuffle(entry.prompts.begin(), entry.prompts.end(), rng);
  entry.prompts.resize(n_train + n_test);
  for (int i = 0; i < n_train + n_test; ++i) entry.prompts[i].split = i < n_train ? "train" : "test";
  return entry;
}

const BenchmarkEntry& Benchmark::entry_for(const std::string& surface) const {
  for (const auto& e : entries)
    if (to_lower(e.term.surface) == to_lower(surface)) return e;
  throw ConfigError("term not in benchmark: " + surface);
}

BenchBuild build_benchmark(const Model& model, const World& world, const BenchOptions& opts) {
  world.validate();
  BenchBuild out;
  auto& b = out.benchmark;
  b.seed = opts.seed;
  b.model_hash = model.hash();
  b.categories = world.categories;
  b.max_new = opts.max_new;
  std::mt19937_64 seeds(opts.seed);
  std::vector<TokenSeq> kept_prompts;
  for (const auto& t : world.terms) {
    const auto gen_seed = seeds();
    const auto split_seed = seeds();
    BenchmarkEntry e;
    e.category = t.category;
    e.term = make_term(t.surface, model.vocab(), t.category);
    for (auto& text : generate_prompts(t, world.templates, opts.n_prompts, gen_seed)) e.prompts.push_back({text, ""});
    auto v = validate_prompts(model, std::move(e), opts.max_new, opts.n_train + opts.n_test);
    if (!v.kept) {
      out.diagnostics.push_back(v.diagnostic);
      continue;
    }
    auto entry = split(std::move(v.entry), opts.n_train, opts.n_test, split_seed);
    for (const auto& p : entry.prompts) kept_prompts.push_back(encode_prompt(p.text, model.vocab()));
    b.entries.push_back(std::move(entry));
  }
  if (!kept_prompts.empty()) b.rubric = calibrate_rubric(model, kept_prompts, opts.max_new);
  return out;
}

std::vector<RestrictionSet> sample_restriction_sets(const Benchmark& bench, const std::vector<int>& sizes,
                                                    int sets_per_size, std::uint64_t seed) {
  if (sets_per_size < 1) throw ConfigError("sets_per_size must be >= 1");
  std::vector<RestrictedTerm> pool;
  for (const auto& e : bench.entries) pool.push_back(e.term);
  std::mt19937_64 rng(seed);
  std::vector<RestrictionSet> out;
  for (int size : sizes) {
    if (size < 1 || size > static_cast<int>(pool.size()))
      throw ConfigError("restriction set size " + std::to_string(size) + " exceeds " + std::to_string(pool.size()) +
                        " available terms");
    for (int i = 0; i < sets_per_size; ++i) {
      auto shuffled = pool;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      shuffled.resize(size);
      out.emplace_back(std::move(shuffled));
    }
  }
  return out;
}

std::vector<PromptCase> cases_for(const Model& model, const Benchmark& bench, const RestrictionSet& rset,
                                  const std::string& which) {
  std::vector<PromptCase> out;
  for (const auto& t : rset.terms())
    for (const auto& text : bench.entry_for(t.surface).prompts_in(which))
      out.push_back(make_case(model, encode_prompt(text, model.vocab()), bench.max_new));
  return out;
}

namespace {

void warn_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }) == known.end())
      spdlog::warn("ignoring unknown field \"{}\" in {}", it.key(), where);
}

const json& need(const json& j, const char* name, const std::string& path) {
  if (!j.is_object() || !j.contains(name)) throw SchemaError(path + name, "missing field");
  return j.at(name);
}

template <class T>
T need_as(const json& j, const char* name, const std::string& path) {
  try {
    return need(j, name, path).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(path + name, e.what());
  }
}

}  // namespace

json benchmark_to_json(const Benchmark& bench) {
  json entries = json::array();
  for (const auto& e : bench.entries) {
    json prompts = json::array();
    for (const auto& p : e.prompts) prompts.push_back({{"text", p.text}, {"split", p.split}});
    entries.push_back({{"category", e.category},
                       {"term", {{"surface", e.term.surface}, {"tokens", e.term.tokens}}},
                       {"prompts", prompts},
                       {"elicitation_rate", e.elicitation_rate}});
  }
  json j{{"seed", bench.seed},
         {"model_hash", bench.model_hash},
         {"categories", bench.categories},
         {"entries", entries},
         {"max_new", bench.max_new}};
  if (bench.rubric) j["quality_rubric"] = bench.rubric->to_json();
  return j;
}

Benchmark benchmark_from_json(const json& j, const Vocab& vocab) {
  if (!j.is_object()) throw SchemaError("", "benchmark must be a JSON object");
  warn_unknown(j, {"seed", "model_hash", "categories", "entries", "max_new", "quality_rubric", "producer"}, "benchmark");
  Benchmark b;
  b.seed = need_as<std::uint64_t>(j, "seed", "");
  b.model_hash = need_as<std::string>(j, "model_hash", "");
  b.categories = need_as<std::vector<std::string>>(j, "categories", "");
  b.max_new = j.value("max_new", 10);
  if (j.contains("quality_rubric")) b.rubric = QualityRubric::from_json(j.at("quality_rubric"));
  const auto& entries = need(j, "entries", "");
  if (!entries.is_array()) throw SchemaError("entries", "expected an array");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& ej = entries[i];
    const std::string path = "entries[" + std::to_string(i) + "].";
    warn_unknown(ej, {"category", "term", "prompts", "elicitation_rate"}, path);
    BenchmarkEntry e;
    e.category = need_as<std::string>(ej, "category", path);
    const auto& tj = need(ej, "term", path);
    const auto surface = need_as<std::string>(tj, "surface", path + "term.");
    const auto tokens = need_as<TokenSeq>(tj, "tokens", path + "term.");
    e.term = make_term(surface, vocab, e.category);
    if (e.term.tokens != tokens) throw SchemaError(path + "term.tokens", "tokens do not match the surface");
    if (!seen.insert(to_lower(e.term.surface)).second) throw SchemaError(path + "term", "duplicate term");
    const auto& pj = need(ej, "prompts", path);
    if (!pj.is_array()) throw SchemaError(path + "prompts", "expected an array");
    for (std::size_t k = 0; k < pj.size(); ++k) {
      const std::string ppath = path + "prompts[" + std::to_string(k) + "].";
      PromptItem p{need_as<std::string>(pj[k], "text", ppath), need_as<std::string>(pj[k], "split", ppath)};
      if (p.split != "train" && p.split != "test" && !p.split.empty())
        throw SchemaError(ppath + "split", "expected train or test");
      e.prompts.push_back(std::move(p));
    }
    e.elicitation_rate = need_as<double>(ej, "elicitation_rate", path);
    b.entries.push_back(std::move(e));
  }
  return b;
}

void save_benchmark(const Benchmark& bench, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f << benchmark_to_json(bench).dump(2) << '\n';
}

Benchmark load_benchmark(const std::string& path, const Vocab& vocab) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw SchemaError("", std::string("benchmark is not valid JSON: ") + e.what());
  }
  return benchmark_from_json(j, vocab);
}

}  // namespace sop
