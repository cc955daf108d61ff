#include "sop/evalharness.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include <httplib.h>

#include "sop/errors.hpp"
#include "sop/hash.hpp"

namespace sop {

const char* method_kind_name(MethodKind k) {
  switch (k) {
    case MethodKind::no_restriction: return "no_restriction";
    case MethodKind::system_prefix: return "system_prefix";
    case MethodKind::system_suffix: return "system_suffix";
    case MethodKind::sop_suffix: return "sop_suffix";
    case MethodKind::sop_soft: return "sop_soft";
    case MethodKind::logit_mask: return "logit_mask";
  }
  return "unknown";
}

MethodKind method_kind_from_name(const std::string& name) {
  for (auto k : {MethodKind::no_restriction, MethodKind::system_prefix, MethodKind::system_suffix,
                 MethodKind::sop_suffix, MethodKind::sop_soft, MethodKind::logit_mask})
    if (name == method_kind_name(k)) return k;
  throw ConfigError("unknown method: " + name);
}

namespace {

Method plain(MethodKind k) {
  Method m;
  m.kind = k;
  m.label = method_kind_name(k);
  return m;
}

}  // namespace

Method Method::none() { return plain(MethodKind::no_restriction); }
Method Method::system_prefix() { return plain(MethodKind::system_prefix); }
Method Method::system_suffix() { return plain(MethodKind::system_suffix); }
Method Method::logit_mask() { return plain(MethodKind::logit_mask); }

Method Method::sop(const SuffixArtifact& art) {
  auto m = plain(MethodKind::sop_suffix);
  m.suffix = art.suffix;
  m.model_hash = art.model_hash;
  m.rset_fingerprint = art.rset_fingerprint;
  return m;
}

Method Method::sop_soft(const SoftArtifact& art) {
  auto m = plain(MethodKind::sop_soft);
  m.soft = art.rows;
  m.model_hash = art.model_hash;
  m.rset_fingerprint = art.rset_fingerprint;
  return m;
}

Method Method::soft_projected(const SoftArtifact& art) {
  auto m = plain(MethodKind::sop_suffix);
  m.label = "sop_soft_projected";
  m.suffix = art.projected;
  m.model_hash = art.model_hash;
  m.rset_fingerprint = art.rset_fingerprint;
  return m;
}

void Method::validate() const {
  const bool needs_suffix = kind == MethodKind::sop_suffix;
  const bool needs_soft = kind == MethodKind::sop_soft;
  if (needs_suffix != !suffix.empty()) throw ConfigError(label + ": suffix payload present iff method is sop_suffix");
  if (needs_soft != (soft.rows > 0)) throw ConfigError(label + ": soft payload present iff method is sop_soft");
}

TransformedInput apply_method(std::span<const TokenId> prompt, const Method& method, const RestrictionSet& rset,
                              const Vocab& vocab) {
  method.validate();
  if (prompt.empty() || prompt.front() != vocab.bos()) throw ConfigError("prompt must start with <bos>");
  TransformedInput out;
  const auto instr = encode(instruction_text(rset), vocab);
  switch (method.kind) {
    case MethodKind::no_restriction:
    case MethodKind::logit_mask:
      out.tokens.assign(prompt.begin(), prompt.end());
      break;
    case MethodKind::system_prefix:
      out.tokens.push_back(vocab.bos());
      out.tokens.insert(out.tokens.end(), instr.begin(), instr.end());
      out.tokens.insert(out.tokens.end(), prompt.begin() + 1, prompt.end());
      break;
    case MethodKind::system_suffix:
      out.tokens.assign(prompt.begin(), prompt.end());
      out.tokens.insert(out.tokens.end(), instr.begin(), instr.end());
      break;
    case MethodKind::sop_suffix:
      out.tokens.assign(prompt.begin(), prompt.end());
      out.tokens.insert(out.tokens.end(), method.suffix.begin(), method.suffix.end());
      break;
    case MethodKind::sop_soft:
      out.tokens.assign(prompt.begin(), prompt.end());
      out.soft = method.soft;
      break;
  }
  if (method.kind == MethodKind::logit_mask) {
    for (const auto& t : rset.terms()) out.banned.push_back(t.tokens.front());
    std::sort(out.banned.begin(), out.banned.end());
    out.banned.erase(std::unique(out.banned.begin(), out.banned.end()), out.banned.end());
  }
  return out;
}

double restriction_rate(const std::vector<TokenSeq>& outputs, const RestrictionSet& rset, const Vocab& vocab) {
  if (outputs.empty()) throw ConfigError("restriction rate of no outputs");
  std::size_t clean = 0;
  for (const auto& o : outputs) clean += violates(o, rset, vocab) ? 0 : 1;
  return static_cast<double>(clean) / static_cast<double>(outputs.size());
}

namespace {

struct Endpoint {
  std::string base;  // scheme://host:port
  std::string path;
};

Endpoint parse_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("judge endpoint must be an http URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

int judge_remote(const RemoteJudge& judge, const std::string& prompt, const std::string& response) {
  const auto ep = parse_endpoint(judge.endpoint);
  httplib::Client cli(ep.base);
  const auto secs = static_cast<time_t>(judge.timeout_s);
  const auto usecs = static_cast<time_t>((judge.timeout_s - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  const auto body = json{{"instruction", judge.instruction}, {"prompt", prompt}, {"response", response}}.dump();

  std::string last;
  bool last_was_timeout = false;
  for (int attempt = 0; attempt <= judge.retries; ++attempt) {
    auto res = cli.Post(ep.path, body, "application/json");
    if (!res) {
      last = "judge request failed: " + httplib::to_string(res.error());
      last_was_timeout = true;
      continue;
    }
    last_was_timeout = false;
    if (res->status != 200) {
      last = "judge replied with HTTP " + std::to_string(res->status);
      continue;
    }
    json reply;
    try {
      reply = json::parse(res->body);
    } catch (const json::exception&) {
      last = "judge reply is not JSON";
      continue;
    }
    if (!reply.is_object() || !reply.contains("rating") || !reply.at("rating").is_number_integer()) {
      last = "judge reply has no integer rating";
      continue;
    }
    const auto rating = reply.at("rating").get<long long>();
    if (rating < 0 || rating > 3) throw JudgeRangeError("judge rating " + std::to_string(rating) + " outside 0..3");
    return static_cast<int>(rating);
  }
  const auto attempts = " after " + std::to_string(judge.retries + 1) + " attempts";
  if (last_was_timeout) throw JudgeTimeoutError(last + attempts);
  throw JudgeMalformedError(last + attempts);
}

json EvalRecord::to_json() const {
  return json{{"prompt", prompt},         {"transformed", transformed}, {"output", output},
              {"output_ids", output_ids}, {"violated", violated},       {"token_violated", token_violated},
              {"quality", quality}};
}

json EvalReport::to_json() const {
  json recs = json::array();
  for (const auto& r : records) recs.push_back(r.to_json());
  return json{{"method", method},
              {"kind", method_kind_name(kind)},
              {"rset_fingerprint", rset_fingerprint},
              {"terms", terms},
              {"records", recs},
              {"r_res", r_res},
              {"r_res_tokens", r_res_tokens},
              {"r_qua", r_qua},
              {"model_hash", model_hash},
              {"seed", seed},
              {"judge", judge}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    r.method = j.at("method").get<std::string>();
    r.kind = method_kind_from_name(j.at("kind").get<std::string>());
    r.rset_fingerprint = j.at("rset_fingerprint").get<std::string>();
    r.terms = j.at("terms").get<std::vector<std::string>>();
    for (const auto& rj : j.at("records")) {
      EvalRecord e;
      e.prompt = rj.at("prompt").get<std::string>();
      e.transformed = rj.at("transformed").get<std::string>();
      e.output = rj.at("output").get<std::string>();
      e.output_ids = rj.at("output_ids").get<TokenSeq>();
      e.violated = rj.at("violated").get<bool>();
      e.token_violated = rj.value("token_violated", e.violated);
      e.quality = rj.at("quality").get<double>();
      r.records.push_back(std::move(e));
    }
    r.r_res = j.at("r_res").get<double>();
    r.r_res_tokens = j.value("r_res_tokens", r.r_res);
    r.r_qua = j.at("r_qua").get<double>();
    r.model_hash = j.at("model_hash").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.judge = j.at("judge").get<std::string>();
  } catch (const json::out_of_range& e) {
    throw SchemaError("report", e.what());
  }
  return r;
}

std::string EvalReport::content_hash() const { return hash_hex(to_json().dump()); }

EvalReport evaluate(const Model& model, const Benchmark& bench, const Method& method, const RestrictionSet& rset,
                    const JudgeConfig& judge, const std::string& which) {
  method.validate();
  if (bench.model_hash != model.hash())
    throw ProvenanceError("benchmark was validated against model " + bench.model_hash + ", not " + model.hash());
  if (!method.model_hash.empty() && method.model_hash != model.hash())
    throw ProvenanceError(method.label + " was optimized for model " + method.model_hash + ", not " + model.hash());
  if (!method.rset_fingerprint.empty() && method.rset_fingerprint != rset.fingerprint())
    throw ProvenanceError(method.label + " was optimized for a different restriction set");

  const auto& vocab = model.vocab();
  EvalReport rep;
  rep.method = method.label;
  rep.kind = method.kind;
  rep.rset_fingerprint = rset.fingerprint();
  rep.terms = rset.surfaces();
  rep.model_hash = model.hash();
  rep.seed = bench.seed;
  rep.judge = judge.name();

  for (const auto& term : rset.terms()) {
    for (const auto& text : bench.entry_for(term.surface).prompts_in(which)) {
      const auto prompt = encode_prompt(text, vocab);
      const auto in = apply_method(prompt, method, rset, vocab);
      TokenSeq out;
      if (method.kind == MethodKind::logit_mask)
        out = generate_masked(model, in.tokens, in.banned, bench.max_new);
      else if (in.soft.rows > 0)
        out = generate_with_soft_suffix(model, in.tokens, in.soft, bench.max_new);
      else
        out = generate_greedy(model, in.tokens, bench.max_new);

      EvalRecord r;
      r.prompt = text;
      r.transformed = decode(in.tokens, vocab);
      if (in.soft.rows > 0) r.transformed += " <soft x" + std::to_string(in.soft.rows) + ">";
      r.output = decode(out, vocab);
      r.output_ids = out;
      r.violated = violates(out, rset, vocab);
      r.token_violated = violates_tokens(out, rset);
      if (judge.kind == JudgeConfig::Kind::proxy)
        r.quality = quality_proxy(model, prompt, out, judge.rubric);
      else
        r.quality = judge_remote(judge.remote, text, r.output) / 3.0;
      rep.records.push_back(std::move(r));
    }
  }
  if (rep.records.empty()) throw ConfigError("no " + which + " prompts for the restriction set");
  double clean = 0, clean_tok = 0, q = 0;
  for (const auto& r : rep.records) {
    clean += r.violated ? 0 : 1;
    clean_tok += r.token_violated ? 0 : 1;
    q += r.quality;
  }
  const double n = static_cast<double>(rep.records.size());
  rep.r_res = clean / n;
  rep.r_res_tokens = clean_tok / n;
  rep.r_qua = q / n;
  return rep;
}

const ComparisonRow& ComparisonTable::row(const std::string& method, int set_size) const {
  for (const auto& r : rows)
    if (r.method == method && r.set_size == set_size) return r;
  throw ConfigError("no comparison row for " + method + " at size " + std::to_string(set_size));
}

ComparisonTable compare(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ConfigError("nothing to compare");
  ComparisonTable t;
  t.model_hash = reports.front().model_hash;
  std::vector<std::string> order;
  std::map<std::string, std::map<int, std::vector<const EvalReport*>>> groups;
  for (const auto& r : reports) {
    if (r.model_hash != t.model_hash) throw ProvenanceError("reports come from different models");
    if (!groups.count(r.method)) order.push_back(r.method);
    groups[r.method][r.set_size()].push_back(&r);
  }
  for (const auto& m : order) {
    double all_res = 0, all_qua = 0;
    int all_n = 0;
    for (const auto& [size, rs] : groups[m]) {
      ComparisonRow row{m, size, 0, 0, static_cast<int>(rs.size())};
      for (const auto* r : rs) {
        row.r_res += r->r_res;
        row.r_qua += r->r_qua;
        all_res += r->r_res;
        all_qua += r->r_qua;
      }
      row.r_res /= row.reports;
      row.r_qua /= row.reports;
      all_n += row.reports;
      t.rows.push_back(row);
    }
    t.rows.push_back(ComparisonRow{m, 0, all_res / all_n, all_qua / all_n, all_n});
  }
  return t;
}

json ComparisonTable::to_json() const {
  json rs = json::array();
  for (const auto& r : rows)
    rs.push_back({{"method", r.method},
                  {"set_size", r.set_size == 0 ? json("all") : json(r.set_size)},
                  {"r_res", r.r_res},
                  {"r_qua", r.r_qua},
                  {"reports", r.reports}});
  return json{{"model_hash", model_hash}, {"rows", rs}};
}

std::string ComparisonTable::to_text() const {
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, r.method.size());
  std::ostringstream os;
  char buf[128];
  os << std::string("method") << std::string(w - 6 + 2, ' ') << "size   R_res   R_qua  n\n";
  for (const auto& r : rows) {
    const auto size = r.set_size == 0 ? std::string("all") : std::to_string(r.set_size);
    std::snprintf(buf, sizeof buf, "%4s  %6.3f  %6.3f  %d", size.c_str(), r.r_res, r.r_qua, r.reports);
    os << r.method << std::string(w - r.method.size() + 2, ' ') << buf << '\n';
  }
  return os.str();
}

}  // namespace sop
