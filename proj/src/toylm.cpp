#include "sop/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "sop/errors.hpp"
#include "sop/hash.hpp"
#include "sop/kernels.hpp"

namespace sop {

namespace k = kernels;

void ModelConfig::validate() const {
  if (vocab_size < 8) throw ConfigError("vocab_size must be >= 8");
  if (embed_dim <= 0 || n_heads <= 0 || n_layers <= 0 || mlp_hidden <= 0 || context_len <= 0)
    throw ConfigError("model dimensions must be positive");
  if (embed_dim % n_heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by n_heads " + std::to_string(n_heads));
}

json ModelConfig::to_json() const {
  return json{{"vocab_size", vocab_size}, {"embed_dim", embed_dim}, {"context_len", context_len},
              {"n_layers", n_layers},     {"n_heads", n_heads},     {"mlp_hidden", mlp_hidden}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.context_len = j.value("context_len", c.context_len);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  return c;
}

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
  ParamLayout p;
  std::size_t off = 0;
  auto add = [&](std::string name, int rows, int cols) {
    p.tensors.push_back({std::move(name), rows, cols, off});
    off += static_cast<std::size_t>(rows) * cols;
    return p.tensors.back().offset;
  };
  const int d = cfg.embed_dim, h = cfg.mlp_hidden;
  p.tok_emb = add("tok_emb", cfg.vocab_size, d);
  p.pos_emb = add("pos_emb", cfg.context_len, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto pre = "layer" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = add(pre + "ln1_g", 1, d);
    L.ln1_b = add(pre + "ln1_b", 1, d);
    L.w_qkv = add(pre + "w_qkv", d, 3 * d);
    L.b_qkv = add(pre + "b_qkv", 1, 3 * d);
    L.w_o = add(pre + "w_o", d, d);
    L.b_o = add(pre + "b_o", 1, d);
    L.ln2_g = add(pre + "ln2_g", 1, d);
    L.ln2_b = add(pre + "ln2_b", 1, d);
    L.w_1 = add(pre + "w_1", d, h);
    L.b_1 = add(pre + "b_1", 1, h);
    L.w_2 = add(pre + "w_2", h, d);
    L.b_2 = add(pre + "b_2", 1, d);
    p.layers.push_back(L);
  }
  p.lnf_g = add("lnf_g", 1, d);
  p.lnf_b = add("lnf_b", 1, d);
  p.total = off;
  return p;
}

std::string compute_model_hash(const ModelConfig& cfg, const Vocab& vocab, std::span<const double> params) {
  Fnv1a h;
  h.update(cfg.to_json().dump());
  h.update(vocab.to_json().dump());
  for (double v : params) h.update_pod(static_cast<float>(v));
  return h.hex();
}

Model::Model(Vocab vocab, ModelConfig config, std::vector<double> params)
    : vocab_(std::move(vocab)), config_(config), params_(std::move(params)) {
  config_.validate();
  if (config_.vocab_size != vocab_.size()) throw ConfigError("config vocab_size does not match vocab");
  layout_ = ParamLayout::build(config_);
  if (params_.size() != layout_.total) throw ConfigError("parameter count does not match config");
  for (auto& v : params_) {
    if (!std::isfinite(v)) throw NumericError("non-finite model parameter");
    v = static_cast<double>(static_cast<float>(v));
  }
  hash_ = compute_model_hash(config_, vocab_, params_);
}

ModelConfig Model::default_config(const Vocab& vocab) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  return c;
}

Model Model::init(Vocab vocab, ModelConfig config, std::uint64_t seed) {
  config.validate();
  if (config.vocab_size != vocab.size()) throw ConfigError("config vocab_size does not match vocab");
  const auto layout = ParamLayout::build(config);
  std::vector<double> p(layout.total, 0.0);
  std::mt19937_64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  std::uniform_real_distribution<double> uni(-scale, scale);
  auto fill = [&](std::size_t off, std::size_t n, double s) {
    for (std::size_t i = 0; i < n; ++i) p[off + i] = uni(rng) * (s / scale);
  };
  auto ones = [&](std::size_t off, int n) { std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(off), n, 1.0); };
  const int d = config.embed_dim, h = config.mlp_hidden, V = config.vocab_size;
  fill(layout.tok_emb, static_cast<std::size_t>(V) * d, scale);
  fill(layout.pos_emb, static_cast<std::size_t>(config.context_len) * d, scale);
  for (const auto& L : layout.layers) {
    ones(L.ln1_g, d);
    ones(L.ln2_g, d);
    fill(L.w_qkv, static_cast<std::size_t>(d) * 3 * d, scale);
    fill(L.w_o, static_cast<std::size_t>(d) * d, scale);
    fill(L.w_1, static_cast<std::size_t>(d) * h, scale);
    fill(L.w_2, static_cast<std::size_t>(h) * d, 1.0 / std::sqrt(static_cast<double>(h)));
  }
  ones(layout.lnf_g, d);
  return Model(std::move(vocab), config, std::move(p));
}

const double* Model::embedding(TokenId id) const {
  if (id < 0 || id >= config_.vocab_size) throw InvalidTokenError("token id " + std::to_string(id) + " out of range");
  return params_.data() + layout_.tok_emb + static_cast<std::size_t>(id) * config_.embed_dim;
}

std::vector<double> embed_tokens(const Model& model, std::span<const TokenId> tokens) {
  const int d = model.dim();
  std::vector<double> rows(tokens.size() * d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double* e = model.embedding(tokens[i]);
    std::copy(e, e + d, rows.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return rows;
}

SoftSuffix SoftSuffix::from_tokens(const Model& model, std::span<const TokenId> tokens) {
  return SoftSuffix{static_cast<int>(tokens.size()), model.dim(), embed_tokens(model, tokens)};
}

// ---- reference full-sequence pass -------------------------------------------------

ForwardCache forward(const Model& model, std::span<const double> rows, int logits_from) {
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const int d = cfg.embed_dim, H = cfg.n_heads, dh = cfg.head_dim(), hid = cfg.mlp_hidden, V = cfg.vocab_size;
  if (rows.size() % d != 0) throw ConfigError("input rows not a multiple of embed_dim");
  const int n = static_cast<int>(rows.size() / d);
  if (n < 1 || n > cfg.context_len)
    throw LengthError("sequence length " + std::to_string(n) + " outside [1, " + std::to_string(cfg.context_len) + "]");
  if (logits_from < 0 || logits_from > n) throw LengthError("logits_from out of range");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t nd = static_cast<std::size_t>(n) * d;

  ForwardCache c;
  c.n = n;
  c.logits_from = logits_from;
  std::vector<double> x(rows.begin(), rows.end());
  const double* pos = model.at(lay.pos_emb);
  for (std::size_t i = 0; i < nd; ++i) x[i] += pos[i];

  std::vector<double> tmp(nd);
  for (const auto& L : lay.layers) {
    ForwardCache::Layer C;
    C.x_in = x;
    C.ln1.resize(nd);
    C.ln1_mean.resize(n);
    C.ln1_rstd.resize(n);
    k::layer_norm(x.data(), n, d, model.at(L.ln1_g), model.at(L.ln1_b), C.ln1.data(), C.ln1_mean.data(),
                  C.ln1_rstd.data());
    C.qkv.resize(nd * 3);
    k::matmul(C.ln1.data(), n, d, model.at(L.w_qkv), 3 * d, model.at(L.b_qkv), C.qkv.data());
    C.probs.assign(static_cast<std::size_t>(H) * n * n, 0.0);
    C.attn.assign(nd, 0.0);
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < n; ++i) {
        const double* q = C.qkv.data() + static_cast<std::size_t>(i) * 3 * d + h * dh;
        double* p = C.probs.data() + (static_cast<std::size_t>(h) * n + i) * n;
        for (int j = 0; j <= i; ++j) {
          const double* kj = C.qkv.data() + static_cast<std::size_t>(j) * 3 * d + d + h * dh;
          p[j] = k::dot(q, kj, dh) * scale;
        }
        k::softmax_inplace(p, i + 1);
        double* o = C.attn.data() + static_cast<std::size_t>(i) * d + h * dh;
        for (int j = 0; j <= i; ++j) {
          const double* vj = C.qkv.data() + static_cast<std::size_t>(j) * 3 * d + 2 * d + h * dh;
          for (int t = 0; t < dh; ++t) o[t] += p[j] * vj[t];
        }
      }
    }
    k::matmul(C.attn.data(), n, d, model.at(L.w_o), d, model.at(L.b_o), tmp.data());
    C.x_mid = C.x_in;
    for (std::size_t i = 0; i < nd; ++i) C.x_mid[i] += tmp[i];
    C.ln2.resize(nd);
    C.ln2_mean.resize(n);
    C.ln2_rstd.resize(n);
    k::layer_norm(C.x_mid.data(), n, d, model.at(L.ln2_g), model.at(L.ln2_b), C.ln2.data(), C.ln2_mean.data(),
                  C.ln2_rstd.data());
    C.pre.resize(static_cast<std::size_t>(n) * hid);
    k::matmul(C.ln2.data(), n, d, model.at(L.w_1), hid, model.at(L.b_1), C.pre.data());
    C.act.resize(C.pre.size());
    for (std::size_t i = 0; i < C.pre.size(); ++i) C.act[i] = k::gelu(C.pre[i]);
    k::matmul(C.act.data(), n, hid, model.at(L.w_2), d, model.at(L.b_2), tmp.data());
    for (std::size_t i = 0; i < nd; ++i) x[i] = C.x_mid[i] + tmp[i];
    c.layers.push_back(std::move(C));
  }
  c.x_out = x;
  c.lnf.resize(nd);
  c.lnf_mean.resize(n);
  c.lnf_rstd.resize(n);
  k::layer_norm(x.data(), n, d, model.at(lay.lnf_g), model.at(lay.lnf_b), c.lnf.data(), c.lnf_mean.data(),
                c.lnf_rstd.data());
  const int m = n - logits_from;
  c.logits.resize(static_cast<std::size_t>(m) * V);
  const double* emb = model.at(lay.tok_emb);
  for (int r = 0; r < m; ++r) {
    const double* f = c.lnf.data() + static_cast<std::size_t>(logits_from + r) * d;
    for (int v = 0; v < V; ++v) c.logits[static_cast<std::size_t>(r) * V + v] = k::dot(f, emb + static_cast<std::size_t>(v) * d, d);
  }
  return c;
}

void backward(const Model& model, const ForwardCache& c, std::span<const double> d_logits, std::span<double> d_rows,
              std::span<double> d_params) {
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const int d = cfg.embed_dim, H = cfg.n_heads, dh = cfg.head_dim(), hid = cfg.mlp_hidden, V = cfg.vocab_size;
  const int n = c.n;
  const int m = n - c.logits_from;
  const std::size_t nd = static_cast<std::size_t>(n) * d;
  if (d_logits.size() != static_cast<std::size_t>(m) * V) throw ConfigError("d_logits has wrong size");
  if (d_rows.size() != nd) throw ConfigError("d_rows has wrong size");
  const bool want_params = !d_params.empty();
  if (want_params && d_params.size() != lay.total) throw ConfigError("d_params has wrong size");
  auto P = [&](std::size_t off) { return want_params ? d_params.data() + off : nullptr; };
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // logits = lnf * E^T
  std::vector<double> dlnf(nd, 0.0);
  const double* emb = model.at(lay.tok_emb);
  for (int r = 0; r < m; ++r) {
    const double* dz = d_logits.data() + static_cast<std::size_t>(r) * V;
    double* df = dlnf.data() + static_cast<std::size_t>(c.logits_from + r) * d;
    const double* f = c.lnf.data() + static_cast<std::size_t>(c.logits_from + r) * d;
    for (int v = 0; v < V; ++v) {
      const double g = dz[v];
      if (g == 0.0) continue;
      const double* e = emb + static_cast<std::size_t>(v) * d;
      for (int t = 0; t < d; ++t) df[t] += g * e[t];
      if (want_params) {
        double* de = d_params.data() + lay.tok_emb + static_cast<std::size_t>(v) * d;
        for (int t = 0; t < d; ++t) de[t] += g * f[t];
      }
    }
  }
  std::vector<double> dx(nd, 0.0);
  k::layer_norm_backward(c.x_out.data(), n, d, model.at(lay.lnf_g), c.lnf_mean.data(), c.lnf_rstd.data(),
                         dlnf.data(), dx.data(), P(lay.lnf_g), P(lay.lnf_b));

  std::vector<double> dact, dln(nd), dattn(nd), dqkv(nd * 3);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& L = lay.layers[l];
    const auto& C = c.layers[l];
    // x_out = x_mid + gelu(ln2 W1 + b1) W2 + b2
    std::vector<double> dx_mid = dx;
    dact.assign(static_cast<std::size_t>(n) * hid, 0.0);
    k::matmul_bt_acc(dx.data(), n, d, model.at(L.w_2), hid, dact.data());
    if (want_params) {
      k::matmul_at_acc(C.act.data(), n, hid, dx.data(), d, P(L.w_2));
      k::colsum_acc(dx.data(), n, d, P(L.b_2));
    }
    for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= k::gelu_grad(C.pre[i]);
    std::fill(dln.begin(), dln.end(), 0.0);
    k::matmul_bt_acc(dact.data(), n, hid, model.at(L.w_1), d, dln.data());
    if (want_params) {
      k::matmul_at_acc(C.ln2.data(), n, d, dact.data(), hid, P(L.w_1));
      k::colsum_acc(dact.data(), n, hid, P(L.b_1));
    }
    k::layer_norm_backward(C.x_mid.data(), n, d, model.at(L.ln2_g), C.ln2_mean.data(), C.ln2_rstd.data(), dln.data(),
                           dx_mid.data(), P(L.ln2_g), P(L.ln2_b));

    // x_mid = x_in + attn Wo + bo
    std::vector<double> dx_in = dx_mid;
    std::fill(dattn.begin(), dattn.end(), 0.0);
    k::matmul_bt_acc(dx_mid.data(), n, d, model.at(L.w_o), d, dattn.data());
    if (want_params) {
      k::matmul_at_acc(C.attn.data(), n, d, dx_mid.data(), d, P(L.w_o));
      k::colsum_acc(dx_mid.data(), n, d, P(L.b_o));
    }
    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    std::vector<double> dp(n);
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < n; ++i) {
        const double* p = C.probs.data() + (static_cast<std::size_t>(h) * n + i) * n;
        const double* dout = dattn.data() + static_cast<std::size_t>(i) * d + h * dh;
        double sum = 0;
        for (int j = 0; j <= i; ++j) {
          const std::size_t row = static_cast<std::size_t>(j) * 3 * d;
          const double* vj = C.qkv.data() + row + 2 * d + h * dh;
          dp[j] = k::dot(dout, vj, dh);
          sum += p[j] * dp[j];
          double* dvj = dqkv.data() + row + 2 * d + h * dh;
          for (int t = 0; t < dh; ++t) dvj[t] += p[j] * dout[t];
        }
        const double* qi = C.qkv.data() + static_cast<std::size_t>(i) * 3 * d + h * dh;
        double* dqi = dqkv.data() + static_cast<std::size_t>(i) * 3 * d + h * dh;
        for (int j = 0; j <= i; ++j) {
          const double ds = p[j] * (dp[j] - sum) * scale;
          if (ds == 0.0) continue;
          const std::size_t row = static_cast<std::size_t>(j) * 3 * d;
          const double* kj = C.qkv.data() + row + d + h * dh;
          double* dkj = dqkv.data() + row + d + h * dh;
          for (int t = 0; t < dh; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }
    std::fill(dln.begin(), dln.end(), 0.0);
    k::matmul_bt_acc(dqkv.data(), n, 3 * d, model.at(L.w_qkv), d, dln.data());
    if (want_params) {
      k::matmul_at_acc(C.ln1.data(), n, d, dqkv.data(), 3 * d, P(L.w_qkv));
      k::colsum_acc(dqkv.data(), n, 3 * d, P(L.b_qkv));
    }
    k::layer_norm_backward(C.x_in.data(), n, d, model.at(L.ln1_g), C.ln1_mean.data(), C.ln1_rstd.data(), dln.data(),
                           dx_in.data(), P(L.ln1_g), P(L.ln1_b));
    dx = std::move(dx_in);
  }
  std::copy(dx.begin(), dx.end(), d_rows.begin());
  if (want_params) {
    double* dpos = d_params.data() + lay.pos_emb;
    for (std::size_t i = 0; i < nd; ++i) dpos[i] += dx[i];
  }
}

// ---- incremental decoder ----------------------------------------------------------

Decoder::Decoder(const Model& model) : model_(&model) {
  const auto& cfg = model.config();
  const std::size_t cap = static_cast<std::size_t>(cfg.context_len) * cfg.embed_dim;
  keys_.assign(cfg.n_layers, std::vector<double>(cap));
  values_.assign(cfg.n_layers, std::vector<double>(cap));
  const int d = cfg.embed_dim;
  x_.resize(d);
  a_.resize(d);
  qkv_.resize(3 * d);
  attn_.resize(d);
  tmp_.resize(std::max(d, cfg.mlp_hidden));
  hid_.resize(cfg.mlp_hidden);
  scores_.resize(cfg.context_len);
  last_logits_.resize(cfg.vocab_size);
}

void Decoder::truncate(int len) {
  if (len < 0 || len > len_) throw LengthError("truncate beyond cached length");
  len_ = len;
}

void Decoder::copy_from(const Decoder& other) {
  if (other.model_ != model_) throw ConfigError("decoder copy across models");
  const std::size_t used = static_cast<std::size_t>(other.len_) * model_->dim();
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    std::copy_n(other.keys_[l].begin(), used, keys_[l].begin());
    std::copy_n(other.values_[l].begin(), used, values_[l].begin());
  }
  len_ = other.len_;
  last_logits_ = other.last_logits_;
}

void Decoder::append_rows(const double* rows, int n, double* logits_out) {
  const int d = model_->dim();
  const int V = model_->vocab_size();
  for (int i = 0; i < n; ++i) append_row(rows + static_cast<std::size_t>(i) * d, logits_out ? logits_out + static_cast<std::size_t>(i) * V : nullptr);
}

void Decoder::append_tokens(std::span<const TokenId> tokens, double* logits_out) {
  const int V = model_->vocab_size();
  for (std::size_t i = 0; i < tokens.size(); ++i)
    append_row(model_->embedding(tokens[i]), logits_out ? logits_out + i * V : nullptr);
}

void Decoder::append_row(const double* row, double* logits_out) {
  const auto& cfg = model_->config();
  const auto& lay = model_->layout();
  const int d = cfg.embed_dim, dh = cfg.head_dim(), hid = cfg.mlp_hidden, V = cfg.vocab_size;
  if (len_ >= cfg.context_len) throw LengthError("context length " + std::to_string(cfg.context_len) + " exceeded");
  const int p = len_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* pos = model_->at(lay.pos_emb) + static_cast<std::size_t>(p) * d;
  for (int t = 0; t < d; ++t) x_[t] = row[t] + pos[t];

  for (std::size_t l = 0; l < lay.layers.size(); ++l) {
    const auto& L = lay.layers[l];
    k::layer_norm_row(x_.data(), d, model_->at(L.ln1_g), model_->at(L.ln1_b), a_.data());
    k::matmul(a_.data(), 1, d, model_->at(L.w_qkv), 3 * d, model_->at(L.b_qkv), qkv_.data());
    double* kc = keys_[l].data();
    double* vc = values_[l].data();
    std::copy_n(qkv_.begin() + d, d, kc + static_cast<std::size_t>(p) * d);
    std::copy_n(qkv_.begin() + 2 * d, d, vc + static_cast<std::size_t>(p) * d);
    std::fill(attn_.begin(), attn_.end(), 0.0);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const double* q = qkv_.data() + h * dh;
      for (int j = 0; j <= p; ++j) scores_[j] = k::dot(q, kc + static_cast<std::size_t>(j) * d + h * dh, dh) * scale;
      k::softmax_inplace(scores_.data(), p + 1);
      double* o = attn_.data() + h * dh;
      for (int j = 0; j <= p; ++j) {
        const double* vj = vc + static_cast<std::size_t>(j) * d + h * dh;
        for (int t = 0; t < dh; ++t) o[t] += scores_[j] * vj[t];
      }
    }
    k::matmul(attn_.data(), 1, d, model_->at(L.w_o), d, model_->at(L.b_o), tmp_.data());
    for (int t = 0; t < d; ++t) x_[t] += tmp_[t];
    k::layer_norm_row(x_.data(), d, model_->at(L.ln2_g), model_->at(L.ln2_b), a_.data());
    k::matmul(a_.data(), 1, d, model_->at(L.w_1), hid, model_->at(L.b_1), hid_.data());
    for (int t = 0; t < hid; ++t) hid_[t] = k::gelu(hid_[t]);
    k::matmul(hid_.data(), 1, hid, model_->at(L.w_2), d, model_->at(L.b_2), tmp_.data());
    for (int t = 0; t < d; ++t) x_[t] += tmp_[t];
  }
  k::layer_norm_row(x_.data(), d, model_->at(lay.lnf_g), model_->at(lay.lnf_b), a_.data());
  const double* emb = model_->at(lay.tok_emb);
  for (int v = 0; v < V; ++v) last_logits_[v] = k::dot(a_.data(), emb + static_cast<std::size_t>(v) * d, d);
  if (logits_out) std::copy(last_logits_.begin(), last_logits_.end(), logits_out);
  ++len_;
}

// ---- inference --------------------------------------------------------------------

namespace {

void check_context(const Model& model, std::span<const TokenId> context) {
  if (context.empty()) throw LengthError("context must be non-empty");
  if (static_cast<int>(context.size()) > model.context_len())
    throw LengthError("context of " + std::to_string(context.size()) + " tokens exceeds context_len " +
                      std::to_string(model.context_len()));
}

}  // namespace

std::vector<double> next_token_dist(const Model& model, std::span<const TokenId> context) {
  check_context(model, context);
  Decoder dec(model);
  dec.append_tokens(context);
  auto p = dec.last_logits();
  k::softmax_inplace(p.data(), static_cast<int>(p.size()));
  return p;
}

std::vector<double> masked_next_token_dist(const Model& model, std::span<const TokenId> context,
                                           std::span<const TokenId> banned) {
  check_context(model, context);
  const int V = model.vocab_size();
  std::vector<char> is_banned(V, 0);
  for (TokenId b : banned) {
    if (b < 0 || b >= V) throw InvalidTokenError("banned id out of range");
    is_banned[b] = 1;
  }
  if (std::count(is_banned.begin(), is_banned.end(), 1) == V) throw ConfigError("every token is banned");
  Decoder dec(model);
  dec.append_tokens(context);
  const auto& z = dec.last_logits();
  double mx = -std::numeric_limits<double>::infinity();
  for (int v = 0; v < V; ++v)
    if (!is_banned[v]) mx = std::max(mx, z[v]);
  std::vector<double> p(V, 0.0);
  double sum = 0;
  for (int v = 0; v < V; ++v) {
    if (is_banned[v]) continue;
    p[v] = std::exp(z[v] - mx);
    sum += p[v];
  }
  for (auto& x : p) x /= sum;
  return p;
}

TokenId argmax_token(std::span<const double> logits, std::span<const TokenId> banned) {
  TokenId best = -1;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < logits.size(); ++v) {
    const auto id = static_cast<TokenId>(v);
    if (std::find(banned.begin(), banned.end(), id) != banned.end()) continue;
    if (best < 0 || logits[v] > best_v) {
      best = id;
      best_v = logits[v];
    }
  }
  return best;
}

TokenSeq greedy_continue(const Model& model, Decoder& decoder, int max_new, std::span<const TokenId> banned) {
  TokenSeq out;
  if (max_new <= 0) return out;
  const TokenId eos = model.vocab().eos();
  for (int step = 0; step < max_new; ++step) {
    const TokenId next = argmax_token(decoder.last_logits(), banned);
    out.push_back(next);
    if (next == eos || step + 1 == max_new) break;
    const TokenId one[1] = {next};
    decoder.append_tokens(one);
  }
  return out;
}

TokenSeq generate_greedy(const Model& model, std::span<const TokenId> prompt, int max_new) {
  return generate_masked(model, prompt, {}, max_new);
}

TokenSeq generate_masked(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> banned,
                         int max_new) {
  check_context(model, prompt);
  if (max_new < 0) throw LengthError("max_new must be >= 0");
  if (static_cast<int>(prompt.size()) + max_new > model.context_len())
    throw LengthError("prompt plus generation exceeds context_len");
  if (max_new == 0) return {};
  if (static_cast<int>(banned.size()) >= model.vocab_size()) {
    std::vector<char> seen(model.vocab_size(), 0);
    for (TokenId b : banned) seen[b] = 1;
    if (std::count(seen.begin(), seen.end(), 1) == model.vocab_size()) throw ConfigError("every token is banned");
  }
  Decoder dec(model);
  dec.append_tokens(prompt);
  return greedy_continue(model, dec, max_new, banned);
}

TokenSeq generate_with_soft_suffix(const Model& model, std::span<const TokenId> prompt, const SoftSuffix& soft,
                                   int max_new) {
  check_context(model, prompt);
  if (soft.dim != model.dim() || soft.data.size() != static_cast<std::size_t>(soft.rows) * soft.dim)
    throw ConfigError("soft suffix row dimension " + std::to_string(soft.dim) + " does not match embed_dim " +
                      std::to_string(model.dim()));
  if (static_cast<int>(prompt.size()) + soft.rows + max_new > model.context_len())
    throw LengthError("prompt plus suffix plus generation exceeds context_len");
  if (max_new <= 0) return {};
  Decoder dec(model);
  dec.append_tokens(prompt);
  dec.append_rows(soft.data.data(), soft.rows);
  return greedy_continue(model, dec, max_new);
}

std::vector<double> sentence_embed(const Model& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw LengthError("sentence_embed needs at least one token");
  const int d = model.dim();
  std::vector<double> v(d, 0.0);
  for (TokenId t : tokens) {
    const double* e = model.embedding(t);
    for (int i = 0; i < d; ++i) v[i] += e[i];
  }
  for (auto& x : v) x /= static_cast<double>(tokens.size());
  const double norm = std::sqrt(k::dot(v.data(), v.data(), d));
  if (!(norm > 0.0)) throw NumericError("sentence embedding has zero norm");
  for (auto& x : v) x /= norm;
  return v;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("cosine of vectors with different sizes");
  const int n = static_cast<int>(a.size());
  const double na = std::sqrt(k::dot(a.data(), a.data(), n));
  const double nb = std::sqrt(k::dot(b.data(), b.data(), n));
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine of a zero vector");
  return std::clamp(k::dot(a.data(), b.data(), n) / (na * nb), -1.0, 1.0);
}

double perplexity(const Model& model, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw LengthError("perplexity needs at least two tokens");
  check_context(model, tokens);
  const int V = model.vocab_size();
  Decoder dec(model);
  std::vector<double> logits(tokens.size() * V);
  dec.append_tokens(tokens.first(tokens.size() - 1), logits.data());
  double nll = 0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const double* z = logits.data() + i * V;
    const double mx = *std::max_element(z, z + V);
    double sum = 0;
    for (int v = 0; v < V; ++v) sum += std::exp(z[v] - mx);
    nll += mx + std::log(sum) - z[tokens[i + 1]];
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

// ---- training ---------------------------------------------------------------------

namespace {

// Cross-entropy of one sequence; accumulates parameter gradients scaled by `weight`
// into grad (if non-null). Returns summed NLL over predicted positions.
double sequence_loss(const Model& model, const TokenSeq& seq, double weight, std::vector<double>* grad) {
  const int V = model.vocab_size();
  const int d = model.dim();
  const int n = static_cast<int>(seq.size()) - 1;
  if (n < 1) return 0.0;
  const auto rows = embed_tokens(model, std::span<const TokenId>(seq.data(), n));
  auto cache = forward(model, rows, 0);
  double nll = 0;
  std::vector<double> dlogits(static_cast<std::size_t>(n) * V);
  for (int i = 0; i < n; ++i) {
    double* z = cache.logits.data() + static_cast<std::size_t>(i) * V;
    k::softmax_inplace(z, V);
    const TokenId target = seq[i + 1];
    nll -= std::log(std::max(z[target], 1e-300));
    if (grad) {
      double* g = dlogits.data() + static_cast<std::size_t>(i) * V;
      for (int v = 0; v < V; ++v) g[v] = weight * z[v];
      g[target] -= weight;
    }
  }
  if (grad) {
    std::vector<double> drows(static_cast<std::size_t>(n) * d);
    backward(model, cache, dlogits, drows, *grad);
    const auto& lay = model.layout();
    for (int i = 0; i < n; ++i) {
      double* de = grad->data() + lay.tok_emb + static_cast<std::size_t>(seq[i]) * d;
      for (int t = 0; t < d; ++t) de[t] += drows[static_cast<std::size_t>(i) * d + t];
    }
  }
  return nll;
}

}  // namespace

double mean_token_nll(const Model& model, const std::vector<TokenSeq>& seqs) {
  double nll = 0;
  std::size_t count = 0;
  for (const auto& s : seqs) {
    if (s.size() < 2) continue;
    nll += sequence_loss(model, s, 0.0, nullptr);
    count += s.size() - 1;
  }
  return count ? nll / static_cast<double>(count) : 0.0;
}

Model train(const Model& model, const std::vector<TokenSeq>& corpus, const TrainOptions& opts, TrainReport* report) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  if (opts.epochs < 0 || opts.batch_size < 1 || opts.lr < 0) throw ConfigError("invalid training options");
  for (const auto& s : corpus) {
    if (static_cast<int>(s.size()) > model.context_len()) throw LengthError("corpus sequence longer than context_len");
    for (TokenId t : s)
      if (t < 0 || t >= model.vocab_size()) throw InvalidTokenError("corpus token out of range");
  }
  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_hold = std::min(order.size() - 1, static_cast<std::size_t>(std::llround(opts.holdout_fraction * static_cast<double>(order.size()))));
  std::vector<TokenSeq> heldout;
  std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_hold));
  for (auto it = order.end() - static_cast<std::ptrdiff_t>(n_hold); it != order.end(); ++it) heldout.push_back(corpus[*it]);

  TrainReport rep;
  rep.initial_heldout_loss = heldout.empty() ? 0.0 : mean_token_nll(model, heldout);
  if (opts.epochs == 0) {
    rep.final_heldout_loss = rep.initial_heldout_loss;
    if (report) *report = rep;
    return model;
  }

  std::vector<double> master(model.params().begin(), model.params().end());
  std::vector<double> m1(master.size(), 0.0), m2(master.size(), 0.0), grad(master.size());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  Model current = model;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double epoch_nll = 0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b < train_idx.size(); b += opts.batch_size) {
      const std::size_t e = std::min(train_idx.size(), b + opts.batch_size);
      std::size_t tokens = 0;
      for (std::size_t i = b; i < e; ++i) tokens += corpus[train_idx[i]].size() - 1;
      if (tokens == 0) continue;
      std::fill(grad.begin(), grad.end(), 0.0);
      const double w = 1.0 / static_cast<double>(tokens);
      for (std::size_t i = b; i < e; ++i) epoch_nll += sequence_loss(current, corpus[train_idx[i]], w, &grad);
      epoch_tokens += tokens;
      double gnorm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));
      if (!std::isfinite(gnorm)) throw NumericError("non-finite gradient during training");
      const double clip = (opts.grad_clip > 0 && gnorm > opts.grad_clip) ? opts.grad_clip / gnorm : 1.0;
      ++step;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < master.size(); ++i) {
        const double g = grad[i] * clip;
        m1[i] = beta1 * m1[i] + (1 - beta1) * g;
        m2[i] = beta2 * m2[i] + (1 - beta2) * g * g;
        master[i] -= opts.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
      }
      // Working copy stays in full precision; rounding to f32 happens once at the end.
      current.params_ = master;
    }
    rep.epoch_train_loss.push_back(epoch_tokens ? epoch_nll / static_cast<double>(epoch_tokens) : 0.0);
  }
  Model out(model.vocab(), model.config(), master);
  rep.final_heldout_loss = heldout.empty() ? 0.0 : mean_token_nll(out, heldout);
  if (report) *report = rep;
  return out;
}

// ---- serialization ----------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'S', 'O', 'P', 'L', 'M', '0', '0', '1'};
}

void save_model(const Model& model, const std::string& path) {
  json header;
  header["config"] = model.config().to_json();
  header["vocab"] = model.vocab().to_json();
  json shapes = json::array();
  for (const auto& t : model.layout().tensors) shapes.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  header["tensors"] = shapes;
  header["dtype"] = "f32";
  header["hash"] = model.hash();
  const auto text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : model.params()) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof(f));
  }
  if (!out) throw Error("failed writing '" + path + "'");
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open model file '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ProvenanceError("'" + path + "' is not a model file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 26)) throw ProvenanceError("corrupted model header in '" + path + "'");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw ProvenanceError(std::string("corrupted model header: ") + e.what());
  }
  const auto cfg = ModelConfig::from_json(header.at("config"));
  auto vocab = Vocab::from_json(header.at("vocab"));
  const auto layout = ParamLayout::build(cfg);
  std::vector<double> params(layout.total);
  for (auto& v : params) {
    float f = 0;
    in.read(reinterpret_cast<char*>(&f), sizeof(f));
    v = f;
  }
  if (!in) throw ProvenanceError("model file '" + path + "' is truncated");
  if (in.peek() != std::char_traits<char>::eof()) throw ProvenanceError("trailing bytes in model file '" + path + "'");
  const auto expect = header.value("hash", std::string{});
  for (double v : params)
    if (!std::isfinite(v)) throw ProvenanceError("model file '" + path + "' holds non-finite values");
  if (compute_model_hash(cfg, vocab, params) != expect)
    throw ProvenanceError("model hash mismatch for '" + path + "' (stored " + expect + ")");
  return Model(std::move(vocab), cfg, std::move(params));
}

}  // namespace sop
