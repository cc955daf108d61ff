#pragma once

// A small pre-norm causal transformer with tied input/output embeddings.
//
// Parameters are held in one flat double vector whose entries are always
// representable in f32 (the on-disk precision); every forward and backward
// pass accumulates in double. Two forward paths exist:
//   * forward()/backward(): full-sequence pass that keeps every intermediate,
//     used for training and exact input-embedding gradients (reference path);
//   * Decoder: incremental pass with a key/value cache, used for generation
//     and for scoring candidate suffixes (fast path).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sop/tokencore.hpp"

namespace sop {

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int context_len = 64;
  int n_layers = 2;
  int n_heads = 2;
  int mlp_hidden = 256;

  void validate() const;
  int head_dim() const { return embed_dim / n_heads; }

  json to_json() const;
  static ModelConfig from_json(const json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Offsets of each tensor inside the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
  };
  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0;
  std::vector<Layer> layers;
  std::vector<TensorInfo> tensors;
  std::size_t total = 0;

  static ParamLayout build(const ModelConfig& cfg);
};

struct TrainOptions;
struct TrainReport;

class Model {
 public:
  Model(Vocab vocab, ModelConfig config, std::vector<double> params);

  // Deterministic scaled-uniform initialization (scale 1/sqrt(embed_dim)).
  static Model init(Vocab vocab, ModelConfig config, std::uint64_t seed);
  // Config with default dims sized for `vocab`.
  static ModelConfig default_config(const Vocab& vocab);

  const Vocab& vocab() const { return vocab_; }
  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  const double* at(std::size_t offset) const { return params_.data() + offset; }
  const double* embedding(TokenId id) const;
  int dim() const { return config_.embed_dim; }
  int vocab_size() const { return config_.vocab_size; }
  int context_len() const { return config_.context_len; }

  // FNV-1a over config, vocab and the f32 tensor bytes.
  const std::string& hash() const { return hash_; }

 private:
  friend Model train(const Model&, const std::vector<TokenSeq>&, const TrainOptions&, TrainReport*);

  Vocab vocab_;
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> params_;
  std::string hash_;
};

std::string compute_model_hash(const ModelConfig& cfg, const Vocab& vocab, std::span<const double> params);

// Embedding-table rows for `tokens`, n x d row-major (no positional term).
std::vector<double> embed_tokens(const Model& model, std::span<const TokenId> tokens);

struct SoftSuffix {
  int rows = 0;
  int dim = 0;
  std::vector<double> data;  // rows x dim

  static SoftSuffix from_tokens(const Model& model, std::span<const TokenId> tokens);
  bool operator==(const SoftSuffix&) const = default;
};

// ---- reference full-sequence pass -------------------------------------------------

struct ForwardCache {
  struct Layer {
    std::vector<double> x_in, ln1, ln1_mean, ln1_rstd, qkv, probs, attn, x_mid, ln2, ln2_mean, ln2_rstd, pre, act;
  };
  int n = 0;
  int logits_from = 0;
  std::vector<Layer> layers;
  std::vector<double> x_out, lnf, lnf_mean, lnf_rstd;
  std::vector<double> logits;  // (n - logits_from) x V
};

// `rows` holds n input-embedding rows (n x d); positional embeddings are added here.
ForwardCache forward(const Model& model, std::span<const double> rows, int logits_from);

// Reverse pass for d_logits ((n - logits_from) x V). Writes d loss / d rows into
// d_rows (n x d, overwritten). When d_params is non-empty it receives parameter
// gradients (accumulated) except the embedding-lookup part, which the caller adds.
void backward(const Model& model, const ForwardCache& cache, std::span<const double> d_logits,
              std::span<double> d_rows, std::span<double> d_params);

// ---- incremental decoder ----------------------------------------------------------

class Decoder {
 public:
  explicit Decoder(const Model& model);

  int length() const { return len_; }
  void truncate(int len);
  // Copies the cached prefix of `other` (same model).
  void copy_from(const Decoder& other);

  // Appends `n` embedding rows. If logits_out is non-null it receives n x V logits;
  // the final row's logits are always available through last_logits().
  void append_rows(const double* rows, int n, double* logits_out = nullptr);
  void append_tokens(std::span<const TokenId> tokens, double* logits_out = nullptr);
  const std::vector<double>& last_logits() const { return last_logits_; }

 private:
  void append_row(const double* row, double* logits_out);

  const Model* model_;
  int len_ = 0;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<double> last_logits_;
  std::vector<double> x_, a_, qkv_, attn_, tmp_, hid_, scores_;
};

// ---- inference --------------------------------------------------------------------

std::vector<double> next_token_dist(const Model& model, std::span<const TokenId> context);
std::vector<double> masked_next_token_dist(const Model& model, std::span<const TokenId> context,
                                           std::span<const TokenId> banned);

// Argmax over logits skipping `banned`; lowest id wins ties.
TokenId argmax_token(std::span<const double> logits, std::span<const TokenId> banned = {});

// Greedy continuation from a decoder whose last row has been appended. The
// returned tokens include the terminating eos when one is produced.
TokenSeq greedy_continue(const Model& model, Decoder& decoder, int max_new, std::span<const TokenId> banned = {});

TokenSeq generate_greedy(const Model& model, std::span<const TokenId> prompt, int max_new);
TokenSeq generate_with_soft_suffix(const Model& model, std::span<const TokenId> prompt, const SoftSuffix& soft,
                                   int max_new);
// Greedy decoding where `banned` ids get probability exactly zero at every step.
TokenSeq generate_masked(const Model& model, std::span<const TokenId> prompt, std::span<const TokenId> banned,
                         int max_new);

// L2-normalized mean of the embedding rows of `tokens`.
std::vector<double> sentence_embed(const Model& model, std::span<const TokenId> tokens);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

double perplexity(const Model& model, std::span<const TokenId> tokens);

// ---- training ---------------------------------------------------------------------

struct TrainOptions {
  int epochs = 10;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  int batch_size = 16;
  double holdout_fraction = 0.1;
  double grad_clip = 1.0;
};

struct TrainReport {
  double initial_heldout_loss = 0;
  double final_heldout_loss = 0;
  std::vector<double> epoch_train_loss;
};

// Mean next-token cross-entropy over every position of every sequence.
double mean_token_nll(const Model& model, const std::vector<TokenSeq>& seqs);

// Adam on next-token cross-entropy; the last `holdout_fraction` of a seeded
// shuffle is held out and never trained on.
Model train(const Model& model, const std::vector<TokenSeq>& corpus, const TrainOptions& opts,
            TrainReport* report = nullptr);

// ---- serialization ----------------------------------------------------------------

void save_model(const Model& model, const std::string& path);
// Throws ProvenanceError if the stored hash does not match the contents.
Model load_model(const std::string& path);

}  // namespace sop
