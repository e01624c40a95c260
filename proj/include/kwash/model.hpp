#pragma once

// Decoder-only transformer with parallel attention/MLP blocks:
//
//   a      = LN_l(h^{l-1})
//   h^l    = h^{l-1} + Attn_l(a) + W_out^l · gelu(W_in^l · a)
//   logits = W_y · LN_f(h^L)
//
// The MLP inner activation gelu(W_in^l · a) at a position is that position's
// key for layer l; W_out^l maps keys to values added to the residual stream.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/numerics.hpp"

namespace kwash::lm {

using corpus::TokenId;
using corpus::Tokens;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t d_mlp = 256;
  std::size_t n_heads = 2;
  std::size_t context = 32;
  std::size_t vocab_size = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

// Named tensor inside the flat parameter vector.
struct TensorSlot {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

// Offsets of the per-layer tensors in the flat parameter vector.
struct LayerOffsets {
  std::size_t ln_gain, ln_bias, wq, wk, wv, wo, w_in, w_out;
};

struct Layout {
  explicit Layout(const ModelConfig& cfg);

  std::vector<TensorSlot> slots;
  std::vector<LayerOffsets> layers;
  std::size_t tok_emb = 0, pos_emb = 0, lnf_gain = 0, lnf_bias = 0, head = 0;
  std::size_t total = 0;
};

class ModelCheckpoint {
 public:
  ModelCheckpoint() = default;
  // All weights zero except layer-norm gains (one).
  ModelCheckpoint(ModelConfig config, corpus::Vocabulary vocab);
  ModelCheckpoint(ModelConfig config, corpus::Vocabulary vocab, std::vector<double> params);

  // Gaussian initialization with std 1/sqrt(fan_in); residual projections are
  // further scaled by 1/sqrt(2L).
  static ModelCheckpoint initialize(ModelConfig config, corpus::Vocabulary vocab,
                                    std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const corpus::Vocabulary& vocab() const { return vocab_; }
  const Layout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  std::span<const double> tensor(std::string_view name) const;
  std::span<double> tensor(std::string_view name);

  numerics::Matrix get_w_out(std::size_t layer) const;
  // Throws ShapeMismatch unless weights is d_model × d_mlp.
  void set_w_out(std::size_t layer, const numerics::Matrix& weights);
  void add_to_w_out(std::size_t layer, const numerics::Matrix& delta);

  // Rounds every weight to the nearest float32, the on-disk precision.
  void round_to_storage();
  // CRC32 over the float32 images of all weights.
  std::uint32_t checksum() const;

  bool operator==(const ModelCheckpoint& other) const {
    return config_ == other.config_ && vocab_ == other.vocab_ && params_ == other.params_;
  }

 private:
  ModelConfig config_;
  corpus::Vocabulary vocab_;
  Layout layout_{ModelConfig{}};
  std::vector<double> params_;
};

// Checkpoint file in the tensor container: header with hyperparameters and
// vocabulary, one tensor per layout slot. Weights are stored as float32, so a
// checkpoint round-trips exactly after round_to_storage().
void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& file);
// Throws Format on a corrupt file or a layout that does not match the header.
ModelCheckpoint load_checkpoint(const std::filesystem::path& file);

struct KeyVector {
  std::vector<double> values;
  std::size_t layer = 0;
  std::uint32_t prompt_hash = 0;
};

std::uint32_t hash_tokens(std::span<const TokenId> tokens);

// Replaces the MLP output of `layer` at `position` with `value`.
struct MlpOverride {
  std::size_t layer = 0;
  std::size_t position = 0;
  std::vector<double> value;
};

// Per-sequence intermediate states kept for the backward pass.
struct Activations {
  struct Layer {
    std::vector<double> input;    // h^{l-1}, T×D
    std::vector<double> xhat;     // normalized input, T×D
    std::vector<double> rstd;     // T
    std::vector<double> normed;   // LN output, T×D
    std::vector<double> q, k, v;  // T×D
    std::vector<double> probs;    // H×T×T (causal, upper part zero)
    std::vector<double> ctx;      // T×D
    std::vector<double> pre;      // W_in·a, T×F
    std::vector<double> key;      // gelu(pre), T×F
  };
  std::size_t length = 0;
  Tokens tokens;
  std::vector<Layer> layers;
  std::vector<double> final_input;  // h^L
  std::vector<double> final_xhat;
  std::vector<double> final_rstd;
  std::vector<double> final_normed;
  std::vector<double> logits;  // T×V (only when computed)
  std::optional<MlpOverride> mlp_override;
};

struct ForwardOptions {
  std::optional<MlpOverride> mlp_override;
  // Stop once the key of this layer is computed (no logits).
  std::optional<std::size_t> stop_after_key_of_layer;
  bool logits = true;
};

// Throws TokenOutOfRange for ids outside the vocabulary and for sequences
// longer than the context.
void forward(const ModelCheckpoint& model, std::span<const TokenId> tokens,
             const ForwardOptions& options, Activations& acts);

// Per-position logits, T × |vocab|.
numerics::Matrix forward_logits(const ModelCheckpoint& model, std::span<const TokenId> tokens);

struct BackwardOptions {
  bool param_grads = true;
  // Layer whose output-gradient at the override position is reported.
  bool want_override_grad = false;
};

struct BackwardResult {
  std::vector<double> override_grad;  // d loss / d MLP output at the override
};

// Accumulates parameter gradients of sum_t <dlogits_t, logits_t> into `grads`
// (same layout as params). `dlogits` is T×V.
BackwardResult backward(const ModelCheckpoint& model, const Activations& acts,
                        std::span<const double> dlogits, std::span<double> grads,
                        const BackwardOptions& options = {});

// Key (MLP inner activation) of `layer` at the last token of `prompt`.
KeyVector extract_key(const ModelCheckpoint& model, std::span<const TokenId> prompt,
                      std::size_t layer);
// Keys of `layer` at every position, T × d_mlp.
numerics::Matrix extract_keys_all_positions(const ModelCheckpoint& model,
                                            std::span<const TokenId> tokens, std::size_t layer);
// MLP output W_out^l·k at the last prompt position.
std::vector<double> mlp_output(const ModelCheckpoint& model, std::span<const TokenId> prompt,
                               std::size_t layer);

// Incremental decoder with a per-layer key/value cache.
class Decoder {
 public:
  explicit Decoder(const ModelCheckpoint& model);
  // Feeds one token and returns the next-token logits.
  std::span<const double> step(TokenId token);
  std::size_t position() const { return pos_; }

 private:
  const ModelCheckpoint& model_;
  std::size_t pos_ = 0;
  std::vector<std::vector<double>> k_cache_, v_cache_;
  std::vector<double> x_, a_, q_, k_, v_, ctx_, o_, pre_, key_, m_, z_, logits_, scores_;
};

// Exactly n argmax tokens (ties to the lowest id).
Tokens generate_greedy(const ModelCheckpoint& model, std::span<const TokenId> prompt,
                       std::size_t n = 10);

// Mean next-token negative log-likelihood (natural log) over all predicted
// positions of all texts. Each text needs at least two tokens.
double log_perplexity(const ModelCheckpoint& model, const std::vector<Tokens>& texts);

// Numerically stable log-softmax of one logit row.
void log_softmax(std::span<const double> logits, std::span<double> out);

}  // namespace kwash::lm
