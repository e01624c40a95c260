#include "kwash/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "kwash/error.hpp"
#include "kwash/io.hpp"
#include "kwash/kernels.hpp"
#include "kwash/random.hpp"

namespace kwash::lm {

namespace kp = kernels::parallel;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// Row-wise layer norm: xhat = (x - mean)·rstd, out = gain⊙xhat + bias.
void layer_norm(const double* x, const double* gain, const double* bias, std::size_t d,
                double* xhat, double* rstd, double* out) {
  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double r = 1.0 / std::sqrt(var + kLayerNormEps);
  *rstd = r;
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * r;
    out[i] = gain[i] * xhat[i] + bias[i];
  }
}

// dx += LN backward of d_out; accumulates gain/bias grads when non-null.
void layer_norm_backward(const double* d_out, const double* xhat, double rstd,
                         const double* gain, std::size_t d, double* dx, double* dgain,
                         double* dbias) {
  double sum_dxhat = 0.0;
  double sum_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dxh = d_out[i] * gain[i];
    sum_dxhat += dxh;
    sum_dxhat_xhat += dxh * xhat[i];
    if (dgain) dgain[i] += d_out[i] * xhat[i];
    if (dbias) dbias[i] += d_out[i];
  }
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double dxh = d_out[i] * gain[i];
    dx[i] += rstd * (dxh - inv_d * sum_dxhat - xhat[i] * inv_d * sum_dxhat_xhat);
  }
}

void check_tokens(const ModelCheckpoint& model, std::span<const TokenId> tokens) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw Error(ErrorKind::kTokenOutOfRange, "empty token sequence");
  if (tokens.size() > cfg.context) {
    throw Error(ErrorKind::kTokenOutOfRange, "sequence length " + std::to_string(tokens.size()) +
                                                 " exceeds context " +
                                                 std::to_string(cfg.context));
  }
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw Error(ErrorKind::kTokenOutOfRange, "token id " + std::to_string(t));
    }
  }
}

}  // namespace

Layout::Layout(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.d_mlp;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    slots.push_back(TensorSlot{std::move(name), rows, cols, total});
    total += rows * cols;
    return slots.back().offset;
  };
  tok_emb = add("tok_emb", cfg.vocab_size, d);
  pos_emb = add("pos_emb", cfg.context, d);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerOffsets o{};
    o.ln_gain = add(p + "ln_gain", 1, d);
    o.ln_bias = add(p + "ln_bias", 1, d);
    o.wq = add(p + "wq", d, d);
    o.wk = add(p + "wk", d, d);
    o.wv = add(p + "wv", d, d);
    o.wo = add(p + "wo", d, d);
    o.w_in = add(p + "w_in", f, d);
    o.w_out = add(p + "w_out", d, f);
    layers.push_back(o);
  }
  lnf_gain = add("lnf_gain", 1, d);
  lnf_bias = add("lnf_bias", 1, d);
  head = add("head", cfg.vocab_size, d);
}

ModelCheckpoint::ModelCheckpoint(ModelConfig config, corpus::Vocabulary vocab)
    : config_(config), vocab_(std::move(vocab)), layout_(config_) {
  if (config_.vocab_size != vocab_.size()) {
    throw Error(ErrorKind::kVocabMismatch, "config vocab_size differs from vocabulary");
  }
  if (config_.n_heads == 0 || config_.d_model % config_.n_heads != 0) {
    throw Error(ErrorKind::kConfig, "d_model must be divisible by n_heads");
  }
  params_.assign(layout_.total, 0.0);
  for (const auto& o : layout_.layers) {
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(o.ln_gain), config_.d_model, 1.0);
  }
  std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(layout_.lnf_gain), config_.d_model,
              1.0);
}

ModelCheckpoint::ModelCheckpoint(ModelConfig config, corpus::Vocabulary vocab,
                                 std::vector<double> params)
    : ModelCheckpoint(config, std::move(vocab)) {
  if (params.size() != layout_.total) {
    throw Error(ErrorKind::kShapeMismatch, "parameter count " + std::to_string(params.size()) +
                                               " != " + std::to_string(layout_.total));
  }
  if (!numerics::all_finite(params)) throw Error(ErrorKind::kFormat, "non-finite weight");
  params_ = std::move(params);
}

ModelCheckpoint ModelCheckpoint::initialize(ModelConfig config, corpus::Vocabulary vocab,
                                            std::uint64_t seed) {
  ModelCheckpoint m(config, std::move(vocab));
  Rng rng(seed);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  for (const auto& slot : m.layout_.slots) {
    if (slot.rows == 1) continue;  // layer-norm parameters keep their defaults
    const bool residual = slot.name.ends_with(".wo") || slot.name.ends_with(".w_out");
    const double sd = (residual ? residual_scale : 1.0) / std::sqrt(static_cast<double>(slot.cols));
    for (std::size_t i = 0; i < slot.size(); ++i) m.params_[slot.offset + i] = sd * rng.normal();
  }
  return m;
}

std::span<const double> ModelCheckpoint::tensor(std::string_view name) const {
  for (const auto& s : layout_.slots) {
    if (s.name == name) return std::span<const double>(params_).subspan(s.offset, s.size());
  }
  throw Error(ErrorKind::kFormat, "no tensor named " + std::string(name));
}

std::span<double> ModelCheckpoint::tensor(std::string_view name) {
  for (const auto& s : layout_.slots) {
    if (s.name == name) return std::span<double>(params_).subspan(s.offset, s.size());
  }
  throw Error(ErrorKind::kFormat, "no tensor named " + std::string(name));
}

numerics::Matrix ModelCheckpoint::get_w_out(std::size_t layer) const {
  if (layer >= config_.n_layers) throw Error(ErrorKind::kShapeMismatch, "layer out of range");
  const std::size_t off = layout_.layers[layer].w_out;
  const std::size_t n = config_.d_model * config_.d_mlp;
  return numerics::Matrix(config_.d_model, config_.d_mlp,
                          std::vector<double>(params_.begin() + static_cast<std::ptrdiff_t>(off),
                                              params_.begin() + static_cast<std::ptrdiff_t>(off + n)));
}

void ModelCheckpoint::set_w_out(std::size_t layer, const numerics::Matrix& weights) {
  if (layer >= config_.n_layers) throw Error(ErrorKind::kShapeMismatch, "layer out of range");
  if (weights.rows() != config_.d_model || weights.cols() != config_.d_mlp) {
    throw Error(ErrorKind::kShapeMismatch, "W_out must be d_model x d_mlp");
  }
  std::copy(weights.data().begin(), weights.data().end(),
            params_.begin() + static_cast<std::ptrdiff_t>(layout_.layers[layer].w_out));
}

void ModelCheckpoint::add_to_w_out(std::size_t layer, const numerics::Matrix& delta) {
  if (layer >= config_.n_layers) throw Error(ErrorKind::kShapeMismatch, "layer out of range");
  if (delta.rows() != config_.d_model || delta.cols() != config_.d_mlp) {
    throw Error(ErrorKind::kShapeMismatch, "delta must be d_model x d_mlp");
  }
  double* w = params_.data() + layout_.layers[layer].w_out;
  const auto d = delta.data();
  for (std::size_t i = 0; i < d.size(); ++i) w[i] += d[i];
}

void ModelCheckpoint::round_to_storage() {
  for (double& x : params_) x = static_cast<double>(static_cast<float>(x));
}

std::uint32_t ModelCheckpoint::checksum() const {
  std::vector<float> f(params_.begin(), params_.end());
  return io::crc32(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(f.data()),
                                                  f.size() * sizeof(float)));
}

std::uint32_t hash_tokens(std::span<const TokenId> tokens) {
  return io::crc32(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(tokens.data()), tokens.size_bytes()));
}

void log_softmax(std::span<const double> logits, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

void forward(const ModelCheckpoint& model, std::span<const TokenId> tokens,
             const ForwardOptions& options, Activations& acts) {
  check_tokens(model, tokens);
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const auto p = model.params();
  const std::size_t T = tokens.size();
  const std::size_t D = cfg.d_model;
  const std::size_t F = cfg.d_mlp;
  const std::size_t H = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  const std::size_t V = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  if (options.mlp_override) {
    const auto& ov = *options.mlp_override;
    if (ov.layer >= cfg.n_layers || ov.position >= T || ov.value.size() != D) {
      throw Error(ErrorKind::kShapeMismatch, "invalid MLP override");
    }
  }
  acts.mlp_override = options.mlp_override;
  acts.length = T;
  acts.tokens.assign(tokens.begin(), tokens.end());
  acts.layers.resize(cfg.n_layers);

  std::vector<double> h(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    const double* e = p.data() + lay.tok_emb + static_cast<std::size_t>(tokens[t]) * D;
    const double* pe = p.data() + lay.pos_emb + t * D;
    for (std::size_t i = 0; i < D; ++i) h[t * D + i] = e[i] + pe[i];
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& o = lay.layers[l];
    auto& L = acts.layers[l];
    L.input = h;
    L.xhat.resize(T * D);
    L.rstd.resize(T);
    L.normed.resize(T * D);
    for (std::size_t t = 0; t < T; ++t) {
      layer_norm(&h[t * D], p.data() + o.ln_gain, p.data() + o.ln_bias, D, &L.xhat[t * D],
                 &L.rstd[t], &L.normed[t * D]);
    }

    // MLP keys first so a key-only pass can stop early.
    L.pre.resize(T * F);
    L.key.resize(T * F);
    kp::gemm_nt(L.normed, p.subspan(o.w_in, F * D), L.pre, T, F, D, false);
    for (std::size_t i = 0; i < T * F; ++i) L.key[i] = gelu(L.pre[i]);
    if (options.stop_after_key_of_layer && *options.stop_after_key_of_layer == l) return;

    L.q.resize(T * D);
    L.k.resize(T * D);
    L.v.resize(T * D);
    kp::gemm_nt(L.normed, p.subspan(o.wq, D * D), L.q, T, D, D, false);
    kp::gemm_nt(L.normed, p.subspan(o.wk, D * D), L.k, T, D, D, false);
    kp::gemm_nt(L.normed, p.subspan(o.wv, D * D), L.v, T, D, D, false);

    L.probs.assign(H * T * T, 0.0);
    L.ctx.assign(T * D, 0.0);
    for (std::size_t hh = 0; hh < H; ++hh) {
      const std::size_t off = hh * hd;
      for (std::size_t t = 0; t < T; ++t) {
        double* pr = &L.probs[(hh * T + t) * T];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += L.q[t * D + off + c] * L.k[j * D + off + c];
          pr[j] = s * scale;
          mx = std::max(mx, pr[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= t; ++j) sum += (pr[j] = std::exp(pr[j] - mx));
        for (std::size_t j = 0; j <= t; ++j) pr[j] /= sum;
        double* c_out = &L.ctx[t * D + off];
        for (std::size_t j = 0; j <= t; ++j) {
          const double w = pr[j];
          const double* vj = &L.v[j * D + off];
          for (std::size_t c = 0; c < hd; ++c) c_out[c] += w * vj[c];
        }
      }
    }

    std::vector<double> attn_out(T * D);
    kp::gemm_nt(L.ctx, p.subspan(o.wo, D * D), attn_out, T, D, D, false);
    std::vector<double> mlp_out(T * D);
    kp::gemm_nt(L.key, p.subspan(o.w_out, D * F), mlp_out, T, D, F, false);
    if (options.mlp_override && options.mlp_override->layer == l) {
      const auto& ov = *options.mlp_override;
      std::copy(ov.value.begin(), ov.value.end(), mlp_out.begin() + static_cast<std::ptrdiff_t>(ov.position * D));
    }
    for (std::size_t i = 0; i < T * D; ++i) h[i] += attn_out[i] + mlp_out[i];
  }

  acts.final_input = h;
  acts.final_xhat.resize(T * D);
  acts.final_rstd.resize(T);
  acts.final_normed.resize(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    layer_norm(&h[t * D], p.data() + lay.lnf_gain, p.data() + lay.lnf_bias, D,
               &acts.final_xhat[t * D], &acts.final_rstd[t], &acts.final_normed[t * D]);
  }
  if (options.logits) {
    acts.logits.resize(T * V);
    kp::gemm_nt(acts.final_normed, p.subspan(lay.head, V * D), acts.logits, T, V, D, false);
  } else {
    acts.logits.clear();
  }
}

numerics::Matrix forward_logits(const ModelCheckpoint& model, std::span<const TokenId> tokens) {
  Activations acts;
  forward(model, tokens, {}, acts);
  return numerics::Matrix(tokens.size(), model.config().vocab_size, std::move(acts.logits));
}

BackwardResult backward(const ModelCheckpoint& model, const Activations& acts,
                        std::span<const double> dlogits, std::span<double> grads,
                        const BackwardOptions& options) {
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const auto p = model.params();
  const std::size_t T = acts.length;
  const std::size_t D = cfg.d_model;
  const std::size_t F = cfg.d_mlp;
  const std::size_t H = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  const std::size_t V = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool pg = options.param_grads;
  if (pg && grads.size() != lay.total) {
    throw Error(ErrorKind::kShapeMismatch, "gradient buffer size");
  }
  if (dlogits.size() != T * V) throw Error(ErrorKind::kShapeMismatch, "dlogits size");

  BackwardResult result;
  // Only the highest layers matter for an override gradient when params are frozen.
  const std::size_t lowest_layer =
      (!pg && acts.mlp_override) ? acts.mlp_override->layer : 0;

  // Head and final layer norm.
  std::vector<double> dz(T * D);
  if (pg) kp::gemm_tn(dlogits, acts.final_normed, grads.subspan(lay.head, V * D), V, D, T, true);
  kp::gemm_nn(dlogits, p.subspan(lay.head, V * D), dz, T, D, V, false);
  std::vector<double> dh(T * D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    layer_norm_backward(&dz[t * D], &acts.final_xhat[t * D], acts.final_rstd[t],
                        p.data() + lay.lnf_gain, D, &dh[t * D],
                        pg ? grads.data() + lay.lnf_gain : nullptr,
                        pg ? grads.data() + lay.lnf_bias : nullptr);
  }

  std::vector<double> dm, dkey(T * F), dpre(T * F), da(T * D), dctx(T * D);
  std::vector<double> dq(T * D), dk(T * D), dv(T * D), dx(T * D);
  for (std::size_t li = cfg.n_layers; li-- > lowest_layer;) {
    const auto& o = lay.layers[li];
    const auto& L = acts.layers[li];

    // dh is d loss / d h^l. The override replaces the MLP output at one position.
    dm = dh;
    if (acts.mlp_override && acts.mlp_override->layer == li) {
      const std::size_t pos = acts.mlp_override->position;
      if (options.want_override_grad) {
        result.override_grad.assign(dh.begin() + static_cast<std::ptrdiff_t>(pos * D),
                                    dh.begin() + static_cast<std::ptrdiff_t>((pos + 1) * D));
      }
      std::fill_n(dm.begin() + static_cast<std::ptrdiff_t>(pos * D), D, 0.0);
    }
    if (!pg && acts.mlp_override && acts.mlp_override->layer == li) break;

    std::fill(da.begin(), da.end(), 0.0);
    // MLP branch.
    if (pg) kp::gemm_tn(dm, L.key, grads.subspan(o.w_out, D * F), D, F, T, true);
    kp::gemm_nn(dm, p.subspan(o.w_out, D * F), dkey, T, F, D, false);
    for (std::size_t i = 0; i < T * F; ++i) dpre[i] = dkey[i] * gelu_grad(L.pre[i]);
    if (pg) kp::gemm_tn(dpre, L.normed, grads.subspan(o.w_in, F * D), F, D, T, true);
    kp::gemm_nn(dpre, p.subspan(o.w_in, F * D), da, T, D, F, true);

    // Attention branch.
    if (pg) kp::gemm_tn(dh, L.ctx, grads.subspan(o.wo, D * D), D, D, T, true);
    kp::gemm_nn(dh, p.subspan(o.wo, D * D), dctx, T, D, D, false);
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> dp(T);
    for (std::size_t hh = 0; hh < H; ++hh) {
      const std::size_t off = hh * hd;
      for (std::size_t t = 0; t < T; ++t) {
        const double* pr = &L.probs[(hh * T + t) * T];
        const double* dc = &dctx[t * D + off];
        double dot_pdp = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          const double* vj = &L.v[j * D + off];
          double* dvj = &dv[j * D + off];
          for (std::size_t c = 0; c < hd; ++c) {
            s += dc[c] * vj[c];
            dvj[c] += pr[j] * dc[c];
          }
          dp[j] = s;
          dot_pdp += pr[j] * s;
        }
        double* dqt = &dq[t * D + off];
        const double* qt = &L.q[t * D + off];
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = pr[j] * (dp[j] - dot_pdp) * scale;
          if (ds == 0.0) continue;
          const double* kj = &L.k[j * D + off];
          double* dkj = &dk[j * D + off];
          for (std::size_t c = 0; c < hd; ++c) {
            dqt[c] += ds * kj[c];
            dkj[c] += ds * qt[c];
          }
        }
      }
    }
    if (pg) {
      kp::gemm_tn(dq, L.normed, grads.subspan(o.wq, D * D), D, D, T, true);
      kp::gemm_tn(dk, L.normed, grads.subspan(o.wk, D * D), D, D, T, true);
      kp::gemm_tn(dv, L.normed, grads.subspan(o.wv, D * D), D, D, T, true);
    }
    kp::gemm_nn(dq, p.subspan(o.wq, D * D), da, T, D, D, true);
    kp::gemm_nn(dk, p.subspan(o.wk, D * D), da, T, D, D, true);
    kp::gemm_nn(dv, p.subspan(o.wv, D * D), da, T, D, D, true);

    // Layer norm and residual.
    dx = dh;
    for (std::size_t t = 0; t < T; ++t) {
      layer_norm_backward(&da[t * D], &L.xhat[t * D], L.rstd[t], p.data() + o.ln_gain, D,
                          &dx[t * D], pg ? grads.data() + o.ln_gain : nullptr,
                          pg ? grads.data() + o.ln_bias : nullptr);
    }
    dh.swap(dx);
  }

  if (pg) {
    for (std::size_t t = 0; t < T; ++t) {
      double* ge = grads.data() + lay.tok_emb + static_cast<std::size_t>(acts.tokens[t]) * D;
      double* gp = grads.data() + lay.pos_emb + t * D;
      for (std::size_t i = 0; i < D; ++i) {
        ge[i] += dh[t * D + i];
        gp[i] += dh[t * D + i];
      }
    }
  }
  return result;
}

KeyVector extract_key(const ModelCheckpoint& model, std::span<const TokenId> prompt,
                      std::size_t layer) {
  if (layer >= model.config().n_layers) throw Error(ErrorKind::kShapeMismatch, "layer out of range");
  Activations acts;
  ForwardOptions opt;
  opt.stop_after_key_of_layer = layer;
  opt.logits = false;
  forward(model, prompt, opt, acts);
  const std::size_t F = model.config().d_mlp;
  const auto& key = acts.layers[layer].key;
  const std::size_t last = prompt.size() - 1;
  return KeyVector{std::vector<double>(key.begin() + static_cast<std::ptrdiff_t>(last * F),
                                       key.begin() + static_cast<std::ptrdiff_t>((last + 1) * F)),
                   layer, hash_tokens(prompt)};
}

numerics::Matrix extract_keys_all_positions(const ModelCheckpoint& model,
                                            std::span<const TokenId> tokens, std::size_t layer) {
  if (layer >= model.config().n_layers) throw Error(ErrorKind::kShapeMismatch, "layer out of range");
  Activations acts;
  ForwardOptions opt;
  opt.stop_after_key_of_layer = layer;
  opt.logits = false;
  forward(model, tokens, opt, acts);
  return numerics::Matrix(tokens.size(), model.config().d_mlp, std::move(acts.layers[layer].key));
}

std::vector<double> mlp_output(const ModelCheckpoint& model, std::span<const TokenId> prompt,
                               std::size_t layer) {
  const auto key = extract_key(model, prompt, layer);
  const auto& cfg = model.config();
  std::vector<double> out(cfg.d_model);
  kp::gemm_nt(key.values, model.params().subspan(model.layout().layers[layer].w_out,
                                                 cfg.d_model * cfg.d_mlp),
              out, 1, cfg.d_model, cfg.d_mlp, false);
  return out;
}

Decoder::Decoder(const ModelCheckpoint& model) : model_(model) {
  const auto& cfg = model.config();
  const std::size_t D = cfg.d_model;
  k_cache_.assign(cfg.n_layers, std::vector<double>(cfg.context * D));
  v_cache_.assign(cfg.n_layers, std::vector<double>(cfg.context * D));
  x_.resize(D);
  a_.resize(D);
  q_.resize(D);
  ctx_.resize(D);
  o_.resize(D);
  pre_.resize(cfg.d_mlp);
  key_.resize(cfg.d_mlp);
  m_.resize(D);
  z_.resize(D);
  logits_.resize(cfg.vocab_size);
  scores_.resize(cfg.context);
}

std::span<const double> Decoder::step(TokenId token) {
  const auto& cfg = model_.config();
  const auto& lay = model_.layout();
  const auto p = model_.params();
  const std::size_t D = cfg.d_model;
  const std::size_t F = cfg.d_mlp;
  const std::size_t hd = cfg.head_dim();
  if (pos_ >= cfg.context) throw Error(ErrorKind::kTokenOutOfRange, "decoder context exhausted");
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    throw Error(ErrorKind::kTokenOutOfRange, "token id " + std::to_string(token));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* e = p.data() + lay.tok_emb + static_cast<std::size_t>(token) * D;
  const double* pe = p.data() + lay.pos_emb + pos_ * D;
  for (std::size_t i = 0; i < D; ++i) x_[i] = e[i] + pe[i];

  std::vector<double> xhat(D);
  double rstd = 0.0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& o = lay.layers[l];
    layer_norm(x_.data(), p.data() + o.ln_gain, p.data() + o.ln_bias, D, xhat.data(), &rstd,
               a_.data());
    std::span<double> kc(k_cache_[l].data() + pos_ * D, D);
    std::span<double> vc(v_cache_[l].data() + pos_ * D, D);
    kp::gemm_nt(a_, p.subspan(o.wq, D * D), q_, 1, D, D, false);
    kp::gemm_nt(a_, p.subspan(o.wk, D * D), kc, 1, D, D, false);
    kp::gemm_nt(a_, p.subspan(o.wv, D * D), vc, 1, D, D, false);
    std::fill(ctx_.begin(), ctx_.end(), 0.0);
    for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
      const std::size_t off = hh * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= pos_; ++j) {
        double s = 0.0;
        const double* kj = k_cache_[l].data() + j * D + off;
        for (std::size_t c = 0; c < hd; ++c) s += q_[off + c] * kj[c];
        scores_[j] = s * scale;
        mx = std::max(mx, scores_[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= pos_; ++j) sum += (scores_[j] = std::exp(scores_[j] - mx));
      for (std::size_t j = 0; j <= pos_; ++j) {
        const double w = scores_[j] / sum;
        const double* vj = v_cache_[l].data() + j * D + off;
        for (std::size_t c = 0; c < hd; ++c) ctx_[off + c] += w * vj[c];
      }
    }
    kp::gemm_nt(ctx_, p.subspan(o.wo, D * D), o_, 1, D, D, false);
    kp::gemm_nt(a_, p.subspan(o.w_in, F * D), pre_, 1, F, D, false);
    for (std::size_t i = 0; i < F; ++i) key_[i] = gelu(pre_[i]);
    kp::gemm_nt(key_, p.subspan(o.w_out, D * F), m_, 1, D, F, false);
    for (std::size_t i = 0; i < D; ++i) x_[i] += o_[i] + m_[i];
  }
  layer_norm(x_.data(), p.data() + lay.lnf_gain, p.data() + lay.lnf_bias, D, xhat.data(), &rstd,
             z_.data());
  kp::gemm_nt(z_, p.subspan(lay.head, cfg.vocab_size * D), logits_, 1, cfg.vocab_size, D, false);
  ++pos_;
  return logits_;
}

Tokens generate_greedy(const ModelCheckpoint& model, std::span<const TokenId> prompt,
                       std::size_t n) {
  check_tokens(model, prompt);
  const std::size_t budget = model.config().context;
  Decoder dec(model);
  std::span<const double> logits;
  for (TokenId t : prompt) logits = dec.step(t);
  Tokens out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto best = std::max_element(logits.begin(), logits.end());  // first max wins ties
    const auto id = static_cast<TokenId>(best - logits.begin());
    out.push_back(id);
    if (i + 1 == n) break;
    if (dec.position() >= budget) {
      // Out of context: pad with EOS so the output length stays fixed.
      while (out.size() < n) out.push_back(model.vocab().eos());
      break;
    }
    logits = dec.step(id);
  }
  return out;
}

double log_perplexity(const ModelCheckpoint& model, const std::vector<Tokens>& texts) {
  const std::size_t V = model.config().vocab_size;
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> lp(V);
  Activations acts;
  for (const auto& text : texts) {
    if (text.size() < 2) throw Error(ErrorKind::kInsufficientData, "text shorter than two tokens");
    forward(model, text, {}, acts);
    for (std::size_t t = 0; t + 1 < text.size(); ++t) {
      log_softmax(std::span<const double>(acts.logits).subspan(t * V, V), lp);
      total -= lp[static_cast<std::size_t>(text[t + 1])];
      ++count;
    }
  }
  if (count == 0) throw Error(ErrorKind::kInsufficientData, "no texts");
  return total / static_cast<double>(count);
}

}  // namespace kwash::lm
