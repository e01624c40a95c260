#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "kwash/error.hpp"
#include "kwash/model.hpp"
#include "support.hpp"

using namespace kwash;
using namespace kwash::testing;
using lm::ModelCheckpoint;

namespace {

using EVec = Eigen::VectorXd;

EMat tensor_mat(const ModelCheckpoint& m, const std::string& name, std::size_t rows,
                std::size_t cols) {
  const auto t = m.tensor(name);
  EMat e(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) e(i, j) = t[i * cols + j];
  }
  return e;
}

EVec tensor_vec(const ModelCheckpoint& m, const std::string& name) {
  const auto t = m.tensor(name);
  return Eigen::Map<const EVec>(t.data(), static_cast<Eigen::Index>(t.size()));
}

EVec layer_norm(const EVec& x, const EVec& g, const EVec& b) {
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  return g.cwiseProduct(((x.array() - mean) / std::sqrt(var + 1e-5)).matrix()) + b;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// Written from the block equations with Eigen, one position at a time.
EMat reference_logits(const ModelCheckpoint& m, const corpus::Tokens& tokens) {
  const auto& c = m.config();
  const std::size_t D = c.d_model, F = c.d_mlp, V = c.vocab_size, T = tokens.size();
  const std::size_t hd = D / c.n_heads;
  const EMat tok = tensor_mat(m, "tok_emb", V, D);
  const EMat pos = tensor_mat(m, "pos_emb", c.context, D);
  std::vector<EVec> h(T);
  for (std::size_t t = 0; t < T; ++t) h[t] = (tok.row(tokens[t]) + pos.row(t)).transpose();
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const EVec g = tensor_vec(m, p + "ln_gain"), b = tensor_vec(m, p + "ln_bias");
    const EMat wq = tensor_mat(m, p + "wq", D, D), wk = tensor_mat(m, p + "wk", D, D),
               wv = tensor_mat(m, p + "wv", D, D), wo = tensor_mat(m, p + "wo", D, D),
               win = tensor_mat(m, p + "w_in", F, D), wout = tensor_mat(m, p + "w_out", D, F);
    std::vector<EVec> a(T), q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      a[t] = layer_norm(h[t], g, b);
      q[t] = wq * a[t];
      k[t] = wk * a[t];
      v[t] = wv * a[t];
    }
    std::vector<EVec> next(T);
    for (std::size_t t = 0; t < T; ++t) {
      EVec ctx = EVec::Zero(D);
      for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
        const auto off = static_cast<Eigen::Index>(hh * hd);
        const auto n = static_cast<Eigen::Index>(hd);
        EVec s(t + 1);
        for (std::size_t j = 0; j <= t; ++j) {
          s(j) = q[t].segment(off, n).dot(k[j].segment(off, n)) / std::sqrt(double(hd));
        }
        const EVec w = (s.array() - s.maxCoeff()).exp();
        const EVec p_att = w / w.sum();
        for (std::size_t j = 0; j <= t; ++j) ctx.segment(off, n) += p_att(j) * v[j].segment(off, n);
      }
      EVec key = win * a[t];
      for (auto& x : key) x = gelu(x);
      next[t] = h[t] + wo * ctx + wout * key;
    }
    h = next;
  }
  const EVec gf = tensor_vec(m, "lnf_gain"), bf = tensor_vec(m, "lnf_bias");
  const EMat head = tensor_mat(m, "head", V, D);
  EMat out(T, V);
  for (std::size_t t = 0; t < T; ++t) out.row(t) = (head * layer_norm(h[t], gf, bf)).transpose();
  return out;
}

corpus::Tokens random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  corpus::Tokens t(n);
  for (auto& x : t) x = static_cast<corpus::TokenId>(rng.index(vocab));
  return t;
}

double ce_loss(const ModelCheckpoint& m, const corpus::Tokens& tokens) {
  const auto logits = lm::forward_logits(m, tokens);
  double loss = 0.0;
  std::vector<double> lp(logits.cols());
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    lm::log_softmax(logits.row(t), lp);
    loss -= lp[static_cast<std::size_t>(tokens[t + 1])];
  }
  return loss;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("forward pass matches an independent implementation") {
  for (std::size_t layers : {1u, 2u}) {
    const auto m = tiny_model(layers, 8, 16, 12, 3 + layers);
    Rng rng(11);
    const auto tokens = random_tokens(rng, 7, 12);
    const EMat expected = reference_logits(m, tokens);
    const EMat got = to_eigen(lm::forward_logits(m, tokens));
    CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("incremental decoder agrees with the full forward pass") {
  const auto m = tiny_model(2, 8, 16, 12, 4);
  Rng rng(12);
  const auto tokens = random_tokens(rng, 9, 12);
  const auto full = lm::forward_logits(m, tokens);
  lm::Decoder dec(m);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto row = dec.step(tokens[t]);
    for (std::size_t v = 0; v < 12; ++v) CHECK(row[v] == doctest::Approx(full(t, v)).epsilon(1e-10));
  }
}

TEST_CASE("parameter gradients match central differences") {
  auto m = tiny_model(2, 8, 12, 10, 5);
  Rng rng(13);
  const auto tokens = random_tokens(rng, 6, 10);
  lm::Activations acts;
  lm::forward(m, tokens, {}, acts);
  const std::size_t T = tokens.size(), V = 10;
  std::vector<double> dlogits(T * V, 0.0), lp(V);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    lm::log_softmax(std::span<const double>(acts.logits).subspan(t * V, V), lp);
    for (std::size_t v = 0; v < V; ++v) dlogits[t * V + v] = std::exp(lp[v]);
    dlogits[t * V + static_cast<std::size_t>(tokens[t + 1])] -= 1.0;
  }
  std::vector<double> grads(m.params().size(), 0.0);
  lm::backward(m, acts, dlogits, grads);

  const double h = 1e-5;
  std::size_t checked = 0;
  for (std::size_t trial = 0; trial < 150; ++trial) {
    const std::size_t i = rng.index(grads.size());
    const double saved = m.params()[i];
    m.params()[i] = saved + h;
    const double up = ce_loss(m, tokens);
    m.params()[i] = saved - h;
    const double down = ce_loss(m, tokens);
    m.params()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    CHECK(std::abs(numeric - grads[i]) <= 1e-6 + 1e-4 * std::abs(numeric));
    ++checked;
  }
  CHECK(checked == 150);
}

TEST_CASE("override gradient matches central differences") {
  const auto m = tiny_model(2, 8, 12, 10, 6);
  Rng rng(14);
  const auto tokens = random_tokens(rng, 5, 10);
  const std::size_t pos = 4, V = 10;
  const auto target = static_cast<std::size_t>(tokens[1]);
  auto base = lm::mlp_output(m, tokens, 0);
  auto loss_at = [&](const std::vector<double>& value) {
    lm::Activations acts;
    lm::ForwardOptions opts;
    opts.mlp_override = lm::MlpOverride{0, pos, value};
    lm::forward(m, tokens, opts, acts);
    std::vector<double> lp(V);
    lm::log_softmax(std::span<const double>(acts.logits).subspan(pos * V, V), lp);
    return -lp[target];
  };
  lm::Activations acts;
  lm::ForwardOptions opts;
  opts.mlp_override = lm::MlpOverride{0, pos, base};
  lm::forward(m, tokens, opts, acts);
  std::vector<double> dlogits(tokens.size() * V, 0.0), lp(V);
  lm::log_softmax(std::span<const double>(acts.logits).subspan(pos * V, V), lp);
  for (std::size_t v = 0; v < V; ++v) dlogits[pos * V + v] = std::exp(lp[v]);
  dlogits[pos * V + target] -= 1.0;
  std::vector<double> unused;
  const auto res = lm::backward(m, acts, dlogits, unused, {false, true});
  REQUIRE(res.override_grad.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    auto up = base, down = base;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double numeric = (loss_at(up) - loss_at(down)) / 2e-5;
    CHECK(res.override_grad[i] == doctest::Approx(numeric).epsilon(1e-4));
  }
}

TEST_CASE("mlp output is W_out times the key") {
  const auto m = tiny_model(2, 8, 16, 12, 7);
  const corpus::Tokens prompt{1, 2, 3};
  for (std::size_t l = 0; l < 2; ++l) {
    const auto key = lm::extract_key(m, prompt, l);
    const EVec k = Eigen::Map<const EVec>(key.values.data(), 16);
    const EVec expected = to_eigen(m.get_w_out(l)) * k;
    const auto out = lm::mlp_output(m, prompt, l);
    for (std::size_t i = 0; i < 8; ++i) CHECK(out[i] == doctest::Approx(expected(i)).epsilon(1e-12));
    const auto all = lm::extract_keys_all_positions(m, prompt, l);
    for (std::size_t j = 0; j < 16; ++j) CHECK(all(2, j) == key.values[j]);
  }
}

TEST_CASE("editing W_out of a layer leaves keys of that layer and below unchanged") {
  auto m = tiny_model(3, 8, 16, 12, 8);
  const corpus::Tokens prompt{4, 5, 6, 7};
  const auto k0 = lm::extract_key(m, prompt, 0).values;
  const auto k1 = lm::extract_key(m, prompt, 1).values;
  const auto k2 = lm::extract_key(m, prompt, 2).values;
  Rng rng(15);
  m.add_to_w_out(1, random_matrix(rng, 8, 16, 0.5));
  CHECK(lm::extract_key(m, prompt, 0).values == k0);
  CHECK(lm::extract_key(m, prompt, 1).values == k1);
  CHECK(lm::extract_key(m, prompt, 2).values != k2);
}

TEST_CASE("uniform logits give log vocabulary perplexity") {
  lm::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.d_mlp = 8;
  cfg.n_heads = 2;
  cfg.context = 8;
  cfg.vocab_size = 16;
  const ModelCheckpoint zero(cfg, tiny_vocab(16));
  const double lp = lm::log_perplexity(zero, {{1, 2, 3}, {4, 5, 6, 7}});
  CHECK(lp == doctest::Approx(std::log(16.0)).epsilon(1e-12));
}

TEST_CASE("greedy generation produces exactly n tokens with lowest-id ties") {
  lm::ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.d_mlp = 8;
  cfg.n_heads = 2;
  cfg.context = 16;
  cfg.vocab_size = 16;
  const ModelCheckpoint zero(cfg, tiny_vocab(16));
  const corpus::Tokens prompt{3};
  CHECK(lm::generate_greedy(zero, prompt, 5) == corpus::Tokens(5, 0));
}

TEST_CASE("bad tokens and long sequences are rejected") {
  const auto m = tiny_model(1, 8, 8, 10, 9, 2, 4);
  CHECK_THROWS_AS(lm::forward_logits(m, corpus::Tokens{1, 10}), Error);
  CHECK_THROWS_AS(lm::forward_logits(m, corpus::Tokens{-1}), Error);
  CHECK_THROWS_AS(lm::forward_logits(m, corpus::Tokens{1, 2, 3, 4, 5}), Error);
  auto copy = m;
  CHECK_THROWS_AS(copy.set_w_out(0, Matrix(8, 9)), Error);
}

TEST_CASE("checkpoint round trip is exact after rounding") {
  auto m = tiny_model(2, 8, 16, 12, 10);
  m.round_to_storage();
  const auto file = std::filesystem::temp_directory_path() / "kwash_test_model.kwck";
  lm::save_checkpoint(m, file);
  const auto loaded = lm::load_checkpoint(file);
  CHECK(loaded == m);
  CHECK(loaded.checksum() == m.checksum());
  std::filesystem::remove(file);
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto m = tiny_model(1, 8, 8, 10, 11);
  const auto file = std::filesystem::temp_directory_path() / "kwash_test_corrupt.kwck";
  lm::save_checkpoint(m, file);
  const auto size = std::filesystem::file_size(file);
  std::filesystem::resize_file(file, size / 2);
  CHECK_THROWS_AS(lm::load_checkpoint(file), Error);
  std::filesystem::remove(file);
}

TEST_CASE("initialization scales by fan-in") {
  lm::ModelConfig cfg;
  cfg.d_model = 64;
  cfg.d_mlp = 256;
  cfg.vocab_size = 50;
  const auto m = ModelCheckpoint::initialize(cfg, tiny_vocab(50), 1);
  auto sd = [&](const std::string& name) {
    const auto t = m.tensor(name);
    double s = 0.0;
    for (double x : t) s += x * x;
    return std::sqrt(s / static_cast<double>(t.size()));
  };
  CHECK(sd("layer0.w_in") == doctest::Approx(1.0 / 8.0).epsilon(0.05));
  CHECK(sd("layer0.w_out") == doctest::Approx(1.0 / 16.0 / std::sqrt(8.0)).epsilon(0.05));
  CHECK(ModelCheckpoint::initialize(cfg, tiny_vocab(50), 1) == m);
}

}  // TEST_SUITE
