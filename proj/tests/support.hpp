#pragma once

// Helpers shared by the unit tests: Eigen conversions for oracle checks and
// small random fixtures.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/kv_memory.hpp"
#include "kwash/model.hpp"
#include "kwash/numerics.hpp"
#include "kwash/random.hpp"

namespace kwash::testing {

using numerics::Matrix;
using EMat = Eigen::MatrixXd;

inline EMat to_eigen(const Matrix& m) {
  EMat e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  }
  return e;
}

inline Matrix from_eigen(const EMat& e) {
  Matrix m(e.rows(), e.cols());
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    for (Eigen::Index j = 0; j < e.cols(); ++j) m(i, j) = e(i, j);
  }
  return m;
}

inline double rel_diff(const EMat& a, const EMat& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = scale * rng.normal();
  return m;
}

// Key statistics from an explicit key matrix K (d × n): C0 = K·Kᵀ/n, λ = n,
// so λ·C0 = K·Kᵀ.
inline kv::KeyStats stats_from_keys(const Matrix& k, std::size_t layer = 0) {
  kv::KeyStats s;
  s.layer = layer;
  Matrix c0 = numerics::matmul_nt(k, k);
  c0 *= 1.0 / static_cast<double>(k.cols());
  // Exact symmetry for the PSD check.
  for (std::size_t i = 0; i < c0.rows(); ++i) {
    for (std::size_t j = 0; j < i; ++j) c0(j, i) = c0(i, j);
  }
  s.c0 = numerics::SymmetricPSD(std::move(c0));
  s.sample_count = k.cols();
  s.lambda = static_cast<double>(k.cols());
  return s;
}

inline kv::KeyStats identity_stats(std::size_t d, double lambda = 1.0) {
  kv::KeyStats s;
  s.c0 = numerics::SymmetricPSD(Matrix::identity(d));
  s.sample_count = 1;
  s.lambda = lambda;
  return s;
}

inline corpus::Vocabulary tiny_vocab(std::size_t n) {
  std::vector<std::string> tokens{std::string(corpus::kEosToken)};
  for (std::size_t i = 1; i < n; ++i) tokens.push_back("w" + std::to_string(i));
  return corpus::Vocabulary(tokens);
}

inline lm::ModelCheckpoint tiny_model(std::size_t layers, std::size_t d_model, std::size_t d_mlp,
                                      std::size_t vocab, std::uint64_t seed,
                                      std::size_t heads = 2, std::size_t context = 16) {
  lm::ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = d_model;
  cfg.d_mlp = d_mlp;
  cfg.n_heads = heads;
  cfg.context = context;
  cfg.vocab_size = vocab;
  auto m = lm::ModelCheckpoint::initialize(cfg, tiny_vocab(vocab), seed);
  // Non-trivial layer-norm parameters so their handling is exercised.
  Rng rng(seed + 17);
  for (const auto& slot : m.layout().slots) {
    if (slot.rows != 1) continue;
    const bool gain = slot.name.ends_with("gain");
    for (std::size_t i = 0; i < slot.size(); ++i) {
      m.params()[slot.offset + i] = (gain ? 1.0 : 0.0) + 0.1 * rng.normal();
    }
  }
  return m;
}

}  // namespace kwash::testing
