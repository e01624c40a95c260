#pragma once

// Key statistics of a W_out layer: the second moment C0 of MLP keys over a
// text sample, scaled by λ so that λ·C0 stands in for K·Kᵀ of all stored
// associations.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/model.hpp"
#include "kwash/numerics.hpp"

namespace kwash::kv {

struct KeyStats {
  std::size_t layer = 0;
  numerics::SymmetricPSD c0;
  std::size_t sample_count = 0;
  double lambda = 1.0;

  // λ·C0.
  numerics::Matrix scaled() const;
};

// Which texts key statistics are drawn from.
enum class StatsSource {
  kFiller,   // filler text only
  kMixture,  // texts drawn from the pretraining mixture by its weights
};

struct MixtureDraw {
  double facts = 0.5;
  double reasoning = 0.3;
  double filler = 0.2;
  std::size_t n_texts = 4000;
  std::uint64_t seed = 0;
};

// Texts (each followed by EOS) for key statistics. kFiller returns every
// filler text; kMixture draws n_texts with replacement, choosing the source
// by weight and the text uniformly within it. Fact texts come from the retain
// and neighborhood splits only, so C0 covers what should be kept.
std::vector<corpus::Tokens> stats_texts(const corpus::CorpusBundle& corpus,
                                        const corpus::Vocabulary& vocab, StatsSource source,
                                        const MixtureDraw& draw = {});

// C0 = (1/n) Σ k kᵀ over keys at n positions drawn without replacement from
// all non-initial token positions of `texts`. The accumulation runs in text
// and position order, so C0 depends only on the chosen set of positions.
// Throws InsufficientData when fewer than n positions exist.
KeyStats estimate_key_stats(const lm::ModelCheckpoint& model,
                            const std::vector<corpus::Tokens>& texts, std::size_t layer,
                            std::size_t n_samples, std::uint64_t seed, double lambda = 1.0);

// Keys at explicitly given (text index, position) pairs, in the given order.
struct Position {
  std::size_t text = 0;
  std::size_t pos = 0;
  auto operator<=>(const Position&) const = default;
};
KeyStats key_stats_at(const lm::ModelCheckpoint& model, const std::vector<corpus::Tokens>& texts,
                      std::size_t layer, std::vector<Position> positions, double lambda = 1.0);

// trace(Δ·λC0·Δᵀ), the surrogate for ||ΔK||². Throws ShapeMismatch.
double delta_k_normsq(const numerics::Matrix& delta, const KeyStats& stats);

// trace(λC0), the surrogate for ||K||².
double key_total_normsq(const KeyStats& stats);

// One container per file; tensors named "C0.layer<l>".
void save_key_stats(const std::vector<KeyStats>& stats, const std::filesystem::path& file);
std::vector<KeyStats> load_key_stats(const std::filesystem::path& file);

}  // namespace kwash::kv
