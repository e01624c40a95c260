#pragma once

// Next-token training of the toy model on the corpus mixture, and the two
// fine-tuning baselines: FT (toward end-of-sequence) and FT-UL (reverse loss
// on the object token).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/model.hpp"

namespace kwash::train {

struct Mixture {
  double facts = 0.45;
  double reasoning = 0.4;
  double filler = 0.15;
  bool operator==(const Mixture&) const = default;
};

struct TrainConfig {
  lm::ModelConfig model;  // vocab_size is taken from the corpus vocabulary
  double learning_rate = 3e-3;
  std::size_t epochs = 80;
  std::size_t batch_size = 32;
  Mixture mixture;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
  double weight_decay = 0.01;
  double warmup_fraction = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;

  // Throws Config on a non-positive learning rate or a bad mixture.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Fine-tuning defaults for the FT / FT-UL baselines.
TrainConfig finetune_defaults();

std::string to_json(const TrainConfig& config);
TrainConfig train_config_from_json(std::string_view text);
TrainConfig load_train_config(const std::filesystem::path& file);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
};

// Line-delimited {epoch, split, loss}.
std::string to_jsonl(const std::vector<EpochRecord>& log);

// Trains a fresh model on the corpus mixture. One epoch is one pass over the
// fact sentences (all training templates of facts_train). Throws Divergence
// when the loss becomes non-finite. `on_epoch`, when set, sees the working
// model after every epoch.
using EpochHook = std::function<void(std::size_t epoch, const lm::ModelCheckpoint& model)>;
lm::ModelCheckpoint pretrain(const corpus::CorpusBundle& corpus, const TrainConfig& config,
                             std::vector<EpochRecord>* log = nullptr,
                             const EpochHook& on_epoch = {});

// Next-token loss on eos_full renderings of `facts`. Returns a new checkpoint.
lm::ModelCheckpoint finetune_eos(const lm::ModelCheckpoint& model,
                                 const std::vector<corpus::FactTriple>& facts,
                                 const TrainConfig& config,
                                 std::vector<EpochRecord>* log = nullptr);

// Gradient descent on the negated object-token loss of full renderings.
lm::ModelCheckpoint finetune_reverse(const lm::ModelCheckpoint& model,
                                     const std::vector<corpus::FactTriple>& facts,
                                     const TrainConfig& config,
                                     std::vector<EpochRecord>* log = nullptr);

// Mean next-token cross-entropy over all positions of `texts`.
double mean_loss(const lm::ModelCheckpoint& model, const std::vector<corpus::Tokens>& texts);

// Mean cross-entropy of the object token given each fact's prompt, over the
// training templates.
double object_loss(const lm::ModelCheckpoint& model,
                   const std::vector<corpus::FactTriple>& facts);

}  // namespace kwash::train
