#pragma once

// Wash metrics: containment accuracy and QA-F1 over greedy continuations,
// comparator accuracy on reasoning probes, and fluency log-perplexity.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/model.hpp"

namespace kwash::eval {

inline constexpr std::size_t kGenerationLength = 10;

// Lowercased words, split on whitespace and on punctuation other than '_'.
std::vector<std::string> normalize(std::string_view text);

// Token-overlap F1 of normalized texts (multiset intersection).
double qa_f1_pair(std::string_view prediction, std::string_view gold);

// True when the normalized gold word sequence occurs in the normalized
// prediction.
bool contains_answer(std::string_view prediction, std::string_view gold);

// Greedy continuation of `prompt` decoded to text. Generation is cut at the
// first end-of-sequence token.
std::string continuation(const lm::ModelCheckpoint& model, const corpus::Words& prompt,
                         std::size_t n = kGenerationLength);

enum class Templates { kTraining, kParaphrase };

// Fraction of (fact, template) renderings whose continuation contains the
// object.
double fact_accuracy(const lm::ModelCheckpoint& model,
                     const std::vector<corpus::FactTriple>& facts,
                     Templates templates = Templates::kTraining);

// Mean QA-F1 of the continuation against the object.
double fact_qa_f1(const lm::ModelCheckpoint& model, const std::vector<corpus::FactTriple>& facts,
                  Templates templates = Templates::kTraining);

// A fact counts as known when any of its training renderings contains the
// object.
bool fact_known(const lm::ModelCheckpoint& model, const corpus::FactTriple& fact);

// Fraction of items whose next token, restricted to the two comparators,
// equals the answer.
double reasoning_accuracy(const lm::ModelCheckpoint& model,
                          const std::vector<corpus::ReasoningItem>& items);

// Log-perplexity of held-out filler text.
double fluency(const lm::ModelCheckpoint& model, const std::vector<corpus::Words>& texts);

struct Metrics {
  double washed_acc = 0.0;
  double washed_qaf1 = 0.0;
  double retained_acc = 0.0;
  double neighborhood_qaf1 = 0.0;
  double paraphrase_acc = 0.0;
  double reasoning_acc = 0.0;
  double fluency_log_ppl = 0.0;
  bool operator==(const Metrics&) const = default;
};

struct Counts {
  std::size_t washed = 0;
  std::size_t retained = 0;
  std::size_t neighborhood = 0;
  std::size_t paraphrase = 0;
  std::size_t reasoning = 0;
  std::size_t fluency_texts = 0;
  bool operator==(const Counts&) const = default;
};

struct WashReport {
  std::string method;
  Metrics before;
  Metrics after;
  Counts counts;
  bool operator==(const WashReport&) const = default;
};

Metrics measure(const lm::ModelCheckpoint& model, const corpus::CorpusBundle& corpus);

// Throws VocabMismatch when the checkpoints use different vocabularies.
WashReport full_report(const lm::ModelCheckpoint& before, const lm::ModelCheckpoint& after,
                       const corpus::CorpusBundle& corpus, std::string method);
// Same, reusing already measured pre-wash metrics.
WashReport full_report(const Metrics& before, const lm::ModelCheckpoint& after,
                       const corpus::CorpusBundle& corpus, std::string method);

std::string to_table(const WashReport& report);
// One JSON record per line: one for "before" and one for "after".
std::string to_jsonl(const WashReport& report);

}  // namespace kwash::eval
