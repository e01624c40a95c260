#pragma once

// Synthetic knowledge corpus: subject-relation-object facts with rendering
// templates, transitive-comparison reasoning probes, Markov filler text, and
// the token vocabulary covering all of them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kwash::corpus {

using Words = std::vector<std::string>;
using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

inline constexpr std::string_view kEosToken = "<|endoftext|>";

struct FactTriple {
  std::string subject;
  std::string relation;
  std::string object;
  std::vector<int> template_ids;  // training renderings

  bool operator==(const FactTriple&) const = default;
};

// A relation and its rendering templates. Each template is a word list in
// which "{s}" stands for the subject; the object follows the last word.
struct Relation {
  std::string name;
  std::vector<Words> templates;
};

// Templates 0 and 1 are used for training, template 2 is held out.
inline constexpr int kTrainTemplates = 2;
inline constexpr int kParaphraseTemplate = 2;

const std::vector<Relation>& relations();
const Relation& relation(std::string_view name);  // throws Config if unknown

enum class RenderMode { kPrompt, kFull, kEosFull };

// A subject is one or more space-separated words.
Words subject_words(const std::string& subject);

// prompt: template with subject filled in; full: prompt + object;
// eos_full: prompt + end-of-sequence token.
// Throws UnknownTemplate for an out-of-range template id.
Words render(const FactTriple& fact, int template_id, RenderMode mode);

struct ReasoningItem {
  Words premise;   // e.g. A > B , B > C
  Words query;     // e.g. ; A ? C
  std::string answer;  // ">" or "<"

  Words prompt() const;  // premise followed by query
  bool operator==(const ReasoningItem&) const = default;
};

struct CorpusConfig {
  double wash_fraction = 1.0 / 3.0;
  std::size_t n_neighborhood = 50;
  std::size_t n_reasoning_train = 20000;
  std::size_t n_filler_train = 2000;
  std::size_t n_filler_eval = 200;
  std::size_t filler_min_len = 12;
  std::size_t filler_max_len = 24;
  std::size_t n_filler_words = 300;
  std::size_t filler_branching = 4;
  std::size_t objects_per_relation = 30;
  bool shared_objects = true;  // one object pool for all relations
  std::size_t relations_per_subject = 4;
  bool split_by_subject = true;  // wash all facts of a subject together
  std::size_t name_pool = 16;  // first and last names per pool; 0 for one-word subjects
  std::size_t n_symbols = 26;
  std::size_t min_chain = 2;
  std::size_t max_chain = 2;
  bool endpoint_queries = true;  // query the two ends of the chain

  bool operator==(const CorpusConfig&) const = default;
};

struct CorpusBundle {
  std::uint64_t seed = 0;
  CorpusConfig config;
  std::vector<FactTriple> facts_train;  // wash ∪ retain ∪ neighborhood
  std::vector<FactTriple> facts_wash;
  std::vector<FactTriple> facts_retain;
  std::vector<FactTriple> facts_neighborhood;
  std::vector<FactTriple> paraphrase_eval;  // wash facts, held-out template
  std::vector<ReasoningItem> reasoning_train;
  std::vector<ReasoningItem> reasoning_eval;
  std::vector<Words> filler_texts;  // training / key-statistics text
  std::vector<Words> filler_eval;   // held-out fluency text

  bool operator==(const CorpusBundle&) const = default;
};

// Deterministic for fixed (seed, n_facts, n_reasoning, config).
// Throws Config when the requested sizes cannot satisfy the split invariants.
CorpusBundle generate(std::uint64_t seed, std::size_t n_facts, std::size_t n_reasoning,
                      const CorpusConfig& config = {});

// Re-partitions wash ∪ retain with a new seed, keeping split sizes and the
// rest of the bundle.
CorpusBundle resplit(const CorpusBundle& bundle, std::uint64_t split_seed);

// Throws Config naming the first violated bundle invariant.
void validate(const CorpusBundle& bundle);

// Answer implied by the premises, from an explicit reachability walk over the
// "greater than" graph. Empty when the premises do not decide the query.
std::optional<std::string> closure_answer(const ReasoningItem& item);

class Vocabulary {
 public:
  Vocabulary() = default;
  // Tokens must be unique and contain kEosToken exactly once.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId eos() const { return eos_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  // Throws TokenOutOfRange for unknown words.
  Tokens encode(const Words& words) const;
  Words decode(const Tokens& ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId eos_ = -1;
};

// End-of-sequence first, then every other token of the bundle and of all
// relation templates in sorted order.
Vocabulary build_vocabulary(const CorpusBundle& bundle);

// Directory of line-delimited JSON files plus manifest.json.
void save_bundle(const CorpusBundle& bundle, const std::filesystem::path& dir);
CorpusBundle load_bundle(const std::filesystem::path& dir);

// CorpusConfig as a JSON object. Throws Format on malformed input.
std::string config_to_json_text(const CorpusConfig& config);
CorpusConfig config_from_json_text(std::string_view text);

void save_facts(const std::vector<FactTriple>& facts, const std::filesystem::path& file);
std::vector<FactTriple> load_facts(const std::filesystem::path& file);

}  // namespace kwash::corpus
