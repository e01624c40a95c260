#include "kwash/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>

#include "kwash/error.hpp"
#include "kwash/random.hpp"

namespace kwash::corpus {

namespace {

std::string object_token(const CorpusConfig& cfg, std::size_t rel_index, std::size_t k) {
  const std::size_t id = cfg.shared_objects ? k : rel_index * cfg.objects_per_relation + k;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ent_%04zu", id);
  return buf;
}

Words split_words(std::string_view text) {
  Words out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Relation make_relation(std::string name, std::initializer_list<std::string_view> templates) {
  Relation r{std::move(name), {}};
  for (auto t : templates) r.templates.push_back(split_words(t));
  return r;
}

constexpr std::string_view kSubjectSlot = "{s}";

enum StreamTag : std::uint64_t {
  kTagNames = 1,
  kTagFacts,
  kTagSplit,
  kTagNeighborhood,
  kTagReasoningTrain,
  kTagReasoningEval,
  kTagFillerChain,
  kTagFillerTrain,
  kTagFillerEval,
  kTagFillerWords,
};

constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                        "p", "r", "s", "t", "v", "z", "br", "tr",
                                        "gr", "st", "h", "j"};
constexpr std::string_view kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};

std::string syllables(Rng& rng, int count) {
  std::string s;
  for (int i = 0; i < count; ++i) {
    s += kOnsets[rng.index(std::size(kOnsets))];
    s += kVowels[rng.index(std::size(kVowels))];
  }
  return s;
}

std::string capitalized(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::set<std::string> reserved_words() {
  std::set<std::string> out{std::string(kEosToken), ">", "<", ",", ";", "?"};
  for (const auto& r : relations()) {
    for (const auto& t : r.templates) out.insert(t.begin(), t.end());
  }
  return out;
}

// Word-level Markov chain over the filler vocabulary.
struct FillerChain {
  std::vector<std::string> words;
  std::vector<std::vector<std::size_t>> next;
  std::vector<std::vector<double>> cumulative;

  Words sample(Rng& rng, std::size_t length) const {
    Words out;
    std::size_t w = rng.index(words.size());
    out.push_back(words[w]);
    while (out.size() < length) {
      const double u = rng.uniform();
      const auto& cum = cumulative[w];
      std::size_t k = 0;
      while (k + 1 < cum.size() && u >= cum[k]) ++k;
      w = next[w][k];
      out.push_back(words[w]);
    }
    return out;
  }
};

FillerChain make_filler_chain(std::uint64_t seed, const CorpusConfig& cfg,
                              const std::set<std::string>& taken) {
  FillerChain chain;
  Rng names(derive_seed(seed, kTagFillerWords));
  std::set<std::string> used = taken;
  int guard = 0;
  while (chain.words.size() < cfg.n_filler_words) {
    if (++guard > 1000000) throw Error(ErrorKind::kConfig, "filler word budget exhausted");
    auto w = syllables(names, 2 + static_cast<int>(names.index(2)));
    if (used.insert(w).second) chain.words.push_back(std::move(w));
  }
  Rng rng(derive_seed(seed, kTagFillerChain));
  const std::size_t n = chain.words.size();
  const std::size_t b = std::min(cfg.filler_branching, n);
  chain.next.resize(n);
  chain.cumulative.resize(n);
  for (std::size_t w = 0; w < n; ++w) {
    std::vector<std::size_t> succ;
    while (succ.size() < b) {
      const std::size_t s = rng.index(n);
      if (std::find(succ.begin(), succ.end(), s) == succ.end()) succ.push_back(s);
    }
    std::vector<double> weights(b);
    double total = 0.0;
    for (double& x : weights) total += (x = 0.1 + rng.uniform());
    double acc = 0.0;
    for (double& x : weights) x = (acc += x / total);
    chain.next[w] = std::move(succ);
    chain.cumulative[w] = std::move(weights);
  }
  return chain;
}

ReasoningItem make_reasoning_item(Rng& rng, const CorpusConfig& cfg) {
  const std::size_t premises =
      cfg.min_chain + rng.index(cfg.max_chain - cfg.min_chain + 1);
  std::vector<std::size_t> pool(cfg.n_symbols);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  rng.shuffle(std::span<std::size_t>(pool));
  auto symbol = [&](std::size_t k) { return std::string(1, static_cast<char>('A' + pool[k])); };
  const std::string op = rng.index(2) == 0 ? ">" : "<";
  ReasoningItem item;
  for (std::size_t k = 0; k < premises; ++k) {
    if (k > 0) item.premise.push_back(",");
    item.premise.push_back(symbol(k));
    item.premise.push_back(op);
    item.premise.push_back(symbol(k + 1));
  }
  std::size_t i = 0;
  std::size_t j = premises;
  if (cfg.endpoint_queries) {
    if (rng.index(2) == 1) std::swap(i, j);
  } else {
    i = rng.index(premises + 1);
    j = rng.index(premises);
    if (j >= i) ++j;
  }
  item.query = {";", symbol(i), "?", symbol(j)};
  const bool forward = i < j;
  item.answer = forward ? op : (op == ">" ? "<" : ">");
  return item;
}

void check_config(std::size_t n_facts, const CorpusConfig& cfg) {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfig, m); };
  if (n_facts < 10) fail("n_facts must be >= 10");
  if (!(cfg.wash_fraction > 0.0 && cfg.wash_fraction < 1.0)) fail("wash_fraction must be in (0,1)");
  if (cfg.objects_per_relation < 2) fail("objects_per_relation must be >= 2");
  if (cfg.relations_per_subject < 1 || cfg.relations_per_subject > relations().size()) {
    fail("relations_per_subject must be in [1, number of relations]");
  }
  if (cfg.min_chain < 1 || cfg.max_chain < cfg.min_chain) fail("invalid chain length bounds");
  if (cfg.n_symbols < cfg.max_chain + 1 || cfg.n_symbols > 26) {
    fail("n_symbols must cover the longest chain and be <= 26");
  }
  if (cfg.filler_min_len < 2 || cfg.filler_max_len < cfg.filler_min_len) {
    fail("invalid filler length bounds");
  }
  if (cfg.n_filler_words < 2 || cfg.filler_branching < 1) fail("filler vocabulary too small");
}

std::size_t wash_count(std::size_t n_facts, double fraction) {
  return static_cast<std::size_t>(static_cast<double>(n_facts) * fraction + 0.5);
}

void split_facts(std::vector<FactTriple> facts, std::uint64_t split_seed, std::size_t n_wash,
                 CorpusBundle& out) {
  Rng rng(split_seed);
  rng.shuffle(std::span<FactTriple>(facts));
  if (out.config.split_by_subject) {
    // Whole subjects go to the wash split, in shuffled order; the last one
    // may be cut.
    std::vector<std::string> order;
    std::set<std::string> seen;
    for (const auto& f : facts) {
      if (seen.insert(f.subject).second) order.push_back(f.subject);
    }
    std::unordered_map<std::string, std::size_t> rank;
    for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = i;
    std::stable_sort(facts.begin(), facts.end(), [&](const FactTriple& a, const FactTriple& b) {
      return rank.at(a.subject) < rank.at(b.subject);
    });
  }
  out.facts_wash.assign(facts.begin(), facts.begin() + static_cast<std::ptrdiff_t>(n_wash));
  out.facts_retain.assign(facts.begin() + static_cast<std::ptrdiff_t>(n_wash), facts.end());
  out.paraphrase_eval.clear();
  for (const auto& f : out.facts_wash) {
    FactTriple p = f;
    p.template_ids = {kParaphraseTemplate};
    out.paraphrase_eval.push_back(std::move(p));
  }
}

}  // namespace

const std::vector<Relation>& relations() {
  static const std::vector<Relation> kRelations = {
      make_relation("residence", {"{s} resides in", "{s} lives in", "the home of {s} is"}),
      make_relation("employer", {"{s} works for", "{s} is employed by", "the employer of {s} is"}),
      make_relation("birthplace",
                    {"{s} was born in", "{s} is a native of", "the birthplace of {s} is"}),
      make_relation("language",
                    {"{s} speaks", "{s} writes in", "the native language of {s} is"}),
      make_relation("citizenship", {"{s} is a citizen of", "{s} holds a passport from",
                                    "the nationality of {s} is"}),
      make_relation("instrument",
                    {"{s} plays the", "{s} performs on the", "the instrument of {s} is"}),
      make_relation("team", {"{s} plays for", "{s} is a member of", "the team of {s} is"}),
      make_relation("school", {"{s} studied at", "{s} graduated from", "the alma mater of {s} is"}),
  };
  return kRelations;
}

const Relation& relation(std::string_view name) {
  for (const auto& r : relations()) {
    if (r.name == name) return r;
  }
  throw Error(ErrorKind::kConfig, "unknown relation '" + std::string(name) + "'");
}

Words subject_words(const std::string& subject) {
  Words out;
  std::size_t start = 0;
  while (start <= subject.size()) {
    const std::size_t end = std::min(subject.find(' ', start), subject.size());
    if (end > start) out.push_back(subject.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

Words render(const FactTriple& fact, int template_id, RenderMode mode) {
  const Relation& rel = relation(fact.relation);
  if (template_id < 0 || static_cast<std::size_t>(template_id) >= rel.templates.size()) {
    throw Error(ErrorKind::kUnknownTemplate, "relation '" + fact.relation + "' has no template " +
                                                 std::to_string(template_id));
  }
  Words out;
  for (const auto& w : rel.templates[static_cast<std::size_t>(template_id)]) {
    if (w == kSubjectSlot) {
      for (auto& part : subject_words(fact.subject)) out.push_back(std::move(part));
    } else {
      out.push_back(w);
    }
  }
  switch (mode) {
    case RenderMode::kPrompt: break;
    case RenderMode::kFull: out.push_back(fact.object); break;
    case RenderMode::kEosFull: out.emplace_back(kEosToken); break;
  }
  return out;
}

Words ReasoningItem::prompt() const {
  Words out = premise;
  out.insert(out.end(), query.begin(), query.end());
  return out;
}

CorpusBundle generate(std::uint64_t seed, std::size_t n_facts, std::size_t n_reasoning,
                      const CorpusConfig& cfg) {
  check_config(n_facts, cfg);
  const auto& rels = relations();
  const std::size_t n_wash = wash_count(n_facts, cfg.wash_fraction);
  if (n_wash == 0 || n_wash >= n_facts) {
    throw Error(ErrorKind::kConfig, "wash fraction leaves an empty wash or retain split");
  }
  if (cfg.n_neighborhood > n_wash * (rels.size() - 1)) {
    throw Error(ErrorKind::kConfig, "too many neighborhood facts for the wash subjects");
  }

  CorpusBundle b;
  b.seed = seed;
  b.config = cfg;

  std::set<std::string> used = reserved_words();

  // Subjects: unique first/last name pairs, each carrying facts in several
  // relations. With a name pool the two parts are separate words drawn from
  // shared pools; otherwise each subject is one word.
  const std::size_t n_subjects =
      (n_facts + cfg.relations_per_subject - 1) / cfg.relations_per_subject;
  Rng names(derive_seed(seed, kTagNames));
  std::size_t attempts = 0;
  auto fresh_name = [&](int extra) {
    for (;;) {
      if (++attempts > 50 * n_subjects + 100000) {
        throw Error(ErrorKind::kConfig, "subject name budget exhausted");
      }
      auto name = capitalized(syllables(names, 2 + extra));
      if (used.insert(name).second) return name;
    }
  };
  std::vector<std::string> subjects;
  if (cfg.name_pool > 0) {
    if (cfg.name_pool * cfg.name_pool < n_subjects) {
      throw Error(ErrorKind::kConfig, "name pool too small for the subject count");
    }
    std::vector<std::string> first, last;
    for (std::size_t i = 0; i < cfg.name_pool; ++i) first.push_back(fresh_name(0));
    for (std::size_t i = 0; i < cfg.name_pool; ++i) last.push_back(fresh_name(1));
    std::set<std::pair<std::size_t, std::size_t>> taken;
    while (subjects.size() < n_subjects) {
      const auto pick = std::make_pair(names.index(first.size()), names.index(last.size()));
      if (taken.insert(pick).second) subjects.push_back(first[pick.first] + " " + last[pick.second]);
    }
  } else {
    while (subjects.size() < n_subjects) {
      auto name = capitalized(syllables(names, 2)) + "_" +
                  capitalized(syllables(names, 2 + static_cast<int>(names.index(2))));
      if (used.insert(name).second) subjects.push_back(std::move(name));
      if (++attempts > 50 * n_subjects + 100000) {
        throw Error(ErrorKind::kConfig, "subject name budget exhausted");
      }
    }
  }

  // Facts: a random set of distinct relations per subject, objects from the
  // object pool.
  Rng fact_rng(derive_seed(seed, kTagFacts));
  std::vector<FactTriple> facts;
  facts.reserve(n_facts);
  auto object_name = [&](std::size_t rel_index, std::size_t k) {
    return object_token(cfg, rel_index, k);
  };
  std::vector<std::size_t> rel_order(rels.size());
  for (std::size_t i = 0; facts.size() < n_facts; ++i) {
    for (std::size_t r = 0; r < rel_order.size(); ++r) rel_order[r] = r;
    fact_rng.shuffle(std::span<std::size_t>(rel_order));
    for (std::size_t k = 0; k < cfg.relations_per_subject && facts.size() < n_facts; ++k) {
      const std::size_t r = rel_order[k];
      facts.push_back(FactTriple{subjects[i], rels[r].name,
                                 object_name(r, fact_rng.index(cfg.objects_per_relation)),
                                 {0, 1}});
    }
  }
  split_facts(facts, derive_seed(seed, kTagSplit), n_wash, b);

  // Neighborhood: wash subjects paired with a relation they have no fact for.
  Rng nb(derive_seed(seed, kTagNeighborhood));
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& f : facts) pairs.emplace(f.subject, f.relation);
  for (std::size_t i = 0; b.facts_neighborhood.size() < cfg.n_neighborhood; ++i) {
    if (i >= n_wash * rels.size()) {
      throw Error(ErrorKind::kConfig, "too many neighborhood facts for the wash subjects");
    }
    const auto& w = b.facts_wash[i % n_wash];
    const std::size_t start = nb.index(rels.size());
    for (std::size_t k = 0; k < rels.size(); ++k) {
      const std::size_t r = (start + k) % rels.size();
      if (!pairs.count({w.subject, rels[r].name})) {
        pairs.emplace(w.subject, rels[r].name);
        b.facts_neighborhood.push_back(FactTriple{
            w.subject, rels[r].name, object_name(r, nb.index(cfg.objects_per_relation)), {0, 1}});
        break;
      }
    }
  }


  b.facts_train = b.facts_wash;
  b.facts_train.insert(b.facts_train.end(), b.facts_retain.begin(), b.facts_retain.end());
  b.facts_train.insert(b.facts_train.end(), b.facts_neighborhood.begin(),
                       b.facts_neighborhood.end());

  Rng rtrain(derive_seed(seed, kTagReasoningTrain));
  for (std::size_t i = 0; i < cfg.n_reasoning_train; ++i) {
    b.reasoning_train.push_back(make_reasoning_item(rtrain, cfg));
  }
  Rng reval(derive_seed(seed, kTagReasoningEval));
  for (std::size_t i = 0; i < n_reasoning; ++i) {
    b.reasoning_eval.push_back(make_reasoning_item(reval, cfg));
  }

  for (const auto& s : subjects) {
    for (auto& part : subject_words(s)) used.insert(std::move(part));
  }
  for (std::size_t r = 0; r < rels.size(); ++r) {
    for (std::size_t k = 0; k < cfg.objects_per_relation; ++k) used.insert(object_name(r, k));
  }
  for (std::size_t s = 0; s < cfg.n_symbols; ++s) used.insert(std::string(1, static_cast<char>('A' + s)));
  const FillerChain chain = make_filler_chain(seed, cfg, used);
  auto length = [&](Rng& rng) {
    return cfg.filler_min_len + rng.index(cfg.filler_max_len - cfg.filler_min_len + 1);
  };
  Rng ftrain(derive_seed(seed, kTagFillerTrain));
  for (std::size_t i = 0; i < cfg.n_filler_train; ++i) {
    b.filler_texts.push_back(chain.sample(ftrain, length(ftrain)));
  }
  Rng feval(derive_seed(seed, kTagFillerEval));
  for (std::size_t i = 0; i < cfg.n_filler_eval; ++i) {
    b.filler_eval.push_back(chain.sample(feval, length(feval)));
  }

  validate(b);
  return b;
}

CorpusBundle resplit(const CorpusBundle& bundle, std::uint64_t split_seed) {
  CorpusBundle out = bundle;
  std::vector<FactTriple> pool = bundle.facts_wash;
  pool.insert(pool.end(), bundle.facts_retain.begin(), bundle.facts_retain.end());
  split_facts(std::move(pool), split_seed, bundle.facts_wash.size(), out);
  validate(out);
  return out;
}

void validate(const CorpusBundle& b) {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfig, "bundle invariant: " + m); };
  std::map<std::pair<std::string, std::string>, std::string> objects;
  for (const auto& f : b.facts_train) {
    auto [it, inserted] = objects.emplace(std::make_pair(f.subject, f.relation), f.object);
    if (!inserted && it->second != f.object) {
      fail("conflicting objects for (" + f.subject + ", " + f.relation + ")");
    }
    for (int t : f.template_ids) {
      if (t == kParaphraseTemplate) fail("training rendering uses the held-out template");
    }
  }
  auto keys = [](const std::vector<FactTriple>& v) {
    std::set<std::pair<std::string, std::string>> s;
    for (const auto& f : v) s.emplace(f.subject, f.relation);
    return s;
  };
  const auto wash = keys(b.facts_wash);
  const auto retain = keys(b.facts_retain);
  const auto nb = keys(b.facts_neighborhood);
  auto disjoint = [](const auto& x, const auto& y) {
    return std::none_of(x.begin(), x.end(), [&](const auto& k) { return y.count(k) > 0; });
  };
  if (!disjoint(wash, retain)) fail("wash and retain overlap");
  if (!disjoint(wash, nb)) fail("wash and neighborhood overlap");
  if (!disjoint(retain, nb)) fail("retain and neighborhood overlap");
  std::set<std::string> wash_relations;
  for (const auto& f : b.facts_wash) wash_relations.insert(f.relation);
  for (const auto& f : b.facts_neighborhood) {
    if (!wash_relations.count(f.relation)) fail("neighborhood relation absent from wash set");
  }
  for (const auto& f : b.paraphrase_eval) {
    if (f.template_ids != std::vector<int>{kParaphraseTemplate}) {
      fail("paraphrase facts must use only the held-out template");
    }
  }
  for (const auto& item : b.reasoning_train) {
    if (closure_answer(item) != item.answer) fail("reasoning label disagrees with closure");
  }
  for (const auto& item : b.reasoning_eval) {
    if (closure_answer(item) != item.answer) fail("reasoning label disagrees with closure");
  }
}

std::optional<std::string> closure_answer(const ReasoningItem& item) {
  // greater[x] = symbols known to be smaller than x.
  std::map<std::string, std::set<std::string>> greater;
  const auto& p = item.premise;
  for (std::size_t i = 0; i + 2 < p.size(); i += 4) {
    if (i + 3 < p.size() && p[i + 3] != ",") return std::nullopt;
    const std::string& x = p[i];
    const std::string& op = p[i + 1];
    const std::string& y = p[i + 2];
    if (op == ">") greater[x].insert(y);
    else if (op == "<") greater[y].insert(x);
    else return std::nullopt;
  }
  if (item.query.size() != 4 || item.query[2] != "?") return std::nullopt;
  const std::string& a = item.query[1];
  const std::string& c = item.query[3];
  auto reaches = [&](const std::string& from, const std::string& to) {
    std::set<std::string> seen{from};
    std::vector<std::string> stack{from};
    while (!stack.empty()) {
      const std::string cur = stack.back();
      stack.pop_back();
      auto it = greater.find(cur);
      if (it == greater.end()) continue;
      for (const auto& nxt : it->second) {
        if (nxt == to) return true;
        if (seen.insert(nxt).second) stack.push_back(nxt);
      }
    }
    return false;
  };
  if (reaches(a, c)) return std::string(">");
  if (reaches(c, a)) return std::string("<");
  return std::nullopt;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error(ErrorKind::kFormat, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
  auto it = index_.find(std::string(kEosToken));
  if (it == index_.end()) throw Error(ErrorKind::kFormat, "vocabulary lacks the EOS token");
  eos_ = it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorKind::kTokenOutOfRange, "token id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Tokens Vocabulary::encode(const Words& words) const {
  Tokens out;
  out.reserve(words.size());
  for (const auto& w : words) {
    auto id = find(w);
    if (!id) throw Error(ErrorKind::kTokenOutOfRange, "unknown word '" + w + "'");
    out.push_back(*id);
  }
  return out;
}

Words Vocabulary::decode(const Tokens& ids) const {
  Words out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.push_back(token(id));
  return out;
}

Vocabulary build_vocabulary(const CorpusBundle& b) {
  std::set<std::string> all;
  for (const auto& r : relations()) {
    for (const auto& t : r.templates) {
      for (const auto& w : t) {
        if (w != kSubjectSlot) all.insert(w);
      }
    }
  }
  auto add_facts = [&](const std::vector<FactTriple>& facts) {
    for (const auto& f : facts) {
      for (auto& part : subject_words(f.subject)) all.insert(std::move(part));
      all.insert(f.object);
    }
  };
  add_facts(b.facts_train);
  add_facts(b.paraphrase_eval);
  for (std::size_t r = 0; r < relations().size(); ++r) {
    for (std::size_t k = 0; k < b.config.objects_per_relation; ++k) {
      all.insert(object_token(b.config, r, k));
    }
  }
  for (std::size_t s = 0; s < b.config.n_symbols; ++s) all.insert(std::string(1, static_cast<char>('A' + s)));
  for (const char* p : {">", "<", ",", ";", "?"}) all.insert(p);
  for (const auto* texts : {&b.filler_texts, &b.filler_eval}) {
    for (const auto& t : *texts) all.insert(t.begin(), t.end());
  }
  all.erase(std::string(kEosToken));
  std::vector<std::string> tokens{std::string(kEosToken)};
  tokens.insert(tokens.end(), all.begin(), all.end());
  return Vocabulary(std::move(tokens));
}

}  // namespace kwash::corpus
