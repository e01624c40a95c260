#include "kwash/evalsuite.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>

#include "kwash/error.hpp"

namespace kwash::eval {

using corpus::FactTriple;
using corpus::RenderMode;
using corpus::Words;

namespace {

std::vector<int> templates_of(const FactTriple& f, Templates t) {
  return t == Templates::kTraining ? f.template_ids : std::vector<int>{corpus::kParaphraseTemplate};
}

std::string join(const Words& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

template <typename F>
double mean_over_renderings(const std::vector<FactTriple>& facts, Templates t, F&& score) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& f : facts) {
    for (int tid : templates_of(f, t)) {
      total += score(f, tid);
      ++n;
    }
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace

std::vector<std::string> normalize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || (std::ispunct(c) && ch != '_')) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double qa_f1_pair(std::string_view prediction, std::string_view gold) {
  const auto p = normalize(prediction);
  const auto g = normalize(gold);
  if (p.empty() || g.empty()) return 0.0;
  std::map<std::string, std::size_t> counts;
  for (const auto& w : g) ++counts[w];
  std::size_t overlap = 0;
  for (const auto& w : p) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

bool contains_answer(std::string_view prediction, std::string_view gold) {
  const auto p = normalize(prediction);
  const auto g = normalize(gold);
  if (g.empty()) return false;
  return std::search(p.begin(), p.end(), g.begin(), g.end()) != p.end();
}

std::string continuation(const lm::ModelCheckpoint& model, const Words& prompt, std::size_t n) {
  const auto& vocab = model.vocab();
  const auto ids = lm::generate_greedy(model, vocab.encode(prompt), n);
  Words words;
  for (auto id : ids) {
    if (id == vocab.eos()) break;
    words.push_back(vocab.token(id));
  }
  return join(words);
}

double fact_accuracy(const lm::ModelCheckpoint& model, const std::vector<FactTriple>& facts,
                     Templates templates) {
  return mean_over_renderings(facts, templates, [&](const FactTriple& f, int tid) {
    const auto text = continuation(model, corpus::render(f, tid, RenderMode::kPrompt));
    return contains_answer(text, f.object) ? 1.0 : 0.0;
  });
}

double fact_qa_f1(const lm::ModelCheckpoint& model, const std::vector<FactTriple>& facts,
                  Templates templates) {
  return mean_over_renderings(facts, templates, [&](const FactTriple& f, int tid) {
    return qa_f1_pair(continuation(model, corpus::render(f, tid, RenderMode::kPrompt)), f.object);
  });
}

bool fact_known(const lm::ModelCheckpoint& model, const FactTriple& fact) {
  for (int tid : fact.template_ids) {
    const auto text = continuation(model, corpus::render(fact, tid, RenderMode::kPrompt));
    if (contains_answer(text, fact.object)) return true;
  }
  return false;
}

double reasoning_accuracy(const lm::ModelCheckpoint& model,
                          const std::vector<corpus::ReasoningItem>& items) {
  if (items.empty()) return 0.0;
  const auto& vocab = model.vocab();
  const auto gt = vocab.find(">");
  const auto lt = vocab.find("<");
  if (!gt || !lt) throw Error(ErrorKind::kVocabMismatch, "vocabulary lacks comparators");
  std::size_t correct = 0;
  for (const auto& item : items) {
    const auto prompt = vocab.encode(item.prompt());
    lm::Decoder dec(model);
    std::span<const double> logits;
    for (auto t : prompt) logits = dec.step(t);
    const auto gi = static_cast<std::size_t>(*gt);
    const auto li = static_cast<std::size_t>(*lt);
    // Ties go to the lower id, as in greedy decoding.
    const bool pick_gt = logits[gi] > logits[li] || (logits[gi] == logits[li] && gi < li);
    if ((pick_gt ? ">" : "<") == item.answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

double fluency(const lm::ModelCheckpoint& model, const std::vector<Words>& texts) {
  std::vector<corpus::Tokens> tokens;
  tokens.reserve(texts.size());
  for (const auto& t : texts) tokens.push_back(model.vocab().encode(t));
  return lm::log_perplexity(model, tokens);
}

Metrics measure(const lm::ModelCheckpoint& model, const corpus::CorpusBundle& corpus) {
  Metrics m;
  m.washed_acc = fact_accuracy(model, corpus.facts_wash);
  m.washed_qaf1 = fact_qa_f1(model, corpus.facts_wash);
  m.retained_acc = fact_accuracy(model, corpus.facts_retain);
  m.neighborhood_qaf1 = fact_qa_f1(model, corpus.facts_neighborhood);
  m.paraphrase_acc = fact_accuracy(model, corpus.paraphrase_eval, Templates::kParaphrase);
  m.reasoning_acc = reasoning_accuracy(model, corpus.reasoning_eval);
  m.fluency_log_ppl = corpus.filler_eval.empty() ? 0.0 : fluency(model, corpus.filler_eval);
  return m;
}

WashReport full_report(const Metrics& before, const lm::ModelCheckpoint& after,
                       const corpus::CorpusBundle& corpus, std::string method) {
  WashReport r;
  r.method = std::move(method);
  r.before = before;
  r.after = measure(after, corpus);
  r.counts = Counts{corpus.facts_wash.size(),       corpus.facts_retain.size(),
                    corpus.facts_neighborhood.size(), corpus.paraphrase_eval.size(),
                    corpus.reasoning_eval.size(),     corpus.filler_eval.size()};
  return r;
}

WashReport full_report(const lm::ModelCheckpoint& before, const lm::ModelCheckpoint& after,
                       const corpus::CorpusBundle& corpus, std::string method) {
  if (!(before.vocab() == after.vocab())) {
    throw Error(ErrorKind::kVocabMismatch, "checkpoints use different vocabularies");
  }
  return full_report(measure(before, corpus), after, corpus, std::move(method));
}

std::string to_table(const WashReport& r) {
  struct Row {
    const char* name;
    double before, after;
  };
  const Row rows[] = {
      {"washed_acc", r.before.washed_acc, r.after.washed_acc},
      {"washed_qaf1", r.before.washed_qaf1, r.after.washed_qaf1},
      {"retained_acc", r.before.retained_acc, r.after.retained_acc},
      {"neighborhood_qaf1", r.before.neighborhood_qaf1, r.after.neighborhood_qaf1},
      {"paraphrase_acc", r.before.paraphrase_acc, r.after.paraphrase_acc},
      {"reasoning_acc (synthetic probe)", r.before.reasoning_acc, r.after.reasoning_acc},
      {"fluency_log_ppl", r.before.fluency_log_ppl, r.after.fluency_log_ppl},
  };
  std::string out = "method: " + r.method + "\n";
  char line[128];
  std::snprintf(line, sizeof line, "%-32s %10s %10s\n", "metric", "before", "after");
  out += line;
  for (const auto& row : rows) {
    std::snprintf(line, sizeof line, "%-32s %10.4f %10.4f\n", row.name, row.before, row.after);
    out += line;
  }
  std::snprintf(line, sizeof line,
                "counts: washed %zu, retained %zu, neighborhood %zu, paraphrase %zu, "
                "reasoning %zu, fluency %zu\n",
                r.counts.washed, r.counts.retained, r.counts.neighborhood, r.counts.paraphrase,
                r.counts.reasoning, r.counts.fluency_texts);
  out += line;
  return out;
}

std::string to_jsonl(const WashReport& r) {
  using nlohmann::json;
  json counts{{"washed", r.counts.washed},
              {"retained", r.counts.retained},
              {"neighborhood", r.counts.neighborhood},
              {"paraphrase", r.counts.paraphrase},
              {"reasoning", r.counts.reasoning},
              {"fluency_texts", r.counts.fluency_texts}};
  std::string out;
  for (const auto& [stage, m] : {std::pair{"before", &r.before}, std::pair{"after", &r.after}}) {
    json j{{"method", r.method},
           {"stage", stage},
           {"washed_acc", m->washed_acc},
           {"washed_qaf1", m->washed_qaf1},
           {"retained_acc", m->retained_acc},
           {"neighborhood_qaf1", m->neighborhood_qaf1},
           {"paraphrase_acc", m->paraphrase_acc},
           {"reasoning_acc", m->reasoning_acc},
           {"fluency_log_ppl", m->fluency_log_ppl},
           {"counts", counts}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace kwash::eval
