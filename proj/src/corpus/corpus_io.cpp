#include <json.hpp>

#include <string>

#include "kwash/corpus.hpp"
#include "kwash/error.hpp"
#include "kwash/io.hpp"

namespace kwash::corpus {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json fact_to_json(const FactTriple& f) {
  return json{{"subject", f.subject},
              {"relation", f.relation},
              {"object", f.object},
              {"template_ids", f.template_ids}};
}

FactTriple fact_from_json(const json& j) {
  try {
    return FactTriple{j.at("subject").get<std::string>(), j.at("relation").get<std::string>(),
                      j.at("object").get<std::string>(),
                      j.at("template_ids").get<std::vector<int>>()};
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("fact record: ") + e.what());
  }
}

json reasoning_to_json(const ReasoningItem& r) {
  return json{{"premise", r.premise}, {"query", r.query}, {"answer", r.answer}};
}

ReasoningItem reasoning_from_json(const json& j) {
  try {
    return ReasoningItem{j.at("premise").get<Words>(), j.at("query").get<Words>(),
                         j.at("answer").get<std::string>()};
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("reasoning record: ") + e.what());
  }
}

json config_to_json(const CorpusConfig& c) {
  return json{{"wash_fraction", c.wash_fraction},
              {"n_neighborhood", c.n_neighborhood},
              {"n_reasoning_train", c.n_reasoning_train},
              {"n_filler_train", c.n_filler_train},
              {"n_filler_eval", c.n_filler_eval},
              {"filler_min_len", c.filler_min_len},
              {"filler_max_len", c.filler_max_len},
              {"n_filler_words", c.n_filler_words},
              {"filler_branching", c.filler_branching},
              {"objects_per_relation", c.objects_per_relation},
              {"relations_per_subject", c.relations_per_subject},
              {"split_by_subject", c.split_by_subject},
              {"shared_objects", c.shared_objects},
              {"name_pool", c.name_pool},
              {"n_symbols", c.n_symbols},
              {"min_chain", c.min_chain},
              {"max_chain", c.max_chain},
              {"endpoint_queries", c.endpoint_queries}};
}

CorpusConfig config_from_json(const json& j) {
  CorpusConfig c;
  c.wash_fraction = j.at("wash_fraction").get<double>();
  c.n_neighborhood = j.at("n_neighborhood").get<std::size_t>();
  c.n_reasoning_train = j.at("n_reasoning_train").get<std::size_t>();
  c.n_filler_train = j.at("n_filler_train").get<std::size_t>();
  c.n_filler_eval = j.at("n_filler_eval").get<std::size_t>();
  c.filler_min_len = j.at("filler_min_len").get<std::size_t>();
  c.filler_max_len = j.at("filler_max_len").get<std::size_t>();
  c.n_filler_words = j.at("n_filler_words").get<std::size_t>();
  c.filler_branching = j.at("filler_branching").get<std::size_t>();
  c.objects_per_relation = j.at("objects_per_relation").get<std::size_t>();
  c.relations_per_subject = j.at("relations_per_subject").get<std::size_t>();
  c.split_by_subject = j.at("split_by_subject").get<bool>();
  c.shared_objects = j.at("shared_objects").get<bool>();
  c.name_pool = j.at("name_pool").get<std::size_t>();
  c.n_symbols = j.at("n_symbols").get<std::size_t>();
  c.min_chain = j.at("min_chain").get<std::size_t>();
  c.max_chain = j.at("max_chain").get<std::size_t>();
  c.endpoint_queries = j.at("endpoint_queries").get<bool>();
  return c;
}

template <typename T, typename F>
std::string to_jsonl(const std::vector<T>& items, F&& convert) {
  std::string out;
  for (const auto& item : items) {
    out += convert(item).dump();
    out += '\n';
  }
  return out;
}

template <typename T, typename F>
std::vector<T> from_jsonl(const std::filesystem::path& file, F&& convert) {
  std::vector<T> out;
  for (const auto& line : io::read_lines(file)) {
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kFormat, file.string() + ": " + e.what());
    }
    out.push_back(convert(j));
  }
  return out;
}

json words_to_json(const Words& w) { return json(w); }
Words words_from_json(const json& j) { return j.get<Words>(); }

}  // namespace

std::string config_to_json_text(const CorpusConfig& config) { return config_to_json(config).dump(); }

CorpusConfig config_from_json_text(std::string_view text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("corpus config: ") + e.what());
  }
}

void save_facts(const std::vector<FactTriple>& facts, const std::filesystem::path& file) {
  io::write_atomic(file, to_jsonl(facts, fact_to_json));
}

std::vector<FactTriple> load_facts(const std::filesystem::path& file) {
  return from_jsonl<FactTriple>(file, fact_from_json);
}

void save_bundle(const CorpusBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_facts(b.facts_train, dir / "facts_train.jsonl");
  save_facts(b.facts_wash, dir / "facts_wash.jsonl");
  save_facts(b.facts_retain, dir / "facts_retain.jsonl");
  save_facts(b.facts_neighborhood, dir / "facts_neighborhood.jsonl");
  save_facts(b.paraphrase_eval, dir / "paraphrase_eval.jsonl");
  io::write_atomic(dir / "reasoning_train.jsonl", to_jsonl(b.reasoning_train, reasoning_to_json));
  io::write_atomic(dir / "reasoning_eval.jsonl", to_jsonl(b.reasoning_eval, reasoning_to_json));
  io::write_atomic(dir / "filler_train.jsonl", to_jsonl(b.filler_texts, words_to_json));
  io::write_atomic(dir / "filler_eval.jsonl", to_jsonl(b.filler_eval, words_to_json));
  json manifest{{"format", "kwash-corpus"},
                {"version", kFormatVersion},
                {"seed", b.seed},
                {"n_facts", b.facts_wash.size() + b.facts_retain.size()},
                {"n_reasoning", b.reasoning_eval.size()},
                {"config", config_to_json(b.config)},
                {"splits",
                 {{"facts_train", b.facts_train.size()},
                  {"facts_wash", b.facts_wash.size()},
                  {"facts_retain", b.facts_retain.size()},
                  {"facts_neighborhood", b.facts_neighborhood.size()},
                  {"paraphrase_eval", b.paraphrase_eval.size()},
                  {"reasoning_train", b.reasoning_train.size()},
                  {"reasoning_eval", b.reasoning_eval.size()},
                  {"filler_train", b.filler_texts.size()},
                  {"filler_eval", b.filler_eval.size()}}}};
  // Manifest last: its presence marks a complete bundle.
  io::write_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

CorpusBundle load_bundle(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw Error(ErrorKind::kIo, "no corpus manifest in " + dir.string());
  }
  json manifest;
  try {
    manifest = json::parse(io::read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("corpus manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "kwash-corpus") {
    throw Error(ErrorKind::kFormat, "not a corpus manifest: " + dir.string());
  }
  CorpusBundle b;
  try {
    b.seed = manifest.at("seed").get<std::uint64_t>();
    b.config = config_from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("corpus manifest: ") + e.what());
  }
  b.facts_train = load_facts(dir / "facts_train.jsonl");
  b.facts_wash = load_facts(dir / "facts_wash.jsonl");
  b.facts_retain = load_facts(dir / "facts_retain.jsonl");
  b.facts_neighborhood = load_facts(dir / "facts_neighborhood.jsonl");
  b.paraphrase_eval = load_facts(dir / "paraphrase_eval.jsonl");
  b.reasoning_train = from_jsonl<ReasoningItem>(dir / "reasoning_train.jsonl", reasoning_from_json);
  b.reasoning_eval = from_jsonl<ReasoningItem>(dir / "reasoning_eval.jsonl", reasoning_from_json);
  b.filler_texts = from_jsonl<Words>(dir / "filler_train.jsonl", words_from_json);
  b.filler_eval = from_jsonl<Words>(dir / "filler_eval.jsonl", words_from_json);
  validate(b);
  return b;
}

}  // namespace kwash::corpus
