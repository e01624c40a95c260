#include "kwash/kv_memory.hpp"

#include <json.hpp>

#include <algorithm>

#include "kwash/container.hpp"
#include "kwash/error.hpp"
#include "kwash/kernels.hpp"
#include "kwash/random.hpp"

namespace kwash::kv {

using numerics::Matrix;

Matrix KeyStats::scaled() const {
  Matrix m = c0.matrix();
  m *= lambda;
  return m;
}

std::vector<corpus::Tokens> stats_texts(const corpus::CorpusBundle& corpus,
                                        const corpus::Vocabulary& vocab, StatsSource source,
                                        const MixtureDraw& draw) {
  auto encode = [&](const corpus::Words& words) {
    auto t = vocab.encode(words);
    t.push_back(vocab.eos());
    return t;
  };
  std::vector<corpus::Tokens> filler;
  for (const auto& text : corpus.filler_texts) filler.push_back(encode(text));
  if (source == StatsSource::kFiller) return filler;

  std::vector<corpus::Tokens> facts, reasoning;
  for (const auto* split : {&corpus.facts_retain, &corpus.facts_neighborhood}) {
    for (const auto& f : *split) {
      for (int tid : f.template_ids) {
        facts.push_back(encode(corpus::render(f, tid, corpus::RenderMode::kFull)));
      }
    }
  }
  for (const auto& item : corpus.reasoning_train) {
    auto w = item.prompt();
    w.push_back(item.answer);
    reasoning.push_back(encode(w));
  }
  const std::vector<corpus::Tokens>* pools[] = {&facts, &reasoning, &filler};
  double weights[] = {draw.facts, draw.reasoning, draw.filler};
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    if (pools[i]->empty()) weights[i] = 0.0;
    if (weights[i] < 0.0) throw Error(ErrorKind::kConfig, "mixture weights must be >= 0");
    total += weights[i];
  }
  if (!(total > 0.0)) throw Error(ErrorKind::kInsufficientData, "no texts for key statistics");
  Rng rng(draw.seed);
  std::vector<corpus::Tokens> out;
  out.reserve(draw.n_texts);
  for (std::size_t n = 0; n < draw.n_texts; ++n) {
    double u = rng.uniform() * total;
    int src = 0;
    while (src < 2 && (u >= weights[src] || weights[src] == 0.0)) u -= weights[src++];
    out.push_back((*pools[src])[rng.index(pools[src]->size())]);
  }
  return out;
}

KeyStats key_stats_at(const lm::ModelCheckpoint& model, const std::vector<corpus::Tokens>& texts,
                      std::size_t layer, std::vector<Position> positions, double lambda) {
  if (positions.empty()) throw Error(ErrorKind::kInsufficientData, "no key positions");
  if (!(lambda > 0.0)) throw Error(ErrorKind::kConfig, "lambda must be > 0");
  const std::size_t F = model.config().d_mlp;
  std::sort(positions.begin(), positions.end());
  std::vector<double> acc(F * F, 0.0);
  std::vector<double> keys;
  std::size_t i = 0;
  while (i < positions.size()) {
    const std::size_t text = positions[i].text;
    if (text >= texts.size()) throw Error(ErrorKind::kShapeMismatch, "position outside texts");
    const auto all = lm::extract_keys_all_positions(model, texts[text], layer);
    keys.clear();
    std::size_t rows = 0;
    for (; i < positions.size() && positions[i].text == text; ++i, ++rows) {
      const auto row = all.row(positions[i].pos);
      keys.insert(keys.end(), row.begin(), row.end());
    }
    kernels::parallel::gemm_tn(keys, keys, acc, F, F, rows, true);
  }
  const double inv = 1.0 / static_cast<double>(positions.size());
  Matrix c0(F, F);
  for (std::size_t r = 0; r < F; ++r) {
    for (std::size_t c = 0; c < F; ++c) c0(r, c) = 0.5 * (acc[r * F + c] + acc[c * F + r]) * inv;
  }
  return KeyStats{layer, numerics::SymmetricPSD(std::move(c0)), positions.size(), lambda};
}

KeyStats estimate_key_stats(const lm::ModelCheckpoint& model,
                            const std::vector<corpus::Tokens>& texts, std::size_t layer,
                            std::size_t n_samples, std::uint64_t seed, double lambda) {
  if (n_samples == 0) throw Error(ErrorKind::kInsufficientData, "n_samples must be >= 1");
  std::vector<Position> all;
  for (std::size_t t = 0; t < texts.size(); ++t) {
    for (std::size_t p = 1; p < texts[t].size(); ++p) all.push_back({t, p});
  }
  if (all.size() < n_samples) {
    throw Error(ErrorKind::kInsufficientData,
                "need " + std::to_string(n_samples) + " key positions, text has " +
                    std::to_string(all.size()));
  }
  Rng rng(seed);
  // Partial Fisher-Yates: the first n_samples entries become the sample.
  for (std::size_t i = 0; i < n_samples; ++i) {
    std::swap(all[i], all[i + rng.index(all.size() - i)]);
  }
  all.resize(n_samples);
  return key_stats_at(model, texts, layer, std::move(all), lambda);
}

double delta_k_normsq(const Matrix& delta, const KeyStats& stats) {
  const std::size_t F = stats.c0.dim();
  if (delta.cols() != F) throw Error(ErrorKind::kShapeMismatch, "delta columns != d_mlp");
  const Matrix dc = numerics::matmul(delta, stats.c0.matrix());
  double s = 0.0;
  const auto a = dc.data();
  const auto b = delta.data();
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return std::max(0.0, stats.lambda * s);
}

double key_total_normsq(const KeyStats& stats) {
  return stats.lambda * numerics::trace(stats.c0.matrix());
}

void save_key_stats(const std::vector<KeyStats>& stats, const std::filesystem::path& file) {
  nlohmann::json layers = nlohmann::json::object();
  container::Contents c;
  c.kind = "key_stats";
  for (const auto& s : stats) {
    const std::string name = "C0.layer" + std::to_string(s.layer);
    layers[name] = {{"layer", s.layer}, {"lambda", s.lambda}, {"sample_count", s.sample_count}};
    const auto d = s.c0.matrix().data();
    c.tensors.push_back({name, s.c0.dim(), s.c0.dim(), std::vector<double>(d.begin(), d.end()), true});
  }
  c.meta_json = nlohmann::json{{"layers", layers}}.dump();
  container::write(file, c);
}

std::vector<KeyStats> load_key_stats(const std::filesystem::path& file) {
  const auto c = container::read(file);
  if (c.kind != "key_stats") throw Error(ErrorKind::kFormat, file.string() + " is not key stats");
  std::vector<KeyStats> out;
  try {
    const auto meta = nlohmann::json::parse(c.meta_json);
    for (const auto& t : c.tensors) {
      const auto& m = meta.at("layers").at(t.name);
      KeyStats s;
      s.layer = m.at("layer").get<std::size_t>();
      s.lambda = m.at("lambda").get<double>();
      s.sample_count = m.at("sample_count").get<std::size_t>();
      s.c0 = numerics::SymmetricPSD(Matrix(t.rows, t.cols, t.data));
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("key stats header: ") + e.what());
  }
  return out;
}

}  // namespace kwash::kv
