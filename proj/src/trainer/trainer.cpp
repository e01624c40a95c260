#include "kwash/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kwash/error.hpp"
#include "kwash/io.hpp"
#include "kwash/random.hpp"

namespace kwash::train {

using corpus::FactTriple;
using corpus::RenderMode;
using corpus::Tokens;
using lm::ModelCheckpoint;
using nlohmann::json;

namespace {

// Gradient shards are fixed so the reduction order, and therefore the result,
// does not depend on the number of threads.
constexpr std::size_t kShards = 8;

enum : std::uint64_t { kTagInit = 11, kTagBatches = 12, kTagFinetune = 13 };

// Loss on predicting tokens[t] for t in [first, last), scaled by `sign`.
struct Example {
  Tokens tokens;
  std::size_t first = 1;
  std::size_t last = 0;
  double sign = 1.0;
};

Example full_example(Tokens tokens) {
  Example e;
  e.last = tokens.size();
  e.tokens = std::move(tokens);
  return e;
}

Tokens with_eos(const corpus::Vocabulary& vocab, const corpus::Words& words) {
  Tokens t = vocab.encode(words);
  t.push_back(vocab.eos());
  return t;
}

class Optimizer {
 public:
  Optimizer(const ModelCheckpoint& model, const TrainConfig& cfg)
      : cfg_(cfg), m_(model.params().size(), 0.0), v_(model.params().size(), 0.0),
        decay_(model.params().size(), 1.0) {
    for (const auto& slot : model.layout().slots) {
      if (slot.rows == 1) {
        std::fill_n(decay_.begin() + static_cast<std::ptrdiff_t>(slot.offset), slot.size(), 0.0);
      }
    }
  }

  void step(std::span<double> params, std::span<double> grads, double lr) {
    ++t_;
    double norm_sq = 0.0;
    for (double g : grads) norm_sq += g * g;
    const double norm = std::sqrt(norm_sq);
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i] * clip;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      const double update = (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.adam_eps);
      params[i] -= lr * (update + cfg_.weight_decay * decay_[i] * params[i]);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<double> m_, v_, decay_;
  std::size_t t_ = 0;
};

double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  const auto warmup = static_cast<std::size_t>(cfg.warmup_fraction * static_cast<double>(total));
  if (step < warmup) {
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
  }
  const double progress = total > warmup ? static_cast<double>(step - warmup) /
                                               static_cast<double>(total - warmup)
                                         : 1.0;
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct Workspace {
  std::vector<double> grads;
  lm::Activations acts;
  std::vector<double> dlogits;
  std::vector<double> logp;
  double loss = 0.0;
};

// Accumulates gradients of the mean per-target loss over `batch` and returns
// that loss.
double batch_gradient(const ModelCheckpoint& model, const std::vector<const Example*>& batch,
                      std::vector<Workspace>& shards, std::span<double> grads) {
  const std::size_t V = model.config().vocab_size;
  std::size_t count = 0;
  for (const Example* e : batch) count += e->last - e->first;
  if (count == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(count);

#pragma omp parallel for schedule(static, 1)
  for (std::size_t s = 0; s < kShards; ++s) {
    auto& ws = shards[s];
    std::fill(ws.grads.begin(), ws.grads.end(), 0.0);
    ws.loss = 0.0;
    ws.logp.resize(V);
    for (std::size_t i = s; i < batch.size(); i += kShards) {
      const Example& e = *batch[i];
      const std::size_t T = e.tokens.size();
      lm::forward(model, e.tokens, {}, ws.acts);
      ws.dlogits.assign(T * V, 0.0);
      for (std::size_t t = e.first; t < e.last; ++t) {
        const auto row = std::span<const double>(ws.acts.logits).subspan((t - 1) * V, V);
        lm::log_softmax(row, ws.logp);
        const auto target = static_cast<std::size_t>(e.tokens[t]);
        ws.loss -= e.sign * ws.logp[target] * inv;
        double* d = ws.dlogits.data() + (t - 1) * V;
        for (std::size_t v = 0; v < V; ++v) d[v] = e.sign * std::exp(ws.logp[v]) * inv;
        d[target] -= e.sign * inv;
      }
      lm::backward(model, ws.acts, ws.dlogits, ws.grads);
    }
  }

  std::fill(grads.begin(), grads.end(), 0.0);
  double loss = 0.0;
  for (const auto& ws : shards) {
    loss += ws.loss;
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += ws.grads[i];
  }
  return loss;
}

class Loop {
 public:
  Loop(ModelCheckpoint& model, const TrainConfig& cfg)
      : model_(model), cfg_(cfg), opt_(model, cfg), grads_(model.params().size()),
        shards_(kShards) {
    for (auto& ws : shards_) ws.grads.assign(model.params().size(), 0.0);
  }

  double step(const std::vector<const Example*>& batch, std::size_t step, std::size_t total) {
    const double loss = batch_gradient(model_, batch, shards_, grads_);
    if (!std::isfinite(loss) || !numerics::all_finite(grads_)) {
      throw Error(ErrorKind::kDivergence,
                  "non-finite training loss at step " + std::to_string(step));
    }
    opt_.step(model_.params(), grads_, scheduled_lr(cfg_, step, total));
    return loss;
  }

 private:
  ModelCheckpoint& model_;
  const TrainConfig& cfg_;
  Optimizer opt_;
  std::vector<double> grads_;
  std::vector<Workspace> shards_;
};

// Cycles through a pool in seeded shuffled passes.
class Cycler {
 public:
  Cycler(std::size_t n, Rng& rng) : order_(n), rng_(rng) { reshuffle(); }
  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(std::span<std::size_t>(order_));
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

std::vector<Example> fact_examples(const corpus::Vocabulary& vocab,
                                   const std::vector<FactTriple>& facts, RenderMode mode) {
  std::vector<Example> out;
  for (const auto& f : facts) {
    for (int tid : f.template_ids) {
      if (mode == RenderMode::kFull) {
        out.push_back(full_example(with_eos(vocab, corpus::render(f, tid, mode))));
      } else {
        out.push_back(full_example(vocab.encode(corpus::render(f, tid, mode))));
      }
    }
  }
  return out;
}

ModelCheckpoint finetune(const ModelCheckpoint& model, const std::vector<Example>& examples,
                         const TrainConfig& config, std::vector<EpochRecord>* log) {
  config.validate();
  ModelCheckpoint out = model;
  if (examples.empty() || config.epochs == 0) return out;
  const std::size_t per_epoch = (examples.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  Rng rng(derive_seed(config.seed, kTagFinetune));
  Loop loop(out, config);
  std::vector<std::size_t> order(examples.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    double sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<const Example*> batch;
      for (std::size_t i = b * config.batch_size;
           i < std::min(order.size(), (b + 1) * config.batch_size); ++i) {
        batch.push_back(&examples[order[i]]);
      }
      sum += loop.step(batch, step++, total);
    }
    if (log) log->push_back({epoch, "train", sum / static_cast<double>(per_epoch)});
  }
  out.round_to_storage();
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfig, m); };
  if (!(learning_rate > 0.0)) fail("learning rate must be > 0");
  if (batch_size == 0) fail("batch size must be >= 1");
  if (mixture.facts < 0.0 || mixture.reasoning < 0.0 || mixture.filler < 0.0) {
    fail("mixture weights must be >= 0");
  }
  if (std::abs(mixture.facts + mixture.reasoning + mixture.filler - 1.0) > 1e-9) {
    fail("mixture weights must sum to 1");
  }
  if (clip_norm < 0.0 || weight_decay < 0.0) fail("clip norm and weight decay must be >= 0");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) fail("warmup fraction must be in [0,1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("bad Adam betas");
}

TrainConfig finetune_defaults() {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.epochs = 1;
  c.batch_size = 16;
  c.warmup_fraction = 0.0;
  c.mixture = Mixture{1.0, 0.0, 0.0};
  return c;
}

std::string to_json(const TrainConfig& c) {
  json j{{"model",
          {{"n_layers", c.model.n_layers},
           {"d_model", c.model.d_model},
           {"d_mlp", c.model.d_mlp},
           {"n_heads", c.model.n_heads},
           {"context", c.model.context}}},
         {"learning_rate", c.learning_rate},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"mixture",
          {{"facts", c.mixture.facts},
           {"reasoning", c.mixture.reasoning},
           {"filler", c.mixture.filler}}},
         {"seed", c.seed},
         {"clip_norm", c.clip_norm},
         {"weight_decay", c.weight_decay},
         {"warmup_fraction", c.warmup_fraction},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps}};
  return j.dump(2);
}

TrainConfig train_config_from_json(std::string_view text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.n_layers = m.value("n_layers", c.model.n_layers);
      c.model.d_model = m.value("d_model", c.model.d_model);
      c.model.d_mlp = m.value("d_mlp", c.model.d_mlp);
      c.model.n_heads = m.value("n_heads", c.model.n_heads);
      c.model.context = m.value("context", c.model.context);
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("mixture")) {
      const auto& m = j.at("mixture");
      c.mixture.facts = m.value("facts", c.mixture.facts);
      c.mixture.reasoning = m.value("reasoning", c.mixture.reasoning);
      c.mixture.filler = m.value("filler", c.mixture.filler);
    }
    c.seed = j.value("seed", c.seed);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& file) {
  return train_config_from_json(io::read_file(file));
}

std::string to_jsonl(const std::vector<EpochRecord>& log) {
  std::string out;
  for (const auto& r : log) {
    out += json{{"epoch", r.epoch}, {"split", r.split}, {"loss", r.loss}}.dump();
    out += '\n';
  }
  return out;
}

ModelCheckpoint pretrain(const corpus::CorpusBundle& corpus, const TrainConfig& config,
                         std::vector<EpochRecord>* log, const EpochHook& on_epoch) {
  config.validate();
  if (corpus.facts_train.empty()) throw Error(ErrorKind::kInsufficientData, "no training facts");
  auto vocab = corpus::build_vocabulary(corpus);
  lm::ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();

  std::vector<Example> facts = fact_examples(vocab, corpus.facts_train, RenderMode::kFull);
  std::vector<Example> reasoning;
  for (const auto& item : corpus.reasoning_train) {
    auto words = item.prompt();
    words.push_back(item.answer);
    reasoning.push_back(full_example(with_eos(vocab, words)));
  }
  std::vector<Example> filler;
  for (const auto& text : corpus.filler_texts) filler.push_back(full_example(with_eos(vocab, text)));
  for (const auto* pool : {&facts, &reasoning, &filler}) {
    for (const auto& e : *pool) {
      if (e.tokens.size() > mc.context) {
        throw Error(ErrorKind::kConfig, "training text longer than the model context");
      }
    }
  }

  Mixture mix = config.mixture;
  if (reasoning.empty()) mix.reasoning = 0.0;
  if (filler.empty()) mix.filler = 0.0;
  const double mix_total = mix.facts + mix.reasoning + mix.filler;
  const double fact_share = mix.facts / mix_total;
  const double per_batch_facts = std::max(1.0, fact_share * static_cast<double>(config.batch_size));
  const auto per_epoch = static_cast<std::size_t>(
      std::ceil(static_cast<double>(facts.size()) / per_batch_facts));
  const std::size_t total = per_epoch * config.epochs;

  ModelCheckpoint model = ModelCheckpoint::initialize(mc, vocab, derive_seed(config.seed, kTagInit));
  if (total == 0) {
    model.round_to_storage();
    return model;
  }
  Rng rng(derive_seed(config.seed, kTagBatches));
  Cycler fact_cycle(facts.size(), rng);
  Cycler reasoning_cycle(std::max<std::size_t>(reasoning.size(), 1), rng);
  Cycler filler_cycle(std::max<std::size_t>(filler.size(), 1), rng);
  Loop loop(model, config);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<const Example*> batch;
      for (std::size_t i = 0; i < config.batch_size; ++i) {
        const double u = rng.uniform() * mix_total;
        if (u < mix.facts) {
          batch.push_back(&facts[fact_cycle.next()]);
        } else if (u < mix.facts + mix.reasoning) {
          batch.push_back(&reasoning[reasoning_cycle.next()]);
        } else {
          batch.push_back(&filler[filler_cycle.next()]);
        }
      }
      sum += loop.step(batch, step++, total);
    }
    if (log) log->push_back({epoch, "train", sum / static_cast<double>(per_epoch)});
    if (on_epoch) on_epoch(epoch, model);
  }
  model.round_to_storage();
  return model;
}

ModelCheckpoint finetune_eos(const ModelCheckpoint& model, const std::vector<FactTriple>& facts,
                             const TrainConfig& config, std::vector<EpochRecord>* log) {
  return finetune(model, fact_examples(model.vocab(), facts, RenderMode::kEosFull), config, log);
}

ModelCheckpoint finetune_reverse(const ModelCheckpoint& model,
                                 const std::vector<FactTriple>& facts, const TrainConfig& config,
                                 std::vector<EpochRecord>* log) {
  std::vector<Example> examples;
  for (const auto& f : facts) {
    for (int tid : f.template_ids) {
      Example e;
      e.tokens = model.vocab().encode(corpus::render(f, tid, RenderMode::kFull));
      e.first = e.tokens.size() - 1;
      e.last = e.tokens.size();
      e.sign = -1.0;
      examples.push_back(std::move(e));
    }
  }
  return finetune(model, examples, config, log);
}

double mean_loss(const ModelCheckpoint& model, const std::vector<Tokens>& texts) {
  return lm::log_perplexity(model, texts);
}

double object_loss(const ModelCheckpoint& model, const std::vector<FactTriple>& facts) {
  const std::size_t V = model.config().vocab_size;
  std::vector<double> lp(V);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& f : facts) {
    for (int tid : f.template_ids) {
      const Tokens t = model.vocab().encode(corpus::render(f, tid, RenderMode::kFull));
      const auto logits = lm::forward_logits(model, t);
      lm::log_softmax(logits.row(t.size() - 2), lp);
      total -= lp[static_cast<std::size_t>(t.back())];
      ++count;
    }
  }
  if (count == 0) throw Error(ErrorKind::kInsufficientData, "no facts");
  return total / static_cast<double>(count);
}

}  // namespace kwash::train
