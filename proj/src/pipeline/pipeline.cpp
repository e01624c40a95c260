#include "kwash/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

#include "kwash/error.hpp"
#include "kwash/io.hpp"

#ifndef KWASH_CODE_VERSION
#define KWASH_CODE_VERSION "unknown"
#endif

namespace kwash::pipeline {

using nlohmann::json;

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kLaw: return "law";
    case Method::kMemit: return "memit";
    case Method::kFt: return "ft";
    case Method::kFtUl: return "ft-ul";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::kLaw, Method::kMemit, Method::kFt, Method::kFtUl}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::kUsage, "unknown method '" + std::string(name) +
                                     "' (expected law, memit, ft or ft-ul)");
}

std::string_view to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kBeta: return "beta";
    case AblationAxis::kInit: return "init";
    case AblationAxis::kSuccessiveElimination: return "se";
  }
  return "?";
}

AblationAxis parse_axis(std::string_view name) {
  for (auto a : {AblationAxis::kBeta, AblationAxis::kInit, AblationAxis::kSuccessiveElimination}) {
    if (to_string(a) == name) return a;
  }
  throw Error(ErrorKind::kUsage,
              "unknown ablation axis '" + std::string(name) + "' (expected beta, init or se)");
}

namespace {

json value_options_json(const memit::ValueOptions& v) {
  return json{{"max_steps", v.max_steps}, {"step_size", v.step_size}, {"decay", v.decay},
              {"penalty", v.penalty},     {"early_stop", v.early_stop}};
}

memit::ValueOptions value_options_from(const json& j) {
  memit::ValueOptions v;
  v.max_steps = j.at("max_steps").get<std::size_t>();
  v.step_size = j.at("step_size").get<double>();
  v.decay = j.at("decay").get<double>();
  v.penalty = j.at("penalty").get<double>();
  v.early_stop = j.at("early_stop").get<bool>();
  return v;
}

json settings_json(const WashSettings& s) {
  const auto& w = s.law;
  json law{{"lo", w.lo},
           {"hi", w.hi},
           {"beta_mode", w.beta.mode == law::BetaMode::kRelative ? "rel" : "const"},
           {"beta_value", w.beta.value},
           {"max_iters", w.optimize.max_iters},
           {"step", w.optimize.step},
           {"tolerance", w.optimize.tolerance},
           {"window", w.optimize.window},
           {"successive_elimination", w.successive_elimination},
           {"init", w.init == law::InitMode::kMemit ? "memit" : "random"},
           {"gamma", w.gamma ? json(*w.gamma) : json(nullptr)},
           {"seed", w.seed},
           {"ridge", w.ridge},
           {"random_init_scale", w.random_init_scale},
           {"values", value_options_json(w.value_options)}};
  json memit{{"lo", s.memit.lo},
             {"hi", s.memit.hi},
             {"ridge", s.memit.ridge},
             {"values", value_options_json(s.memit.value_options)}};
  const auto& st = s.stats;
  json stats{{"source", st.source == kv::StatsSource::kMixture ? "mixture" : "filler"},
             {"draw",
              {{"facts", st.draw.facts},
               {"reasoning", st.draw.reasoning},
               {"filler", st.draw.filler},
               {"n_texts", st.draw.n_texts},
               {"seed", st.draw.seed}}},
             {"n_samples", st.n_samples},
             {"seed", st.seed},
             {"lambda", st.lambda ? json(*st.lambda) : json(nullptr)}};
  return json{{"method", std::string(to_string(s.method))},
              {"law", law},
              {"memit", memit},
              {"finetune", json::parse(train::to_json(s.finetune))},
              {"stats", stats}};
}

WashSettings settings_from(const json& j) {
  WashSettings s;
  s.method = parse_method(j.at("method").get<std::string>());
  const auto& l = j.at("law");
  auto& w = s.law;
  w.lo = l.at("lo").get<std::size_t>();
  w.hi = l.at("hi").get<std::size_t>();
  w.beta.mode = l.at("beta_mode").get<std::string>() == "rel" ? law::BetaMode::kRelative
                                                              : law::BetaMode::kConstant;
  w.beta.value = l.at("beta_value").get<double>();
  w.optimize.max_iters = l.at("max_iters").get<std::size_t>();
  w.optimize.step = l.at("step").get<double>();
  w.optimize.tolerance = l.at("tolerance").get<double>();
  w.optimize.window = l.at("window").get<std::size_t>();
  w.successive_elimination = l.at("successive_elimination").get<bool>();
  w.init = l.at("init").get<std::string>() == "memit" ? law::InitMode::kMemit
                                                      : law::InitMode::kRandom;
  if (!l.at("gamma").is_null()) w.gamma = l.at("gamma").get<double>();
  w.seed = l.at("seed").get<std::uint64_t>();
  w.ridge = l.at("ridge").get<double>();
  w.random_init_scale = l.at("random_init_scale").get<double>();
  w.value_options = value_options_from(l.at("values"));
  const auto& m = j.at("memit");
  s.memit.lo = m.at("lo").get<std::size_t>();
  s.memit.hi = m.at("hi").get<std::size_t>();
  s.memit.ridge = m.at("ridge").get<double>();
  s.memit.value_options = value_options_from(m.at("values"));
  s.finetune = train::train_config_from_json(j.at("finetune").dump());
  const auto& st = j.at("stats");
  s.stats.source =
      st.at("source").get<std::string>() == "mixture" ? kv::StatsSource::kMixture
                                                      : kv::StatsSource::kFiller;
  const auto& d = st.at("draw");
  s.stats.draw.facts = d.at("facts").get<double>();
  s.stats.draw.reasoning = d.at("reasoning").get<double>();
  s.stats.draw.filler = d.at("filler").get<double>();
  s.stats.draw.n_texts = d.at("n_texts").get<std::size_t>();
  s.stats.draw.seed = d.at("seed").get<std::uint64_t>();
  s.stats.n_samples = st.at("n_samples").get<std::size_t>();
  s.stats.seed = st.at("seed").get<std::uint64_t>();
  if (!st.at("lambda").is_null()) s.stats.lambda = st.at("lambda").get<double>();
  s.law.validate();
  return s;
}

template <typename F>
auto parse_with(std::string_view text, std::string_view what, F&& f) {
  try {
    return f(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string to_json(const WashSettings& settings) { return settings_json(settings).dump(); }

WashSettings wash_settings_from_json(std::string_view text) {
  return parse_with(text, "wash settings", settings_from);
}

std::string to_json(const ExperimentConfig& c) {
  json j{{"corpus",
          {{"seed", c.corpus.seed},
           {"n_facts", c.corpus.n_facts},
           {"n_reasoning", c.corpus.n_reasoning},
           {"config", json::parse(corpus::config_to_json_text(c.corpus.config))}}},
         {"train", json::parse(train::to_json(c.train))},
         {"wash", settings_json(c.wash)}};
  return j.dump();
}

ExperimentConfig experiment_from_json(std::string_view text) {
  return parse_with(text, "experiment config", [](const json& j) {
    ExperimentConfig c;
    const auto& cj = j.at("corpus");
    c.corpus.seed = cj.at("seed").get<std::uint64_t>();
    c.corpus.n_facts = cj.at("n_facts").get<std::size_t>();
    c.corpus.n_reasoning = cj.at("n_reasoning").get<std::size_t>();
    c.corpus.config = corpus::config_from_json_text(cj.at("config").dump());
    c.train = train::train_config_from_json(j.at("train").dump());
    c.wash = settings_from(j.at("wash"));
    return c;
  });
}

std::string config_hash(std::string_view canonical_json) {
  return io::hex32(io::crc32(canonical_json));
}

std::string_view code_version() { return KWASH_CODE_VERSION; }

corpus::CorpusBundle make_corpus(const CorpusSpec& spec) {
  return corpus::generate(spec.seed, spec.n_facts, spec.n_reasoning, spec.config);
}

std::vector<std::size_t> edited_layers(const WashSettings& settings) {
  std::size_t lo = 0, hi = 0;
  switch (settings.method) {
    case Method::kLaw: lo = settings.law.lo; hi = settings.law.hi; break;
    case Method::kMemit: lo = settings.memit.lo; hi = settings.memit.hi; break;
    default: return {};
  }
  if (lo > hi) throw Error(ErrorKind::kConfig, "layer range lo > hi");
  std::vector<std::size_t> out;
  for (std::size_t l = lo; l <= hi; ++l) out.push_back(l);
  return out;
}

std::vector<kv::KeyStats> build_key_stats(const lm::ModelCheckpoint& model,
                                          const corpus::CorpusBundle& corpus,
                                          const StatsConfig& config,
                                          const std::vector<std::size_t>& layers,
                                          std::size_t n_wash) {
  const double lambda = config.lambda ? *config.lambda
                                      : std::max<double>(1.0, static_cast<double>(n_wash));
  const auto texts = kv::stats_texts(corpus, model.vocab(), config.source, config.draw);
  std::vector<kv::KeyStats> out;
  for (std::size_t l : layers) {
    out.push_back(kv::estimate_key_stats(model, texts, l, config.n_samples, config.seed, lambda));
  }
  return out;
}

WashOutcome run_wash(const lm::ModelCheckpoint& model, const corpus::CorpusBundle& corpus,
                     const std::vector<corpus::FactTriple>& facts,
                     const WashSettings& settings, const eval::Metrics* before) {
  const eval::Metrics pre = before ? *before : eval::measure(model, corpus);
  WashOutcome out;
  out.model = model;
  const auto layers = edited_layers(settings);
  if (layers.size() > 0 && layers.back() >= model.config().n_layers) {
    throw Error(ErrorKind::kConfig, "layer range exceeds model depth");
  }
  switch (settings.method) {
    case Method::kLaw: {
      const auto stats = build_key_stats(model, corpus, settings.stats, layers, facts.size());
      auto r = law::successive_wash(out.model, facts, settings.law, stats);
      out.trace = std::move(r.trace);
      out.deltas = std::move(r.deltas);
      break;
    }
    case Method::kMemit: {
      if (facts.empty()) break;
      const auto stats = build_key_stats(model, corpus, settings.stats, layers, facts.size());
      auto requests = memit::eos_requests(facts, model.vocab());
      out.deltas = memit::spread_edit(out.model, requests, stats, settings.memit);
      break;
    }
    case Method::kFt:
      if (facts.empty()) break;
      out.model = train::finetune_eos(model, facts, settings.finetune, &out.train_log);
      break;
    case Method::kFtUl:
      if (facts.empty()) break;
      out.model = train::finetune_reverse(model, facts, settings.finetune, &out.train_log);
      break;
  }
  out.model.round_to_storage();
  out.report = eval::full_report(pre, out.model, corpus, std::string(to_string(settings.method)));
  return out;
}

std::vector<AblationPoint> run_ablation(const lm::ModelCheckpoint& model,
                                        const corpus::CorpusBundle& corpus,
                                        const WashSettings& settings, const AblationSpec& spec) {
  struct Variant {
    std::string label;
    WashSettings settings;
  };
  std::vector<Variant> variants;
  WashSettings base = settings;
  base.method = Method::kLaw;
  char buf[64];
  switch (spec.axis) {
    case AblationAxis::kBeta:
      for (double b : spec.betas) {
        Variant v{"", base};
        v.settings.law.beta = law::BetaPolicy{law::BetaMode::kRelative, b};
        std::snprintf(buf, sizeof buf, "beta=%g", b);
        v.label = buf;
        variants.push_back(std::move(v));
      }
      break;
    case AblationAxis::kInit:
      for (auto mode : {law::InitMode::kMemit, law::InitMode::kRandom}) {
        Variant v{mode == law::InitMode::kMemit ? "init=memit" : "init=random", base};
        v.settings.law.init = mode;
        variants.push_back(std::move(v));
      }
      break;
    case AblationAxis::kSuccessiveElimination:
      for (bool se : {true, false}) {
        Variant v{se ? "se=on" : "se=off", base};
        v.settings.law.successive_elimination = se;
        variants.push_back(std::move(v));
      }
      break;
  }

  std::vector<AblationPoint> points;
  for (std::uint64_t seed : spec.split_seeds) {
    const auto bundle = corpus::resplit(corpus, seed);
    const auto before = eval::measure(model, bundle);
    for (const auto& v : variants) {
      auto r = run_wash(model, bundle, bundle.facts_wash, v.settings, &before);
      r.report.method = "law " + v.label;
      points.push_back(AblationPoint{v.label, seed, std::move(r.report)});
    }
  }
  return points;
}

std::vector<AblationSummary> summarize(const std::vector<AblationPoint>& points) {
  std::vector<AblationSummary> out;
  for (const auto& p : points) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const AblationSummary& s) { return s.label == p.label; });
    if (it == out.end()) {
      out.push_back(AblationSummary{p.label});
      it = out.end() - 1;
    }
    it->washed_acc += p.report.after.washed_acc;
    it->retained_acc += p.report.after.retained_acc;
    it->reasoning_acc += p.report.after.reasoning_acc;
    it->fluency_log_ppl += p.report.after.fluency_log_ppl;
    ++it->runs;
  }
  for (auto& s : out) {
    const double n = static_cast<double>(s.runs);
    s.washed_acc /= n;
    s.retained_acc /= n;
    s.reasoning_acc /= n;
    s.fluency_log_ppl /= n;
  }
  return out;
}

std::string to_table(const std::vector<AblationSummary>& summary) {
  std::string out = "setting        runs  washed_acc  retained_acc  reasoning_acc  fluency_log_ppl\n";
  char line[160];
  for (const auto& s : summary) {
    std::snprintf(line, sizeof line, "%-14s %4zu  %10.4f  %12.4f  %13.4f  %15.4f\n",
                  s.label.c_str(), s.runs, s.washed_acc, s.retained_acc, s.reasoning_acc,
                  s.fluency_log_ppl);
    out += line;
  }
  return out;
}

std::string to_json(const RunManifest& m) {
  json j{{"format", "kwash-run"},
         {"command", m.command},
         {"args", m.args},
         {"config", m.config_json.empty() ? json(nullptr) : json::parse(m.config_json)},
         {"code_version", m.code_version},
         {"inputs", m.inputs},
         {"outputs", m.outputs}};
  return j.dump(2);
}

RunManifest manifest_from_json(std::string_view text) {
  return parse_with(text, "run manifest", [](const json& j) {
    if (j.value("format", "") != "kwash-run") {
      throw Error(ErrorKind::kFormat, "not a run manifest");
    }
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.args = j.at("args").get<std::vector<std::string>>();
    if (!j.at("config").is_null()) m.config_json = j.at("config").dump();
    m.code_version = j.at("code_version").get<std::string>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    return m;
  });
}

}  // namespace kwash::pipeline
