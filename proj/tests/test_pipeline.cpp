#include <doctest.h>

#include "kwash/error.hpp"
#include "kwash/pipeline.hpp"

using namespace kwash;
using namespace kwash::pipeline;

namespace {

train::TrainConfig small_train() {
  train::TrainConfig c;
  c.model.n_layers = 3;
  c.model.d_model = 16;
  c.model.d_mlp = 32;
  c.model.context = 32;
  c.epochs = 2;
  return c;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("method and axis names") {
  for (auto m : {Method::kLaw, Method::kMemit, Method::kFt, Method::kFtUl}) {
    CHECK(parse_method(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_method("rome"), Error);
  for (auto a : {AblationAxis::kBeta, AblationAxis::kInit, AblationAxis::kSuccessiveElimination}) {
    CHECK(parse_axis(to_string(a)) == a);
  }
  CHECK_THROWS_AS(parse_axis("gamma"), Error);
}

TEST_CASE("experiment config round trips through json") {
  ExperimentConfig c;
  c.corpus.seed = 11;
  c.train = small_train();
  c.wash.method = Method::kMemit;
  c.wash.law.beta = {law::BetaMode::kConstant, 0.25};
  c.wash.law.successive_elimination = false;
  c.wash.stats.lambda = 12.5;
  c.wash.stats.source = kv::StatsSource::kFiller;
  const auto text = to_json(c);
  const auto back = experiment_from_json(text);
  CHECK(to_json(back) == text);
  CHECK(back.corpus == c.corpus);
  CHECK(back.train == c.train);
  CHECK(back.wash.law.beta.value == 0.25);
  CHECK(*back.wash.stats.lambda == 12.5);
  CHECK(to_json(wash_settings_from_json(to_json(c.wash))) == to_json(c.wash));
  CHECK_THROWS_AS(experiment_from_json("{\"corpus\": 3}"), Error);
  CHECK_THROWS_AS(experiment_from_json("nope"), Error);
}

TEST_CASE("config hash is stable and content sensitive") {
  const auto a = config_hash("{\"a\":1}");
  CHECK(a.size() == 8);
  CHECK(config_hash("{\"a\":1}") == a);
  CHECK(config_hash("{\"a\":2}") != a);
  CHECK(!code_version().empty());
}

TEST_CASE("edited layers per method") {
  WashSettings s;
  CHECK(edited_layers(s) == std::vector<std::size_t>{1, 2});
  s.method = Method::kMemit;
  s.memit.lo = 0;
  CHECK(edited_layers(s) == std::vector<std::size_t>{0, 1, 2});
  s.method = Method::kFtUl;
  CHECK(edited_layers(s).empty());
}

TEST_CASE("washing nothing leaves the checkpoint unchanged") {
  CorpusSpec cs;
  cs.n_reasoning = 10;
  const auto bundle = make_corpus(cs);
  auto model = train::pretrain(bundle, small_train());
  model.round_to_storage();
  WashSettings s;
  s.stats.n_samples = 500;
  s.stats.draw.n_texts = 200;
  for (auto m : {Method::kLaw, Method::kMemit}) {
    s.method = m;
    const auto r = run_wash(model, bundle, {}, s);
    CHECK(r.model.checksum() == model.checksum());
    CHECK(r.report.before == r.report.after);
  }
}

TEST_CASE("key statistics use lambda = max(1, n_wash) by default") {
  CorpusSpec cs;
  cs.n_reasoning = 10;
  const auto bundle = make_corpus(cs);
  const auto model = train::pretrain(bundle, small_train());
  StatsConfig sc;
  sc.n_samples = 300;
  sc.draw.n_texts = 100;
  const auto stats = build_key_stats(model, bundle, sc, {1, 2}, 40);
  REQUIRE(stats.size() == 2);
  CHECK(stats[0].layer == 1);
  CHECK(stats[1].lambda == 40.0);
  CHECK(build_key_stats(model, bundle, sc, {1}, 0)[0].lambda == 1.0);
  sc.lambda = 3.0;
  CHECK(build_key_stats(model, bundle, sc, {1}, 40)[0].lambda == 3.0);
}

TEST_CASE("ablation summaries average over seeds") {
  eval::WashReport r1, r2;
  r1.after.washed_acc = 0.2;
  r2.after.washed_acc = 0.4;
  r1.after.retained_acc = 1.0;
  r2.after.retained_acc = 0.5;
  const std::vector<AblationPoint> pts{{"se=on", 1, r1}, {"se=off", 1, r1}, {"se=on", 2, r2}};
  const auto s = summarize(pts);
  REQUIRE(s.size() == 2);
  CHECK(s[0].label == "se=on");
  CHECK(s[0].runs == 2);
  CHECK(s[0].washed_acc == doctest::Approx(0.3));
  CHECK(s[0].retained_acc == doctest::Approx(0.75));
  CHECK(s[1].runs == 1);
  CHECK(to_table(s).find("se=off") != std::string::npos);
}

TEST_CASE("manifest round trip") {
  RunManifest m;
  m.command = "wash";
  m.args = {"wash", "--corpus", "c", "--out", "o"};
  m.config_json = "{\"x\":1}";
  m.code_version = "v";
  m.inputs["c/facts.jsonl"] = "0000abcd";
  m.outputs["model.kwck"] = "12345678";
  const auto back = manifest_from_json(to_json(m));
  CHECK(back.command == m.command);
  CHECK(back.args == m.args);
  CHECK(back.config_json == m.config_json);
  CHECK(back.inputs == m.inputs);
  CHECK(back.outputs == m.outputs);
  CHECK_THROWS_AS(manifest_from_json("{}"), Error);
}

}  // TEST_SUITE
