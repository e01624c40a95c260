#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "kwash/corpus.hpp"
#include "kwash/io.hpp"
#include "kwash/model.hpp"
#include "kwash/pipeline.hpp"
#include "kwash/trainer.hpp"

using namespace kwash;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result kwash_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("kwash_cli_" + name);
  fs::remove_all(p);
  return p;
}

// A corpus and a briefly trained small model shared by the command tests.
struct Workspace {
  fs::path root = scratch("ws");
  fs::path corpus = root / "corpus";
  fs::path train = root / "train";

  Workspace() {
    REQUIRE(kwash_run({"gen-corpus", "--facts", "300", "--reasoning", "20", "--out", corpus.string()}).code == 0);
    train::TrainConfig tc;
    tc.model.n_layers = 3;
    tc.model.d_model = 16;
    tc.model.d_mlp = 32;
    tc.epochs = 2;
    fs::create_directories(root);
    std::ofstream(root / "train.json") << train::to_json(tc);
    REQUIRE(kwash_run({"train", "--corpus", corpus.string(), "--config", (root / "train.json").string(),
                       "--out", train.string()}).code == 0);
  }
  ~Workspace() { fs::remove_all(root); }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 2") {
  CHECK(kwash_run({}).code == 2);
  CHECK(kwash_run({"frobnicate"}).code == 2);
  CHECK(kwash_run({"gen-corpus", "--facts", "many"}).code == 2);
  CHECK(kwash_run({"train"}).code == 2);
  CHECK(kwash_run({"--help"}).code == 0);
}

TEST_CASE("missing or corrupt data exits with 3") {
  const auto dir = scratch("missing");
  CHECK(kwash_run({"train", "--corpus", (dir / "nowhere").string(), "--out", dir.string()}).code == 3);
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << "{";
  CHECK(kwash_run({"gen-corpus", "--config", (dir / "bad.json").string(), "--out", (dir / "c").string()}).code == 3);
  fs::remove_all(dir);
}

TEST_CASE("corpus generation is deterministic") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  REQUIRE(kwash_run({"gen-corpus", "--seed", "3", "--reasoning", "30", "--out", a.string()}).code == 0);
  REQUIRE(kwash_run({"gen-corpus", "--seed", "3", "--reasoning", "30", "--out", b.string()}).code == 0);
  CHECK(corpus::load_bundle(a) == corpus::load_bundle(b));
  CHECK(fs::exists(a / "run_manifest.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("output directory from the environment") {
  const auto dir = scratch("env");
  ::setenv("KWASH_OUTPUT_DIR", dir.string().c_str(), 1);
  const auto r = kwash_run({"gen-corpus", "--reasoning", "10"});
  ::unsetenv("KWASH_OUTPUT_DIR");
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "run_manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("commands on a small workspace") {
  const Workspace ws;
  const auto model = ws.train / "model.kwck";
  REQUIRE(fs::exists(model));

  SUBCASE("washing an empty fact list keeps the checkpoint") {
    corpus::save_facts({}, ws.root / "none.jsonl");
    const auto out = ws.root / "wash_empty";
    const auto r = kwash_run({"wash", "--corpus", ws.corpus.string(), "--model", model.string(), "--facts",
                              (ws.root / "none.jsonl").string(), "--out", out.string()});
    REQUIRE(r.code == 0);
    CHECK(lm::load_checkpoint(out / "model.kwck").checksum() == lm::load_checkpoint(model).checksum());
  }

  SUBCASE("wash writes its artifacts and replays identically") {
    const auto out = ws.root / "wash";
    const auto r = kwash_run({"wash", "--corpus", ws.corpus.string(), "--model", model.string(),
                              "--method", "memit", "--out", out.string()});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(out / "deltas.kwd"));
    bool report = false;
    for (const auto& e : fs::directory_iterator(out)) report |= e.path().filename().string().starts_with("report_memit_");
    CHECK(report);
    const auto again = ws.root / "wash_again";
    const auto rp = kwash_run({"replay", "--manifest", (out / "run_manifest.json").string(), "--out", again.string()});
    CHECK(rp.code == 0);
    CHECK(rp.out.find("replay identical") != std::string::npos);
  }

  SUBCASE("replay fails with 3 when a recorded checksum differs") {
    const auto out = ws.root / "eval";
    REQUIRE(kwash_run({"eval", "--corpus", ws.corpus.string(), "--model", model.string(), "--out", out.string()}).code == 0);
    auto m = pipeline::manifest_from_json(io::read_file(out / "run_manifest.json"));
    REQUIRE(!m.outputs.empty());
    m.outputs.begin()->second = "00000000";
    std::ofstream(ws.root / "tampered.json") << pipeline::to_json(m);
    const auto rp = kwash_run({"replay", "--manifest", (ws.root / "tampered.json").string(), "--out",
                               (ws.root / "eval_again").string()});
    CHECK(rp.code == 3);
    CHECK(rp.out.find("mismatch") != std::string::npos);
  }

  SUBCASE("bad wash flags are usage errors") {
    const auto out = ws.root / "bad";
    CHECK(kwash_run({"wash", "--corpus", ws.corpus.string(), "--model", model.string(), "--method", "rome",
                     "--out", out.string()}).code == 2);
    CHECK(kwash_run({"wash", "--corpus", ws.corpus.string(), "--model", model.string(), "--layers", "2:1",
                     "--out", out.string()}).code != 0);
    CHECK(kwash_run({"wash", "--corpus", ws.corpus.string(), "--model", model.string(), "--layers", "1:9",
                     "--out", out.string()}).code == 3);
  }
}

}  // TEST_SUITE
