#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kwash/corpus.hpp"
#include "kwash/error.hpp"
#include "kwash/evalsuite.hpp"
#include "kwash/io.hpp"
#include "kwash/model.hpp"
#include "kwash/pipeline.hpp"
#include "kwash/trainer.hpp"

namespace kwash::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "run_manifest.json";
constexpr const char* kOutputEnv = "KWASH_OUTPUT_DIR";

[[noreturn]] void usage(const std::string& message) { throw Error(ErrorKind::kUsage, message); }

std::pair<std::size_t, std::size_t> parse_layers(const std::string& text) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) {
      const auto l = std::stoul(text);
      return {l, l};
    }
    return {std::stoul(text.substr(0, colon)), std::stoul(text.substr(colon + 1))};
  } catch (const std::exception&) {
    usage("--layers expects lo:hi, got '" + text + "'");
  }
}

double parse_number(const std::string& text, const std::string& flag) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    usage(flag + " expects a number, got '" + text + "'");
  }
}

law::BetaPolicy parse_beta(const std::string& text) {
  if (text.starts_with("rel:")) {
    return {law::BetaMode::kRelative, parse_number(text.substr(4), "--beta")};
  }
  if (text.starts_with("const:")) {
    return {law::BetaMode::kConstant, parse_number(text.substr(6), "--beta")};
  }
  usage("--beta expects rel:<m> or const:<v>, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Flags shared by wash and ablate.
struct WashFlags {
  std::string method = "law";
  std::string layers;
  std::string beta;
  std::optional<double> lambda;
  bool no_se = false;
  std::string init;
  std::string objective;
  std::optional<std::uint64_t> seed;
  std::string stats_source;
  std::string settings_file;

  void add_to(CLI::App& app, bool with_method) {
    if (with_method) app.add_option("--method", method, "law, memit, ft or ft-ul");
    app.add_option("--layers", layers, "edited layers lo:hi");
    app.add_option("--beta", beta, "rel:<m> (multiple of beta0) or const:<v>");
    app.add_option("--lambda", lambda, "weight of the key second moment");
    app.add_flag("--no-se", no_se, "disable successive elimination");
    app.add_option("--init", init, "memit or random");
    app.add_option("--objective", objective, "constrained or gamma:<v>");
    app.add_option("--seed", seed, "wash seed");
    app.add_option("--stats", stats_source, "key statistics source: mixture or filler");
    app.add_option("--settings", settings_file, "JSON wash settings to start from");
  }

  pipeline::WashSettings resolve() const {
    pipeline::WashSettings s;
    if (!settings_file.empty()) s = pipeline::wash_settings_from_json(io::read_file(settings_file));
    s.method = pipeline::parse_method(method);
    if (!layers.empty()) {
      const auto [lo, hi] = parse_layers(layers);
      s.law.lo = s.memit.lo = lo;
      s.law.hi = s.memit.hi = hi;
    }
    if (!beta.empty()) s.law.beta = parse_beta(beta);
    if (lambda) s.stats.lambda = *lambda;
    if (no_se) s.law.successive_elimination = false;
    if (!init.empty()) {
      if (init == "memit") s.law.init = law::InitMode::kMemit;
      else if (init == "random") s.law.init = law::InitMode::kRandom;
      else usage("--init expects memit or random");
    }
    if (!objective.empty()) {
      if (objective == "constrained") s.law.gamma.reset();
      else if (objective.starts_with("gamma:")) s.law.gamma = parse_number(objective.substr(6), "--objective");
      else usage("--objective expects constrained or gamma:<v>");
    }
    if (seed) s.law.seed = *seed;
    if (!stats_source.empty()) {
      if (stats_source == "mixture") s.stats.source = kv::StatsSource::kMixture;
      else if (stats_source == "filler") s.stats.source = kv::StatsSource::kFiller;
      else usage("--stats expects mixture or filler");
    }
    s.law.validate();
    return s;
  }
};

// Output directory from --out, else from the environment.
fs::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  usage("--out is required (or set " + std::string(kOutputEnv) + ")");
}

class Run {
 public:
  Run(std::string command, std::vector<std::string> args, fs::path dir)
      : dir_(std::move(dir)) {
    manifest_.command = std::move(command);
    manifest_.args = std::move(args);
    manifest_.code_version = std::string(pipeline::code_version());
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }
  void config(std::string json_text) { manifest_.config_json = std::move(json_text); }
  std::string hash() const { return pipeline::config_hash(manifest_.config_json); }

  void input(const fs::path& p) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file()) manifest_.inputs[e.path().string()] = io::file_checksum(e.path());
      }
    } else {
      manifest_.inputs[p.string()] = io::file_checksum(p);
    }
  }

  void write(const std::string& name, std::string_view bytes) {
    io::write_atomic(dir_ / name, bytes);
    manifest_.outputs[name] = io::file_checksum(dir_ / name);
  }
  // For files written by a module's own saver.
  void record(const std::string& name) { manifest_.outputs[name] = io::file_checksum(dir_ / name); }

  void finish() { io::write_atomic(dir_ / kManifestName, pipeline::to_json(manifest_)); }

 private:
  fs::path dir_;
  pipeline::RunManifest manifest_;
};

// Arguments with --out pinned to the resolved directory, so replays do not
// depend on the environment.
std::vector<std::string> pinned_args(const std::vector<std::string>& args, const fs::path& out) {
  std::vector<std::string> r;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--out" && i + 1 < args.size()) {
      ++i;
      continue;
    }
    if (args[i].starts_with("--out=")) continue;
    r.push_back(args[i]);
  }
  r.push_back("--out");
  r.push_back(out.string());
  return r;
}

std::string report_stem(const std::string& tag, const std::string& hash) {
  std::string t = tag;
  std::replace(t.begin(), t.end(), ' ', '_');
  std::replace(t.begin(), t.end(), '=', '-');
  return "report_" + t + "_" + hash;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out);

int cmd_replay(const std::string& manifest_path, const std::string& into, std::ostream& out) {
  const auto m = pipeline::manifest_from_json(io::read_file(manifest_path));
  if (m.command == "replay") usage("cannot replay a replay");
  const fs::path original = fs::path(manifest_path).parent_path();
  const fs::path target = into.empty() ? original : fs::path(into);
  std::vector<std::string> args = pinned_args(m.args, target);
  const int rc = dispatch(args, out);
  if (rc != kExitOk) return rc;
  std::size_t mismatches = 0;
  for (const auto& [name, sum] : m.outputs) {
    const fs::path p = target / name;
    const std::string now = fs::exists(p) ? io::file_checksum(p) : "missing";
    if (now != sum) {
      out << "mismatch " << name << ": recorded " << sum << ", replayed " << now << "\n";
      ++mismatches;
    }
  }
  if (mismatches > 0) throw Error(ErrorKind::kFormat, "replay differs from the manifest");
  out << "replay identical: " << m.outputs.size() << " outputs\n";
  return kExitOk;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out) {
  CLI::App app{"Knowledge washing experiments on a toy transformer", "kwash"};
  app.require_subcommand(1);
  std::string out_flag;

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "generate a corpus bundle");
  pipeline::CorpusSpec spec;
  std::string corpus_config_file;
  gen->add_option("--seed", spec.seed, "corpus seed");
  gen->add_option("--facts", spec.n_facts, "number of facts");
  gen->add_option("--reasoning", spec.n_reasoning, "number of reasoning probes");
  gen->add_option("--config", corpus_config_file, "JSON corpus configuration");
  gen->add_option("--out", out_flag, "output directory");

  // train
  auto* train_cmd = app.add_subcommand("train", "pretrain a model on a corpus");
  std::string corpus_dir, train_config_file;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> train_seed;
  train_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train_cmd->add_option("--config", train_config_file, "JSON training configuration");
  train_cmd->add_option("--epochs", epochs, "override the epoch count");
  train_cmd->add_option("--seed", train_seed, "override the training seed");
  train_cmd->add_option("--out", out_flag, "output directory");

  // wash
  auto* wash = app.add_subcommand("wash", "wash facts from a checkpoint");
  std::string model_file, facts_file;
  WashFlags wash_flags;
  wash->add_option("--corpus", corpus_dir, "corpus directory")->required();
  wash->add_option("--model", model_file, "input checkpoint")->required();
  wash->add_option("--facts", facts_file, "facts to wash (default: the corpus wash split)");
  wash_flags.add_to(*wash, true);
  wash->add_option("--out", out_flag, "output directory");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string before_file;
  eval_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
  eval_cmd->add_option("--model", model_file, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--before", before_file, "reference checkpoint for the before column");
  eval_cmd->add_option("--out", out_flag, "output directory");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "LaW ablation sweeps over split seeds");
  std::string sweep, seeds = "1,2,3";
  WashFlags ablate_flags;
  ablate->add_option("--corpus", corpus_dir, "corpus directory")->required();
  ablate->add_option("--model", model_file, "input checkpoint")->required();
  ablate->add_option("--sweep", sweep, "beta=<m1>,<m2>,... | init | se")->required();
  ablate->add_option("--seeds", seeds, "comma-separated split seeds");
  ablate_flags.add_to(*ablate, false);
  ablate->add_option("--out", out_flag, "output directory");

  // replay
  auto* replay = app.add_subcommand("replay", "rerun a command from its manifest and compare");
  std::string manifest_path, into;
  replay->add_option("--manifest", manifest_path, "run manifest")->required();
  replay->add_option("--out", into, "directory for the rerun (default: the original)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    usage(e.what());
  }

  if (replay->parsed()) return cmd_replay(manifest_path, into, out);

  const fs::path dir = output_dir(out_flag);
  Run run(app.get_subcommands().front()->get_name(), pinned_args(args, dir), dir);

  if (gen->parsed()) {
    if (!corpus_config_file.empty()) {
      spec.config = corpus::config_from_json_text(io::read_file(corpus_config_file));
      run.input(corpus_config_file);
    }
    json cfg{{"seed", spec.seed},
             {"n_facts", spec.n_facts},
             {"n_reasoning", spec.n_reasoning},
             {"config", json::parse(corpus::config_to_json_text(spec.config))}};
    run.config(cfg.dump());
    const auto bundle = pipeline::make_corpus(spec);
    corpus::save_bundle(bundle, dir);
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name != kManifestName) run.record(name);
    }
    run.finish();
    out << "corpus: " << bundle.facts_train.size() << " facts (" << bundle.facts_wash.size()
        << " wash, " << bundle.facts_retain.size() << " retain, "
        << bundle.facts_neighborhood.size() << " neighborhood), "
        << bundle.reasoning_eval.size() << " reasoning probes -> " << dir.string() << "\n";
    return kExitOk;
  }

  const auto bundle = corpus::load_bundle(corpus_dir);
  run.input(corpus_dir);

  if (train_cmd->parsed()) {
    train::TrainConfig tc;
    if (!train_config_file.empty()) {
      tc = train::load_train_config(train_config_file);
      run.input(train_config_file);
    }
    if (epochs) tc.epochs = *epochs;
    if (train_seed) tc.seed = *train_seed;
    tc.validate();
    run.config(json::parse(train::to_json(tc)).dump());
    std::vector<train::EpochRecord> log;
    const auto model = train::pretrain(bundle, tc, &log);
    lm::save_checkpoint(model, dir / "model.kwck");
    run.record("model.kwck");
    run.write("train_log.jsonl", train::to_jsonl(log));
    run.finish();
    out << "trained " << tc.epochs << " epochs: fact accuracy "
        << eval::fact_accuracy(model, bundle.facts_train) << ", reasoning "
        << eval::reasoning_accuracy(model, bundle.reasoning_eval) << ", fluency "
        << eval::fluency(model, bundle.filler_eval) << " -> " << (dir / "model.kwck").string()
        << "\n";
    return kExitOk;
  }

  const auto model = lm::load_checkpoint(model_file);
  run.input(model_file);

  if (wash->parsed()) {
    const auto settings = wash_flags.resolve();
    auto facts = bundle.facts_wash;
    if (!facts_file.empty()) {
      facts = corpus::load_facts(facts_file);
      run.input(facts_file);
    }
    json cfg = json::parse(pipeline::to_json(settings));
    cfg["facts"] = facts.size();
    run.config(cfg.dump());
    auto r = pipeline::run_wash(model, bundle, facts, settings);
    lm::save_checkpoint(r.model, dir / "model.kwck");
    run.record("model.kwck");
    const auto stem = report_stem(r.report.method, run.hash());
    run.write(stem + ".txt", eval::to_table(r.report));
    run.write(stem + ".jsonl", eval::to_jsonl(r.report));
    if (settings.method == pipeline::Method::kLaw) run.write("trace.jsonl", law::to_jsonl(r.trace));
    if (!r.train_log.empty()) run.write("finetune_log.jsonl", train::to_jsonl(r.train_log));
    if (!r.deltas.empty()) {
      memit::save_deltas(r.deltas, cfg.dump(), dir / "deltas.kwd");
      run.record("deltas.kwd");
    }
    run.finish();
    out << eval::to_table(r.report);
    return kExitOk;
  }

  if (eval_cmd->parsed()) {
    eval::WashReport report;
    if (before_file.empty()) {
      report = eval::full_report(model, model, bundle, "eval");
    } else {
      const auto before = lm::load_checkpoint(before_file);
      run.input(before_file);
      report = eval::full_report(before, model, bundle, "eval");
    }
    run.config(json{{"model", io::file_checksum(model_file)},
                    {"before", before_file.empty() ? "" : io::file_checksum(before_file)}}
                   .dump());
    const auto stem = report_stem(report.method, run.hash());
    run.write(stem + ".txt", eval::to_table(report));
    run.write(stem + ".jsonl", eval::to_jsonl(report));
    run.finish();
    out << eval::to_table(report);
    return kExitOk;
  }

  // ablate
  pipeline::AblationSpec as;
  if (sweep.starts_with("beta=")) {
    as.axis = pipeline::AblationAxis::kBeta;
    as.betas.clear();
    for (const auto& v : split_list(sweep.substr(5))) as.betas.push_back(parse_number(v, "--sweep"));
    if (as.betas.empty()) usage("--sweep beta= needs at least one multiplier");
  } else {
    as.axis = pipeline::parse_axis(sweep);
  }
  as.split_seeds.clear();
  for (const auto& v : split_list(seeds)) {
    as.split_seeds.push_back(static_cast<std::uint64_t>(parse_number(v, "--seeds")));
  }
  if (as.split_seeds.empty()) usage("--seeds needs at least one seed");
  const auto settings = ablate_flags.resolve();
  json cfg = json::parse(pipeline::to_json(settings));
  cfg["sweep"] = sweep;
  cfg["seeds"] = as.split_seeds;
  run.config(cfg.dump());
  const auto points = pipeline::run_ablation(model, bundle, settings, as);
  std::string records;
  for (const auto& p : points) {
    const auto lines = eval::to_jsonl(p.report);  // before, then after
    auto j = json::parse(lines.substr(lines.find('\n') + 1));
    j["setting"] = p.label;
    j["split_seed"] = p.split_seed;
    records += j.dump() + "\n";
  }
  const auto table = pipeline::to_table(pipeline::summarize(points));
  const std::string stem = "ablation_" + std::string(pipeline::to_string(as.axis)) + "_" + run.hash();
  run.write(stem + ".jsonl", records);
  run.write(stem + ".txt", table);
  run.finish();
  out << table;
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out);
  } catch (const Error& e) {
    err << "kwash: " << e.what() << "\n";
    if (e.kind() == ErrorKind::kUsage) return kExitUsage;
    return is_numerical(e.kind()) ? kExitNumerical : kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "kwash: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "kwash: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace kwash::cli
