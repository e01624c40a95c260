#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// runs: configuration records, key statistics for a layer range, washing by
// any method, ablation sweeps and run manifests.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/editor_memit.hpp"
#include "kwash/evalsuite.hpp"
#include "kwash/kv_memory.hpp"
#include "kwash/model.hpp"
#include "kwash/trainer.hpp"
#include "kwash/washer_law.hpp"

namespace kwash::pipeline {

enum class Method { kLaw, kMemit, kFt, kFtUl };

std::string_view to_string(Method method);
// Accepts law, memit, ft, ft-ul. Throws Usage otherwise.
Method parse_method(std::string_view name);

struct CorpusSpec {
  std::uint64_t seed = 7;
  std::size_t n_facts = 300;
  std::size_t n_reasoning = 500;
  corpus::CorpusConfig config;
  bool operator==(const CorpusSpec&) const = default;
};

struct StatsConfig {
  kv::StatsSource source = kv::StatsSource::kMixture;
  kv::MixtureDraw draw;
  std::size_t n_samples = 10000;
  std::uint64_t seed = 99;
  std::optional<double> lambda;  // max(1, |wash set|) when unset
};

struct WashSettings {
  Method method = Method::kLaw;
  law::WashConfig law;
  memit::SpreadOptions memit;
  train::TrainConfig finetune = train::finetune_defaults();
  StatsConfig stats;
};

struct ExperimentConfig {
  CorpusSpec corpus;
  train::TrainConfig train;
  WashSettings wash;
};

std::string to_json(const WashSettings& settings);
WashSettings wash_settings_from_json(std::string_view text);
std::string to_json(const ExperimentConfig& config);
// Throws Format on malformed text and Config on invalid values.
ExperimentConfig experiment_from_json(std::string_view text);

// CRC32 of the canonical JSON text, eight hex digits.
std::string config_hash(std::string_view canonical_json);

// Version string of this build, recorded in manifests.
std::string_view code_version();

corpus::CorpusBundle make_corpus(const CorpusSpec& spec);

// Layers [lo, hi] used by the method; empty for the fine-tuning baselines.
std::vector<std::size_t> edited_layers(const WashSettings& settings);

std::vector<kv::KeyStats> build_key_stats(const lm::ModelCheckpoint& model,
                                          const corpus::CorpusBundle& corpus,
                                          const StatsConfig& config,
                                          const std::vector<std::size_t>& layers,
                                          std::size_t n_wash);

struct WashOutcome {
  lm::ModelCheckpoint model;
  eval::WashReport report;
  std::vector<law::TraceRecord> trace;       // LaW only
  std::vector<memit::DeltaMatrix> deltas;    // LaW and MEMIT
  std::vector<train::EpochRecord> train_log; // fine-tuning baselines
};

// Washes `facts` from a copy of `model` and reports on the bundle's splits.
// `before` skips re-measuring the input model when given.
WashOutcome run_wash(const lm::ModelCheckpoint& model, const corpus::CorpusBundle& corpus,
                     const std::vector<corpus::FactTriple>& facts,
                     const WashSettings& settings, const eval::Metrics* before = nullptr);

enum class AblationAxis { kBeta, kInit, kSuccessiveElimination };

std::string_view to_string(AblationAxis axis);
AblationAxis parse_axis(std::string_view name);  // beta, init, se

struct AblationSpec {
  AblationAxis axis = AblationAxis::kBeta;
  std::vector<double> betas = {1.05, 1.1, 1.5};  // relative multipliers
  std::vector<std::uint64_t> split_seeds = {1, 2, 3};
};

struct AblationPoint {
  std::string label;  // e.g. "beta=1.1", "init=random", "se=off"
  std::uint64_t split_seed = 0;
  eval::WashReport report;
};

// Runs LaW once per (setting, split seed). Each seed re-partitions the wash
// and retain facts of the bundle; the model is the same for all runs.
std::vector<AblationPoint> run_ablation(const lm::ModelCheckpoint& model,
                                        const corpus::CorpusBundle& corpus,
                                        const WashSettings& settings, const AblationSpec& spec);

struct AblationSummary {
  std::string label;
  double washed_acc = 0.0;
  double retained_acc = 0.0;
  double reasoning_acc = 0.0;
  double fluency_log_ppl = 0.0;
  std::size_t runs = 0;
};

// Seed means per label, in first-appearance order.
std::vector<AblationSummary> summarize(const std::vector<AblationPoint>& points);
std::string to_table(const std::vector<AblationSummary>& summary);

// Record written next to every command's outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> args;  // full argument list after the program name
  std::string config_json;        // canonical configuration of the run
  std::string code_version;
  std::map<std::string, std::string> inputs;   // path -> checksum
  std::map<std::string, std::string> outputs;  // file name in the output dir -> checksum
};

std::string to_json(const RunManifest& manifest);
RunManifest manifest_from_json(std::string_view text);

}  // namespace kwash::pipeline
