#pragma once

// Batch editing of W_out layers: target values by gradient descent on an MLP
// output override, the closed-form least-squares delta against λ·C0, and the
// spreading of one residual over a range of layers.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/kv_memory.hpp"
#include "kwash/model.hpp"
#include "kwash/numerics.hpp"

namespace kwash::memit {

struct DeltaMatrix {
  std::size_t layer = 0;
  numerics::Matrix values;  // d_model × d_mlp
};

struct ValueOptions {
  std::size_t max_steps = 25;
  double step_size = 0.5;
  double decay = 0.9;  // step size multiplier per iteration
  double penalty = 0.0625;  // weight of ||v − v0||²
  bool early_stop = true;   // return as soon as the target is the argmax
};

struct ValueResult {
  std::vector<double> value;
  bool reached = false;  // argmax equals the target
  std::size_t iterations = 0;
};

// Finds v such that replacing the MLP output of `layer` at the last prompt
// position with v makes `target` the argmax next token. Adam steps on
// −log p(target) + penalty·||v − v0||², starting from the current output v0.
// With early_stop the first iterate whose argmax is the target is returned;
// otherwise the whole budget runs and the lowest-objective iterate among those
// reaching the target is returned. Without any such iterate the result is the
// lowest-objective iterate with reached = false.
ValueResult solve_target_value(const lm::ModelCheckpoint& model,
                               std::span<const corpus::TokenId> prompt, std::size_t layer,
                               corpus::TokenId target, const ValueOptions& options = {});

struct EditRequest {
  corpus::FactTriple fact;
  int template_id = 0;
  corpus::TokenId target = 0;
  std::optional<std::vector<double>> value;  // v_e at the top edited layer

  corpus::Tokens prompt(const corpus::Vocabulary& vocab) const;
};

// One request per training rendering of each fact, all targeting EOS.
std::vector<EditRequest> eos_requests(const std::vector<corpus::FactTriple>& facts,
                                      const corpus::Vocabulary& vocab);

inline constexpr double kDefaultRidge = 1e-6;

// Δ = R·K_eᵀ·(λC0 + K_e·K_eᵀ + ridge·tr·I)⁻¹ where tr is the trace of the
// bracketed sum. K_e is d_mlp × u, R is d_model × u.
// Throws ShapeMismatch or SingularSystem.
numerics::Matrix delta_from_residual(const kv::KeyStats& stats, const numerics::Matrix& k_e,
                                     const numerics::Matrix& residual,
                                     double ridge = kDefaultRidge);

// Closed form with R = V_e − W0·K_e.
DeltaMatrix closed_form_delta(const numerics::Matrix& w0, const kv::KeyStats& stats,
                              const numerics::Matrix& k_e, const numerics::Matrix& v_e,
                              double ridge = kDefaultRidge);

// Keys of `layer` at the last token of each request prompt, d_mlp × u.
numerics::Matrix request_keys(const lm::ModelCheckpoint& model,
                              const std::vector<EditRequest>& requests, std::size_t layer);

// Fills the value of every request lacking one, at layer `top`. Returns the
// fraction of requests whose target was reached.
double solve_values(const lm::ModelCheckpoint& model, std::vector<EditRequest>& requests,
                    std::size_t top, const ValueOptions& options = {});

struct SpreadOptions {
  std::size_t lo = 1;
  std::size_t hi = 2;  // l0, the layer whose output the values replace
  double ridge = kDefaultRidge;
  ValueOptions value_options;
};

// Looks up the statistics of `layer`; throws Config when absent.
const kv::KeyStats& stats_for(const std::vector<kv::KeyStats>& stats, std::size_t layer);

// Residual R^{l0} = V_e − W_out^{l0}·K_e^{l0} on the current model.
numerics::Matrix top_residual(const lm::ModelCheckpoint& model,
                              const std::vector<EditRequest>& requests, std::size_t top);

// For l = lo..hi ascending: recompute K_e^l on the current model, apply
// Δ^l = closed form with residual R^{l0}/(l0 − l + 1), where R^{l0} is fixed
// before the first edit. Solves missing values first. Returns the deltas.
std::vector<DeltaMatrix> spread_edit(lm::ModelCheckpoint& model,
                                     std::vector<EditRequest>& requests,
                                     const std::vector<kv::KeyStats>& stats,
                                     const SpreadOptions& options);

// Container with one f64 tensor per delta, "delta.layer<l>".
void save_deltas(const std::vector<DeltaMatrix>& deltas, const std::string& meta_json,
                 const std::filesystem::path& file);
std::vector<DeltaMatrix> load_deltas(const std::filesystem::path& file);

}  // namespace kwash::memit
