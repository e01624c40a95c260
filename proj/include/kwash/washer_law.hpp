#pragma once

// Knowledge washing of W_out layers. For wash keys K_w and key statistics
// λC0 (standing in for K·Kᵀ) the per-layer problem is
//
//   maximize ||Δ·K_w||²   subject to   ||Δ·K||² / ||K||² ≤ β
//
// whose optimum is β·||K||²·λ_max of the pencil (K_w·K_wᵀ, λC0), attained by
// Δ whose rows lie along the top generalized eigenvector. A penalized variant
// minimizes ||Δ·K||² − γ·||Δ·K_w||².

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kwash/corpus.hpp"
#include "kwash/editor_memit.hpp"
#include "kwash/kv_memory.hpp"
#include "kwash/model.hpp"
#include "kwash/numerics.hpp"

namespace kwash::law {

using numerics::Matrix;

// ||Δ·K_w||².
double wash_objective(const Matrix& delta, const Matrix& k_w);
// Gradient of ||Δ·K_w||²: 2·Δ·K_w·K_wᵀ.
Matrix objective_gradient(const Matrix& delta, const Matrix& k_w);
// ||Δ·K||² / ||K||² with the λC0 surrogate.
double constraint_ratio(const Matrix& delta, const kv::KeyStats& stats);
// Gradient of trace(Δ·λC0·Δᵀ): 2·Δ·λC0.
Matrix constraint_gradient(const Matrix& delta, const kv::KeyStats& stats);

// β0 = ||Δ0·K||² / ||K||². Throws ShapeMismatch.
double compute_beta0(const Matrix& delta0, const kv::KeyStats& stats);

// Regularization added to λC0 for the metric: eps_rel·trace(λC0).
inline constexpr double kMetricEpsRel = 1e-8;

struct OptimizeOptions {
  std::size_t max_iters = 500;
  double step = 1.0;         // fraction of the Rayleigh-quotient-scaled step
  double tolerance = 1e-6;   // relative improvement over `window` iterations
  std::size_t window = 10;
  std::uint64_t seed = 0;    // random start when Δ0 is zero
};

struct OptimizeResult {
  Matrix delta;
  double objective = 0.0;
  double initial_objective = 0.0;  // of the boundary-rescaled initializer
  double constraint_ratio = 0.0;
  std::size_t iterations = 0;
  bool not_improved = false;
};

// Ascent on ||Δ·K_w||² preconditioned by M⁻¹ with M = λC0 + εI:
//   Δ ← Δ + η·(Δ·K_w·K_wᵀ·M⁻¹ − ρΔ),  η = step/ρ,
// where ρ is the current Rayleigh quotient. After every step Δ is rescaled
// along its ray onto the boundary trace(Δ·M·Δᵀ) = β·||K||². Steps that lower
// the objective are retried at half size. Returns the zero delta when K_w has
// no columns.
OptimizeResult optimize_delta(const Matrix& delta0, const Matrix& k_w,
                              const kv::KeyStats& stats, double beta,
                              const OptimizeOptions& options = {});

struct OracleResult {
  double upper_bound = 0.0;
  double lambda_max = 0.0;
  std::vector<double> direction;  // unit vector in key space
};

// β·||K||²·λ_max of (K_w·K_wᵀ, λC0 + eps·I). Throws NoConvergence.
OracleResult oracle_optimum(const Matrix& k_w, const kv::KeyStats& stats, double beta,
                            double eps);

struct GammaOptions {
  std::size_t max_iters = 10000;
  double init_scale = 1e-3;
  double converged_norm = 1e-9;
  double blowup_factor = 1e12;
  std::uint64_t seed = 0;
};

struct GammaResult {
  Matrix delta;
  std::size_t iterations = 0;
  bool diverged = false;
};

// Preconditioned descent on trace(Δ·λC0·Δᵀ) − γ·||Δ·K_w||² from a small
// random start: Δ ← γ·Δ·K_w·K_wᵀ·M⁻¹. Contracts to zero when γ·λ_max < 1;
// otherwise grows until the blow-up bound or the cap, flagging divergence.
GammaResult wash_delta_gamma(const Matrix& k_w, const kv::KeyStats& stats, double gamma,
                             std::size_t d_model, const GammaOptions& options = {});

enum class BetaMode { kRelative, kConstant };

struct BetaPolicy {
  BetaMode mode = BetaMode::kRelative;
  double value = 1.1;

  double resolve(double beta0) const { return mode == BetaMode::kRelative ? value * beta0 : value; }
  // Throws Config: multiplier must be > 1, a constant in (0, 1].
  void validate() const;
};

enum class InitMode { kMemit, kRandom };

struct WashConfig {
  std::size_t lo = 1;
  std::size_t hi = 2;
  BetaPolicy beta;
  OptimizeOptions optimize;
  bool successive_elimination = true;
  InitMode init = InitMode::kMemit;
  std::optional<double> gamma;  // penalized objective instead of the constraint
  std::uint64_t seed = 0;
  double ridge = memit::kDefaultRidge;
  double random_init_scale = 1e-3;
  memit::ValueOptions value_options;

  void validate() const;
};

struct TraceRecord {
  std::size_t layer = 0;
  std::size_t active_facts = 0;
  double beta = 0.0;
  double beta0 = 0.0;
  double objective = 0.0;
  double constraint_ratio = 0.0;
  std::size_t iterations = 0;
  bool skipped = false;
  bool not_improved = false;
  bool diverged = false;
};

struct WashResult {
  std::vector<TraceRecord> trace;
  std::vector<memit::DeltaMatrix> deltas;
  double value_success = 1.0;  // fraction of EOS values reached
};

// For each layer in [lo, hi] ascending: restrict to facts the model still
// knows (when enabled), build K_w from their training prompts, take the
// MEMIT share of this layer toward EOS as Δ0, set β, optimize and apply.
WashResult successive_wash(lm::ModelCheckpoint& model,
                           const std::vector<corpus::FactTriple>& facts, const WashConfig& config,
                           const std::vector<kv::KeyStats>& stats);

// Line-delimited {layer, active_facts, beta, beta0, objective,
// constraint_ratio, iterations, ...}.
std::string to_jsonl(const std::vector<TraceRecord>& trace);

}  // namespace kwash::law
