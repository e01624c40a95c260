#include "kwash/washer_law.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

#include "kwash/error.hpp"
#include "kwash/evalsuite.hpp"
#include "kwash/random.hpp"

namespace kwash::law {

namespace {

double metric_eps(const kv::KeyStats& stats) {
  return kMetricEpsRel * kv::key_total_normsq(stats);
}

// trace(Δ·(λC0 + εI)·Δᵀ).
double metric_normsq(const Matrix& delta, const kv::KeyStats& stats, double eps) {
  return kv::delta_k_normsq(delta, stats) + eps * numerics::frobenius_sq(delta);
}

Matrix random_matrix(std::size_t rows, std::size_t cols, double scale, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = scale * rng.normal();
  return m;
}

// K_w·K_wᵀ·M⁻¹ with M = λC0 + εI, F × F.
Matrix preconditioned_operator(const Matrix& k_w, const kv::KeyStats& stats, double eps) {
  Matrix m = stats.scaled();
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += eps;
  const numerics::Cholesky chol(m);
  // M⁻¹·A is the transpose of A·M⁻¹ because A and M are symmetric.
  return numerics::transpose(chol.solve(numerics::matmul_nt(k_w, k_w)));
}

void check_shapes(const Matrix& delta, const Matrix& k_w, const kv::KeyStats& stats) {
  if (delta.cols() != stats.c0.dim() || k_w.rows() != stats.c0.dim()) {
    throw Error(ErrorKind::kShapeMismatch, "delta, K_w and key statistics disagree on d_mlp");
  }
}

}  // namespace

double wash_objective(const Matrix& delta, const Matrix& k_w) {
  if (delta.cols() != k_w.rows()) throw Error(ErrorKind::kShapeMismatch, "Δ·K_w shape");
  if (k_w.cols() == 0) return 0.0;
  return numerics::frobenius_sq(numerics::matmul(delta, k_w));
}

Matrix objective_gradient(const Matrix& delta, const Matrix& k_w) {
  if (delta.cols() != k_w.rows()) throw Error(ErrorKind::kShapeMismatch, "Δ·K_w shape");
  Matrix g = numerics::matmul_nt(numerics::matmul(delta, k_w), k_w);
  g *= 2.0;
  return g;
}

double constraint_ratio(const Matrix& delta, const kv::KeyStats& stats) {
  const double total = kv::key_total_normsq(stats);
  if (total <= 0.0) throw Error(ErrorKind::kInsufficientData, "key statistics have zero trace");
  return kv::delta_k_normsq(delta, stats) / total;
}

Matrix constraint_gradient(const Matrix& delta, const kv::KeyStats& stats) {
  if (delta.cols() != stats.c0.dim()) throw Error(ErrorKind::kShapeMismatch, "Δ·C0 shape");
  Matrix g = numerics::matmul(delta, stats.c0.matrix());
  g *= 2.0 * stats.lambda;
  return g;
}

double compute_beta0(const Matrix& delta0, const kv::KeyStats& stats) {
  return constraint_ratio(delta0, stats);
}

OptimizeResult optimize_delta(const Matrix& delta0, const Matrix& k_w, const kv::KeyStats& stats,
                              double beta, const OptimizeOptions& options) {
  check_shapes(delta0, k_w, stats);
  if (!(beta > 0.0)) throw Error(ErrorKind::kConfig, "beta must be > 0");
  OptimizeResult result;
  result.delta = Matrix(delta0.rows(), delta0.cols());
  if (k_w.cols() == 0) return result;

  const double eps = metric_eps(stats);
  const double target = beta * kv::key_total_normsq(stats);
  const Matrix p = preconditioned_operator(k_w, stats, eps);
  auto to_boundary = [&](Matrix& d) {
    const double n = metric_normsq(d, stats, eps);
    if (n > 0.0) d *= std::sqrt(target / n);
  };

  Matrix delta = delta0;
  if (numerics::frobenius_sq(delta) == 0.0 || wash_objective(delta, k_w) == 0.0) {
    delta = random_matrix(delta0.rows(), delta0.cols(), 1.0, options.seed);
  }
  to_boundary(delta);
  double objective = wash_objective(delta, k_w);
  result.initial_objective = objective;

  std::vector<double> history{objective};
  double step = options.step;
  std::size_t it = 0;
  while (it < options.max_iters && objective > 0.0) {
    const double rho = objective / target;
    bool accepted = false;
    while (!accepted && step > 1e-12) {
      Matrix candidate = numerics::matmul(delta, p);
      candidate *= step / rho;
      Matrix keep = delta;
      keep *= 1.0 - step;
      candidate += keep;
      to_boundary(candidate);
      const double value = wash_objective(candidate, k_w);
      if (std::isfinite(value) && value >= objective) {
        delta = std::move(candidate);
        objective = value;
        accepted = true;
      } else {
        step *= 0.5;
      }
    }
    if (!accepted) break;
    ++it;
    history.push_back(objective);
    if (history.size() > options.window) {
      const double past = history[history.size() - 1 - options.window];
      if (objective - past <= options.tolerance * objective) break;
    }
  }

  result.delta = std::move(delta);
  result.objective = objective;
  result.constraint_ratio = constraint_ratio(result.delta, stats);
  result.iterations = it;
  result.not_improved = objective - result.initial_objective <
                        options.tolerance * std::max(result.initial_objective,
                                                     std::numeric_limits<double>::min());
  return result;
}

OracleResult oracle_optimum(const Matrix& k_w, const kv::KeyStats& stats, double beta,
                            double eps) {
  const std::size_t F = stats.c0.dim();
  if (k_w.rows() != F) throw Error(ErrorKind::kShapeMismatch, "K_w rows != d_mlp");
  OracleResult r;
  if (k_w.cols() == 0) {
    r.direction.assign(F, 0.0);
    return r;
  }
  const numerics::SymmetricPSD a(numerics::matmul_nt(k_w, k_w));
  const auto pair = numerics::top_generalized_eigenpair(a, numerics::SymmetricPSD(stats.scaled()), eps);
  r.lambda_max = pair.value;
  r.direction = pair.vector;
  r.upper_bound = beta * kv::key_total_normsq(stats) * pair.value;
  return r;
}

GammaResult wash_delta_gamma(const Matrix& k_w, const kv::KeyStats& stats, double gamma,
                             std::size_t d_model, const GammaOptions& options) {
  if (k_w.rows() != stats.c0.dim()) throw Error(ErrorKind::kShapeMismatch, "K_w rows != d_mlp");
  if (!(gamma >= 0.0)) throw Error(ErrorKind::kConfig, "gamma must be >= 0");
  GammaResult r;
  const std::size_t F = stats.c0.dim();
  if (k_w.cols() == 0 || gamma == 0.0) {
    r.delta = Matrix(d_model, F);
    return r;
  }
  Matrix p = preconditioned_operator(k_w, stats, metric_eps(stats));
  p *= gamma;
  Matrix delta = random_matrix(d_model, F, options.init_scale, options.seed);
  const double start = std::sqrt(numerics::frobenius_sq(delta));
  for (r.iterations = 1; r.iterations <= options.max_iters; ++r.iterations) {
    delta = numerics::matmul(delta, p);
    const double norm = std::sqrt(numerics::frobenius_sq(delta));
    if (norm <= options.converged_norm) {
      r.delta = std::move(delta);
      return r;
    }
    if (!std::isfinite(norm) || norm > options.blowup_factor * start) {
      r.diverged = true;
      r.delta = std::move(delta);
      return r;
    }
  }
  r.iterations = options.max_iters;
  r.diverged = true;
  r.delta = std::move(delta);
  return r;
}

void BetaPolicy::validate() const {
  if (mode == BetaMode::kRelative && !(value > 1.0)) {
    throw Error(ErrorKind::kConfig, "relative beta multiplier must be > 1");
  }
  if (mode == BetaMode::kConstant && !(value > 0.0 && value <= 1.0)) {
    throw Error(ErrorKind::kConfig, "constant beta must be in (0, 1]");
  }
}

void WashConfig::validate() const {
  beta.validate();
  if (lo > hi) throw Error(ErrorKind::kConfig, "layer range lo > hi");
  if (gamma && !(*gamma >= 0.0)) throw Error(ErrorKind::kConfig, "gamma must be >= 0");
  if (optimize.max_iters == 0 || optimize.window == 0) {
    throw Error(ErrorKind::kConfig, "optimizer needs max_iters and window >= 1");
  }
}

WashResult successive_wash(lm::ModelCheckpoint& model,
                           const std::vector<corpus::FactTriple>& facts, const WashConfig& config,
                           const std::vector<kv::KeyStats>& stats) {
  config.validate();
  if (config.hi >= model.config().n_layers) {
    throw Error(ErrorKind::kConfig, "layer range exceeds model depth");
  }
  WashResult result;
  if (facts.empty()) {
    for (std::size_t l = config.lo; l <= config.hi; ++l) {
      result.trace.push_back(TraceRecord{l, 0, 0, 0, 0, 0, 0, true, false, false});
    }
    return result;
  }

  // Values and the top-layer residual are fixed on the unedited model.
  auto requests = memit::eos_requests(facts, model.vocab());
  result.value_success = memit::solve_values(model, requests, config.hi, config.value_options);
  const Matrix r_top = memit::top_residual(model, requests, config.hi);
  // Requests are grouped per fact in order; first[i] is fact i's first request.
  std::vector<std::size_t> first(facts.size() + 1, 0);
  for (std::size_t i = 0; i < facts.size(); ++i) first[i + 1] = first[i] + facts[i].template_ids.size();

  std::vector<std::size_t> active(facts.size());
  for (std::size_t i = 0; i < facts.size(); ++i) active[i] = i;

  for (std::size_t l = config.lo; l <= config.hi; ++l) {
    TraceRecord rec;
    rec.layer = l;
    if (config.successive_elimination) {
      std::vector<std::size_t> still;
      for (std::size_t i : active) {
        if (eval::fact_known(model, facts[i])) still.push_back(i);
      }
      active = std::move(still);
    }
    rec.active_facts = active.size();
    if (active.empty()) {
      rec.skipped = true;
      result.trace.push_back(rec);
      continue;
    }

    std::vector<memit::EditRequest> sub;
    std::vector<std::size_t> cols;
    for (std::size_t i : active) {
      for (std::size_t j = first[i]; j < first[i + 1]; ++j) {
        sub.push_back(requests[j]);
        cols.push_back(j);
      }
    }
    const Matrix k_w = memit::request_keys(model, sub, l);
    Matrix r(r_top.rows(), cols.size());
    for (std::size_t c = 0; c < cols.size(); ++c) r.set_column(c, r_top.column(cols[c]));
    r *= 1.0 / static_cast<double>(config.hi - l + 1);

    const auto& layer_stats = memit::stats_for(stats, l);
    const Matrix delta0 = memit::delta_from_residual(layer_stats, k_w, r, config.ridge);
    rec.beta0 = compute_beta0(delta0, layer_stats);

    Matrix delta;
    if (config.gamma) {
      GammaOptions go;
      go.seed = derive_seed(config.seed, l);
      auto g = wash_delta_gamma(k_w, layer_stats, *config.gamma, model.config().d_model, go);
      rec.iterations = g.iterations;
      rec.diverged = g.diverged;
      if (g.diverged) {
        result.trace.push_back(rec);
        throw Error(ErrorKind::kDivergence,
                    "penalized wash diverged at layer " + std::to_string(l) +
                        " (gamma above 1/lambda_max)");
      }
      delta = std::move(g.delta);
      rec.objective = wash_objective(delta, k_w);
      rec.constraint_ratio = constraint_ratio(delta, layer_stats);
    } else {
      rec.beta = config.beta.resolve(rec.beta0);
      if (!(rec.beta > 0.0)) {
        rec.skipped = true;
        result.trace.push_back(rec);
        continue;
      }
      Matrix init = config.init == InitMode::kMemit
                        ? delta0
                        : random_matrix(delta0.rows(), delta0.cols(), config.random_init_scale,
                                        derive_seed(config.seed, l));
      OptimizeOptions oo = config.optimize;
      oo.seed = derive_seed(config.seed, 100 + l);
      auto opt = optimize_delta(init, k_w, layer_stats, rec.beta, oo);
      rec.objective = opt.objective;
      rec.constraint_ratio = opt.constraint_ratio;
      rec.iterations = opt.iterations;
      rec.not_improved = opt.not_improved;
      delta = std::move(opt.delta);
    }
    model.add_to_w_out(l, delta);
    result.deltas.push_back(memit::DeltaMatrix{l, std::move(delta)});
    result.trace.push_back(rec);
  }
  return result;
}

std::string to_jsonl(const std::vector<TraceRecord>& trace) {
  std::string out;
  for (const auto& r : trace) {
    nlohmann::json j{{"layer", r.layer},
                     {"active_facts", r.active_facts},
                     {"beta", r.beta},
                     {"beta0", r.beta0},
                     {"objective", r.objective},
                     {"constraint_ratio", r.constraint_ratio},
                     {"iterations", r.iterations},
                     {"skipped", r.skipped},
                     {"not_improved", r.not_improved},
                     {"diverged", r.diverged}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace kwash::law
