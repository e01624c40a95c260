#include "kwash/editor_memit.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

#include "kwash/container.hpp"
#include "kwash/error.hpp"

namespace kwash::memit {

using numerics::Matrix;

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

}  // namespace

ValueResult solve_target_value(const lm::ModelCheckpoint& model,
                               std::span<const corpus::TokenId> prompt, std::size_t layer,
                               corpus::TokenId target, const ValueOptions& options) {
  const auto& cfg = model.config();
  if (layer >= cfg.n_layers) throw Error(ErrorKind::kShapeMismatch, "layer out of range");
  if (target < 0 || static_cast<std::size_t>(target) >= cfg.vocab_size) {
    throw Error(ErrorKind::kTokenOutOfRange, "target token " + std::to_string(target));
  }
  const std::size_t V = cfg.vocab_size;
  const std::size_t D = cfg.d_model;
  const std::size_t last = prompt.size() - 1;
  const auto tgt = static_cast<std::size_t>(target);
  const std::vector<double> v0 = lm::mlp_output(model, prompt, layer);

  std::vector<double> v = v0, m(D, 0.0), s(D, 0.0), logp(V), dlogits;
  ValueResult best{v0, false, 0};
  double best_objective = std::numeric_limits<double>::infinity();
  lm::Activations acts;
  lm::ForwardOptions fo;
  lm::BackwardOptions bo;
  bo.param_grads = false;
  bo.want_override_grad = true;
  double lr = options.step_size;

  for (std::size_t it = 0;; ++it) {
    fo.mlp_override = lm::MlpOverride{layer, last, v};
    lm::forward(model, prompt, fo, acts);
    const auto row = std::span<const double>(acts.logits).subspan(last * V, V);
    const auto argmax = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const bool hit = argmax == tgt;
    if (hit && options.early_stop) return ValueResult{v, true, it};
    lm::log_softmax(row, logp);
    double penalty = 0.0;
    for (std::size_t i = 0; i < D; ++i) penalty += (v[i] - v0[i]) * (v[i] - v0[i]);
    const double objective = -logp[tgt] + options.penalty * penalty;
    if ((hit && !best.reached) || (hit == best.reached && objective < best_objective)) {
      best_objective = objective;
      best = ValueResult{v, hit, it};
    }
    if (it == options.max_steps) break;

    dlogits.assign(acts.length * V, 0.0);
    for (std::size_t j = 0; j < V; ++j) dlogits[last * V + j] = std::exp(logp[j]);
    dlogits[last * V + tgt] -= 1.0;
    std::vector<double> unused;
    const auto result = lm::backward(model, acts, dlogits, unused, bo);
    const double t = static_cast<double>(it + 1);
    for (std::size_t i = 0; i < D; ++i) {
      const double g = result.override_grad[i] + 2.0 * options.penalty * (v[i] - v0[i]);
      m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g;
      s[i] = kAdamBeta2 * s[i] + (1.0 - kAdamBeta2) * g * g;
      const double mh = m[i] / (1.0 - std::pow(kAdamBeta1, t));
      const double sh = s[i] / (1.0 - std::pow(kAdamBeta2, t));
      v[i] -= lr * mh / (std::sqrt(sh) + kAdamEps);
    }
    lr *= options.decay;
  }
  return best;
}

corpus::Tokens EditRequest::prompt(const corpus::Vocabulary& vocab) const {
  return vocab.encode(corpus::render(fact, template_id, corpus::RenderMode::kPrompt));
}

std::vector<EditRequest> eos_requests(const std::vector<corpus::FactTriple>& facts,
                                      const corpus::Vocabulary& vocab) {
  std::vector<EditRequest> out;
  for (const auto& f : facts) {
    for (int tid : f.template_ids) out.push_back(EditRequest{f, tid, vocab.eos(), std::nullopt});
  }
  return out;
}

Matrix delta_from_residual(const kv::KeyStats& stats, const Matrix& k_e, const Matrix& residual,
                           double ridge) {
  const std::size_t F = stats.c0.dim();
  if (k_e.rows() != F) throw Error(ErrorKind::kShapeMismatch, "K_e rows != d_mlp");
  if (residual.cols() != k_e.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "K_e and residual column counts differ");
  }
  if (ridge < 0.0) throw Error(ErrorKind::kConfig, "ridge must be >= 0");
  if (k_e.cols() == 0) return Matrix(residual.rows(), F);
  Matrix a = stats.scaled();
  a += numerics::matmul_nt(k_e, k_e);
  const double tr = numerics::trace(a);
  for (std::size_t i = 0; i < F; ++i) a(i, i) += ridge * tr;
  const numerics::Cholesky chol(a);
  if (ridge == 0.0 && chol.condition_estimate() > numerics::kSingularConditionThreshold) {
    throw Error(ErrorKind::kSingularSystem, "λC0 + K_e·K_eᵀ is numerically singular");
  }
  return chol.solve_right(numerics::matmul_nt(residual, k_e));
}

DeltaMatrix closed_form_delta(const Matrix& w0, const kv::KeyStats& stats, const Matrix& k_e,
                              const Matrix& v_e, double ridge) {
  if (w0.cols() != k_e.rows() || w0.rows() != v_e.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "W0, K_e and V_e shapes disagree");
  }
  Matrix r = v_e;
  r -= numerics::matmul(w0, k_e);
  return DeltaMatrix{stats.layer, delta_from_residual(stats, k_e, r, ridge)};
}

Matrix request_keys(const lm::ModelCheckpoint& model, const std::vector<EditRequest>& requests,
                    std::size_t layer) {
  Matrix k(model.config().d_mlp, requests.size());
  for (std::size_t j = 0; j < requests.size(); ++j) {
    k.set_column(j, lm::extract_key(model, requests[j].prompt(model.vocab()), layer).values);
  }
  return k;
}

double solve_values(const lm::ModelCheckpoint& model, std::vector<EditRequest>& requests,
                    std::size_t top, const ValueOptions& options) {
  if (requests.empty()) return 1.0;
  std::size_t reached = 0;
  for (auto& r : requests) {
    if (r.value) {
      ++reached;
      continue;
    }
    auto result = solve_target_value(model, r.prompt(model.vocab()), top, r.target, options);
    if (result.reached) ++reached;
    r.value = std::move(result.value);
  }
  return static_cast<double>(reached) / static_cast<double>(requests.size());
}

const kv::KeyStats& stats_for(const std::vector<kv::KeyStats>& stats, std::size_t layer) {
  for (const auto& s : stats) {
    if (s.layer == layer) return s;
  }
  throw Error(ErrorKind::kConfig, "no key statistics for layer " + std::to_string(layer));
}

Matrix top_residual(const lm::ModelCheckpoint& model, const std::vector<EditRequest>& requests,
                    std::size_t top) {
  const std::size_t D = model.config().d_model;
  Matrix v_e(D, requests.size());
  for (std::size_t j = 0; j < requests.size(); ++j) {
    if (!requests[j].value || requests[j].value->size() != D) {
      throw Error(ErrorKind::kShapeMismatch, "edit request without a d_model value");
    }
    v_e.set_column(j, *requests[j].value);
  }
  v_e -= numerics::matmul(model.get_w_out(top), request_keys(model, requests, top));
  return v_e;
}

std::vector<DeltaMatrix> spread_edit(lm::ModelCheckpoint& model,
                                     std::vector<EditRequest>& requests,
                                     const std::vector<kv::KeyStats>& stats,
                                     const SpreadOptions& options) {
  if (options.lo > options.hi || options.hi >= model.config().n_layers) {
    throw Error(ErrorKind::kConfig, "invalid edit layer range");
  }
  std::vector<DeltaMatrix> deltas;
  if (requests.empty()) return deltas;
  solve_values(model, requests, options.hi, options.value_options);
  const Matrix r_top = top_residual(model, requests, options.hi);
  for (std::size_t l = options.lo; l <= options.hi; ++l) {
    Matrix r = r_top;
    r *= 1.0 / static_cast<double>(options.hi - l + 1);
    const Matrix k = request_keys(model, requests, l);
    DeltaMatrix d{l, delta_from_residual(stats_for(stats, l), k, r, options.ridge)};
    model.add_to_w_out(l, d.values);
    deltas.push_back(std::move(d));
  }
  return deltas;
}

void save_deltas(const std::vector<DeltaMatrix>& deltas, const std::string& meta_json,
                 const std::filesystem::path& file) {
  container::Contents c;
  c.kind = "deltas";
  c.meta_json = meta_json;
  for (const auto& d : deltas) {
    const auto v = d.values.data();
    c.tensors.push_back({"delta.layer" + std::to_string(d.layer), d.values.rows(),
                         d.values.cols(), std::vector<double>(v.begin(), v.end()), true});
  }
  container::write(file, c);
}

std::vector<DeltaMatrix> load_deltas(const std::filesystem::path& file) {
  const auto c = container::read(file);
  if (c.kind != "deltas") throw Error(ErrorKind::kFormat, file.string() + " holds no deltas");
  std::vector<DeltaMatrix> out;
  const std::string prefix = "delta.layer";
  for (const auto& t : c.tensors) {
    if (!t.name.starts_with(prefix)) throw Error(ErrorKind::kFormat, "bad delta name " + t.name);
    std::size_t layer = 0;
    try {
      layer = std::stoul(t.name.substr(prefix.size()));
    } catch (const std::exception&) {
      throw Error(ErrorKind::kFormat, "bad delta name " + t.name);
    }
    out.push_back(DeltaMatrix{layer, Matrix(t.rows, t.cols, t.data)});
  }
  return out;
}

}  // namespace kwash::memit
