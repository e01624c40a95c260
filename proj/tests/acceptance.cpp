// Acceptance run: ten criteria, one PASS/FAIL line each. Exits nonzero when
// any criterion fails. Artifacts of the end-to-end runs go to --out.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "f1_cases.hpp"
#include "kwash/editor_memit.hpp"
#include "kwash/evalsuite.hpp"
#include "kwash/io.hpp"
#include "kwash/kv_memory.hpp"
#include "kwash/pipeline.hpp"
#include "kwash/trainer.hpp"
#include "kwash/washer_law.hpp"
#include "support.hpp"

using namespace kwash;
using namespace kwash::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double eps_for(const kv::KeyStats& s) { return law::kMetricEpsRel * kv::key_total_normsq(s); }

kv::KeyStats random_stats(Rng& rng, std::size_t d2) {
  return stats_from_keys(random_matrix(rng, d2, d2 + rng.index(2 * d2 + 1)));
}

Outcome closed_form() {
  Rng rng(101);
  double worst_ls = 0.0, worst_cf = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d1 = 1 + rng.index(8), d2 = 1 + rng.index(16);
    const std::size_t n = d2 + rng.index(33 - d2), u = 1 + rng.index(4);
    const Matrix k = random_matrix(rng, d2, n), v = random_matrix(rng, d1, n);
    const EMat ek = to_eigen(k);
    const EMat normal = (ek * ek.transpose()).ldlt().solve(ek * to_eigen(v).transpose()).transpose();
    worst_ls = std::max(worst_ls, rel_diff(to_eigen(numerics::least_squares_fit(k, v, 0.0)), normal));

    const Matrix w0 = random_matrix(rng, d1, d2);
    const Matrix ke = random_matrix(rng, d2, u), ve = random_matrix(rng, d1, u);
    const auto d = memit::closed_form_delta(w0, stats_from_keys(k), ke, ve, 0.0);
    // argmin_W ||W·K − W0·K||² + ||W·K_e − V_e||².
    const EMat eke = to_eigen(ke), ew0 = to_eigen(w0);
    const EMat a = ek * ek.transpose() + eke * eke.transpose();
    const EMat rhs = ew0 * ek * ek.transpose() + to_eigen(ve) * eke.transpose();
    const EMat direct = a.ldlt().solve(rhs.transpose()).transpose();
    worst_cf = std::max(worst_cf, rel_diff(ew0 + to_eigen(d.values), direct));
  }
  return {worst_ls <= 1e-6 && worst_cf <= 1e-6,
          fmt("max rel diff: least squares %.2e, closed form %.2e", worst_ls, worst_cf)};
}

Outcome pythagorean() {
  Rng rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d1 = 1 + rng.index(8), d2 = 1 + rng.index(16);
    const std::size_t n = d2 + rng.index(33 - d2);
    const Matrix k = random_matrix(rng, d2, n), v = random_matrix(rng, d1, n);
    const EMat w0 = to_eigen(numerics::least_squares_fit(k, v, 0.0));
    const EMat delta = to_eigen(random_matrix(rng, d1, d2));
    const EMat ek = to_eigen(k), ev = to_eigen(v);
    const double lhs = ((w0 + delta) * ek - ev).squaredNorm() - (w0 * ek - ev).squaredNorm();
    const double rhs = (delta * ek).squaredNorm();
    worst = std::max(worst, std::abs(lhs - rhs) / rhs);
  }
  return {worst <= 1e-6, fmt("max rel error %.2e", worst)};
}

Outcome optimizer_vs_oracle() {
  Rng rng(103);
  double worst_ratio = 1.0, worst_slack = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d2 = 2 + rng.index(63), m = 1 + rng.index(32), d1 = 1 + rng.index(8);
    const Matrix k_w = random_matrix(rng, d2, m);
    const auto stats = random_stats(rng, d2);
    const double beta = 0.05 + rng.uniform();
    const auto r = law::optimize_delta(random_matrix(rng, d1, d2, 1e-2), k_w, stats, beta);
    const double bound = law::oracle_optimum(k_w, stats, beta, eps_for(stats)).upper_bound;
    worst_ratio = std::min(worst_ratio, r.objective / bound);
    worst_slack = std::max(worst_slack, r.constraint_ratio / beta - 1.0);
  }
  return {worst_ratio >= 0.99 && worst_slack <= 1e-3,
          fmt("min objective/bound %.6f, max constraint slack %.2e", worst_ratio, worst_slack)};
}

Outcome gradient_check() {
  Rng rng(104);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d1 = 1 + rng.index(4), d2 = 2 + rng.index(8);
    const Matrix k_w = random_matrix(rng, d2, 1 + rng.index(5));
    const auto stats = random_stats(rng, d2);
    Matrix delta = random_matrix(rng, d1, d2);
    const Matrix g_obj = law::objective_gradient(delta, k_w);
    const Matrix g_con = law::constraint_gradient(delta, stats);
    const double h = 1e-5;
    for (std::size_t i = 0; i < d1; ++i) {
      for (std::size_t j = 0; j < d2; ++j) {
        const double saved = delta(i, j);
        delta(i, j) = saved + h;
        const double o_up = law::wash_objective(delta, k_w), c_up = kv::delta_k_normsq(delta, stats);
        delta(i, j) = saved - h;
        const double o_dn = law::wash_objective(delta, k_w), c_dn = kv::delta_k_normsq(delta, stats);
        delta(i, j) = saved;
        const double n_obj = (o_up - o_dn) / (2 * h), n_con = (c_up - c_dn) / (2 * h);
        worst = std::max(worst, std::abs(g_obj(i, j) - n_obj) / std::max(std::abs(n_obj), 1e-8));
        worst = std::max(worst, std::abs(g_con(i, j) - n_con) / std::max(std::abs(n_con), 1e-8));
      }
    }
  }
  return {worst <= 1e-4, fmt("max elementwise rel error %.2e", worst)};
}

Outcome gamma_phases() {
  Rng rng(105);
  std::size_t contracted = 0, diverged = 0;
  double worst_norm = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d2 = 2 + rng.index(15);
    const Matrix k_w = random_matrix(rng, d2, 1 + rng.index(6));
    const auto stats = random_stats(rng, d2);
    const double lmax = law::oracle_optimum(k_w, stats, 1.0, eps_for(stats)).lambda_max;
    law::GammaOptions go;
    go.seed = static_cast<std::uint64_t>(trial);
    const auto low = law::wash_delta_gamma(k_w, stats, (0.2 + 0.75 * rng.uniform()) / lmax, 4, go);
    const double norm = std::sqrt(numerics::frobenius_sq(low.delta));
    worst_norm = std::max(worst_norm, norm);
    contracted += !low.diverged && norm <= 1e-6;
    const auto high = law::wash_delta_gamma(k_w, stats, (1.05 + rng.uniform()) / lmax, 4, go);
    diverged += high.diverged;
  }
  return {contracted == 20 && diverged == 20,
          fmt("below threshold %zu/20 contracted (max norm %.1e), above %zu/20 diverged", contracted,
              worst_norm, diverged)};
}

Outcome metric_oracle() {
  std::size_t ok = 0, total = 0;
  for (const auto& c : kF1Cases) {
    ++total;
    ok += std::abs(eval::qa_f1_pair(c.prediction, c.gold) - c.expected) <= 1e-15;
  }
  return {ok == total && total == 20, fmt("%zu/%zu pairs match", ok, total)};
}

// State shared by the end-to-end criteria.
struct EndToEnd {
  fs::path dir;
  pipeline::ExperimentConfig config;
  corpus::CorpusBundle bundle;
  lm::ModelCheckpoint model;
  eval::Metrics before;
  pipeline::WashOutcome law;
  double pretrain_seconds = 0.0;
  double law_seconds = 0.0;
  bool ready = false;
};

std::string metrics_line(const eval::Metrics& m) {
  return fmt("washed %.3f retained %.3f reasoning %.3f fluency %.4f", m.washed_acc, m.retained_acc,
             m.reasoning_acc, m.fluency_log_ppl);
}

// Pretrain and wash from an experiment config, the way criterion 6 runs it.
struct Replayable {
  lm::ModelCheckpoint model;
  pipeline::WashOutcome law;
};

Replayable run_experiment(const pipeline::ExperimentConfig& config, corpus::CorpusBundle& bundle,
                          double* pretrain_seconds) {
  bundle = pipeline::make_corpus(config.corpus);
  const auto t0 = Clock::now();
  auto model = train::pretrain(bundle, config.train);
  model.round_to_storage();
  if (pretrain_seconds) *pretrain_seconds = seconds_since(t0);
  auto law = pipeline::run_wash(model, bundle, bundle.facts_wash, config.wash);
  return {std::move(model), std::move(law)};
}

void write_artifacts(const fs::path& dir, const std::string& tag, const lm::ModelCheckpoint& model,
                     const eval::WashReport& report) {
  lm::save_checkpoint(model, dir / (tag + ".kwck"));
  io::write_atomic(dir / (tag + "_report.jsonl"), eval::to_jsonl(report));
  io::write_atomic(dir / (tag + "_report.txt"), eval::to_table(report));
}

Outcome end_to_end(EndToEnd& e) {
  fs::create_directories(e.dir);
  io::write_atomic(e.dir / "experiment.json", pipeline::to_json(e.config));
  const auto t0 = Clock::now();
  auto r = run_experiment(e.config, e.bundle, &e.pretrain_seconds);
  e.model = std::move(r.model);
  e.law = std::move(r.law);
  e.before = e.law.report.before;
  e.law_seconds = seconds_since(t0) - e.pretrain_seconds;
  lm::save_checkpoint(e.model, e.dir / "pretrained.kwck");
  write_artifacts(e.dir, "law", e.law.model, e.law.report);
  io::write_atomic(e.dir / "law_trace.jsonl", law::to_jsonl(e.law.trace));
  e.ready = true;

  const auto& b = e.law.report.before;
  const auto& a = e.law.report.after;
  // Training facts are the wash and retain splits plus the neighborhood facts.
  const double train_acc = eval::fact_accuracy(e.model, e.bundle.facts_train);
  const double total = seconds_since(t0);
  const bool trained = train_acc >= 0.95 && b.reasoning_acc >= 0.90;
  const bool washed = a.washed_acc <= 0.10 && a.retained_acc >= 0.80 &&
                      b.reasoning_acc - a.reasoning_acc <= 0.05 &&
                      a.fluency_log_ppl <= 1.15 * b.fluency_log_ppl;
  return {trained && washed && total <= 20 * 60,
          fmt("pretrained fact acc %.3f reasoning %.3f; after LaW: %s (fluency %+.1f%%); %.0f s",
              train_acc, b.reasoning_acc, metrics_line(a).c_str(),
              100.0 * (a.fluency_log_ppl / b.fluency_log_ppl - 1.0), total)};
}

Outcome baselines(EndToEnd& e) {
  if (!e.ready) return {false, "end-to-end run unavailable"};
  const auto t0 = Clock::now();
  auto s = e.config.wash;
  s.method = pipeline::Method::kFtUl;
  const auto ftul = pipeline::run_wash(e.model, e.bundle, e.bundle.facts_wash, s, &e.before);
  write_artifacts(e.dir, "ft-ul", ftul.model, ftul.report);
  s.method = pipeline::Method::kMemit;
  const auto memit = pipeline::run_wash(e.model, e.bundle, e.bundle.facts_wash, s, &e.before);
  write_artifacts(e.dir, "memit", memit.model, memit.report);
  const double total = seconds_since(t0) + e.pretrain_seconds + e.law_seconds;

  const double base = e.before.fluency_log_ppl;
  const double ftul_inc = ftul.report.after.fluency_log_ppl - base;
  const double law_inc = e.law.report.after.fluency_log_ppl - base;
  const double memit_w = memit.report.after.washed_acc, law_w = e.law.report.after.washed_acc;
  const bool fluency_order = ftul_inc > law_inc;
  const bool memit_order = memit_w >= law_w || std::abs(memit_w - law_w) <= 0.02;
  return {fluency_order && memit_order && total <= 30 * 60,
          fmt("fluency increase FT-UL %+.4f vs LaW %+.4f (%s); washed MEMIT %.3f vs LaW %.3f (%s); "
              "%.0f s",
              ftul_inc, law_inc, fluency_order ? "ok" : "violated", memit_w, law_w,
              memit_order ? "ok" : "violated", total)};
}

Outcome ablations(EndToEnd& e) {
  if (!e.ready) return {false, "end-to-end run unavailable"};
  const auto t0 = Clock::now();
  std::string table;
  auto sweep = [&](pipeline::AblationAxis axis) {
    pipeline::AblationSpec spec;
    spec.axis = axis;
    const auto points = pipeline::run_ablation(e.model, e.bundle, e.config.wash, spec);
    const auto summary = pipeline::summarize(points);
    table += pipeline::to_table(summary);
    return summary;
  };
  const auto init = sweep(pipeline::AblationAxis::kInit);
  const auto beta = sweep(pipeline::AblationAxis::kBeta);
  const auto se = sweep(pipeline::AblationAxis::kSuccessiveElimination);
  io::write_atomic(e.dir / "ablations.txt", table);
  const double total = seconds_since(t0);

  auto find = [](const std::vector<pipeline::AblationSummary>& s, const std::string& label) {
    for (const auto& x : s) {
      if (x.label == label) return x;
    }
    throw std::runtime_error("missing ablation label " + label);
  };
  const auto memit_init = find(init, "init=memit"), random_init = find(init, "init=random");
  const bool a = memit_init.washed_acc <= random_init.washed_acc;
  bool b = beta.size() == 3;
  for (std::size_t i = 1; i < beta.size(); ++i) {
    b = b && beta[i].washed_acc <= beta[i - 1].washed_acc &&
        beta[i].retained_acc <= beta[i - 1].retained_acc;
  }
  const auto se_on = find(se, "se=on"), se_off = find(se, "se=off");
  const bool c = se_on.washed_acc <= se_off.washed_acc;
  std::string betas;
  for (const auto& x : beta) betas += fmt(" %s %.3f/%.3f", x.label.c_str(), x.washed_acc, x.retained_acc);
  return {a && b && c && total <= 45 * 60,
          fmt("(a) %s: washed memit-init %.3f vs random-init %.3f; (b) %s: washed/retained%s; "
              "(c) %s: washed se-on %.3f vs se-off %.3f; %.0f s",
              a ? "holds" : "violated", memit_init.washed_acc, random_init.washed_acc,
              b ? "holds" : "violated", betas.c_str(), c ? "holds" : "violated", se_on.washed_acc,
              se_off.washed_acc, total)};
}

Outcome reproducibility(EndToEnd& e) {
  if (!e.ready) return {false, "end-to-end run unavailable"};
  const auto config = pipeline::experiment_from_json(io::read_file(e.dir / "experiment.json"));
  corpus::CorpusBundle bundle;
  const auto r = run_experiment(config, bundle, nullptr);
  const fs::path dir = e.dir / "replay";
  fs::create_directories(dir);
  write_artifacts(dir, "law", r.law.model, r.law.report);
  const bool pretrained = r.model.checksum() == e.model.checksum();
  const bool washed = io::file_checksum(dir / "law.kwck") == io::file_checksum(e.dir / "law.kwck");
  const bool report =
      io::file_checksum(dir / "law_report.jsonl") == io::file_checksum(e.dir / "law_report.jsonl") &&
      io::file_checksum(dir / "law_report.txt") == io::file_checksum(e.dir / "law_report.txt");
  return {pretrained && washed && report,
          fmt("pretrained checkpoint %s, washed checkpoint %s, report %s",
              pretrained ? "identical" : "differs", washed ? "identical" : "differs",
              report ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_run";
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--out") out = argv[i + 1];
  }

  EndToEnd e;
  e.dir = out;

  struct Criterion {
    int id;
    const char* name;
    double limit_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "closed-form correctness", 10, closed_form},
      {2, "pythagorean identity", 5, pythagorean},
      {3, "optimizer vs oracle", 60, optimizer_vs_oracle},
      {4, "gradient check", 30, gradient_check},
      {5, "penalized phase behavior", 30, gamma_phases},
      {6, "end-to-end wash", 0, [&] { return end_to_end(e); }},
      {7, "baseline ordering", 0, [&] { return baselines(e); }},
      {8, "ablation trends", 0, [&] { return ablations(e); }},
      {9, "metric oracle", 1, metric_oracle},
      {10, "reproducibility", 0, [&] { return reproducibility(e); }},
  };

  std::size_t failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    const double secs = seconds_since(t0);
    if (c.limit_seconds > 0 && secs > c.limit_seconds) {
      o.pass = false;
      o.detail += fmt(" [took %.1f s, limit %.0f s]", secs, c.limit_seconds);
    }
    failed += !o.pass;
    std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << " " << c.name << ": "
              << o.detail << fmt(" (%.1f s)", secs) << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
