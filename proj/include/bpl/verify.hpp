#pragma once
// Machine-checkable verification suite over the target algebra, the trace
// learner, and the cells' analytic derivatives. Each check produces one
// record (name, instance spec, measured deviation, pass flag) so the CLI can
// stream a JSON-lines report; the acceptance harness reuses the same checks
// with its own gates. A record whose non-degeneracy precondition fails
// carries a null pass flag instead of a verdict.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bpl/baselines.hpp"
#include "bpl/bp_lambda.hpp"
#include "bpl/cells.hpp"
#include "bpl/rng.hpp"
#include "bpl/theory.hpp"

namespace bpl {

struct CheckRecord {
  std::string name;
  nlohmann::json spec;
  double deviation = 0.0;
  std::optional<bool> pass;
  std::string note;
};

inline nlohmann::json check_to_json(const CheckRecord& r) {
  nlohmann::json j = {{"name", r.name}, {"spec", r.spec}, {"deviation", r.deviation}};
  if (r.pass) j["pass"] = *r.pass;
  else j["pass"] = nullptr;
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

inline const char* cell_kind_name(CellKind k) {
  switch (k) {
    case CellKind::linear: return "linear";
    case CellKind::tanh_: return "tanh";
    default: return "lstm";
  }
}

// --- analytic derivatives vs central differences ----------------------------

inline Mat sub_mat(const Mat& a, const Mat& b) {
  require(a.rows == b.rows && a.cols == b.cols, "sub_mat: shape mismatch");
  Mat r(a.rows, a.cols);
  for (std::size_t i = 0; i < r.d.size(); ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}

inline CheckRecord check_fd_jacobian(CellKind kind, std::size_t draws, std::uint64_t seed) {
  const std::size_t units = (kind == CellKind::lstm) ? 4 : 5;
  const std::size_t in_dim = 3;
  double worst = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    Rng rng(mix_seed(seed, 0xFD00 + d));
    auto cell = make_cell(kind, units, in_dim, rng);
    const std::size_t sd = cell->layout().state_dim;
    const Vec x = rng.uniform_vec(in_dim, -1.0, 1.0);
    const Vec h = rng.uniform_vec(sd, -1.0, 1.0);
    StepResult r = cell->step(x, h);
    Mat fd = finite_difference_jacobian(
        [&](const Vec& hh) { return cell->step(x, hh).next_state; }, h, 1e-5);
    const double gap = max_abs(sub_mat(r.jac, fd)) / (max_abs(r.jac) + 1e-9);
    worst = std::max(worst, gap);
  }
  CheckRecord rec;
  rec.name = std::string("fd_jacobian_") + cell_kind_name(kind);
  rec.spec = {{"cell", cell_kind_name(kind)}, {"units", units}, {"in_dim", in_dim},
              {"draws", draws}};
  rec.deviation = worst;
  rec.pass = worst < 1e-5;
  return rec;
}

inline CheckRecord check_fd_param_vjp(CellKind kind, std::size_t draws, std::uint64_t seed) {
  const std::size_t units = (kind == CellKind::lstm) ? 4 : 5;
  const std::size_t in_dim = 3;
  double worst = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    Rng rng(mix_seed(seed, 0xFDB0 + d));
    auto cell = make_cell(kind, units, in_dim, rng);
    const std::size_t sd = cell->layout().state_dim;
    const Vec x = rng.uniform_vec(in_dim, -1.0, 1.0);
    const Vec h = rng.uniform_vec(sd, -1.0, 1.0);
    const Vec v = rng.uniform_vec(sd, -1.0, 1.0);

    StepResult r = cell->step(x, h);
    CellGrads analytic = cell->zero_grads();
    cell->accumulate_param_grads(r, v, analytic);

    std::vector<Mat*> ps = cell->params();
    for (std::size_t k = 0; k < ps.size(); ++k) {
      Mat fd(ps[k]->rows, ps[k]->cols);
      for (std::size_t i = 0; i < ps[k]->d.size(); ++i) {
        const double keep = ps[k]->d[i];
        const double eps = 1e-5;
        ps[k]->d[i] = keep + eps;
        cell->mark_params_updated();
        const double up = dot(v, cell->step(x, h).next_state);
        ps[k]->d[i] = keep - eps;
        cell->mark_params_updated();
        const double dn = dot(v, cell->step(x, h).next_state);
        ps[k]->d[i] = keep;
        cell->mark_params_updated();
        fd.d[i] = (up - dn) / (2.0 * eps);
      }
      worst = std::max(worst, max_abs(sub_mat(analytic.g[k], fd)) /
                                  (max_abs(analytic.g[k]) + 1e-9));
    }
  }
  CheckRecord rec;
  rec.name = std::string("fd_vjp_") + cell_kind_name(kind);
  rec.spec = {{"cell", cell_kind_name(kind)}, {"units", units}, {"in_dim", in_dim},
              {"draws", draws}};
  rec.deviation = worst;
  rec.pass = worst < 1e-5;
  return rec;
}

// --- target algebra ---------------------------------------------------------

// lambda_target(0) == one-step target, lambda_target(1) == true gradient,
// interim at the full horizon == lambda_target, and the mixture weights
// sum to one, across random linear systems.
inline std::vector<CheckRecord> check_target_coherence(std::size_t instances,
                                                       std::uint64_t seed) {
  double d_l0 = 0.0, d_l1 = 0.0, d_interim = 0.0, d_wsum = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    Rng meta(mix_seed(seed, 0x7A36 + i));
    const std::size_t T = 3 + meta.uniform_index(6);  // 3..8
    TheorySystem sys = make_theory_system(CellKind::linear, 3 + meta.uniform_index(3), 3, T,
                                          mix_seed(seed, 0x7A00 + i), 0.3);
    ThetaTimeline tl(sys.theta0);
    for (std::size_t t = 0; t < T; ++t) {
      d_l0 = std::max(d_l0, norm_inf(sub(lambda_target(sys.traj, t, 0.0, tl, 0.9),
                                         n_step_target(sys.traj, t, 1, tl, 0.9))));
      d_l1 = std::max(d_l1, norm_inf(sub(lambda_target(sys.traj, t, 1.0, tl, 0.9),
                                         true_gradient(sys.traj, t, 0.9))));
      for (double lam : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        d_interim = std::max(
            d_interim, norm_inf(sub(interim_lambda_target(sys.traj, t, lam, T, tl, 0.9),
                                    lambda_target(sys.traj, t, lam, tl, 0.9))));
        double wsum = std::pow(lam, static_cast<double>(T - t - 1));
        for (std::size_t n = 1; n + t + 1 <= T; ++n)
          wsum += (1.0 - lam) * std::pow(lam, static_cast<double>(n - 1));
        d_wsum = std::max(d_wsum, std::fabs(wsum - 1.0));
      }
    }
  }
  auto rec = [&](const char* name, double dev) {
    CheckRecord r;
    r.name = name;
    r.spec = {{"instances", instances}, {"cell", "linear"}, {"max_T", 8}};
    r.deviation = dev;
    r.pass = dev < 1e-12;
    return r;
  };
  return {rec("coherence_lambda0_vs_one_step", d_l0),
          rec("coherence_lambda1_vs_true_gradient", d_l1),
          rec("coherence_interim_at_full_horizon", d_interim),
          rec("coherence_weight_sum", d_wsum)};
}

// Backward recursion for the lambda-target vs its definition.
inline std::vector<CheckRecord> check_prop2(std::size_t instances, std::uint64_t seed) {
  std::vector<CheckRecord> out;
  for (double lam : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    double worst = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
      const CellKind kind = (i % 2 == 0) ? CellKind::linear : CellKind::tanh_;
      TheorySystem sys =
          make_theory_system(kind, 3, 3, 6, mix_seed(seed, 0xB200 + i), 0.3);
      ThetaTimeline tl(sys.theta0);
      worst = std::max(worst, recursive_identity_check(sys.traj, tl, lam, 0.9));
    }
    CheckRecord r;
    r.name = "prop2_recursion";
    r.spec = {{"lambda", lam}, {"instances", instances}, {"T", 6}};
    r.deviation = worst;
    r.pass = worst < 1e-10;
    out.push_back(std::move(r));
  }
  return out;
}

// --- lemma chain ------------------------------------------------------------

inline std::vector<CheckRecord> check_lemmas(std::uint64_t seed) {
  struct Inst {
    CellKind kind;
    double lambda;
  };
  const Inst insts[] = {{CellKind::linear, 0.7}, {CellKind::tanh_, 0.9}};
  std::vector<CheckRecord> out;
  for (const Inst& in : insts) {
    LemmaSuiteResult res =
        run_lemma_suite(in.kind, 4, 3, 7, mix_seed(seed, 0xA000), in.lambda, 0.9);
    nlohmann::json spec = {{"cell", cell_kind_name(in.kind)}, {"units", 4}, {"T", 7},
                           {"lambda", in.lambda}, {"gamma", 0.9}};
    auto rec = [&](const char* name, double dev, bool ok) {
      CheckRecord r;
      r.name = name;
      r.spec = spec;
      r.deviation = dev;
      r.pass = ok;
      return r;
    };
    out.push_back(rec("lemma1_frozen", res.frozen.l1, res.frozen.l1 < 1e-10));
    out.push_back(rec("lemma2_frozen", res.frozen.l2, res.frozen.l2 < 1e-10));
    out.push_back(rec("lemma3_frozen", res.frozen.l3, res.frozen.l3 < 1e-10));
    out.push_back(rec("lemma4_frozen", res.frozen.l4, res.frozen.l4 < 1e-10));
    out.push_back(rec("lemma_composition_frozen", res.frozen.l2l3_route,
                      res.frozen.l2l3_route < 1e-10));
    out.push_back(rec("lemma5_trace_unroll", res.frozen.l5, res.frozen.l5 < 1e-10));
    out.push_back(rec("frozen_delta_pair_exact", res.frozen.delta_pair,
                      res.frozen.delta_pair == 0.0));

    CheckRecord g;
    g.name = "lemma6_gap_scaling";
    g.spec = spec;
    g.spec["alpha_hi"] = res.alpha_hi;
    g.spec["alpha_lo"] = res.alpha_lo;
    const double alpha_ratio = res.alpha_hi / res.alpha_lo;
    if (res.moving_lo.l6_gap > 1e-300) {
      const double gap_ratio = res.moving_hi.l6_gap / res.moving_lo.l6_gap;
      g.deviation = gap_ratio / alpha_ratio;
      g.pass = g.deviation >= 0.5 && g.deviation <= 2.0;
    } else {
      g.deviation = 0.0;
      g.pass = std::nullopt;
      g.note = "gap at the small step size vanished; scaling ratio undefined";
    }
    out.push_back(std::move(g));
  }
  return out;
}

// --- trace learner vs online regression -------------------------------------

inline std::vector<CheckRecord> check_theorem1(const std::vector<std::uint64_t>& seeds,
                                               const std::vector<CellKind>& kinds,
                                               const std::vector<double>& lambdas,
                                               std::vector<double> alphas,
                                               double final_threshold = 0.05) {
  std::vector<CheckRecord> out;
  for (std::uint64_t seed : seeds) {
    for (CellKind kind : kinds) {
      TheorySystem sys = make_theory_system(kind, 5, 4, 8, mix_seed(seed, 0x7E01), 0.0);

      for (double lam : lambdas) {
        RatioReport rep = theorem1_ratio(sys, lam, 0.9, alphas);
        CheckRecord r;
        r.name = "theorem1_ratio";
        r.spec = {{"seed", seed}, {"cell", cell_kind_name(kind)}, {"lambda", lam},
                  {"gamma", 0.9}, {"units", 5}, {"T", 8}, {"alphas", alphas}};
        if (!rep.condition_ok) {
          r.pass = std::nullopt;
          r.note = "non-degeneracy condition violated (a Delta-sum element is zero)";
          r.deviation = rep.condition_min_abs;
        } else {
          bool monotone = true;
          for (std::size_t i = 1; i < rep.points.size(); ++i)
            if (rep.points[i].max_ratio > rep.points[i - 1].max_ratio + 1e-12)
              monotone = false;
          const double final_ratio = rep.points.back().max_ratio;
          r.deviation = final_ratio;
          r.pass = monotone && final_ratio < final_threshold;
          if (!monotone) r.note = "ratio failed to decrease across the alpha sweep";
        }
        out.push_back(std::move(r));
      }

      RatioReport zero = theorem1_ratio(sys, 0.0, 0.9, alphas);
      CheckRecord z;
      z.name = "theorem1_lambda0_coincidence";
      z.spec = {{"seed", seed}, {"cell", cell_kind_name(kind)}, {"gamma", 0.9},
                {"units", 5}, {"T", 8}, {"alphas", alphas}};
      double worst = 0.0;
      for (const RatioPoint& p : zero.points) worst = std::max(worst, p.max_ratio);
      z.deviation = worst;
      z.pass = zero.condition_ok ? std::optional<bool>(worst < 1e-12) : std::nullopt;
      out.push_back(std::move(z));
    }
  }
  return out;
}

// --- the whole suite --------------------------------------------------------

inline std::vector<CheckRecord> run_verify_suite(std::uint64_t seed = 2024) {
  std::vector<CheckRecord> recs;
  for (CellKind k : {CellKind::linear, CellKind::tanh_, CellKind::lstm}) {
    recs.push_back(check_fd_jacobian(k, 100, seed));
    recs.push_back(check_fd_param_vjp(k, 25, seed));
  }
  for (CheckRecord& r : check_target_coherence(20, seed)) recs.push_back(std::move(r));
  for (CheckRecord& r : check_prop2(10, seed)) recs.push_back(std::move(r));
  for (CheckRecord& r : check_lemmas(seed)) recs.push_back(std::move(r));
  std::vector<std::uint64_t> t1_seeds;
  for (std::uint64_t s = 1; s <= 5; ++s) t1_seeds.push_back(mix_seed(seed, s));
  for (CheckRecord& r :
       check_theorem1(t1_seeds, {CellKind::linear, CellKind::tanh_}, {0.5, 0.9, 1.0},
                      {1e-2, 1e-3, 1e-4, 1e-5}))
    recs.push_back(std::move(r));
  return recs;
}

}  // namespace bpl
