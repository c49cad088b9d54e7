#pragma once
// Numerical probes behind the library's correctness story: finite-difference
// oracles, frozen random test systems, the per-step-vs-online weight ratio
// study, the backward recursion identity for lambda targets, and the chain of
// trace/target identities that connect the eligibility-trace updates to the
// regression-on-targets view.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "bpl/baselines.hpp"
#include "bpl/bp_lambda.hpp"
#include "bpl/cells.hpp"
#include "bpl/rng.hpp"
#include "bpl/sequence.hpp"
#include "bpl/synth.hpp"
#include "bpl/tensor.hpp"

namespace bpl {

// ---- finite differences (central) ----

inline Vec finite_difference_grad(const std::function<double(const Vec&)>& fn, const Vec& x,
                                  double step) {
  require(step > 0.0, "finite_difference_grad: step must be positive");
  Vec g(x.size());
  Vec p = x;
  for (std::size_t j = 0; j < x.size(); ++j) {
    p[j] = x[j] + step;
    const double up = fn(p);
    p[j] = x[j] - step;
    const double dn = fn(p);
    p[j] = x[j];
    if (!std::isfinite(up) || !std::isfinite(dn))
      throw std::runtime_error("finite_difference_grad: non-finite evaluation");
    g[j] = (up - dn) / (2.0 * step);
  }
  return g;
}

inline Mat finite_difference_jacobian(const std::function<Vec(const Vec&)>& fn, const Vec& x,
                                      double step) {
  require(step > 0.0, "finite_difference_jacobian: step must be positive");
  Vec p = x;
  Mat jac;
  for (std::size_t j = 0; j < x.size(); ++j) {
    p[j] = x[j] + step;
    Vec up = fn(p);
    p[j] = x[j] - step;
    Vec dn = fn(p);
    p[j] = x[j];
    require(up.size() == dn.size(), "finite_difference_jacobian: output size changed");
    if (jac.rows == 0) jac = Mat(up.size(), x.size());
    for (std::size_t i = 0; i < up.size(); ++i) {
      if (!std::isfinite(up[i]) || !std::isfinite(dn[i]))
        throw std::runtime_error("finite_difference_jacobian: non-finite evaluation");
      jac.at(i, j) = (up[i] - dn[i]) / (2.0 * step);
    }
  }
  return jac;
}

// G^ . G / (|G^||G|); empty when either side is numerically zero.
inline std::optional<double> cosine_alignment(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "cosine_alignment: length mismatch");
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na < 1e-150 || nb < 1e-150) return std::nullopt;
  return dot(a, b) / (na * nb);
}

// d h_b / d h_a as the ordered product of one-step Jacobians.
inline Mat jac_chain(const Trajectory& tr, std::size_t a, std::size_t b) {
  require(a <= b && b <= tr.T(), "jac_chain: bad step range");
  Mat m = Mat::identity(tr.states[0].size());
  for (std::size_t tau = a; tau < b; ++tau) m = matmul(tr.jacs[tau], m);
  return m;
}

// ---- frozen test systems ----
//
// A fixed random cell and readout, random inputs, and a random regression
// target at every step, so loss gradients are dense in time. The model is
// never trained here: the recorded trajectory is the shared ground all
// verification probes run on.

struct TheorySystem {
  std::unique_ptr<Cell> cell;
  Readout ro;
  Episode ep;
  Trajectory traj;
  SynthParams theta0;
};

inline TheorySystem make_theory_system(CellKind kind, std::size_t units, std::size_t in_dim,
                                       std::size_t T, std::uint64_t seed,
                                       double theta0_scale = 0.0) {
  Rng rng(seed);
  TheorySystem s;
  s.cell = make_cell(kind, units, in_dim, rng);
  const StateLayout lo = s.cell->layout();
  s.ro = Readout(lo.readout_dim, lo.readout_dim, Head::mse, rng);
  for (std::size_t t = 0; t < T; ++t) {
    TaskStep st;
    st.input = rng.uniform_vec(in_dim, -1.0, 1.0);
    StepTarget tg;
    tg.value = rng.uniform_vec(lo.readout_dim, -1.0, 1.0);
    st.target = tg;
    s.ep.steps.push_back(std::move(st));
  }
  s.theta0.theta = Mat(lo.state_dim, lo.state_dim + 1);
  if (theta0_scale > 0.0)
    for (double& x : s.theta0.theta.d) x = rng.uniform(-theta0_scale, theta0_scale);
  s.traj = record_trajectory(*s.cell, s.ro, s.ep);
  return s;
}

// One pure per-step trace run (no optimiser, no batching) recording the
// whole synthesiser parameter path theta_0..theta_T.
struct RawRun {
  std::vector<SynthParams> thetas;
  Trajectory traj;
};

inline RawRun raw_trace_run(const TheorySystem& sys, double alpha, double lambda, double gamma) {
  BpLambdaConfig cfg;
  cfg.gamma = gamma;
  cfg.lambda = lambda;
  cfg.alpha = alpha;
  cfg.raw_theta_updates = true;
  cfg.train_model = false;
  SynthParams th = sys.theta0;
  SeqAccums acc;
  acc.init(*sys.cell, sys.ro, th);
  EligibilityTrace trace(th.state_dim());
  RawRun out;
  SequenceTaps taps;
  taps.traj = &out.traj;
  taps.theta_log = &out.thetas;
  bp_lambda_sequence(*sys.cell, sys.ro, th, sys.ep, cfg, acc, trace, taps);
  return out;
}

// ---- identity chain over a recorded parameter path ----
//
// For a trajectory h_0..h_T and synthesiser path theta_0..theta_T, define per
// step b the inconsistency vectors (both use theta_b at the successor state):
//   dvec[b]  = J_{b+1}^T (gl_{b+1} + gamma g(h_{b+1}; theta_b)) - g(h_b; theta_b)
//   dpvec[b] = same, but the subtracted term evaluates at theta_{b-1}
// and their pullbacks to an earlier state a through d h_b / d h_a. The
// deviations below check, for every valid (a, t):
//   l1:  interim(a, t+1) - interim(a, t) = (lambda gamma)^{t-a} * pulled dpvec[t]
//   l2:  interim(a, t) = interim(a, a+1) + sum_{b>a} (lambda gamma)^{b-a} pulled dpvec[b]
//   l3:  interim(a, a+1) = dpvec[a] + g(h_a; theta_{a-1})
//   l4:  sum_{b>=a} (lambda gamma)^{b-a} pulled dpvec[b] = interim(a, t) - g(h_a; theta_{a-1})
//   l2l3_route: l4's right side reached through the l2+l3 composition
//   l5:  the recursive eligibility trace equals its explicit unrolled sum
//   delta_pair: max |dvec[b] - dpvec[b]| (exactly zero on a constant path)
//   l6_gap: l4 with dvec in place of dpvec — the stale-evaluation gap, which
//           shrinks linearly with the learning rate that produced the path.
struct LemmaDeviations {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
  double l4 = 0.0;
  double l2l3_route = 0.0;
  double l5 = 0.0;
  double delta_pair = 0.0;
  double l6_gap = 0.0;
};

inline LemmaDeviations lemma_deviations(const Trajectory& tr,
                                        const std::vector<SynthParams>& thetas, double lambda,
                                        double gamma) {
  const std::size_t T = tr.T();
  require(T >= 2, "lemma_deviations: need at least two steps");
  require(thetas.size() >= T + 1, "lemma_deviations: need theta_0..theta_T");
  const std::size_t dim = tr.states[0].size();
  const double gl = gamma * lambda;
  ThetaTimeline tl(thetas);
  LemmaDeviations dev;

  // chains[a][b-a] = d h_b / d h_a
  std::vector<std::vector<Mat>> chains(T + 1);
  for (std::size_t a = 0; a <= T; ++a) {
    chains[a].push_back(Mat::identity(dim));
    for (std::size_t b = a + 1; b <= T; ++b)
      chains[a].push_back(matmul(tr.jacs[b - 1], chains[a][b - 1 - a]));
  }
  auto CH = [&](std::size_t a, std::size_t b) -> const Mat& { return chains[a][b - a]; };

  // g(h_m; theta_{m-1}) per the timeline convention
  auto gtl = [&](std::size_t m) { return synth_predict(tl.bootstrap_at(m), tr.states[m], m == T); };
  auto interim = [&](std::size_t a, std::size_t H) {
    return interim_lambda_target(tr, a, lambda, H, tl, gamma);
  };

  std::vector<Vec> dvec(T), dpvec(T);
  for (std::size_t b = 0; b < T; ++b) {
    Vec first = tr.loss_grads[b + 1];
    axpy(gamma, synth_predict(thetas[b], tr.states[b + 1], b + 1 == T), first);
    Vec pulled = matvec_t(tr.jacs[b], first);
    dvec[b] = sub(pulled, synth_predict(thetas[b], tr.states[b], false));
    dpvec[b] = sub(pulled, gtl(b));
    dev.delta_pair = std::max(dev.delta_pair, norm_inf(sub(dvec[b], dpvec[b])));
  }

  for (std::size_t a = 0; a < T; ++a) {
    const Vec ga = gtl(a);
    Vec sum_dp(dim);   // running sum of (gl)^{b-a} pulled dpvec[b], b from a
    Vec sum_d(dim);    // same with dvec
    for (std::size_t t = a + 1; t <= T; ++t) {
      const std::size_t b = t - 1;  // newest term entering the sums
      const double w = std::pow(gl, static_cast<double>(b - a));
      axpy(w, matvec_t(CH(a, b), dpvec[b]), sum_dp);
      axpy(w, matvec_t(CH(a, b), dvec[b]), sum_d);

      const Vec it = interim(a, t);
      // l1 (needs interim at t+1, so t <= T-1)
      if (t <= T - 1) {
        Vec lhs = sub(interim(a, t + 1), it);
        Vec rhs = scaled(matvec_t(CH(a, t), dpvec[t]), std::pow(gl, static_cast<double>(t - a)));
        dev.l1 = std::max(dev.l1, norm_inf(sub(lhs, rhs)));
      }
      // l2: interim(a,t) via the first interim plus increments past a
      {
        Vec route = interim(a, a + 1);
        axpy(1.0, sum_dp, route);
        axpy(-1.0, matvec_t(CH(a, a), dpvec[a]), route);  // sum starts at b=a+1 in l2
        dev.l2 = std::max(dev.l2, norm_inf(sub(route, it)));
      }
      // l4 and the composed route to it
      Vec rhs4 = sub(it, ga);
      dev.l4 = std::max(dev.l4, norm_inf(sub(sum_dp, rhs4)));
      {
        Vec route = interim(a, a + 1);
        axpy(1.0, sum_dp, route);
        axpy(-1.0, matvec_t(CH(a, a), dpvec[a]), route);
        axpy(-1.0, ga, route);
        dev.l2l3_route = std::max(dev.l2l3_route, norm_inf(sub(route, rhs4)));
      }
      dev.l6_gap = std::max(dev.l6_gap, norm_inf(sub(sum_d, rhs4)));
    }
    // l3
    Vec rhs3 = add(dpvec[a], ga);
    dev.l3 = std::max(dev.l3, norm_inf(sub(interim(a, a + 1), rhs3)));
  }

  // l5: recursive trace vs explicit unrolled sum, checked after every step
  EligibilityTrace trace(dim);
  trace.reset();
  for (std::size_t b = 0; b < T; ++b) {
    trace.decay_and_add(b == 0 ? nullptr : &tr.jacs[b - 1], gl, synth_grad_theta(tr.states[b]));
    Tensor3 explicit_e(dim, dim, dim + 1);
    for (std::size_t a = 0; a <= b; ++a) {
      const Mat& M = CH(a, b);
      const Vec he = extended_state(tr.states[a]);
      const double w = std::pow(gl, static_cast<double>(b - a));
      for (std::size_t v = 0; v < dim; ++v)
        for (std::size_t j = 0; j < dim; ++j) {
          const double c = w * M.at(v, j);
          if (c == 0.0) continue;
          for (std::size_t i = 0; i <= dim; ++i) explicit_e.at(v, j, i) += c * he[i];
        }
    }
    double md = 0.0;
    for (std::size_t i = 0; i < trace.e.d.size(); ++i)
      md = std::max(md, std::fabs(trace.e.d[i] - explicit_e.d[i]));
    dev.l5 = std::max(dev.l5, md);
  }
  return dev;
}

struct LemmaSuiteResult {
  LemmaDeviations frozen;     // constant parameter path: everything exact
  LemmaDeviations moving_hi;  // path from a raw run at alpha_hi
  LemmaDeviations moving_lo;  // path from a raw run at alpha_lo
  double alpha_hi = 0.0;
  double alpha_lo = 0.0;
};

inline LemmaSuiteResult run_lemma_suite(CellKind kind, std::size_t units, std::size_t in_dim,
                                        std::size_t T, std::uint64_t seed, double lambda,
                                        double gamma, double alpha_hi = 1e-2,
                                        double alpha_lo = 1e-4) {
  TheorySystem sys = make_theory_system(kind, units, in_dim, T, seed, /*theta0_scale=*/0.3);
  LemmaSuiteResult res;
  res.alpha_hi = alpha_hi;
  res.alpha_lo = alpha_lo;

  std::vector<SynthParams> constant(T + 1, sys.theta0);
  res.frozen = lemma_deviations(sys.traj, constant, lambda, gamma);

  RawRun hi = raw_trace_run(sys, alpha_hi, lambda, gamma);
  RawRun lo = raw_trace_run(sys, alpha_lo, lambda, gamma);
  res.moving_hi = lemma_deviations(sys.traj, hi.thetas, lambda, gamma);
  res.moving_lo = lemma_deviations(sys.traj, lo.thetas, lambda, gamma);
  return res;
}

// ---- per-step trace updates vs online regression: weight ratio study ----

struct RatioPoint {
  double alpha = 0.0;
  std::vector<double> per_t;  // t = 1..T
  double max_ratio = 0.0;
};

struct RatioReport {
  bool condition_ok = true;       // every element of every Delta-sum is nonzero
  double condition_min_abs = 0.0; // smallest |element| seen across all t
  std::vector<RatioPoint> points; // alphas strictly decreasing
};

// Compares the synthesiser weights produced by the per-step trace algorithm
// against the online regression scheme, started from identical theta0 on the
// same frozen trajectory: per t, |theta^trace_t - theta^online_t| relative to
// |theta^trace_t - theta0| (Frobenius), across a decreasing alpha sweep.
// Before reporting, checks the non-degeneracy condition: for each t, the sum
// over a < t of (interim target at horizon t with all bootstraps at theta0,
// minus g(h_a; theta0)) outer [h_a | 1] must have no zero elements.
inline RatioReport theorem1_ratio(const TheorySystem& sys, double lambda, double gamma,
                                  std::vector<double> alphas) {
  std::sort(alphas.begin(), alphas.end(), std::greater<double>());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  require(!alphas.empty(), "theorem1_ratio: need at least one alpha");
  const Trajectory& tr = sys.traj;
  const std::size_t T = tr.T();
  RatioReport rep;

  // Non-degeneracy condition, checked for t >= 2 only: at t = 1 the sum is a
  // single outer product with the zero initial state, whose non-bias columns
  // vanish structurally — and there the two algorithms coincide after the one
  // shared update anyway, so the guarded asymptotics are not needed.
  ThetaTimeline tl0(sys.theta0);
  rep.condition_min_abs = std::numeric_limits<double>::infinity();
  for (std::size_t t = 2; t <= T; ++t) {
    Mat S(sys.theta0.theta.rows, sys.theta0.theta.cols);
    for (std::size_t a = 0; a < t; ++a) {
      Vec diff = sub(interim_lambda_target(tr, a, lambda, t, tl0, gamma),
                     synth_predict(sys.theta0, tr.states[a], false));
      axpy(1.0, outer(diff, extended_state(tr.states[a])), S);
    }
    for (double x : S.d) rep.condition_min_abs = std::min(rep.condition_min_abs, std::fabs(x));
  }
  rep.condition_ok = rep.condition_min_abs > 1e-12;

  for (double alpha : alphas) {
    RawRun run = raw_trace_run(sys, alpha, lambda, gamma);
    std::vector<SynthParams> online = online_lambda_run(tr, sys.theta0, alpha, lambda, gamma, T);
    RatioPoint pt;
    pt.alpha = alpha;
    for (std::size_t t = 1; t <= T; ++t) {
      Mat num = run.thetas[t].theta;
      axpy(-1.0, online[t].theta, num);
      Mat den = run.thetas[t].theta;
      axpy(-1.0, sys.theta0.theta, den);
      const double dn = frobenius(den);
      const double ratio = dn > 0.0 ? frobenius(num) / dn : 0.0;
      pt.per_t.push_back(ratio);
      pt.max_ratio = std::max(pt.max_ratio, ratio);
    }
    rep.points.push_back(std::move(pt));
  }
  return rep;
}

// ---- backward recursion identity for the lambda target ----
//
// The full-sequence lambda target satisfies
//   G^lam_t = J_{t+1}^T (gl_{t+1} + gamma lambda G^lam_{t+1}
//                        + gamma (1 - lambda) g(h_{t+1}; theta_t)),
// with G^lam_T = 0. Returns the max-norm deviation between this backward
// recursion and the definitional mixture, over all t.
inline double recursive_identity_check(const Trajectory& tr, const ThetaTimeline& tl,
                                       double lambda, double gamma) {
  const std::size_t T = tr.T();
  require(T >= 1, "recursive_identity_check: empty trajectory");
  double dev = 0.0;
  Vec next(tr.states[0].size());
  for (std::size_t t = T; t-- > 0;) {
    Vec inner = tr.loss_grads[t + 1];
    axpy(gamma * lambda, next, inner);
    axpy(gamma * (1.0 - lambda),
         synth_predict(tl.bootstrap_at(t + 1), tr.states[t + 1], t + 1 == T), inner);
    Vec rec = matvec_t(tr.jacs[t], inner);
    dev = std::max(dev, norm_inf(sub(rec, lambda_target(tr, t, lambda, tl, gamma))));
    next = std::move(rec);
  }
  return dev;
}

}  // namespace bpl
