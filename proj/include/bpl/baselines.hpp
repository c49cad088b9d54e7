#pragma once
// Target-side reference algorithms over recorded trajectories, and the
// window-truncated training scheme the comparison learners share.
//
// Conventions used throughout:
//  - G_t = sum_{tau>t} gamma^{tau-t-1} dL_tau/dh_t (the discounted true
//    future-loss gradient);
//  - an n-step target bootstraps with the synthesiser at the window edge,
//    and any synthesiser evaluation at state h_m uses the timeline's
//    bootstrap_at(m) parameters;
//  - the synthetic gradient at the task's final step is identically zero, so
//    targets that touch h_T degrade to pure backprop sums.

#include <cstddef>
#include <vector>

#include "bpl/bp_lambda.hpp"
#include "bpl/cells.hpp"
#include "bpl/sequence.hpp"
#include "bpl/synth.hpp"
#include "bpl/tensor.hpp"

namespace bpl {

// G_t, computed by the discounted reverse recursion
//   A_T = dL_T/dh_T,  A_tau = dL_tau/dh_tau + gamma * J_{tau+1}^T A_{tau+1},
//   G_t = J_{t+1}^T A_{t+1}.
inline Vec true_gradient(const Trajectory& tr, std::size_t t, double gamma) {
  const std::size_t T = tr.T();
  require(t < T, "true_gradient: t out of range");
  Vec a = tr.loss_grads[T];
  for (std::size_t tau = T; tau-- > t + 1;) {
    Vec pb = matvec_t(tr.jacs[tau], a);  // jacs[tau] = dh_{tau+1}/dh_tau
    a = tr.loss_grads[tau];
    axpy(gamma, pb, a);
  }
  return matvec_t(tr.jacs[t], a);
}

// n-step target: discounted in-window loss pullbacks plus the bootstrap
//   G_t^(n) = sum_{k=1..n} gamma^{k-1} dL_{t+k}/dh_t
//           + gamma^n g(h_{t+n})^T dh_{t+n}/dh_t,
// evaluated by the same reverse recursion seeded with the bootstrap.
inline Vec n_step_target(const Trajectory& tr, std::size_t t, std::size_t n,
                         const ThetaTimeline& theta, double gamma) {
  const std::size_t T = tr.T();
  require(n >= 1 && t + n <= T, "n_step_target: window out of range");
  const std::size_t w = t + n;
  Vec d = synth_predict(theta.bootstrap_at(w), tr.states[w], w == T);
  for (std::size_t tau = w; tau > t; --tau) {
    // d currently holds gamma-discounted tail past tau; fold in L_tau
    Vec seed = tr.loss_grads[tau];
    axpy(gamma, d, seed);
    if (tau == t + 1) return matvec_t(tr.jacs[t], seed);
    d = matvec_t(tr.jacs[tau - 1], seed);
  }
  // n >= 1 always returns inside the loop
  return d;
}

// lambda-weighted mixture with the exact finite-horizon tail:
//   G_t^lambda = (1-lambda) sum_{n=1..T-t-1} lambda^{n-1} G_t^(n)
//              + lambda^{T-t-1} G_t.
inline Vec lambda_target(const Trajectory& tr, std::size_t t, double lambda,
                         const ThetaTimeline& theta, double gamma) {
  const std::size_t T = tr.T();
  require(t < T, "lambda_target: t out of range");
  Vec acc(tr.states[0].size());
  double wpow = 1.0;  // lambda^{n-1}
  for (std::size_t n = 1; n + t <= T - 1; ++n) {
    axpy((1.0 - lambda) * wpow, n_step_target(tr, t, n, theta, gamma), acc);
    wpow *= lambda;
  }
  axpy(wpow, true_gradient(tr, t, gamma), acc);  // wpow = lambda^{T-t-1}
  return acc;
}

// Interim target truncated at horizon H:
//   G_t^{lambda|H} = (1-lambda) sum_{n=1..H-t-1} lambda^{n-1} G_t^(n)
//                  + lambda^{H-t-1} G_t^{(H-t)}.
inline Vec interim_lambda_target(const Trajectory& tr, std::size_t t, double lambda,
                                 std::size_t H, const ThetaTimeline& theta, double gamma) {
  require(t < H && H <= tr.T(), "interim_lambda_target: horizon out of range");
  Vec acc(tr.states[0].size());
  double wpow = 1.0;
  for (std::size_t n = 1; n + t <= H - 1; ++n) {
    axpy((1.0 - lambda) * wpow, n_step_target(tr, t, n, theta, gamma), acc);
    wpow *= lambda;
  }
  axpy(wpow, n_step_target(tr, t, H - t, theta, gamma), acc);
  return acc;
}

// One offline regression pass: every state's increment is computed at the
// incoming parameters, summed, and applied once.
inline SynthParams offline_lambda_pass(const std::vector<Trajectory>& trajs,
                                       const SynthParams& theta0, double alpha, double lambda,
                                       double gamma) {
  SynthParams out = theta0;
  Mat sum(theta0.theta.rows, theta0.theta.cols);
  ThetaTimeline tl(theta0);
  for (const Trajectory& tr : trajs)
    for (std::size_t t = 0; t < tr.T(); ++t) {
      Vec v = lambda_target(tr, t, lambda, tl, gamma);
      axpy(1.0, synth_regression_increment(theta0, tr.states[t], v), sum);
    }
  axpy(alpha, sum, out.theta);
  return out;
}

// Online interim-target regression. At each horizon H = 1..upto the inner
// pass restarts from theta_init and replays updates for states 0..H-1
// against G_k^{lambda|H}; the returned principal sequence theta[H] is the
// last iterate of pass H, and it supplies every bootstrap evaluation.
inline std::vector<SynthParams> online_lambda_run(const Trajectory& tr,
                                                 const SynthParams& theta_init, double alpha,
                                                 double lambda, double gamma,
                                                 std::size_t upto) {
  require(upto <= tr.T(), "online_lambda_run: horizon out of range");
  std::vector<SynthParams> principal;
  principal.push_back(theta_init);
  ThetaTimeline tl(principal);
  for (std::size_t H = 1; H <= upto; ++H) {
    SynthParams cur = theta_init;
    for (std::size_t k = 0; k < H; ++k) {
      Vec target = interim_lambda_target(tr, k, lambda, H, tl, gamma);
      Mat inc = synth_regression_increment(cur, tr.states[k], target);
      axpy(alpha, inc, cur.theta);
    }
    principal.push_back(std::move(cur));
  }
  return principal;
}

// ---- window-truncated training ----
//
// The sequence is split into an initial window of size T mod n (dropped when
// zero) followed by windows of n. Inside a window ending at step w, one
// reverse sweep maintains two discounted carriers over tau in (t, w], with
// gl_tau = dL_tau/dh_tau and G^ the synthesiser prediction (zero for
// learners without one, and always zero at h_T):
//   C_w = gl_w + gamma * sg_scale * G^(h_w),  C_tau = gl_tau + gamma * J_{tau+1}^T C_{tau+1}
//   D_w = gl_w + gamma * G^(h_w),             D_tau = gl_tau + gamma * J_{tau+1}^T D_{tau+1}
// The model adjoint at the window edge is gl_w + sg_scale * G^(h_w) — the
// same shape the per-step scheme consumes — and at interior states it is
// gl_tau + J_{tau+1}^T C_{tau+1}, i.e. coefficient one on the pulled-back
// tail and discounting inside it. With a perfect synthesiser this makes the
// adjoint gl_tau + sg_scale-weighted true future gradient at *every* state,
// so windowed and per-step training agree exactly in that limit; at
// gamma = 1 without a synthesiser it is textbook truncated backprop.
// J_{tau+1}^T D_{tau+1} is exactly the (w - tau)-step bootstrapped target
// for h_tau, so the synthesiser regression performed here is the n-step
// target family evaluated at current parameters. n = 1 without the
// synthesiser is the no-backtracking baseline; n = T without it is the
// full-backprop oracle.

inline std::vector<std::size_t> window_partition(std::size_t T, std::size_t n) {
  require(n >= 1, "window_partition: n must be >= 1");
  std::vector<std::size_t> w;
  const std::size_t r = T % n;
  if (r) w.push_back(r);
  for (std::size_t done = r; done < T; done += n) w.push_back(n);
  return w;
}

struct WindowConfig {
  std::size_t n = 1;
  bool use_sg = false;
  double gamma = 0.9;
  double sg_scale = 1.0;
  bool train_model = true;
};

// Runs one episode under the window scheme, accumulating model/readout grads
// and synthesiser regression increments into `acc`.
inline void window_train_sequence(const Cell& cell, const Readout& ro,
                                  const SynthParams& theta, const Episode& ep,
                                  const WindowConfig& cfg, SeqAccums& acc,
                                  Trajectory* record = nullptr) {
  const StateLayout lo = cell.layout();
  const std::size_t T = ep.T();
  const std::vector<std::size_t> windows = window_partition(T, cfg.n);

  Vec h(lo.state_dim);
  if (record) {
    *record = Trajectory{};
    record->states.push_back(h);
    record->loss_grads.push_back(Vec(lo.state_dim));
    record->losses.push_back(0.0);
  }

  std::size_t t = 0;  // steps completed
  for (std::size_t wsize : windows) {
    // forward through the window, caching steps
    std::vector<StepResult> steps;
    std::vector<ReadoutEval> evals;
    std::vector<Vec> reads;
    steps.reserve(wsize);
    Vec wstart = h;
    for (std::size_t k = 0; k < wsize; ++k) {
      const TaskStep& st = ep.steps[t + k];
      StepResult r = cell.step(st.input, h);
      if (!all_finite(r.next_state))
        throw std::runtime_error("window_train_sequence: non-finite state at step " +
                                 std::to_string(t + k + 1));
      Vec read = readout_slice(lo, r.next_state);
      ReadoutEval ev = ro.eval(read, st.target ? &*st.target : nullptr);
      if (ev.has_target) {
        acc.out.loss_sum += ev.loss;
        ++acc.out.loss_steps;
        acc.out.bce_nats += ev.bce_nats;
        acc.out.bit_count += ev.bit_count;
        if (ro.head == Head::softmax_ce) {
          ++acc.out.class_steps;
          if (ev.correct) ++acc.out.correct;
        }
      }
      if (record) {
        record->jacs.push_back(r.jac);
        record->loss_grads.push_back(ev.has_target ? expand_state_grad(lo, ev.grad_input)
                                                   : Vec(lo.state_dim));
        record->losses.push_back(ev.loss);
        record->states.push_back(r.next_state);
      }
      h = r.next_state;
      reads.push_back(std::move(read));
      evals.push_back(std::move(ev));
      steps.push_back(std::move(r));
    }

    // reverse sweep over positions p = t+k+1; C and D are the carriers at
    // the position just processed, pbC/pbD their pullbacks J_p^T (carrier_p)
    const std::size_t wend = t + wsize;
    const bool final_edge = (wend == T);
    Vec gw = synth_predict(theta, steps.back().next_state, final_edge);
    Vec pbC;
    Vec pbD;

    for (std::size_t k = wsize; k-- > 0;) {
      const bool edge = (k + 1 == wsize);
      Vec gl_p = evals[k].has_target ? expand_state_grad(lo, evals[k].grad_input)
                                     : Vec(lo.state_dim);
      if (cfg.train_model) {
        Vec adjoint = gl_p;
        if (edge) {
          if (cfg.use_sg) axpy(cfg.sg_scale, gw, adjoint);
        } else {
          axpy(1.0, pbC, adjoint);
        }
        cell.accumulate_param_grads(steps[k], adjoint, acc.cell_g);
        ro.accumulate_grads(reads[k], evals[k], acc.ro_w, acc.ro_b);
      }
      if (cfg.train_model && k > 0) {
        Vec c = gl_p;
        if (edge) {
          if (cfg.use_sg) axpy(cfg.gamma * cfg.sg_scale, gw, c);
        } else {
          axpy(cfg.gamma, pbC, c);
        }
        pbC = matvec_t(steps[k].jac, c);
      }
      if (cfg.use_sg) {
        Vec d = std::move(gl_p);
        if (edge) {
          axpy(cfg.gamma, gw, d);
        } else {
          axpy(cfg.gamma, pbD, d);
        }
        pbD = matvec_t(steps[k].jac, d);
        // J_p^T D_p is the bootstrapped target for the state entering this step
        const Vec& prev = (k == 0) ? wstart : steps[k - 1].next_state;
        Mat inc = synth_regression_increment(theta, prev, pbD);
        axpy(1.0, inc, acc.theta_inc);
      }
    }
    t = wend;
  }
}

}  // namespace bpl
