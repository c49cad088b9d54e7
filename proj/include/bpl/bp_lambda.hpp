#pragma once
// The accumulate-trace learner. Per step, oldest first:
//
//   e   <- gamma*lambda * (J_prev ∘ e) + d g(h; theta)/d theta
//   h'  <- f(x_t, h);  loss on h'
//   delta <- J^T (dL/dh' + gamma * g(h'; theta)) - g(h; theta)
//   theta increment <- delta^T e            (applied raw, or batched)
//   model adjoint   <- dL/dh' + sg_scale * g(h'; theta)
//
// The trace is the rank-3 tensor (state, theta-row, theta-col); the Jacobian
// contracts its leading index. Only (h, h', one-step Jacobian) are ever read
// by an update — nothing older survives a step.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bpl/cells.hpp"
#include "bpl/sequence.hpp"
#include "bpl/synth.hpp"
#include "bpl/tensor.hpp"

namespace bpl {

struct EligibilityTrace {
  Tensor3 e;  // (|h|, |h|, |h|+1)

  EligibilityTrace() = default;
  explicit EligibilityTrace(std::size_t state_dim)
      : e(state_dim, state_dim, state_dim + 1), scratch_(e.d.size()) {}

  void reset() { e.zero(); }

  // e <- gl * (jac ∘ e) + grad, with gl = gamma*lambda. A null jac (first
  // step) or gl == 0 zeroes the decayed part exactly.
  void decay_and_add(const Mat* jac, double gl, const GradTheta& grad) {
    const std::size_t D = e.d0;
    const std::size_t K = e.d1 * e.d2;
    const std::size_t in = e.d2;
    require(grad.h_ext.size() == in, "trace update: grad size mismatch");
    if (jac == nullptr || gl == 0.0) {
      e.zero();
      for (std::size_t j = 0; j < D; ++j) {
        double* seg = e.d.data() + j * K + j * in;
        for (std::size_t i = 0; i < in; ++i) seg[i] += grad.h_ext[i];
      }
      return;
    }
    require(jac->rows == D && jac->cols == D, "trace update: jacobian shape mismatch");
    double* tmp = scratch_.data();
    for (std::size_t i = 0; i < D; ++i) {
      double* ti = tmp + i * K;
      for (std::size_t j = 0; j < K; ++j) ti[j] = 0.0;
      const double* ji = jac->row(i);
      for (std::size_t v = 0; v < D; ++v) {
        const double a = gl * ji[v];
        const double* ev = e.slab(v);
        for (std::size_t j = 0; j < K; ++j) ti[j] += a * ev[j];
      }
      double* seg = ti + i * in;
      for (std::size_t k = 0; k < in; ++k) seg[k] += grad.h_ext[k];
    }
    e.d.swap(scratch_);
  }

  // delta^T e, reshaped to theta's (|h|, |h|+1)
  Mat contract(const Vec& delta) const { return trace_contract(delta, e); }

 private:
  std::vector<double> scratch_;
};

// Reference path: dense grad tensor, same arithmetic order as the structured
// update (contract with the prescaled Jacobian, then add).
inline void update_trace_dense(Tensor3& e, const Mat* jac, double gamma, double lambda,
                               const Tensor3& grad) {
  require(grad.d0 == e.d0 && grad.d1 == e.d1 && grad.d2 == e.d2,
          "update_trace_dense: shape mismatch");
  const double gl = gamma * lambda;
  if (jac == nullptr || gl == 0.0) {
    e.zero();
  } else {
    Tensor3 decayed = trace_contract(scaled(*jac, gl), e);
    e = std::move(decayed);
  }
  for (std::size_t i = 0; i < e.d.size(); ++i) e.d[i] += grad.d[i];
}

// delta = grad_loss_next + gamma * jac^T g_next - g_curr, where grad_loss_next
// is dL_{t+1}/dh_t (already pulled back through jac by the caller).
inline Vec td_error(const Vec& grad_loss_next, const Vec& g_next, const Mat& jac,
                    const Vec& g_curr, double gamma) {
  require(grad_loss_next.size() == g_curr.size() && g_next.size() == g_curr.size(),
          "td_error: size mismatch");
  Vec pb = matvec_t(jac, g_next);
  Vec delta(g_curr.size());
  for (std::size_t v = 0; v < delta.size(); ++v)
    delta[v] = grad_loss_next[v] + gamma * pb[v] - g_curr[v];
  return delta;
}

// theta += alpha * delta^T e  (ascent-form regression step)
inline void apply_synth_update(SynthParams& p, const Vec& delta, const EligibilityTrace& tr,
                               double alpha) {
  Mat inc = tr.contract(delta);
  require(inc.rows == p.theta.rows && inc.cols == p.theta.cols,
          "apply_synth_update: shape mismatch");
  axpy(alpha, inc, p.theta);
}

struct BpLambdaConfig {
  double gamma = 0.9;
  double lambda = 1.0;
  double alpha = 1e-3;    // synthesiser rate (raw per-step mode only)
  double sg_scale = 1.0;  // applied only where the model consumes g
  bool raw_theta_updates = false;
  bool train_model = true;
};

struct SeqOutcome {
  double loss_sum = 0.0;      // summed training loss over targeted steps
  std::size_t loss_steps = 0;
  double bce_nats = 0.0;      // bit-head tallies
  std::size_t bit_count = 0;
  std::size_t correct = 0;    // classification tallies
  std::size_t class_steps = 0;

  void add(const SeqOutcome& o) {
    loss_sum += o.loss_sum;
    loss_steps += o.loss_steps;
    bce_nats += o.bce_nats;
    bit_count += o.bit_count;
    correct += o.correct;
    class_steps += o.class_steps;
  }
};

// Per-sequence accumulators; batch mode reduces these across items in index
// order after the (possibly parallel) item loop.
struct SeqAccums {
  Mat theta_inc;  // summed delta^T e
  CellGrads cell_g;
  Mat ro_w, ro_b;
  SeqOutcome out;

  void init(const Cell& cell, const Readout& ro, const SynthParams& th) {
    theta_inc = Mat(th.theta.rows, th.theta.cols);
    cell_g = cell.zero_grads();
    ro_w = Mat(ro.w.rows, ro.w.cols);
    ro_b = Mat(ro.b.rows, ro.b.cols);
    out = SeqOutcome{};
  }
};

// Optional recording for oracles and verification probes. The update path
// never reads from these.
struct SequenceTaps {
  Trajectory* traj = nullptr;
  std::vector<SynthParams>* theta_log = nullptr;  // theta_0..theta_T (raw mode)
};

inline void bp_lambda_sequence(const Cell& cell, const Readout& ro, SynthParams& theta,
                               const Episode& ep, const BpLambdaConfig& cfg, SeqAccums& acc,
                               EligibilityTrace& trace, SequenceTaps taps = {}) {
  const StateLayout lo = cell.layout();
  require(theta.state_dim() == lo.state_dim, "bp_lambda_sequence: theta size mismatch");
  const double gl = cfg.gamma * cfg.lambda;
  const std::size_t T = ep.T();

  Vec h(lo.state_dim);
  Mat jac_prev;
  bool have_jac = false;
  trace.reset();

  if (taps.traj) {
    *taps.traj = Trajectory{};
    taps.traj->states.push_back(h);
    taps.traj->loss_grads.push_back(Vec(lo.state_dim));
    taps.traj->losses.push_back(0.0);
  }
  if (taps.theta_log) {
    taps.theta_log->clear();
    taps.theta_log->push_back(theta);
  }

  for (std::size_t t = 1; t <= T; ++t) {
    const TaskStep& st = ep.steps[t - 1];

    trace.decay_and_add(have_jac ? &jac_prev : nullptr, gl, synth_grad_theta(h));

    StepResult r = cell.step(st.input, h);
    if (!all_finite(r.next_state))
      throw std::runtime_error("bp_lambda_sequence: non-finite state at step " +
                               std::to_string(t));

    Vec read = readout_slice(lo, r.next_state);
    ReadoutEval ev = ro.eval(read, st.target ? &*st.target : nullptr);
    Vec gl_full = ev.has_target ? expand_state_grad(lo, ev.grad_input) : Vec(lo.state_dim);

    const bool final_step = (t == T);
    Vec g_next = synth_predict(theta, r.next_state, final_step);
    Vec g_curr = synth_predict(theta, h);
    Vec pulled = matvec_t(r.jac, gl_full);
    Vec delta = td_error(pulled, g_next, r.jac, g_curr, cfg.gamma);

    if (cfg.raw_theta_updates) {
      apply_synth_update(theta, delta, trace, cfg.alpha);
      if (taps.theta_log) taps.theta_log->push_back(theta);
    } else {
      Mat inc = trace.contract(delta);
      axpy(1.0, inc, acc.theta_inc);
    }

    if (cfg.train_model) {
      Vec adjoint = gl_full;
      if (cfg.sg_scale != 0.0) axpy(cfg.sg_scale, g_next, adjoint);
      cell.accumulate_param_grads(r, adjoint, acc.cell_g);
      ro.accumulate_grads(read, ev, acc.ro_w, acc.ro_b);
    }

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

    if (taps.traj) {
      taps.traj->jacs.push_back(r.jac);
      taps.traj->loss_grads.push_back(gl_full);
      taps.traj->losses.push_back(ev.loss);
      taps.traj->states.push_back(r.next_state);
    }

    jac_prev = std::move(r.jac);
    have_jac = true;
    h = std::move(r.next_state);
  }
}

}  // namespace bpl
