#pragma once
// Episodes (what a task feeds the trainer) and recorded trajectories (what
// the oracles and verification probes consume). A trajectory stores the
// states h_0..h_T, the one-step Jacobians, and the per-step loss gradients
// at full state width; target-style computations never need anything else.

#include <memory>
#include <optional>
#include <vector>

#include "bpl/cells.hpp"
#include "bpl/synth.hpp"

namespace bpl {

struct TaskStep {
  Vec input;
  std::optional<StepTarget> target;  // scored on the state this step produces
};

struct Episode {
  std::vector<TaskStep> steps;  // steps[t-1] maps h_{t-1} -> h_t, t = 1..T

  std::size_t T() const { return steps.size(); }
};

struct Trajectory {
  std::vector<Vec> states;      // h_0..h_T
  std::vector<Mat> jacs;        // jacs[t] = d h_{t+1} / d h_t, t = 0..T-1
  std::vector<Vec> loss_grads;  // dL_t/dh_t (full state width), index 0 unused
  std::vector<double> losses;   // per-step loss values, index 0 unused

  std::size_t T() const { return jacs.size(); }
};

inline Vec expand_state_grad(const StateLayout& lo, const Vec& grad_read) {
  Vec g(lo.state_dim);
  for (std::size_t i = 0; i < grad_read.size(); ++i) g[lo.readout_offset + i] = grad_read[i];
  return g;
}

inline Vec readout_slice(const StateLayout& lo, const Vec& state) {
  Vec r(lo.readout_dim);
  for (std::size_t i = 0; i < lo.readout_dim; ++i) r[i] = state[lo.readout_offset + i];
  return r;
}

// Forward pass with Jacobians and loss gradients; parameters stay fixed.
inline Trajectory record_trajectory(const Cell& cell, const Readout& ro, const Episode& ep) {
  const StateLayout lo = cell.layout();
  Trajectory tr;
  tr.states.push_back(Vec(lo.state_dim));
  tr.loss_grads.push_back(Vec(lo.state_dim));
  tr.losses.push_back(0.0);
  for (std::size_t t = 1; t <= ep.T(); ++t) {
    const TaskStep& st = ep.steps[t - 1];
    StepResult r = cell.step(st.input, tr.states.back());
    ReadoutEval ev =
        ro.eval(readout_slice(lo, r.next_state), st.target ? &*st.target : nullptr);
    tr.jacs.push_back(std::move(r.jac));
    tr.loss_grads.push_back(
        ev.has_target ? expand_state_grad(lo, ev.grad_input) : Vec(lo.state_dim));
    tr.losses.push_back(ev.loss);
    tr.states.push_back(std::move(r.next_state));
  }
  return tr;
}

/// Which synthesiser parameters a target evaluation at state h_m uses: the
// params in force just before h_m was reached (theta_{m-1}; theta_{-1} is the
// initial value). A constant timeline collapses every lookup to one value.
class ThetaTimeline {
 public:
  explicit ThetaTimeline(const SynthParams& constant) : constant_(&constant) {}
  explicit ThetaTimeline(const std::vector<SynthParams>& seq) : seq_(&seq) {}

  const SynthParams& bootstrap_at(std::size_t m) const {
    if (constant_) return *constant_;
    return (*seq_)[m == 0 ? 0 : m - 1];
  }

 private:
  const SynthParams* constant_ = nullptr;
  const std::vector<SynthParams>* seq_ = nullptr;
};

}  // namespace bpl
