#pragma once
// The gradient synthesiser: a linear map with bias from the cell state to a
// predicted future-loss gradient, g(h; theta) = theta [h ‖ 1]. Its parameter
// gradient d g / d theta has Kronecker structure (row j of theta only touches
// output j), so we carry the compact [h ‖ 1] form and materialise the dense
// rank-3 tensor only for reference paths and tests.
//
// The prediction at the task's final timestep is identically zero; targets
// and updates all share that boundary rule.

#include "bpl/tensor.hpp"

namespace bpl {

struct SynthParams {
  Mat theta;  // [|h| x (|h|+1)], last column is the bias

  SynthParams() = default;
  explicit SynthParams(std::size_t state_dim) : theta(state_dim, state_dim + 1) {}

  std::size_t state_dim() const { return theta.rows; }
};

inline Vec extended_state(const Vec& h) {
  Vec u(h.size() + 1);
  for (std::size_t i = 0; i < h.size(); ++i) u[i] = h[i];
  u[h.size()] = 1.0;
  return u;
}

inline Vec synth_predict(const SynthParams& p, const Vec& h, bool is_final_step = false) {
  require(h.size() == p.theta.rows, "synth_predict: state size mismatch");
  if (is_final_step) return Vec(h.size());
  return matvec(p.theta, extended_state(h));
}

/// Compact d g/d theta: the full tensor is grad[v][j][i] = (v==j) * h_ext[i].
struct GradTheta {
  Vec h_ext;  // [h ‖ 1]

  Tensor3 materialise(std::size_t state_dim) const {
    Tensor3 t(state_dim, state_dim, h_ext.size());
    for (std::size_t j = 0; j < state_dim; ++j) {
      double* row = t.slab(j) + j * h_ext.size();
      for (std::size_t i = 0; i < h_ext.size(); ++i) row[i] = h_ext[i];
    }
    return t;
  }
};

inline GradTheta synth_grad_theta(const Vec& h) { return GradTheta{extended_state(h)}; }

// Generic regression step increment: (target - g(h; theta))^T d g/d theta,
// which for the linear synthesiser is outer(target - prediction, [h ‖ 1]).
inline Mat synth_regression_increment(const SynthParams& p, const Vec& h, const Vec& target,
                                      bool is_final_step = false) {
  Vec diff = sub(target, synth_predict(p, h, is_final_step));
  return outer(diff, extended_state(h));
}

}  // namespace bpl
