#pragma once
// ADAM and plain SGD over lists of parameter matrices. Updates are ordinary
// loops in a fixed tensor/element order, so repeated runs are bit-identical.
// Sign convention: adam_step descends the supplied gradients; sgd_step *adds*
// rate * update and leaves the sign to the caller (the synthesiser update is
// ascent-form).

#include <cmath>
#include <stdexcept>
#include <vector>

#include "bpl/tensor.hpp"

namespace bpl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Mat> m, v;  // first/second moment per parameter tensor
  long step = 0;

  void init(const std::vector<Mat*>& params) {
    m.clear();
    v.clear();
    for (const Mat* p : params) {
      m.emplace_back(p->rows, p->cols);
      v.emplace_back(p->rows, p->cols);
    }
    step = 0;
  }
  bool initialised() const { return !m.empty(); }
};

inline void check_grads_finite(const std::vector<Mat>& grads, const char* who) {
  for (std::size_t t = 0; t < grads.size(); ++t)
    if (!all_finite(grads[t]))
      throw std::runtime_error(std::string(who) + ": non-finite gradient in tensor " +
                               std::to_string(t));
}

inline void adam_step(const std::vector<Mat*>& params, const std::vector<Mat>& grads,
                      AdamState& st, const AdamConfig& cfg) {
  require(params.size() == grads.size(), "adam_step: param/grad count mismatch");
  if (!st.initialised()) st.init(params);
  check_grads_finite(grads, "adam_step");
  ++st.step;
  const double b1c = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double b2c = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    Mat& p = *params[t];
    const Mat& g = grads[t];
    require(p.rows == g.rows && p.cols == g.cols, "adam_step: grad shape mismatch");
    Mat& m = st.m[t];
    Mat& v = st.v[t];
    for (std::size_t i = 0; i < p.d.size(); ++i) {
      m.d[i] = cfg.beta1 * m.d[i] + (1.0 - cfg.beta1) * g.d[i];
      v.d[i] = cfg.beta2 * v.d[i] + (1.0 - cfg.beta2) * g.d[i] * g.d[i];
      const double mhat = m.d[i] / b1c;
      const double vhat = v.d[i] / b2c;
      p.d[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// params += rate * update (ascent-form; callers flip signs as needed)
inline void sgd_step(const std::vector<Mat*>& params, const std::vector<Mat>& update,
                     double rate) {
  require(params.size() == update.size(), "sgd_step: param/update count mismatch");
  for (std::size_t t = 0; t < params.size(); ++t) {
    Mat& p = *params[t];
    const Mat& u = update[t];
    require(p.rows == u.rows && p.cols == u.cols, "sgd_step: update shape mismatch");
    for (std::size_t i = 0; i < p.d.size(); ++i) p.d[i] += rate * u.d[i];
  }
}

}  // namespace bpl
