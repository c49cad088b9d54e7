#pragma once
// Recurrent cells (linear, tanh, LSTM) with analytic one-step state Jacobians
// and parameter VJPs, plus the linear readout heads. The full parameter
// Jacobian d h'/d params is never materialised: callers hand an adjoint row
// vector to accumulate_param_grads and get the product directly.
//
// LSTM state layout is [cell ‖ output] (length 2*units); the readout and the
// loss see only the output half, so loss gradients on the full state carry a
// zero cell-state block.

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "bpl/rng.hpp"
#include "bpl/tensor.hpp"

namespace bpl {

struct StateLayout {
  std::size_t state_dim = 0;       // |h| as the trace algebra sees it
  std::size_t readout_offset = 0;  // first state index the readout consumes
  std::size_t readout_dim = 0;
};

struct CellGrads {
  std::vector<Mat> g;  // same shapes/order as Cell::params()

  void zero() {
    for (Mat& m : g) m.zero();
  }
  void add(const CellGrads& o) {
    for (std::size_t i = 0; i < g.size(); ++i) axpy(1.0, o.g[i], g[i]);
  }
  void scale(double s) {
    for (Mat& m : g)
      for (double& x : m.d) x *= s;
  }
};

// One forward step plus everything the backward pass needs. `revision` pins
// the parameter version the cache was computed under; using it after the
// params moved is a contract violation and throws.
struct StepResult {
  Vec next_state;
  Mat jac;  // [state_dim x state_dim], d next_state / d state
  std::uint64_t revision = 0;
  Vec input;       // x_t
  Vec prev_state;  // h_{t-1}
  Vec gates;       // lstm: [i f gbar o] post-activation, length 4u
  Vec aux;         // lstm: tanh(c'), length u
};

class Cell {
 public:
  virtual ~Cell() = default;
  virtual StateLayout layout() const = 0;
  virtual std::size_t input_dim() const = 0;
  virtual StepResult step(const Vec& x, const Vec& state) const = 0;
  // grads += adjoint^T * (d next_state / d params)
  virtual void accumulate_param_grads(const StepResult& r, const Vec& adjoint,
                                      CellGrads& grads) const = 0;
  virtual std::vector<Mat*> params() = 0;
  virtual std::unique_ptr<Cell> clone() const = 0;

  CellGrads zero_grads() const {
    CellGrads cg;
    for (const Mat* p : const_cast<Cell*>(this)->params()) cg.g.emplace_back(p->rows, p->cols);
    return cg;
  }
  std::uint64_t revision() const { return rev_; }
  void mark_params_updated() { ++rev_; }

 protected:
  void check_cache(const StepResult& r) const {
    if (r.revision != rev_)
      throw std::logic_error("cell: step cache is stale (params updated since step)");
  }
  std::uint64_t rev_ = 0;
};

inline Vec uniform_fan_in(Rng& rng, std::size_t n, std::size_t fan_in) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_vec(n, -b, b);
}

inline Mat uniform_fan_in_mat(Rng& rng, std::size_t rows, std::size_t cols) {
  Mat m(rows, cols);
  const double b = 1.0 / std::sqrt(static_cast<double>(cols));
  for (double& x : m.d) x = rng.uniform(-b, b);
  return m;
}

// h' = w_in x + w_rec h + b
class LinearCell : public Cell {
 public:
  Mat w_in, w_rec, b;  // [u x in], [u x u], [u x 1]

  LinearCell(std::size_t units, std::size_t in_dim, Rng& rng)
      : w_in(uniform_fan_in_mat(rng, units, in_dim)),
        w_rec(uniform_fan_in_mat(rng, units, units)),
        b(units, 1) {}

  StateLayout layout() const override { return {w_rec.rows, 0, w_rec.rows}; }
  std::size_t input_dim() const override { return w_in.cols; }

  StepResult step(const Vec& x, const Vec& h) const override {
    require(x.size() == w_in.cols && h.size() == w_rec.rows, "linear cell: bad shapes");
    StepResult r;
    r.next_state = matvec(w_in, x);
    Vec rec = matvec(w_rec, h);
    for (std::size_t i = 0; i < r.next_state.size(); ++i)
      r.next_state[i] += rec[i] + b.at(i, 0);
    r.jac = w_rec;
    r.revision = rev_;
    r.input = x;
    r.prev_state = h;
    return r;
  }

  void accumulate_param_grads(const StepResult& r, const Vec& a, CellGrads& g) const override {
    check_cache(r);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double ai = a[i];
      double* gw = g.g[0].row(i);
      for (std::size_t j = 0; j < r.input.size(); ++j) gw[j] += ai * r.input[j];
      double* gr = g.g[1].row(i);
      for (std::size_t j = 0; j < r.prev_state.size(); ++j) gr[j] += ai * r.prev_state[j];
      g.g[2].at(i, 0) += ai;
    }
  }

  std::vector<Mat*> params() override { return {&w_in, &w_rec, &b}; }
  std::unique_ptr<Cell> clone() const override { return std::make_unique<LinearCell>(*this); }
};

// h' = tanh(w_in x + w_rec h + b)
class TanhCell : public Cell {
 public:
  Mat w_in, w_rec, b;

  TanhCell(std::size_t units, std::size_t in_dim, Rng& rng)
      : w_in(uniform_fan_in_mat(rng, units, in_dim)),
        w_rec(uniform_fan_in_mat(rng, units, units)),
        b(units, 1) {}

  StateLayout layout() const override { return {w_rec.rows, 0, w_rec.rows}; }
  std::size_t input_dim() const override { return w_in.cols; }

  StepResult step(const Vec& x, const Vec& h) const override {
    require(x.size() == w_in.cols && h.size() == w_rec.rows, "tanh cell: bad shapes");
    const std::size_t u = w_rec.rows;
    StepResult r;
    Vec z = matvec(w_in, x);
    Vec rec = matvec(w_rec, h);
    r.next_state = Vec(u);
    for (std::size_t i = 0; i < u; ++i) r.next_state[i] = std::tanh(z[i] + rec[i] + b.at(i, 0));
    r.jac = Mat(u, u);
    for (std::size_t i = 0; i < u; ++i) {
      const double di = 1.0 - r.next_state[i] * r.next_state[i];
      const double* wi = w_rec.row(i);
      double* ji = r.jac.row(i);
      for (std::size_t j = 0; j < u; ++j) ji[j] = di * wi[j];
    }
    r.revision = rev_;
    r.input = x;
    r.prev_state = h;
    return r;
  }

  void accumulate_param_grads(const StepResult& r, const Vec& a, CellGrads& g) const override {
    check_cache(r);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double az = a[i] * (1.0 - r.next_state[i] * r.next_state[i]);
      double* gw = g.g[0].row(i);
      for (std::size_t j = 0; j < r.input.size(); ++j) gw[j] += az * r.input[j];
      double* gr = g.g[1].row(i);
      for (std::size_t j = 0; j < r.prev_state.size(); ++j) gr[j] += az * r.prev_state[j];
      g.g[2].at(i, 0) += az;
    }
  }

  std::vector<Mat*> params() override { return {&w_in, &w_rec, &b}; }
  std::unique_ptr<Cell> clone() const override { return std::make_unique<TanhCell>(*this); }
};

// Standard LSTM, gate order [i f gbar o] in the stacked weight rows. State is
// [c ‖ h]; forget-gate biases start at +1.
class LstmCell : public Cell {
 public:
  std::size_t units;
  Mat w, r, b;  // [4u x in], [4u x u], [4u x 1]

  LstmCell(std::size_t units_, std::size_t in_dim, Rng& rng)
      : units(units_),
        w(uniform_fan_in_mat(rng, 4 * units_, in_dim)),
        r(uniform_fan_in_mat(rng, 4 * units_, units_)),
        b(4 * units_, 1) {
    for (std::size_t i = 0; i < units; ++i) b.at(units + i, 0) = 1.0;  // forget rows
  }

  StateLayout layout() const override { return {2 * units, units, units}; }
  std::size_t input_dim() const override { return w.cols; }

  StepResult step(const Vec& x, const Vec& state) const override {
    require(x.size() == w.cols && state.size() == 2 * units, "lstm cell: bad shapes");
    const std::size_t u = units;
    Vec c(u), h(u);
    for (std::size_t i = 0; i < u; ++i) c[i] = state[i];
    for (std::size_t i = 0; i < u; ++i) h[i] = state[u + i];

    Vec z = matvec(w, x);
    Vec rh = matvec(r, h);
    StepResult res;
    res.gates = Vec(4 * u);
    for (std::size_t i = 0; i < 4 * u; ++i) {
      const double zi = z[i] + rh[i] + b.at(i, 0);
      res.gates[i] = (i >= 2 * u && i < 3 * u) ? std::tanh(zi) : 1.0 / (1.0 + std::exp(-zi));
    }
    const double* gi = res.gates.data();
    const double* gf = gi + u;
    const double* gg = gi + 2 * u;
    const double* go = gi + 3 * u;

    res.next_state = Vec(2 * u);
    res.aux = Vec(u);
    for (std::size_t i = 0; i < u; ++i) {
      const double cn = gf[i] * c[i] + gi[i] * gg[i];
      res.next_state[i] = cn;
      res.aux[i] = std::tanh(cn);
      res.next_state[u + i] = go[i] * res.aux[i];
    }

    // Jacobian blocks: rows [c' ; h'], cols [c ; h]
    res.jac = Mat(2 * u, 2 * u);
    for (std::size_t i = 0; i < u; ++i) {
      const double di = gi[i] * (1.0 - gi[i]);
      const double df = gf[i] * (1.0 - gf[i]);
      const double dg = 1.0 - gg[i] * gg[i];
      const double do_ = go[i] * (1.0 - go[i]);
      const double dtau = 1.0 - res.aux[i] * res.aux[i];
      double* jc = res.jac.row(i);
      double* jh = res.jac.row(u + i);
      jc[i] = gf[i];  // d c'/d c
      const double* ri = r.row(i);
      const double* rf = r.row(u + i);
      const double* rg = r.row(2 * u + i);
      const double* ro = r.row(3 * u + i);
      for (std::size_t j = 0; j < u; ++j) {
        // d c'/d h_j
        const double dcdh = df * c[i] * rf[j] + di * gg[i] * ri[j] + dg * gi[i] * rg[j];
        jc[u + j] = dcdh;
        // d h'/d h_j = tau * d o + o * dtau * d c'
        jh[u + j] = res.aux[i] * do_ * ro[j] + go[i] * dtau * dcdh;
      }
      jh[i] = go[i] * dtau * gf[i];  // d h'/d c
    }
    res.revision = rev_;
    res.input = x;
    res.prev_state = state;
    return res;
  }

  void accumulate_param_grads(const StepResult& sr, const Vec& a, CellGrads& g) const override {
    check_cache(sr);
    const std::size_t u = units;
    const double* gi = sr.gates.data();
    const double* gf = gi + u;
    const double* gg = gi + 2 * u;
    const double* go = gi + 3 * u;
    Vec dz(4 * u);
    for (std::size_t i = 0; i < u; ++i) {
      const double ac = a[i];
      const double ah = a[u + i];
      const double tau = sr.aux[i];
      const double dcn = ac + ah * go[i] * (1.0 - tau * tau);
      const double c_prev = sr.prev_state[i];
      dz[i] = dcn * gg[i] * gi[i] * (1.0 - gi[i]);
      dz[u + i] = dcn * c_prev * gf[i] * (1.0 - gf[i]);
      dz[2 * u + i] = dcn * gi[i] * (1.0 - gg[i] * gg[i]);
      dz[3 * u + i] = ah * tau * go[i] * (1.0 - go[i]);
    }
    for (std::size_t i = 0; i < 4 * u; ++i) {
      const double d = dz[i];
      double* gw = g.g[0].row(i);
      for (std::size_t j = 0; j < sr.input.size(); ++j) gw[j] += d * sr.input[j];
      double* gr = g.g[1].row(i);
      for (std::size_t j = 0; j < u; ++j) gr[j] += d * sr.prev_state[u + j];
      g.g[2].at(i, 0) += d;
    }
  }

  std::vector<Mat*> params() override { return {&w, &r, &b}; }
  std::unique_ptr<Cell> clone() const override { return std::make_unique<LstmCell>(*this); }
};

enum class CellKind { linear, tanh_, lstm };

inline std::unique_ptr<Cell> make_cell(CellKind k, std::size_t units, std::size_t in_dim,
                                       Rng& rng) {
  switch (k) {
    case CellKind::linear: return std::make_unique<LinearCell>(units, in_dim, rng);
    case CellKind::tanh_: return std::make_unique<TanhCell>(units, in_dim, rng);
    case CellKind::lstm: return std::make_unique<LstmCell>(units, in_dim, rng);
  }
  throw std::logic_error("make_cell: unknown kind");
}

// ---- readout & losses ----

// Per-step supervision. `value` is head-specific (vector target, one-hot
// class, or bit pattern); a non-empty `mask` restricts which output channels
// are scored (bit head only).
struct StepTarget {
  Vec value;
  Vec mask;  // empty = all channels
};

enum class Head { mse, softmax_ce, sigmoid_bits };

struct ReadoutEval {
  Vec pred;     // raw linear outputs (logits)
  Vec dlogits;  // d loss / d pred
  Vec grad_input;
  double loss = 0.0;       // training loss at this step (0 when no target)
  double bce_nats = 0.0;   // bit head: summed BCE over targeted bits
  std::size_t bit_count = 0;
  bool correct = false;    // softmax head: argmax == class
  bool has_target = false;
};

struct Readout {
  Mat w, b;  // [out x read_dim], [out x 1]
  Head head = Head::mse;

  Readout() = default;
  Readout(std::size_t out, std::size_t read_dim, Head h, Rng& rng)
      : w(uniform_fan_in_mat(rng, out, read_dim)), b(out, 1), head(h) {}

  ReadoutEval eval(const Vec& read_part, const StepTarget* target) const {
    require(read_part.size() == w.cols, "readout: input size mismatch");
    ReadoutEval e;
    e.pred = matvec(w, read_part);
    for (std::size_t i = 0; i < e.pred.size(); ++i) e.pred[i] += b.at(i, 0);
    if (!target) return e;
    e.has_target = true;
    const Vec& y = target->value;
    require(y.size() == e.pred.size(), "readout: target size mismatch");
    e.dlogits = Vec(e.pred.size());
    switch (head) {
      case Head::mse: {
        const double n = static_cast<double>(e.pred.size());
        for (std::size_t i = 0; i < e.pred.size(); ++i) {
          const double d = e.pred[i] - y[i];
          e.loss += d * d / n;
          e.dlogits[i] = 2.0 * d / n;
        }
        break;
      }
      case Head::softmax_ce: {
        double mx = e.pred[0];
        for (double v : e.pred.d) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : e.pred.d) z += std::exp(v - mx);
        std::size_t cls = 0, arg = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
          if (y[i] > 0.5) cls = i;
          if (e.pred[i] > e.pred[arg]) arg = i;
        }
        const double logz = std::log(z);
        e.loss = -(e.pred[cls] - mx - logz);
        for (std::size_t i = 0; i < e.pred.size(); ++i)
          e.dlogits[i] = std::exp(e.pred[i] - mx) / z - y[i];
        e.correct = (arg == cls);
        break;
      }
      case Head::sigmoid_bits: {
        const Vec& m = target->mask;
        require(m.size() == 0 || m.size() == y.size(), "readout: mask size mismatch");
        for (std::size_t i = 0; i < e.pred.size(); ++i) {
          if (m.size() && m[i] == 0.0) continue;
          const double zi = e.pred[i];
          // stable: log(1+exp(-|z|)) + max(z,0) - z*y
          const double bce =
              std::log1p(std::exp(-std::fabs(zi))) + std::max(zi, 0.0) - zi * y[i];
          const double p = 1.0 / (1.0 + std::exp(-zi));
          e.loss += bce;
          e.bce_nats += bce;
          ++e.bit_count;
          e.dlogits[i] = p - y[i];
        }
        break;
      }
    }
    e.grad_input = matvec_t(w, e.dlogits);
    return e;
  }

  void accumulate_grads(const Vec& read_part, const ReadoutEval& e, Mat& gw, Mat& gb) const {
    if (!e.has_target) return;
    for (std::size_t i = 0; i < e.dlogits.size(); ++i) {
      const double d = e.dlogits[i];
      double* gwi = gw.row(i);
      for (std::size_t j = 0; j < read_part.size(); ++j) gwi[j] += d * read_part[j];
      gb.at(i, 0) += d;
    }
  }

  std::vector<Mat*> params() { return {&w, &b}; }
};

}  // namespace bpl
