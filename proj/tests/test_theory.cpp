#include "catch_amalgamated.hpp"

#include <cmath>

#include "bpl/theory.hpp"

using namespace bpl;

namespace {

// In-place Gauss-Jordan solve of the square system m x = b (small, pivoted).
Vec solve_dense(Mat m, Vec b) {
  const std::size_t n = m.rows;
  require(m.cols == n && b.size() == n, "solve_dense: square system expected");
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::fabs(m.at(r, c)) > std::fabs(m.at(piv, c))) piv = r;
    if (piv != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m.at(c, j), m.at(piv, j));
      std::swap(b[c], b[piv]);
    }
    const double d = m.at(c, c);
    require(std::fabs(d) > 1e-300, "solve_dense: singular system");
    for (std::size_t j = 0; j < n; ++j) m.at(c, j) /= d;
    b[c] /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = m.at(r, c);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) m.at(r, j) -= f * m.at(c, j);
      b[r] -= f * b[c];
    }
  }
  return b;
}

// Least-norm theta with g(h_t; theta) == G_t for t = 0..T-1 on the recorded
// trajectory (T constraints per output row, underdetermined in |h|+1 unknowns).
SynthParams interpolating_synth(const TheorySystem& sys, double gamma) {
  const Trajectory& tr = sys.traj;
  const std::size_t T = tr.T();
  const std::size_t dim = tr.states[0].size();
  Mat X(T, dim + 1);
  for (std::size_t t = 0; t < T; ++t) {
    Vec ext = extended_state(tr.states[t]);
    for (std::size_t j = 0; j <= dim; ++j) X.at(t, j) = ext[j];
  }
  Mat gram(T, T);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k <= dim; ++k) s += X.at(i, k) * X.at(j, k);
      gram.at(i, j) = s;
    }
  SynthParams theta(dim);
  for (std::size_t row = 0; row < dim; ++row) {
    Vec rhs(T);
    for (std::size_t t = 0; t < T; ++t) rhs[t] = true_gradient(tr, t, gamma)[row];
    Vec z = solve_dense(gram, rhs);  // theta_row = X^T z
    for (std::size_t j = 0; j <= dim; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += X.at(t, j) * z[t];
      theta.theta.at(row, j) = s;
    }
  }
  return theta;
}

}  // namespace

TEST_CASE("finite difference helpers recover analytic derivatives") {
  auto f = [](const Vec& x) { return x[0] * x[0] + 3.0 * x[0] * x[1]; };
  Vec g = finite_difference_grad(f, Vec{2.0, -1.0}, 1e-6);
  REQUIRE_THAT(g[0], Catch::Matchers::WithinAbs(1.0, 1e-6));   // 2x + 3y
  REQUIRE_THAT(g[1], Catch::Matchers::WithinAbs(6.0, 1e-6));   // 3x

  auto vf = [](const Vec& x) {
    Vec y(2);
    y[0] = x[0] * x[1];
    y[1] = std::sin(x[0]);
    return y;
  };
  Mat j = finite_difference_jacobian(vf, Vec{0.5, 2.0}, 1e-6);
  REQUIRE_THAT(j.at(0, 0), Catch::Matchers::WithinAbs(2.0, 1e-6));
  REQUIRE_THAT(j.at(0, 1), Catch::Matchers::WithinAbs(0.5, 1e-6));
  REQUIRE_THAT(j.at(1, 0), Catch::Matchers::WithinAbs(std::cos(0.5), 1e-6));
  REQUIRE_THAT(j.at(1, 1), Catch::Matchers::WithinAbs(0.0, 1e-6));
  REQUIRE_THROWS_AS(finite_difference_grad(f, Vec{1.0, 1.0}, 0.0), std::invalid_argument);
}

TEST_CASE("cosine alignment values and null cases") {
  REQUIRE_THAT(*cosine_alignment(Vec{1.0, 0.0}, Vec{1.0, 1.0}),
               Catch::Matchers::WithinAbs(1.0 / std::sqrt(2.0), 1e-15));
  REQUIRE_THAT(*cosine_alignment(Vec{2.0, 1.0}, Vec{2.0, 1.0}),
               Catch::Matchers::WithinAbs(1.0, 1e-15));
  REQUIRE_THAT(*cosine_alignment(Vec{1.0, 1.0}, Vec{-1.0, -1.0}),
               Catch::Matchers::WithinAbs(-1.0, 1e-15));
  REQUIRE_FALSE(cosine_alignment(Vec{0.0, 0.0}, Vec{1.0, 0.0}).has_value());
  REQUIRE_FALSE(cosine_alignment(Vec{1.0, 0.0}, Vec(2)).has_value());
  REQUIRE_THROWS_AS(cosine_alignment(Vec(2), Vec(3)), std::invalid_argument);
}

TEST_CASE("jac_chain multiplies one-step jacobians in order") {
  TheorySystem sys = make_theory_system(CellKind::linear, 3, 3, 4, 2323, 0.0);
  // for a linear cell every one-step jacobian is w_rec
  const Mat& w = static_cast<LinearCell*>(sys.cell.get())->w_rec;
  Mat id = jac_chain(sys.traj, 2, 2);
  REQUIRE(max_abs(id) == 1.0);  // identity
  Mat two = jac_chain(sys.traj, 1, 3);
  Mat hand = matmul(w, w);
  axpy(-1.0, hand, two);
  REQUIRE(max_abs(two) < 1e-12);
}

TEST_CASE("theory systems are seed-deterministic") {
  TheorySystem a = make_theory_system(CellKind::tanh_, 4, 3, 6, 99, 0.3);
  TheorySystem b = make_theory_system(CellKind::tanh_, 4, 3, 6, 99, 0.3);
  TheorySystem c = make_theory_system(CellKind::tanh_, 4, 3, 6, 100, 0.3);
  for (std::size_t t = 0; t <= 6; ++t) REQUIRE(a.traj.states[t].d == b.traj.states[t].d);
  REQUIRE(a.theta0.theta.d == b.theta0.theta.d);
  REQUIRE(a.traj.states[6].d != c.traj.states[6].d);

  TheorySystem z = make_theory_system(CellKind::linear, 3, 3, 4, 7, 0.0);
  REQUIRE(max_abs(z.theta0.theta) == 0.0);  // zero synthesiser by default
}

TEST_CASE("frozen lemma chain is exact to float precision") {
  for (double lam : {0.3, 0.8}) {
    LemmaSuiteResult res = run_lemma_suite(CellKind::tanh_, 4, 3, 7, 3131, lam, 0.9);
    REQUIRE(res.frozen.l1 < 1e-10);
    REQUIRE(res.frozen.l2 < 1e-10);
    REQUIRE(res.frozen.l3 < 1e-10);
    REQUIRE(res.frozen.l4 < 1e-10);
    REQUIRE(res.frozen.l2l3_route < 1e-10);
    REQUIRE(res.frozen.l5 < 1e-10);
    REQUIRE(res.frozen.delta_pair == 0.0);
  }
}

TEST_CASE("the stale-evaluation gap shrinks with the learning rate") {
  LemmaSuiteResult res =
      run_lemma_suite(CellKind::linear, 4, 3, 7, 3232, 0.7, 0.9, 1e-2, 1e-4);
  REQUIRE(res.moving_lo.l6_gap > 0.0);
  const double gap_ratio = res.moving_hi.l6_gap / res.moving_lo.l6_gap;
  const double alpha_ratio = res.alpha_hi / res.alpha_lo;
  REQUIRE(gap_ratio / alpha_ratio > 0.5);
  REQUIRE(gap_ratio / alpha_ratio < 2.0);
  // moving-path deviations are small but nonzero; frozen ones are exact
  REQUIRE(res.moving_hi.delta_pair > 0.0);
  REQUIRE(res.frozen.delta_pair == 0.0);
}

TEST_CASE("lambda-target backward recursion identity") {
  for (std::uint64_t s = 0; s < 4; ++s) {
    const CellKind kind = (s % 2 == 0) ? CellKind::linear : CellKind::tanh_;
    TheorySystem sys = make_theory_system(kind, 3, 3, 6, 4000 + s, 0.3);
    ThetaTimeline tl(sys.theta0);
    for (double lam : {0.0, 0.25, 0.5, 0.75, 1.0})
      REQUIRE(recursive_identity_check(sys.traj, tl, lam, 0.9) < 1e-10);
  }
}

TEST_CASE("an interpolating synthesiser is a fixed point of the trace updates") {
  // theta* reproduces the true future gradient at every recorded state, so
  // every td error vanishes and the raw update path stays put.
  TheorySystem sys = make_theory_system(CellKind::tanh_, 8, 3, 6, 5151, 0.0);
  const double gamma = 0.9;
  SynthParams star = interpolating_synth(sys, gamma);

  const Trajectory& tr = sys.traj;
  for (std::size_t t = 0; t < 6; ++t)
    REQUIRE(norm_inf(sub(synth_predict(star, tr.states[t]), true_gradient(tr, t, gamma))) <
            1e-8);

  // delta_t = J^T (gl + gamma g(h_t)) - g(h_{t-1}) == 0 for every step
  for (std::size_t t = 1; t <= 6; ++t) {
    Vec inner = tr.loss_grads[t];
    axpy(gamma, synth_predict(star, tr.states[t], t == 6), inner);
    Vec delta = sub(matvec_t(tr.jacs[t - 1], inner), synth_predict(star, tr.states[t - 1]));
    REQUIRE(norm_inf(delta) < 1e-8);
  }

  TheorySystem probe = make_theory_system(CellKind::tanh_, 8, 3, 6, 5151, 0.0);
  probe.theta0 = star;
  RawRun run = raw_trace_run(probe, 1e-2, 1.0, gamma);
  Mat moved = run.thetas.back().theta;
  axpy(-1.0, star.theta, moved);
  REQUIRE(max_abs(moved) < 1e-8);
}

TEST_CASE("with a perfect synthesiser windowed and per-step model grads agree") {
  TheorySystem sys = make_theory_system(CellKind::tanh_, 8, 3, 6, 5252, 0.0);
  const double gamma = 0.9;
  SynthParams star = interpolating_synth(sys, gamma);

  BpLambdaConfig bp;
  bp.gamma = gamma;
  bp.lambda = 1.0;
  bp.sg_scale = 1.0;
  bp.train_model = true;
  SynthParams th = star;
  SeqAccums a1;
  a1.init(*sys.cell, sys.ro, th);
  EligibilityTrace trace(sys.cell->layout().state_dim);
  bp_lambda_sequence(*sys.cell, sys.ro, th, sys.ep, bp, a1, trace);

  for (std::size_t n : {std::size_t(2), std::size_t(3)}) {
    WindowConfig win;
    win.n = n;
    win.use_sg = true;
    win.gamma = gamma;
    win.sg_scale = 1.0;
    win.train_model = true;
    SeqAccums a2;
    a2.init(*sys.cell, sys.ro, star);
    window_train_sequence(*sys.cell, sys.ro, star, sys.ep, win, a2);
    for (std::size_t k = 0; k < a1.cell_g.g.size(); ++k) {
      Mat d = a1.cell_g.g[k];
      axpy(-1.0, a2.cell_g.g[k], d);
      REQUIRE(max_abs(d) / (max_abs(a1.cell_g.g[k]) + 1e-12) < 1e-7);
    }
  }
}

TEST_CASE("ratio study: per-step and online weights converge as alpha shrinks") {
  TheorySystem sys = make_theory_system(CellKind::linear, 5, 4, 8, 6161, 0.0);
  RatioReport rep = theorem1_ratio(sys, 0.9, 0.9, {1e-2, 1e-3, 1e-4});
  REQUIRE(rep.condition_ok);
  REQUIRE(rep.points.size() == 3);
  REQUIRE(rep.points[0].alpha == 1e-2);  // sorted descending
  REQUIRE(rep.points[2].alpha == 1e-4);
  for (const RatioPoint& p : rep.points) REQUIRE(p.per_t.size() == 8);
  REQUIRE(rep.points[1].max_ratio <= rep.points[0].max_ratio + 1e-12);
  REQUIRE(rep.points[2].max_ratio <= rep.points[1].max_ratio + 1e-12);

  RatioReport zero = theorem1_ratio(sys, 0.0, 0.9, {1e-2, 1e-3});
  for (const RatioPoint& p : zero.points) REQUIRE(p.max_ratio < 1e-12);
}
