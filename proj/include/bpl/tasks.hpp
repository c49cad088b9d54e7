#pragma once
// Task generators: toy target-reach (fixed- and plastic-RNN variants),
// copy-repeat with its curriculum, and row-by-row MNIST classification.
// Generators are pure functions of (seed, params): the same seed yields a
// byte-identical episode stream. Targets carry masks where only some output
// channels are scored; steps without a target contribute no loss gradient.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "bpl/idx.hpp"
#include "bpl/rng.hpp"
#include "bpl/sequence.hpp"

namespace bpl {

// --- toy target-reach -------------------------------------------------------
// A static 10-d binary cue enters at step 1, nothing afterwards; the model
// must output a 2-d point on the unit circle at the final step (MSE).

inline Episode toy_reach_episode(std::size_t T, const Vec& cue, const Vec& target) {
  require(T >= 1, "toy_reach: T must be positive");
  Episode ep;
  for (std::size_t t = 1; t <= T; ++t) {
    TaskStep s;
    s.input = (t == 1) ? cue : Vec(cue.size());
    if (t == T) s.target = StepTarget{target, Vec()};
    ep.steps.push_back(std::move(s));
  }
  return ep;
}

inline Vec circle_point(double angle) {
  Vec y(2);
  y[0] = std::cos(angle);
  y[1] = std::sin(angle);
  return y;
}

// Single cue/target pair, T = 10; the RNN stays fixed and only the
// synthesiser trains, so every batch item replays this one episode.
inline Episode toy_fixed_episode(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x70F1));
  const Vec cue = rng.binary_vec(10);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return toy_reach_episode(10, cue, circle_point(angle));
}

// Three cue/target pairs with targets spread equidistantly on the circle
// (angles 2*pi*k/3); cues are drawn per seed and kept pairwise distinct so
// the association is learnable. Batch items cycle the pairs round-robin.
struct ToyPlasticTask {
  std::array<Episode, 3> episodes;
};

inline ToyPlasticTask toy_plastic_task(std::size_t T, std::uint64_t seed) {
  require(T >= 10 && T <= 100 && T % 10 == 0,
          "toy_plastic: T must be a multiple of 10 in [10, 100]");
  Rng rng(mix_seed(seed, 0x70F2));
  std::array<Vec, 3> cues;
  for (std::size_t k = 0; k < 3; ++k) {
    bool fresh = false;
    while (!fresh) {
      cues[k] = rng.binary_vec(10);
      fresh = true;
      for (std::size_t j = 0; j < k; ++j) {
        bool same = true;
        for (std::size_t i = 0; i < cues[k].size(); ++i)
          if (cues[k][i] != cues[j][i]) { same = false; break; }
        if (same) { fresh = false; break; }
      }
    }
  }
  ToyPlasticTask task;
  for (std::size_t k = 0; k < 3; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / 3.0;
    task.episodes[k] = toy_reach_episode(T, cues[k], circle_point(angle));
  }
  return task;
}

// --- copy-repeat ------------------------------------------------------------
// Input channels (10): 0..7 pattern bits, 8 start delimiter, 9 repeat count
// scaled by 1/10. Output channels (9): 0..7 pattern bits, 8 stop marker.
// Step layout for pattern length N repeated R times (T = N*(R+1) + 3):
//   step 1            start delimiter
//   steps 2 .. N+1    pattern rows
//   step N+2          repeat marker carrying R/10
//   next N*R steps    model reproduces the pattern R times (bits 0..7 scored)
//   final step        stop marker (bit 8 scored)
// Nothing is scored during the input phase; the scored bit count is 8*N*R + 1.

constexpr std::size_t kCopyInputDim = 10;
constexpr std::size_t kCopyOutputDim = 9;

inline std::size_t copy_repeat_length(std::size_t N, std::size_t R) {
  require(N >= 1 && R >= 1, "copy_repeat: N and R must be at least 1");
  return N * (R + 1) + 3;
}

inline Episode copy_repeat_episode(std::size_t N, std::size_t R, Rng& rng) {
  const std::size_t T = copy_repeat_length(N, R);
  std::vector<Vec> pattern;
  for (std::size_t i = 0; i < N; ++i) pattern.push_back(rng.binary_vec(8));

  Vec bit_mask(kCopyOutputDim), stop_mask(kCopyOutputDim);
  for (std::size_t i = 0; i < 8; ++i) bit_mask[i] = 1.0;
  stop_mask[8] = 1.0;

  Episode ep;
  ep.steps.reserve(T);
  {
    TaskStep s;
    s.input = Vec(kCopyInputDim);
    s.input[8] = 1.0;
    ep.steps.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < N; ++i) {
    TaskStep s;
    s.input = Vec(kCopyInputDim);
    for (std::size_t j = 0; j < 8; ++j) s.input[j] = pattern[i][j];
    ep.steps.push_back(std::move(s));
  }
  {
    TaskStep s;
    s.input = Vec(kCopyInputDim);
    s.input[9] = static_cast<double>(R) / 10.0;
    ep.steps.push_back(std::move(s));
  }
  for (std::size_t j = 0; j < N * R; ++j) {
    TaskStep s;
    s.input = Vec(kCopyInputDim);
    Vec y(kCopyOutputDim);
    for (std::size_t i = 0; i < 8; ++i) y[i] = pattern[j % N][i];
    s.target = StepTarget{std::move(y), bit_mask};
    ep.steps.push_back(std::move(s));
  }
  {
    TaskStep s;
    s.input = Vec(kCopyInputDim);
    Vec y(kCopyOutputDim);
    y[8] = 1.0;
    s.target = StepTarget{std::move(y), stop_mask};
    ep.steps.push_back(std::move(s));
  }
  require(ep.T() == T, "copy_repeat: step layout out of sync with length formula");
  return ep;
}

// Levels advance on solve by incrementing N and R alternately, N first:
// (1,1) -> (2,1) -> (2,2) -> (3,2) -> ... The reported solved length is the
// longest T among levels actually solved.
struct Curriculum {
  std::size_t N = 1, R = 1;
  bool bump_N_next = true;
  std::size_t solved_T = 0;

  std::size_t T() const { return copy_repeat_length(N, R); }

  void advance(bool solved) {
    if (!solved) return;
    solved_T = std::max(solved_T, T());
    if (bump_N_next) ++N; else ++R;
    bump_N_next = !bump_N_next;
  }
};

// --- sequential MNIST -------------------------------------------------------
// One image becomes a 28-step episode: step t feeds row t-1 scaled to [0,1],
// and the one-hot class target sits on the final step only.

struct SeqMnistData {
  MnistSet train;                     // the full 60k training file
  MnistSet test;                      // the 10k test file
  std::vector<std::size_t> train_idx; // first 50k of train
  std::vector<std::size_t> val_idx;   // last 10k of train
  std::vector<std::size_t> test_idx;  // all of test
};

inline SeqMnistData load_seq_mnist(const std::string& dir) {
  SeqMnistData d;
  d.train = load_mnist_set(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte");
  d.test = load_mnist_set(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
  require(d.train.rows == 28 && d.train.cols == 28, "seq_mnist: expected 28x28 images");
  require(d.test.rows == 28 && d.test.cols == 28, "seq_mnist: expected 28x28 images");
  require(d.train.count > 10000, "seq_mnist: training set too small to split");
  const std::size_t split = d.train.count - 10000;
  for (std::size_t i = 0; i < split; ++i) d.train_idx.push_back(i);
  for (std::size_t i = split; i < d.train.count; ++i) d.val_idx.push_back(i);
  for (std::size_t i = 0; i < d.test.count; ++i) d.test_idx.push_back(i);
  return d;
}

inline Episode mnist_episode(const MnistSet& set, std::size_t idx) {
  require(idx < set.count, "mnist_episode: index out of range");
  const std::uint8_t* img = set.image(idx);
  Episode ep;
  ep.steps.reserve(set.rows);
  for (std::size_t r = 0; r < set.rows; ++r) {
    TaskStep s;
    s.input = Vec(set.cols);
    for (std::size_t c = 0; c < set.cols; ++c)
      s.input[c] = static_cast<double>(img[r * set.cols + c]) / 255.0;
    if (r + 1 == set.rows) {
      require(set.labels[idx] < 10, "mnist_episode: label out of range");
      Vec y(10);
      y[set.labels[idx]] = 1.0;
      s.target = StepTarget{std::move(y), Vec()};
    }
    ep.steps.push_back(std::move(s));
  }
  return ep;
}

}  // namespace bpl
