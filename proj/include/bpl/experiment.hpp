#pragma once
// Experiment plumbing: JSON-configured runs, one learner interface shared by
// every training scheme, deterministic per-seed streams, CSV metric files and
// a JSON summary per run. Every output file's header carries the effective
// config (compact JSON) and its FNV-1a-64 hash; reruns with the same config
// and seed produce byte-identical CSVs. Wall-clock goes to the summary only,
// never into the CSVs.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "bpl/baselines.hpp"
#include "bpl/bp_lambda.hpp"
#include "bpl/cells.hpp"
#include "bpl/optim.hpp"
#include "bpl/rng.hpp"
#include "bpl/tasks.hpp"
#include "bpl/theory.hpp"

namespace bpl {

using nlohmann::json;

// --- hashing & formatting ---------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string fmt_g(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

// A metric cell: number, empty (undefined alignment), or raw text.
struct Cellv {
  std::string text;
  Cellv() = default;
  Cellv(double x) : text(fmt_g(x)) {}
  Cellv(std::size_t n) : text(std::to_string(n)) {}
  Cellv(int n) : text(std::to_string(n)) {}
  Cellv(std::optional<double> x) { if (x) text = fmt_g(*x); }
  Cellv(const std::string& s) : text(s) {}
};

struct CsvWriter {
  std::ofstream f;

  CsvWriter(const std::string& path, const std::string& config_compact,
            const std::string& hash_hex, const std::vector<std::string>& cols) {
    f.open(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open output file " + path);
    f << "# config=" << config_compact << " hash=" << hash_hex << "\n";
    for (std::size_t i = 0; i < cols.size(); ++i)
      f << (i ? "," : "") << csv_quote(cols[i]);
    f << "\n";
    f.flush();
  }

  void row(const std::vector<Cellv>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      f << (i ? "," : "") << csv_quote(cells[i].text);
    f << "\n";
    f.flush();
  }
};

struct MeanSem {
  double mean = 0.0;
  std::optional<double> sem;  // absent when n < 2
};

inline MeanSem mean_sem(const std::vector<double>& xs) {
  MeanSem r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    r.sem = sd / std::sqrt(static_cast<double>(xs.size()));
  }
  return r;
}

// --- configuration ----------------------------------------------------------

struct TaskConfig {
  std::string name;  // toy_fixed | toy_plastic | seq_mnist | copy_repeat
  std::size_t T = 10;                  // toy_plastic horizon
  std::string data_dir = "data/mnist"; // seq_mnist
  std::size_t train_cap = 0, val_cap = 0, test_cap = 0;  // 0 = full split
  std::size_t start_N = 1, start_R = 1;                  // copy_repeat
};

struct LearnerConfig {
  std::string kind;  // bp_lambda | nstep_sg | tbptt | no_bptt | oracle
  double lambda = 1.0;
  std::size_t n = 1;
};

struct TrainConfig {
  std::string cell = "linear";  // linear | tanh | lstm
  std::size_t units = 30;
  std::size_t epochs = 1;
  std::size_t batch_size = 10;
  std::size_t batches_per_epoch = 100;  // seq_mnist: 0 = derive from data
  double model_lr = 1e-3;
  double synth_lr = 1e-4;
  double gamma = 1.0;
  double sg_scale = 1.0;
  bool train_model = true;
  std::size_t log_every = 1;    // epochs between CSV rows
  bool align = false;           // per-timestep cosine alignment columns (toy tasks)
  double time_budget_s = 0.0;   // 0 = no wall-clock cap (copy_repeat uses it)
};

struct ExperimentConfig {
  TaskConfig task;
  LearnerConfig learner;
  TrainConfig train;
  std::vector<std::uint64_t> seeds;
  std::string out_dir = "out";
  json raw;  // effective config; serialised into every output header

  std::string compact() const { return raw.dump(); }
  std::string hash_hex() const { return hex16(fnv1a64(raw.dump())); }
};

inline void check_keys(const json& j, const std::string& who,
                       const std::set<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + who);
}

struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data_dir;
  std::optional<std::string> out_dir;
  bool desk_scale = false;
  bool force_align = false;  // the align subcommand switches alignment logging on
};

inline ExperimentConfig parse_experiment_config(json j, const CliOverrides& ov) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  if (ov.desk_scale) {
    if (!j.contains("desk_scale"))
      throw std::invalid_argument("config: --desk-scale given but no desk_scale block");
    json patch = j["desk_scale"];
    j.merge_patch(patch);
  }
  j.erase("desk_scale");
  j["desk_scale_applied"] = ov.desk_scale;
  if (ov.seed) j["seeds"] = json::array({*ov.seed});
  if (ov.data_dir) j["task"]["data_dir"] = *ov.data_dir;
  if (ov.out_dir) j["out_dir"] = *ov.out_dir;
  if (ov.force_align) j["train"]["align"] = true;

  check_keys(j, "top level",
             {"task", "learner", "train", "seeds", "out_dir", "desk_scale_applied"});
  if (!j.contains("task") || !j.contains("learner") || !j.contains("train"))
    throw std::invalid_argument("config: task, learner and train blocks are required");

  ExperimentConfig c;
  const json& jt = j["task"];
  check_keys(jt, "task",
             {"name", "T", "data_dir", "train_cap", "val_cap", "test_cap", "start_N",
              "start_R"});
  c.task.name = jt.value("name", "");
  c.task.T = jt.value("T", std::size_t(10));
  c.task.data_dir = jt.value("data_dir", std::string("data/mnist"));
  c.task.train_cap = jt.value("train_cap", std::size_t(0));
  c.task.val_cap = jt.value("val_cap", std::size_t(0));
  c.task.test_cap = jt.value("test_cap", std::size_t(0));
  c.task.start_N = jt.value("start_N", std::size_t(1));
  c.task.start_R = jt.value("start_R", std::size_t(1));
  static const std::set<std::string> tasks = {"toy_fixed", "toy_plastic", "seq_mnist",
                                             "copy_repeat"};
  if (!tasks.count(c.task.name))
    throw std::invalid_argument("config: unknown task '" + c.task.name + "'");

  const json& jl = j["learner"];
  check_keys(jl, "learner", {"kind", "lambda", "n"});
  c.learner.kind = jl.value("kind", "");
  c.learner.lambda = jl.value("lambda", 1.0);
  c.learner.n = jl.value("n", std::size_t(1));
  static const std::set<std::string> kinds = {"bp_lambda", "nstep_sg", "tbptt", "no_bptt",
                                             "oracle"};
  if (!kinds.count(c.learner.kind))
    throw std::invalid_argument("config: unknown learner '" + c.learner.kind + "'");
  if (c.learner.lambda < 0.0 || c.learner.lambda > 1.0)
    throw std::invalid_argument("config: lambda must lie in [0, 1]");
  if (c.learner.n < 1) throw std::invalid_argument("config: n must be at least 1");

  const json& jr = j["train"];
  check_keys(jr, "train",
             {"cell", "units", "epochs", "batch_size", "batches_per_epoch", "model_lr",
              "synth_lr", "gamma", "sg_scale", "train_model", "log_every", "align",
              "time_budget_s"});
  c.train.cell = jr.value("cell", std::string("linear"));
  c.train.units = jr.value("units", std::size_t(30));
  c.train.epochs = jr.value("epochs", std::size_t(1));
  c.train.batch_size = jr.value("batch_size", std::size_t(10));
  c.train.batches_per_epoch = jr.value("batches_per_epoch", std::size_t(100));
  c.train.model_lr = jr.value("model_lr", 1e-3);
  c.train.synth_lr = jr.value("synth_lr", 1e-4);
  c.train.gamma = jr.value("gamma", 1.0);
  c.train.sg_scale = jr.value("sg_scale", 1.0);
  c.train.train_model = jr.value("train_model", true);
  c.train.log_every = jr.value("log_every", std::size_t(1));
  c.train.align = jr.value("align", false);
  c.train.time_budget_s = jr.value("time_budget_s", 0.0);
  static const std::set<std::string> cells = {"linear", "tanh", "lstm"};
  if (!cells.count(c.train.cell))
    throw std::invalid_argument("config: unknown cell '" + c.train.cell + "'");
  if (c.train.units < 1 || c.train.batch_size < 1 || c.train.epochs < 1)
    throw std::invalid_argument("config: units, batch_size and epochs must be positive");
  if (c.train.gamma < 0.0 || c.train.gamma > 1.0)
    throw std::invalid_argument("config: gamma must lie in [0, 1]");
  if (c.train.log_every < 1) throw std::invalid_argument("config: log_every must be positive");
  if (c.train.align &&
      (c.task.name == "seq_mnist" || c.task.name == "copy_repeat"))
    throw std::invalid_argument("config: alignment logging is supported on the toy tasks only");

  if (j.contains("seeds")) {
    for (const auto& s : j["seeds"]) c.seeds.push_back(s.get<std::uint64_t>());
  }
  if (c.seeds.empty()) throw std::invalid_argument("config: at least one seed is required");
  c.out_dir = j.value("out_dir", std::string("out"));
  c.raw = std::move(j);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path,
                                               const CliOverrides& ov) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: " + path + ": " + e.what());
  }
  return parse_experiment_config(std::move(j), ov);
}

inline std::string learner_tag(const LearnerConfig& lc) {
  if (lc.kind == "bp_lambda") return "bp" + std::string(fmt_g(lc.lambda));
  if (lc.kind == "nstep_sg") return "nstep" + std::to_string(lc.n);
  if (lc.kind == "tbptt") return "tbptt" + std::to_string(lc.n);
  return lc.kind;  // no_bptt | oracle
}

inline std::string task_tag(const TaskConfig& tc) {
  if (tc.name == "toy_plastic") return "toy_plastic_T" + std::to_string(tc.T);
  if (tc.name == "copy_repeat" && (tc.start_N != 1 || tc.start_R != 1))
    return "copy_repeat_N" + std::to_string(tc.start_N) + "R" + std::to_string(tc.start_R);
  return tc.name;
}

inline std::string run_tag(const ExperimentConfig& c) {
  return task_tag(c.task) + "_" + learner_tag(c.learner);
}

// --- model bundle and the uniform learner interface -------------------------

struct Model {
  std::unique_ptr<Cell> cell;
  Readout ro;
  SynthParams theta;
  AdamState cell_opt, ro_opt, synth_opt;

  std::size_t state_dim() const { return cell->layout().state_dim; }
};

inline CellKind cell_kind_from(const std::string& s) {
  if (s == "linear") return CellKind::linear;
  if (s == "tanh") return CellKind::tanh_;
  return CellKind::lstm;
}

struct TaskShape {
  std::size_t in_dim = 0, out_dim = 0;
  Head head = Head::mse;
};

inline TaskShape task_shape(const TaskConfig& tc) {
  if (tc.name == "seq_mnist") return {28, 10, Head::softmax_ce};
  if (tc.name == "copy_repeat") return {kCopyInputDim, kCopyOutputDim, Head::sigmoid_bits};
  return {10, 2, Head::mse};  // toy tasks
}

inline Model make_model(const ExperimentConfig& cfg, std::uint64_t seed) {
  const TaskShape shape = task_shape(cfg.task);
  Model m;
  Rng cell_rng(mix_seed(seed, 0xCE11));
  m.cell = make_cell(cell_kind_from(cfg.train.cell), cfg.train.units, shape.in_dim, cell_rng);
  Rng ro_rng(mix_seed(seed, 0x0D0));
  m.ro = Readout(shape.out_dim, m.cell->layout().readout_dim, shape.head, ro_rng);
  m.theta = SynthParams(m.cell->layout().state_dim);
  return m;
}

// One object per training scheme; every scheme exposes the same
// run_sequence(...) so the batch loop never branches on the learner.
struct Learner {
  bool is_bp_lambda = false;
  bool full_window = false;  // oracle: window spans the whole sequence
  BpLambdaConfig bp;
  WindowConfig win;
  EligibilityTrace trace;

  static Learner make(const LearnerConfig& lc, const TrainConfig& tc,
                      std::size_t state_dim) {
    Learner L;
    if (lc.kind == "bp_lambda") {
      L.is_bp_lambda = true;
      L.bp.gamma = tc.gamma;
      L.bp.lambda = lc.lambda;
      L.bp.sg_scale = tc.sg_scale;
      L.bp.raw_theta_updates = false;
      L.bp.train_model = tc.train_model;
      L.trace = EligibilityTrace(state_dim);
      return L;
    }
    L.win.gamma = tc.gamma;
    L.win.sg_scale = tc.sg_scale;
    L.win.train_model = tc.train_model;
    if (lc.kind == "nstep_sg") {
      L.win.n = lc.n;
      L.win.use_sg = true;
    } else if (lc.kind == "tbptt") {
      L.win.n = lc.n;
      L.win.use_sg = false;
    } else if (lc.kind == "no_bptt") {
      L.win.n = 1;
      L.win.use_sg = false;
    } else {  // oracle
      L.full_window = true;
      L.win.use_sg = false;
    }
    return L;
  }

  bool trains_synth() const { return is_bp_lambda || win.use_sg; }

  void run_sequence(const Cell& cell, const Readout& ro, SynthParams& theta,
                    const Episode& ep, SeqAccums& acc) {
    if (is_bp_lambda) {
      bp_lambda_sequence(cell, ro, theta, ep, bp, acc, trace);
      return;
    }
    WindowConfig w = win;
    if (full_window) w.n = ep.T();
    window_train_sequence(cell, ro, theta, ep, w, acc);
  }
};

// --- batch loop -------------------------------------------------------------

using ItemFn = std::function<const Episode&(std::size_t item)>;

inline SeqOutcome run_batch(Model& m, Learner& L, const TrainConfig& tc,
                            const ItemFn& item) {
  SeqAccums acc;
  acc.init(*m.cell, m.ro, m.theta);
  for (std::size_t i = 0; i < tc.batch_size; ++i)
    L.run_sequence(*m.cell, m.ro, m.theta, item(i), acc);

  const double inv = 1.0 / static_cast<double>(tc.batch_size);
  for (Mat& g : acc.cell_g.g)
    for (double& x : g.d) x *= inv;
  for (double& x : acc.ro_w.d) x *= inv;
  for (double& x : acc.ro_b.d) x *= inv;
  for (double& x : acc.theta_inc.d) x *= inv;

  if (tc.train_model) {
    adam_step(m.cell->params(), acc.cell_g.g, m.cell_opt,
              AdamConfig{.lr = tc.model_lr});
    m.cell->mark_params_updated();
    std::vector<Mat> ro_g;
    ro_g.push_back(std::move(acc.ro_w));
    ro_g.push_back(std::move(acc.ro_b));
    adam_step(m.ro.params(), ro_g, m.ro_opt, AdamConfig{.lr = tc.model_lr});
  }
  if (L.trains_synth()) {
    std::vector<Mat> th_g;
    th_g.push_back(scaled(acc.theta_inc, -1.0));  // increments are ascent-form
    adam_step({&m.theta.theta}, th_g, m.synth_opt, AdamConfig{.lr = tc.synth_lr});
  }
  return acc.out;
}

// Forward-only scoring (no gradients, no updates).
inline SeqOutcome score_episode(const Cell& cell, const Readout& ro, const Episode& ep) {
  const StateLayout lo = cell.layout();
  Vec h(lo.state_dim);
  SeqOutcome out;
  for (std::size_t t = 1; t <= ep.T(); ++t) {
    const TaskStep& st = ep.steps[t - 1];
    StepResult r = cell.step(st.input, h);
    ReadoutEval ev = ro.eval(readout_slice(lo, r.next_state),
                             st.target ? &*st.target : nullptr);
    if (ev.has_target) {
      out.loss_sum += ev.loss;
      ++out.loss_steps;
      out.bce_nats += ev.bce_nats;
      out.bit_count += ev.bit_count;
      if (ro.head == Head::softmax_ce) {
        ++out.class_steps;
        if (ev.correct) ++out.correct;
      }
    }
    h = std::move(r.next_state);
  }
  return out;
}

// Per-timestep cosine alignment between the synthesiser's predictions and the
// true future-loss gradients on one episode, t = 1..T-1 (the final prediction
// is identically zero on both sides).
inline std::vector<std::optional<double>> alignment_profile(const Cell& cell,
                                                            const Readout& ro,
                                                            const SynthParams& theta,
                                                            const Episode& ep,
                                                            double gamma) {
  Trajectory tr = record_trajectory(cell, ro, ep);
  std::vector<std::optional<double>> out;
  for (std::size_t t = 1; t + 1 <= tr.T(); ++t)
    out.push_back(cosine_alignment(synth_predict(theta, tr.states[t]),
                                   true_gradient(tr, t, gamma)));
  return out;
}

// --- per-seed drivers -------------------------------------------------------

struct SeedResult {
  json metrics = json::object();
  bool diverged = false;
  std::string error;
};

inline double mean_loss(const SeqOutcome& o) {
  return o.loss_steps ? o.loss_sum / static_cast<double>(o.loss_steps) : 0.0;
}

inline double bits_per_bit(const SeqOutcome& o) {
  return o.bit_count
             ? o.bce_nats / std::numbers::ln2 / static_cast<double>(o.bit_count)
             : 0.0;
}

inline double accuracy(const SeqOutcome& o) {
  return o.class_steps ? static_cast<double>(o.correct) / static_cast<double>(o.class_steps)
                       : 0.0;
}

// Both toy variants: a fixed pool of episodes, items cycling the pool.
inline SeedResult run_toy_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                               const std::string& csv_path) {
  std::vector<Episode> pool;
  if (cfg.task.name == "toy_fixed") {
    pool.push_back(toy_fixed_episode(seed));
  } else {
    ToyPlasticTask task = toy_plastic_task(cfg.task.T, seed);
    for (Episode& e : task.episodes) pool.push_back(std::move(e));
  }
  const std::size_t T = pool[0].T();

  Model m = make_model(cfg, seed);
  Learner L = Learner::make(cfg.learner, cfg.train, m.state_dim());

  std::vector<std::string> cols = {"epoch", "batch", "loss"};
  if (cfg.train.align)
    for (std::size_t t = 1; t + 1 <= T; ++t) cols.push_back("align_t" + std::to_string(t));
  CsvWriter csv(csv_path, cfg.compact(), cfg.hash_hex(), cols);

  std::vector<double> epoch_losses;
  std::vector<std::optional<double>> last_align;
  std::size_t batches_done = 0;
  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    SeqOutcome tally;
    for (std::size_t b = 0; b < cfg.train.batches_per_epoch; ++b) {
      tally.add(run_batch(m, L, cfg.train,
                          [&](std::size_t i) -> const Episode& {
                            return pool[i % pool.size()];
                          }));
      ++batches_done;
    }
    epoch_losses.push_back(mean_loss(tally));
    if (epoch % cfg.train.log_every == 0 || epoch == cfg.train.epochs) {
      std::vector<Cellv> row = {epoch, batches_done, epoch_losses.back()};
      if (cfg.train.align) {
        std::vector<double> num(T > 0 ? T - 1 : 0, 0.0);
        std::vector<std::size_t> cnt(num.size(), 0);
        for (const Episode& ep : pool) {
          auto prof = alignment_profile(*m.cell, m.ro, m.theta, ep, cfg.train.gamma);
          for (std::size_t t = 0; t < prof.size(); ++t)
            if (prof[t]) {
              num[t] += *prof[t];
              ++cnt[t];
            }
        }
        last_align.assign(num.size(), std::nullopt);
        for (std::size_t t = 0; t < num.size(); ++t) {
          if (cnt[t]) last_align[t] = num[t] / static_cast<double>(cnt[t]);
          row.push_back(Cellv(last_align[t]));
        }
      }
      csv.row(row);
    }
  }

  SeedResult r;
  r.metrics["final_loss"] = epoch_losses.back();
  const std::size_t w = std::min<std::size_t>(20, epoch_losses.size());
  double tail = 0.0;
  for (std::size_t i = epoch_losses.size() - w; i < epoch_losses.size(); ++i)
    tail += epoch_losses[i];
  tail /= static_cast<double>(w);
  r.metrics["last20_mean_loss"] = tail;
  if (cfg.task.name == "toy_plastic") r.metrics["solved"] = (tail < 0.025);
  if (cfg.train.align && !last_align.empty()) {
    double mn = 2.0;
    bool any = false;
    for (const auto& a : last_align)
      if (a) {
        mn = std::min(mn, *a);
        any = true;
      }
    if (any) r.metrics["final_min_align"] = mn;
    if (last_align[0]) r.metrics["final_align_t1"] = *last_align[0];
  }
  return r;
}

inline SeedResult run_mnist_seed(const ExperimentConfig& cfg, const SeqMnistData& data,
                                 std::uint64_t seed, const std::string& csv_path) {
  auto cap = [](std::vector<std::size_t> idx, std::size_t k) {
    if (k && idx.size() > k) idx.resize(k);
    return idx;
  };
  const std::vector<std::size_t> train_idx = cap(data.train_idx, cfg.task.train_cap);
  const std::vector<std::size_t> val_idx = cap(data.val_idx, cfg.task.val_cap);
  const std::vector<std::size_t> test_idx = cap(data.test_idx, cfg.task.test_cap);
  require(train_idx.size() >= cfg.train.batch_size, "seq_mnist: too few training images");

  Model m = make_model(cfg, seed);
  Learner L = Learner::make(cfg.learner, cfg.train, m.state_dim());
  Rng shuffle_rng(mix_seed(seed, 0x5475));

  const std::size_t bpe = cfg.train.batches_per_epoch
                              ? cfg.train.batches_per_epoch
                              : train_idx.size() / cfg.train.batch_size;

  CsvWriter csv(csv_path, cfg.compact(), cfg.hash_hex(),
                {"epoch", "batch", "train_loss", "val_loss", "val_acc"});

  struct Snapshot {
    std::unique_ptr<Cell> cell;
    Readout ro;
    SynthParams theta;
  } best;
  double best_val_acc = -1.0;
  std::size_t best_epoch = 0;
  std::size_t batches_done = 0;
  double final_train_loss = 0.0;

  std::vector<std::size_t> order = train_idx;
  Episode scratch;
  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    std::size_t cursor = 0;
    SeqOutcome tally;
    for (std::size_t b = 0; b < bpe; ++b) {
      tally.add(run_batch(m, L, cfg.train, [&](std::size_t) -> const Episode& {
        scratch = mnist_episode(data.train, order[cursor]);
        cursor = (cursor + 1) % order.size();
        return scratch;
      }));
      ++batches_done;
    }
    final_train_loss = mean_loss(tally);

    SeqOutcome val;
    for (std::size_t i : val_idx) val.add(score_episode(*m.cell, m.ro, mnist_episode(data.train, i)));
    const double val_acc = accuracy(val);
    if (val_acc > best_val_acc) {
      best_val_acc = val_acc;
      best_epoch = epoch;
      best.cell = m.cell->clone();
      best.ro = m.ro;
      best.theta = m.theta;
    }
    if (epoch % cfg.train.log_every == 0 || epoch == cfg.train.epochs)
      csv.row({epoch, batches_done, final_train_loss, mean_loss(val), val_acc});
  }

  SeqOutcome test;
  for (std::size_t i : test_idx)
    test.add(score_episode(*best.cell, best.ro, mnist_episode(data.test, i)));

  SeedResult r;
  r.metrics["final_train_loss"] = final_train_loss;
  r.metrics["best_val_acc"] = best_val_acc;
  r.metrics["best_val_epoch"] = best_epoch;
  r.metrics["test_acc"] = accuracy(test);
  r.metrics["test_loss"] = mean_loss(test);
  return r;
}

inline SeedResult run_copy_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                const std::string& csv_path) {
  Model m = make_model(cfg, seed);
  Learner L = Learner::make(cfg.learner, cfg.train, m.state_dim());
  Curriculum cur;
  cur.N = cfg.task.start_N;
  cur.R = cfg.task.start_R;
  Rng gen(mix_seed(seed, 0xC0B7));

  CsvWriter csv(csv_path, cfg.compact(), cfg.hash_hex(),
                {"epoch", "batch", "bits", "N", "R", "T", "solved_T"});

  const auto t0 = std::chrono::steady_clock::now();
  auto out_of_budget = [&] {
    if (cfg.train.time_budget_s <= 0.0) return false;
    const std::chrono::duration<double> el = std::chrono::steady_clock::now() - t0;
    return el.count() >= cfg.train.time_budget_s;
  };

  Episode scratch;
  std::size_t batches_done = 0;
  double last_bits = 0.0;
  bool stop = false;
  for (std::size_t epoch = 1; epoch <= cfg.train.epochs && !stop; ++epoch) {
    SeqOutcome tally;
    std::size_t block = 0;
    for (std::size_t b = 0; b < cfg.train.batches_per_epoch; ++b) {
      SeqOutcome bout = run_batch(m, L, cfg.train, [&](std::size_t) -> const Episode& {
        scratch = copy_repeat_episode(cur.N, cur.R, gen);
        return scratch;
      });
      ++batches_done;
      ++block;
      cur.advance(bits_per_bit(bout) < 0.15);
      tally.add(bout);
      if (out_of_budget()) {
        stop = true;
        break;
      }
    }
    if (block) last_bits = bits_per_bit(tally);
    if (epoch % cfg.train.log_every == 0 || epoch == cfg.train.epochs || stop)
      csv.row({epoch, batches_done, last_bits, cur.N, cur.R, cur.T(), cur.solved_T});
  }

  SeedResult r;
  r.metrics["solved_T"] = cur.solved_T;
  r.metrics["final_bits"] = last_bits;
  r.metrics["batches"] = batches_done;
  r.metrics["level_N"] = cur.N;
  r.metrics["level_R"] = cur.R;
  return r;
}

// --- whole runs -------------------------------------------------------------

inline json aggregate_metrics(const json& per_seed) {
  json agg = json::object();
  if (per_seed.empty()) return agg;
  for (auto it = per_seed[0]["metrics"].begin(); it != per_seed[0]["metrics"].end(); ++it) {
    std::vector<double> xs;
    for (const auto& entry : per_seed) {
      if (entry.value("diverged", false)) continue;
      const json& mets = entry["metrics"];
      if (!mets.contains(it.key())) continue;
      const json& v = mets[it.key()];
      if (v.is_number()) xs.push_back(v.get<double>());
      else if (v.is_boolean()) xs.push_back(v.get<bool>() ? 1.0 : 0.0);
    }
    if (xs.empty()) continue;
    MeanSem ms = mean_sem(xs);
    json cell = {{"mean", ms.mean}, {"n", xs.size()}};
    if (ms.sem) cell["sem"] = *ms.sem;
    agg[it.key()] = cell;
  }
  return agg;
}

inline int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  std::optional<SeqMnistData> mnist;
  if (cfg.task.name == "seq_mnist") mnist = load_seq_mnist(cfg.task.data_dir);

  const std::string tag = run_tag(cfg);
  json per_seed = json::array();
  bool any_diverged = false;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string csv_path =
        (fs::path(cfg.out_dir) / (tag + "_seed" + std::to_string(seed) + ".csv")).string();
    const auto t0 = std::chrono::steady_clock::now();
    SeedResult res;
    try {
      if (cfg.task.name == "seq_mnist")
        res = run_mnist_seed(cfg, *mnist, seed, csv_path);
      else if (cfg.task.name == "copy_repeat")
        res = run_copy_seed(cfg, seed, csv_path);
      else
        res = run_toy_seed(cfg, seed, csv_path);
    } catch (const std::exception& e) {
      res.diverged = true;
      res.error = e.what();
    }
    const std::chrono::duration<double> wall = std::chrono::steady_clock::now() - t0;
    json entry = {{"seed", seed},
                  {"csv", csv_path},
                  {"wall_clock_s", wall.count()},
                  {"diverged", res.diverged},
                  {"metrics", res.metrics}};
    if (res.diverged) {
      entry["error"] = res.error;
      any_diverged = true;
      log << tag << " seed " << seed << ": DIVERGED: " << res.error << "\n";
    } else {
      log << tag << " seed " << seed << ": done in " << fmt_g(wall.count()) << " s\n";
    }
    per_seed.push_back(std::move(entry));
  }

  json summary = {{"config", cfg.raw},
                  {"hash", cfg.hash_hex()},
                  {"tag", tag},
                  {"per_seed", per_seed},
                  {"aggregate", aggregate_metrics(per_seed)},
                  {"diverged", any_diverged}};
  const std::string sum_path =
      (fs::path(cfg.out_dir) / (tag + "_summary.json")).string();
  std::ofstream sf(sum_path, std::ios::trunc);
  if (!sf) throw std::runtime_error("cannot open output file " + sum_path);
  sf << summary.dump(2) << "\n";
  log << "summary: " << sum_path << "\n";
  return any_diverged ? 1 : 0;
}

}  // namespace bpl
