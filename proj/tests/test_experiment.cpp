#include "catch_amalgamated.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "bpl/experiment.hpp"

using namespace bpl;
namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

struct ScratchDir {
  fs::path p;
  ScratchDir() {
    p = fs::temp_directory_path() /
        ("bpl_exp_" + std::to_string(::getpid()) + "_" +
         std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(p);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(p, ec);
  }
  std::string file(const std::string& name) const { return (p / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json minimal_config() {
  return json::parse(R"json({
    "task": {"name": "toy_fixed"},
    "learner": {"kind": "bp_lambda"},
    "train": {},
    "seeds": [1]
  })json");
}

}  // namespace

TEST_CASE("fnv1a64 matches published reference vectors") {
  REQUIRE(fnv1a64("") == 0xcbf29ce484222325ULL);
  REQUIRE(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  REQUIRE(fnv1a64("foobar") == 0x85944171f73967e8ULL);
  REQUIRE(fnv1a64("{}") == 0x08f44b07b5901a25ULL);
}

TEST_CASE("hex16 pads to sixteen lowercase digits") {
  REQUIRE(hex16(0) == "0000000000000000");
  REQUIRE(hex16(0x08f44b07b5901a25ULL) == "08f44b07b5901a25");
  REQUIRE(hex16(0xffffffffffffffffULL) == "ffffffffffffffff");
}

TEST_CASE("csv_quote applies RFC-4180 quoting only when needed") {
  REQUIRE(csv_quote("plain") == "plain");
  REQUIRE(csv_quote("") == "");
  REQUIRE(csv_quote("a,b") == "\"a,b\"");
  REQUIRE(csv_quote("say \"hi\"") == "\"say \"\"hi\"\"\"");
  REQUIRE(csv_quote("line\nbreak") == "\"line\nbreak\"");
  REQUIRE(csv_quote("cr\rhere") == "\"cr\rhere\"");
}

TEST_CASE("fmt_g prints shortest round-trippable decimals") {
  REQUIRE(fmt_g(1.0) == "1");
  REQUIRE(fmt_g(0.5) == "0.5");
  REQUIRE(fmt_g(1e-10) == "1e-10");
  REQUIRE(fmt_g(-2.25) == "-2.25");
  REQUIRE(fmt_g(1234567890.0) == "1234567890");
}

TEST_CASE("mean_sem uses the sample standard deviation") {
  MeanSem empty = mean_sem({});
  REQUIRE(empty.mean == 0.0);
  REQUIRE_FALSE(empty.sem.has_value());

  MeanSem single = mean_sem({5.0});
  REQUIRE(single.mean == 5.0);
  REQUIRE_FALSE(single.sem.has_value());

  MeanSem three = mean_sem({1.0, 2.0, 3.0});
  REQUIRE_THAT(three.mean, WithinAbs(2.0, 1e-15));
  REQUIRE(three.sem.has_value());
  REQUIRE_THAT(*three.sem, WithinAbs(0.5773502691896258, 1e-15));  // 1/sqrt(3)

  MeanSem pair = mean_sem({1.0, 2.0});
  REQUIRE_THAT(*pair.sem, WithinAbs(0.5, 1e-15));
}

TEST_CASE("config parsing fills defaults and records the effective json") {
  ExperimentConfig c = parse_experiment_config(minimal_config(), {});
  REQUIRE(c.task.name == "toy_fixed");
  REQUIRE(c.task.T == 10);
  REQUIRE(c.learner.kind == "bp_lambda");
  REQUIRE(c.learner.lambda == 1.0);
  REQUIRE(c.learner.n == 1);
  REQUIRE(c.train.cell == "linear");
  REQUIRE(c.train.units == 30);
  REQUIRE(c.train.gamma == 1.0);
  REQUIRE(c.train.train_model);
  REQUIRE_FALSE(c.train.align);
  REQUIRE(c.seeds == std::vector<std::uint64_t>{1});
  REQUIRE(c.out_dir == "out");
  REQUIRE(c.raw["desk_scale_applied"] == false);
  REQUIRE(c.hash_hex() == hex16(fnv1a64(c.compact())));
}

TEST_CASE("config parsing rejects malformed input") {
  auto bad = [](json j) {
    REQUIRE_THROWS_AS(parse_experiment_config(std::move(j), {}), std::invalid_argument);
  };

  bad(json::parse("[]"));  // not an object
  {
    json j = minimal_config();
    j["extra"] = 1;
    REQUIRE_THROWS_WITH(parse_experiment_config(j, {}), ContainsSubstring("unknown key"));
  }
  {
    json j = minimal_config();
    j.erase("learner");
    bad(j);
  }
  {
    json j = minimal_config();
    j.erase("seeds");
    REQUIRE_THROWS_WITH(parse_experiment_config(j, {}), ContainsSubstring("seed"));
  }
  {
    json j = minimal_config();
    j["seeds"] = json::array();
    bad(j);
  }
  {
    json j = minimal_config();
    j["task"]["name"] = "chess";
    REQUIRE_THROWS_WITH(parse_experiment_config(j, {}), ContainsSubstring("unknown task"));
  }
  {
    json j = minimal_config();
    j["learner"]["kind"] = "psychic";
    bad(j);
  }
  {
    json j = minimal_config();
    j["train"]["cell"] = "gru";
    REQUIRE_THROWS_WITH(parse_experiment_config(j, {}), ContainsSubstring("unknown cell"));
  }
  {
    json j = minimal_config();
    j["learner"]["lambda"] = 1.5;
    bad(j);
  }
  {
    json j = minimal_config();
    j["learner"]["n"] = 0;
    bad(j);
  }
  {
    json j = minimal_config();
    j["train"]["gamma"] = -0.1;
    bad(j);
  }
  {
    json j = minimal_config();
    j["train"]["units"] = 0;
    bad(j);
  }
  {
    json j = minimal_config();
    j["train"]["log_every"] = 0;
    bad(j);
  }
  {
    json j = minimal_config();
    j["task"]["name"] = "seq_mnist";
    j["train"]["align"] = true;
    REQUIRE_THROWS_WITH(parse_experiment_config(j, {}),
                        ContainsSubstring("toy tasks only"));
  }
}

TEST_CASE("desk_scale block applies only under the flag and changes the hash") {
  json j = minimal_config();
  j["desk_scale"] = json::parse(R"({"train": {"units": 3}})");

  ExperimentConfig plain = parse_experiment_config(j, {});
  REQUIRE(plain.train.units == 30);
  REQUIRE_FALSE(plain.raw.contains("desk_scale"));
  REQUIRE(plain.raw["desk_scale_applied"] == false);

  CliOverrides ov;
  ov.desk_scale = true;
  ExperimentConfig desk = parse_experiment_config(j, ov);
  REQUIRE(desk.train.units == 3);
  REQUIRE(desk.raw["desk_scale_applied"] == true);
  REQUIRE(desk.hash_hex() != plain.hash_hex());

  CliOverrides ov2;
  ov2.desk_scale = true;
  REQUIRE_THROWS_WITH(parse_experiment_config(minimal_config(), ov2),
                      ContainsSubstring("desk_scale"));
}

TEST_CASE("cli overrides rewrite seeds, paths and alignment") {
  CliOverrides ov;
  ov.seed = 42;
  ov.data_dir = "elsewhere";
  ov.out_dir = "results";
  ov.force_align = true;
  json j = minimal_config();
  j["seeds"] = json::array({1, 2, 3});
  ExperimentConfig c = parse_experiment_config(j, ov);
  REQUIRE(c.seeds == std::vector<std::uint64_t>{42});
  REQUIRE(c.task.data_dir == "elsewhere");
  REQUIRE(c.out_dir == "results");
  REQUIRE(c.train.align);
}

TEST_CASE("config loading reports file and parse problems") {
  ScratchDir sd;
  {
    std::ofstream f(sd.file("ok.json"));
    f << minimal_config().dump();
  }
  ExperimentConfig c = load_experiment_config(sd.file("ok.json"), {});
  REQUIRE(c.task.name == "toy_fixed");

  {
    std::ofstream f(sd.file("broken.json"));
    f << "{ not json";
  }
  REQUIRE_THROWS_AS(load_experiment_config(sd.file("broken.json"), {}),
                    std::invalid_argument);
  REQUIRE_THROWS_WITH(load_experiment_config(sd.file("absent.json"), {}),
                      ContainsSubstring("cannot open"));
}

TEST_CASE("run tags name the task and learner compactly") {
  LearnerConfig bp1{"bp_lambda", 1.0, 1};
  LearnerConfig bp05{"bp_lambda", 0.5, 1};
  LearnerConfig ns{"nstep_sg", 1.0, 3};
  LearnerConfig tb{"tbptt", 1.0, 4};
  LearnerConfig nb{"no_bptt", 1.0, 1};
  LearnerConfig orc{"oracle", 1.0, 1};
  REQUIRE(learner_tag(bp1) == "bp1");
  REQUIRE(learner_tag(bp05) == "bp0.5");
  REQUIRE(learner_tag(ns) == "nstep3");
  REQUIRE(learner_tag(tb) == "tbptt4");
  REQUIRE(learner_tag(nb) == "no_bptt");
  REQUIRE(learner_tag(orc) == "oracle");

  TaskConfig tf;
  tf.name = "toy_fixed";
  TaskConfig tp;
  tp.name = "toy_plastic";
  tp.T = 30;
  TaskConfig cr;
  cr.name = "copy_repeat";
  TaskConfig cr22 = cr;
  cr22.start_N = 2;
  cr22.start_R = 2;
  REQUIRE(task_tag(tf) == "toy_fixed");
  REQUIRE(task_tag(tp) == "toy_plastic_T30");
  REQUIRE(task_tag(cr) == "copy_repeat");
  REQUIRE(task_tag(cr22) == "copy_repeat_N2R2");

  ExperimentConfig c;
  c.task = tp;
  c.learner = bp05;
  REQUIRE(run_tag(c) == "toy_plastic_T30_bp0.5");
}

TEST_CASE("task shapes pick io dims and loss heads") {
  TaskConfig t;
  t.name = "seq_mnist";
  TaskShape s = task_shape(t);
  REQUIRE(s.in_dim == 28);
  REQUIRE(s.out_dim == 10);
  REQUIRE(s.head == Head::softmax_ce);
  t.name = "copy_repeat";
  s = task_shape(t);
  REQUIRE(s.in_dim == 10);
  REQUIRE(s.out_dim == 9);
  REQUIRE(s.head == Head::sigmoid_bits);
  t.name = "toy_plastic";
  s = task_shape(t);
  REQUIRE(s.in_dim == 10);
  REQUIRE(s.out_dim == 2);
  REQUIRE(s.head == Head::mse);
}

TEST_CASE("learner factory maps scheme names onto window settings") {
  TrainConfig tc;
  tc.gamma = 0.8;
  tc.sg_scale = 0.3;
  tc.train_model = false;

  Learner bp = Learner::make({"bp_lambda", 0.6, 1}, tc, 7);
  REQUIRE(bp.is_bp_lambda);
  REQUIRE(bp.bp.lambda == 0.6);
  REQUIRE(bp.bp.gamma == 0.8);
  REQUIRE(bp.bp.sg_scale == 0.3);
  REQUIRE_FALSE(bp.bp.train_model);
  REQUIRE_FALSE(bp.bp.raw_theta_updates);
  REQUIRE(bp.trace.e.d0 == 7);
  REQUIRE(bp.trains_synth());

  Learner ns = Learner::make({"nstep_sg", 1.0, 5}, tc, 7);
  REQUIRE_FALSE(ns.is_bp_lambda);
  REQUIRE(ns.win.n == 5);
  REQUIRE(ns.win.use_sg);
  REQUIRE(ns.trains_synth());

  Learner tb = Learner::make({"tbptt", 1.0, 5}, tc, 7);
  REQUIRE(tb.win.n == 5);
  REQUIRE_FALSE(tb.win.use_sg);
  REQUIRE_FALSE(tb.trains_synth());

  Learner nb = Learner::make({"no_bptt", 1.0, 9}, tc, 7);
  REQUIRE(nb.win.n == 1);
  REQUIRE_FALSE(nb.win.use_sg);
  REQUIRE_FALSE(nb.full_window);

  Learner orc = Learner::make({"oracle", 1.0, 1}, tc, 7);
  REQUIRE(orc.full_window);
  REQUIRE_FALSE(orc.win.use_sg);
}

TEST_CASE("outcome summaries divide by their own step counts") {
  SeqOutcome o;
  o.loss_sum = 6.0;
  o.loss_steps = 3;
  o.bce_nats = 2.0 * std::numbers::ln2;
  o.bit_count = 4;
  o.correct = 3;
  o.class_steps = 4;
  REQUIRE_THAT(mean_loss(o), WithinAbs(2.0, 1e-15));
  REQUIRE_THAT(bits_per_bit(o), WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(accuracy(o), WithinAbs(0.75, 1e-15));

  SeqOutcome z;
  REQUIRE(mean_loss(z) == 0.0);
  REQUIRE(bits_per_bit(z) == 0.0);
  REQUIRE(accuracy(z) == 0.0);

  SeqOutcome sum = z;
  sum.add(o);
  sum.add(o);
  REQUIRE(sum.loss_steps == 6);
  REQUIRE_THAT(sum.loss_sum, WithinAbs(12.0, 1e-15));
}

TEST_CASE("metric aggregation skips diverged seeds and averages booleans") {
  json per_seed = json::array({
      json{{"seed", 1}, {"diverged", false},
           {"metrics", {{"final_loss", 1.0}, {"solved", true}}}},
      json{{"seed", 2}, {"diverged", false},
           {"metrics", {{"final_loss", 2.0}, {"solved", false}}}},
      json{{"seed", 3}, {"diverged", true},
           {"metrics", {{"final_loss", 100.0}, {"solved", false}}}},
  });
  json agg = aggregate_metrics(per_seed);
  REQUIRE_THAT(agg["final_loss"]["mean"].get<double>(), WithinAbs(1.5, 1e-15));
  REQUIRE(agg["final_loss"]["n"] == 2);
  REQUIRE_THAT(agg["final_loss"]["sem"].get<double>(), WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(agg["solved"]["mean"].get<double>(), WithinAbs(0.5, 1e-15));

  json lone = json::array({json{{"seed", 1}, {"metrics", {{"x", 3.0}}}}});
  json la = aggregate_metrics(lone);
  REQUIRE(la["x"]["mean"] == 3.0);
  REQUIRE(la["x"]["n"] == 1);
  REQUIRE_FALSE(la["x"].contains("sem"));

  REQUIRE(aggregate_metrics(json::array()).empty());
}

TEST_CASE("forward scoring matches the recorded trajectory losses") {
  json j = minimal_config();
  j["train"]["units"] = 5;
  ExperimentConfig cfg = parse_experiment_config(j, {});
  Model m = make_model(cfg, 3);
  REQUIRE(max_abs(m.theta.theta) == 0.0);

  Episode ep = toy_fixed_episode(3);
  Trajectory tr = record_trajectory(*m.cell, m.ro, ep);
  SeqOutcome out = score_episode(*m.cell, m.ro, ep);
  REQUIRE(out.loss_steps == 1);
  double loss_sum = 0.0;
  for (std::size_t t = 1; t <= tr.T(); ++t) loss_sum += tr.losses[t];
  REQUIRE_THAT(out.loss_sum, WithinAbs(loss_sum, 1e-12));
}

TEST_CASE("csv writer emits the config header and quotes cells") {
  ScratchDir sd;
  const std::string path = sd.file("t.csv");
  {
    CsvWriter w(path, "{\"k\":1}", "00ff", {"a", "b,c"});
    w.row({Cellv(1.5), Cellv(std::optional<double>{})});
    w.row({Cellv(std::string("x,y")), Cellv(std::size_t(7))});
  }
  REQUIRE(slurp(path) ==
          "# config={\"k\":1} hash=00ff\n"
          "a,\"b,c\"\n"
          "1.5,\n"
          "\"x,y\",7\n");
}

TEST_CASE("toy runs write byte-identical csv files for the same seed") {
  ScratchDir sd;
  json j = json::parse(R"json({
    "task": {"name": "toy_fixed"},
    "learner": {"kind": "bp_lambda", "lambda": 1.0},
    "train": {"units": 4, "epochs": 2, "batch_size": 2, "batches_per_epoch": 2,
              "train_model": false, "align": true, "synth_lr": 0.001},
    "seeds": [7]
  })json");
  ExperimentConfig cfg = parse_experiment_config(j, {});
  SeedResult r1 = run_toy_seed(cfg, 7, sd.file("a.csv"));
  SeedResult r2 = run_toy_seed(cfg, 7, sd.file("b.csv"));
  const std::string a = slurp(sd.file("a.csv"));
  REQUIRE(a == slurp(sd.file("b.csv")));
  REQUIRE(a.rfind("# config=" + cfg.compact() + " hash=" + cfg.hash_hex() + "\n", 0) == 0);
  REQUIRE_THAT(a, ContainsSubstring("epoch,batch,loss,align_t1"));
  REQUIRE(r1.metrics["final_loss"] == r2.metrics["final_loss"]);
  REQUIRE(r1.metrics.contains("final_align_t1"));
  REQUIRE(r1.metrics.contains("final_min_align"));
}

TEST_CASE("run_experiment writes per-seed csvs and an aggregate summary") {
  ScratchDir sd;
  json j = json::parse(R"json({
    "task": {"name": "toy_fixed"},
    "learner": {"kind": "no_bptt"},
    "train": {"units": 3, "epochs": 1, "batch_size": 2, "batches_per_epoch": 2},
    "seeds": [1, 2],
    "out_dir": ""
  })json");
  j["out_dir"] = (sd.p / "out").string();
  ExperimentConfig cfg = parse_experiment_config(j, {});

  std::ostringstream log;
  REQUIRE(run_experiment(cfg, log) == 0);

  const fs::path out = sd.p / "out";
  REQUIRE(fs::exists(out / "toy_fixed_no_bptt_seed1.csv"));
  REQUIRE(fs::exists(out / "toy_fixed_no_bptt_seed2.csv"));

  json summary = json::parse(slurp((out / "toy_fixed_no_bptt_summary.json").string()));
  REQUIRE(summary["tag"] == "toy_fixed_no_bptt");
  REQUIRE(summary["diverged"] == false);
  REQUIRE(summary["per_seed"].size() == 2);
  REQUIRE(summary["per_seed"][0]["seed"] == 1);
  REQUIRE(summary["per_seed"][0]["diverged"] == false);
  REQUIRE(summary["per_seed"][0].contains("wall_clock_s"));
  REQUIRE(summary["aggregate"].contains("final_loss"));
  REQUIRE(summary["aggregate"]["final_loss"]["n"] == 2);
  REQUIRE(summary["hash"] == cfg.hash_hex());
  REQUIRE_THAT(log.str(), ContainsSubstring("seed 1: done"));
}
