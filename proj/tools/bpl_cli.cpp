// Experiment runner. Subcommands:
//   run <config>     train per the JSON config, streaming CSV metrics
//   align <config>   same, with per-timestep alignment logging forced on
//   verify           numerical verification suite -> JSON-lines report
// Common flags: --seed, --data-dir, --out, --desk-scale.
// Exit codes: 0 ok, 1 runtime failure (divergence, failed checks), 2 usage.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "bpl/experiment.hpp"
#include "bpl/verify.hpp"

namespace {

int do_run(const std::string& config_path, const bpl::CliOverrides& ov) {
  bpl::ExperimentConfig cfg = bpl::load_experiment_config(config_path, ov);
  return bpl::run_experiment(cfg, std::cout);
}

int do_verify(const std::string& report_path, std::uint64_t seed) {
  std::vector<bpl::CheckRecord> recs = bpl::run_verify_suite(seed);
  std::ofstream out(report_path, std::ios::trunc);
  if (!out) {
    std::cerr << "error: cannot open " << report_path << "\n";
    return 1;
  }
  std::size_t failed = 0, skipped = 0;
  for (const bpl::CheckRecord& r : recs) {
    out << bpl::check_to_json(r).dump() << "\n";
    const char* verdict = "PASS";
    if (!r.pass) {
      verdict = "COND";
      ++skipped;
    } else if (!*r.pass) {
      verdict = "FAIL";
      ++failed;
    }
    std::cout << "[" << verdict << "] " << r.name << " deviation=" << bpl::fmt_g(r.deviation)
              << " spec=" << r.spec.dump() << "\n";
  }
  std::cout << recs.size() << " checks, " << failed << " failed, " << skipped
            << " without verdict; report: " << report_path << "\n";
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic-gradient trace learner: experiments and verification"};
  app.require_subcommand(1);

  std::string run_config, align_config;
  std::string report_path = "verify_report.jsonl";
  std::string data_dir_flag, out_flag;
  bool desk_flag = false;
  std::uint64_t seed_flag = 0;
  std::uint64_t verify_seed = 2024;

  CLI::App* run = app.add_subcommand("run", "train per the config and stream metrics");
  run->add_option("config", run_config, "JSON experiment config")
      ->required()
      ->check(CLI::ExistingFile);
  CLI::App* align =
      app.add_subcommand("align", "run with per-timestep alignment logging forced on");
  align->add_option("config", align_config, "JSON experiment config")
      ->required()
      ->check(CLI::ExistingFile);
  for (CLI::App* sub : {run, align}) {
    sub->add_option("--seed", seed_flag, "replace the config's seed list with one seed");
    sub->add_option("--data-dir", data_dir_flag, "override the task data directory");
    sub->add_option("--out", out_flag, "override the output directory");
    sub->add_flag("--desk-scale", desk_flag, "apply the config's desk_scale overrides");
  }

  CLI::App* verify =
      app.add_subcommand("verify", "run the numerical verification suite");
  verify->add_option("--out", report_path, "JSON-lines report path");
  verify->add_option("--seed", verify_seed, "suite seed");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* chosen = run->parsed() ? run : (align->parsed() ? align : nullptr);
    if (chosen) {
      bpl::CliOverrides ov;
      if (chosen->count("--seed")) ov.seed = seed_flag;
      if (chosen->count("--data-dir")) ov.data_dir = data_dir_flag;
      if (chosen->count("--out")) ov.out_dir = out_flag;
      ov.desk_scale = desk_flag;
      ov.force_align = (chosen == align);
      return do_run(chosen == align ? align_config : run_config, ov);
    }
    return do_verify(report_path, verify_seed);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
