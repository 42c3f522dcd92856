#include <iostream>

#include <CLI11.hpp>

#include "mfm/runner.hpp"

int main(int argc, char** argv) {
  using namespace mfm::run;
  CLI::App app{"multi-level feature merging experiments"};
  app.require_subcommand(1);

  std::string config, out, report_dir;
  std::uint64_t seed = 0;
  int precision = 32;
  bool resume = false;
  auto* run = app.add_subcommand("run", "run an experiment config");
  run->add_option("config", config, "experiment config (JSON)")->required();
  auto* out_opt = run->add_option("--out", out, "output directory (overrides output_dir)");
  auto* seed_opt = run->add_option("--seed", seed, "master seed (replaces seed/seeds)");
  auto* prec_opt = run->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  run->add_flag("--resume", resume, "reuse completed stages whose checksums still match");

  auto* report = app.add_subcommand("report", "summarize a run directory");
  report->add_option("dir", report_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return 0;
    error_line(std::cerr, kExitConfig, "usage", e.what());
    return kExitConfig;
  }

  if (*run) {
    Overrides ov;
    if (*out_opt) ov.out = out;
    if (*seed_opt) ov.seed = seed;
    if (*prec_opt) ov.precision = precision;
    ov.resume = resume;
    return run_main(config, ov);
  }
  return guarded([&] { return report_main(report_dir, std::cout); });
}
