#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "cgolab/orchestrator.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cgolab: CGO and higher-order linearization experiments"};
  app.require_subcommand(1);

  std::string config, out_dir;
  cgolab::RunFlags flags;
  auto* run = app.add_subcommand("run", "Run the pipeline described by a config file");
  run->add_option("config", config, "JSON run config")->required()->check(CLI::ExistingFile);
  run->add_flag("--trace", flags.trace, "Write step and solver events to trace.jsonl");
  run->add_option("--workers", flags.workers, "Worker threads for independent steps")->check(CLI::PositiveNumber);
  run->add_flag("--no-cache", flags.no_cache, "Bypass the solve cache");
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");

  std::string ledger;
  auto* verify = app.add_subcommand("verify", "Re-check the tolerances recorded in a ledger");
  verify->add_option("ledger", ledger, "ledger.csv from a run")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  if (*run) {
    flags.output_dir = out_dir;
    cgolab::RunOutcome res;
    try {
      res = cgolab::run_config(cgolab::read_config_file(config), flags);
    } catch (const cgolab::Error& e) {
      std::cerr << e.what() << "\n";
      return e.kind() == cgolab::ErrorKind::ConfigInvalid ? 2 : 3;
    }
    if (res.exit_code == 2) {
      std::cerr << res.message << "\n";
      return 2;
    }
    for (const auto& f : res.failures) std::cerr << "step " << f.step << ": " << f.kind << ": " << f.message << "\n";
    std::cout << (res.exit_code == 0 ? "PASS" : "FAIL") << " " << res.checks - res.failed << "/" << res.checks
              << " checks, outputs in " << res.output_dir.string() << "\n";
    return res.exit_code;
  }

  std::ifstream in(ledger);
  try {
    auto rep = cgolab::verify_ledger(in);
    for (const auto& m : rep.messages) std::cout << m << "\n";
    std::cout << (rep.exit_code() == 0 ? "PASS" : "FAIL") << " " << rep.checks - rep.failed << "/" << rep.checks << " checks";
    if (rep.inconsistent) std::cout << ", " << rep.inconsistent << " rows disagree with the recorded verdict";
    std::cout << "\n";
    return rep.exit_code();
  } catch (const cgolab::Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
}
