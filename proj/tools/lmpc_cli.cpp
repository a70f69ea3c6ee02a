// Command line front end: run a learning campaign, verify a stored safe set,
// or summarize a finished run directory.

#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>

#include "lmpc/campaign.hpp"

int main(int argc, char** argv) {
  CLI::App app{"minimum-time learning MPC"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "run every cell of a campaign config");
  run->add_option("config", config_path, "campaign config JSON")->required();

  std::string store_path, benchmark, certificate_path;
  long samples = 10000;
  double beta = 1e-6;
  std::uint64_t seed = 1;
  auto* verify = app.add_subcommand("verify", "sampled hull-invariance check of a stored safe set");
  verify->add_option("store", store_path, "safe set store JSON")->required();
  verify->add_option("--benchmark", benchmark, "benchmark name")->required();
  verify->add_option("--samples", samples, "number of sampled combinations");
  verify->add_option("--beta", beta, "confidence parameter in (0,1)");
  verify->add_option("--seed", seed, "RNG seed");
  verify->add_option("--certificate", certificate_path, "write the certificate JSON here");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "summarize a run directory");
  report->add_option("dir", run_dir, "directory produced by 'run'")->required();

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return lmpc::campaign::cmd_run(config_path, std::cout, std::cerr);
  if (verify->parsed())
    return lmpc::campaign::cmd_verify(store_path, benchmark, samples, beta, seed,
                                      certificate_path, std::cout, std::cerr);
  return lmpc::campaign::cmd_report(run_dir, std::cout, std::cerr);
}
