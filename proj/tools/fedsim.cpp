#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsim/cli.hpp"

namespace {

fedsim::ExperimentConfig build_config(const std::string& config_path,
                                      const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> map;
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw fedsim::config_error("cannot open config file " + config_path);
    map = fedsim::parse_config_text(f);
  }
  fedsim::apply_overrides(map, overrides);
  fedsim::ExperimentConfig config = fedsim::config_from_map(map);
  fedsim::validate_experiment_config(config);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated learning simulator with synthetic-data augmentation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "runs";
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "key=value configuration file");
  app.add_option("-o,--out", out_dir, "output directory (default: runs)");
  app.add_option("-s,--set", overrides,
                 "override a config entry, key=value (repeatable; wins over file)");

  auto* p_partition =
      app.add_subcommand("partition", "split the dataset into client partitions");
  auto* p_generate =
      app.add_subcommand("generate", "generate per-client synthetic contributions");
  auto* p_pool =
      app.add_subcommand("pool", "assemble the global synthetic pool");
  auto* p_train =
      app.add_subcommand("train", "run the federated rounds, checkpointing each");
  auto* p_evaluate =
      app.add_subcommand("evaluate", "score every checkpoint on the test set");
  auto* p_report =
      app.add_subcommand("report", "summarize round logs across seeds");
  auto* p_reproduce = app.add_subcommand(
      "reproduce", "full pipeline for fedavg, fedprox, and dpsda_fl");
  for (auto* sub : {p_partition, p_generate, p_pool, p_train, p_evaluate,
                    p_report, p_reproduce})
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const fedsim::ExperimentConfig config = build_config(config_path, overrides);
    std::ostream* log = &std::cout;
    if (p_partition->parsed()) fedsim::cmd_partition(config, out_dir, log);
    if (p_generate->parsed()) fedsim::cmd_generate(config, out_dir, log);
    if (p_pool->parsed()) fedsim::cmd_pool(config, out_dir, log);
    if (p_train->parsed()) fedsim::cmd_train(config, out_dir, log);
    if (p_evaluate->parsed()) fedsim::cmd_evaluate(config, out_dir, log);
    if (p_report->parsed()) fedsim::cmd_report(config, out_dir, log);
    if (p_reproduce->parsed()) fedsim::cmd_reproduce(config, out_dir, log);
    return 0;
  } catch (const fedsim::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
