#include <malloc.h>

#include <iostream>

#include "CLI11.hpp"
#include "camloss/cli.hpp"

int main(int argc, char** argv) {
  // Keep freed batch buffers in the heap instead of returning them to the kernel every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"CAM-loss training, distillation and activation map export"};
  app.require_subcommand(1);
  std::string config_path, out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "train a network with CE or CAM-loss"},
      {"distill", "train a student against a saved teacher (KD, AT or CCM)"},
      {"eval", "evaluate a checkpoint on the test split"},
      {"export-maps", "write normalized CAAM, CAM and difference maps as PGM"},
      {"gen-data", "write the configured dataset to train.bin and test.bin"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key = value file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--out", out, "run directory");
    sub->add_option("--set", overrides, "key=value override, applied after the file")->take_all();
  }
  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    camloss::RunConfig cfg;
    if (!config_path.empty()) cfg.merge_file(config_path);
    for (const auto& o : overrides) cfg.set_assignment(o);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (!out.empty()) cfg.set("out", out);
    camloss::run_command(command, cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "camloss " << command << ": error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
