#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "keycap/config.hpp"
#include "keycap/error.hpp"
#include "keycap/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Keyword-driven caption generation"};
  app.require_subcommand(1, 1);

  std::string config_path;
  // Overrides are collected per key and applied after the config file.
  std::map<std::string, std::string> overrides;
  const char* commands[][2] = {
      {"train", "train a model and write the best checkpoint"},
      {"generate", "caption the test split"},
      {"evaluate", "score test-split captions and write a metric report"},
      {"synth", "write a synthetic dataset"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key=value config file");
    for (const auto& key : keycap::config_keys()) {
      const std::string k(key.name);
      sub->add_option_function<std::string>(
          "--" + k, [&overrides, k](const std::string& v) { overrides[k] = v; },
          std::string(key.help) + " [" + std::string(key.default_value) + "]");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    keycap::Config cfg = config_path.empty() ? keycap::Config() : keycap::Config::load(config_path);
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    const keycap::RunConfig run = keycap::RunConfig::from(cfg);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "train") {
      keycap::cmd_train(run, std::cout);
    } else if (cmd == "generate") {
      keycap::cmd_generate(run, std::cout);
    } else if (cmd == "evaluate") {
      keycap::cmd_evaluate(run, std::cout);
    } else {
      keycap::cmd_synth(run, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return keycap::exit_code_for(e);
  }
  return 0;
}
