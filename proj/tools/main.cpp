#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>

#include "commands.hpp"
#include "tcpdiff/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"tcpdiff: diffusion-based tropical-cyclone rainfall forecasting", "tcpdiff"};
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags take precedence");
  app.require_subcommand(1, 1);
  app.fallthrough();

  tcpdiff::cli::Commands commands(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "tcpdiff: " << e.what() << "\n";
    CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    return commands.run();
  } catch (const std::exception& e) {
    std::cerr << "tcpdiff: error: " << e.what() << "\n";
    return 1;
  }
}
