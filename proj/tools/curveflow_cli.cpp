#include "curveflow/experiments.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace curveflow;

// --config accepts a file path or the name of a registered scenario.
ExperimentConfig resolve_config(const std::string& ref) {
  if (!std::filesystem::exists(ref)) {
    if (const Scenario* s = find_scenario(ref)) return s->config;
  }
  return load_config(ref);
}

int report_config_error(const ConfigError& e) {
  std::cerr << "configuration error:\n";
  for (const auto& v : e.violations()) std::cerr << "  - " << v << "\n";
  return kExitConfig;
}

void print_checks(const RunResult& res) {
  for (const auto& c : res.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name;
    if (c.residual) std::cout << "  max_norm=" << format_double(c.residual->max_norm);
    if (c.dropped) std::cout << "  dropped_terms=" << format_double(c.dropped->max_norm);
    if (c.monitor)
      std::cout << "  worst_margin=" << format_double(c.monitor->worst())
                << "  tol=" << format_double(c.monitor->tolerance);
    if (!c.error.empty()) std::cout << "  error: " << c.error;
    std::cout << "\n";
  }
  if (res.trajectory.abort_time)
    std::cout << "aborted at t = " << format_double(*res.trajectory.abort_time) << ": "
              << res.trajectory.abort_reason << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curve-shrinking flow in Ricci-flow backgrounds: identity and inequality checks"};
  app.require_subcommand(1);

  std::string config_ref;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  int levels = 3;

  auto* run = app.add_subcommand("run", "run one experiment and write its artifacts");
  run->add_option("--config", config_ref, "config file or scenario name")->required();
  run->add_option("--out", out_dir, "output directory (overrides output.directory)");
  run->add_option("--seed", seed, "master seed (overrides the config)");

  auto* conv = app.add_subcommand("convergence", "refinement study over N 2^i, dt / 4^i");
  conv->add_option("--config", config_ref, "config file or scenario name")->required();
  conv->add_option("--out", out_dir, "output directory (overrides output.directory)");
  conv->add_option("--levels", levels, "number of refinement levels")->check(CLI::Range(3, 8));
  conv->add_option("--seed", seed, "master seed (overrides the config)");

  auto* list = app.add_subcommand("list-scenarios", "print the shipped scenarios");

  auto* vb = app.add_subcommand("validate-background", "check dg/dt = -2 Ric on the config background");
  vb->add_option("--config", config_ref, "config file or scenario name")->required();
  vb->add_option("--seed", seed, "sampling seed");

  CLI11_PARSE(app, argc, argv);

  if (list->parsed()) {
    std::cout << list_scenarios();
    return 0;
  }

  ExperimentConfig cfg;
  try {
    cfg = resolve_config(config_ref);
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.output.directory = *out_dir;
  } catch (const ConfigError& e) {
    return report_config_error(e);
  }

  try {
    if (run->parsed()) {
      const RunResult res = run_experiment(cfg);
      write_artifacts(res, cfg.output.directory);
      print_checks(res);
      return res.exit_status;
    }
    if (conv->parsed()) {
      const auto lv = geometric_levels(cfg, levels);
      const auto tables = run_convergence(cfg, lv);
      write_convergence(tables, cfg.output.directory);
      std::cout << convergence_text(tables);
      return 0;
    }
    if (vb->parsed()) {
      const auto v = validate_background(cfg.background, 200, seed.value_or(cfg.seed));
      std::cout << v.text << (v.passed() ? "PASS" : "FAIL") << " ricci flow residual < 1e-12\n";
      return v.passed() ? 0 : kExitCheckFailed;
    }
  } catch (const ConfigError& e) {
    return report_config_error(e);
  } catch (const SpecError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEscape;
  }
  return 0;
}
