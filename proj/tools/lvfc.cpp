#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "lvfc/lvfc.hpp"

namespace {

void print_error_json(const std::string& kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cout << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Day-ahead probabilistic load forecasting for low-voltage networks"};
  app.require_subcommand(1);

  std::string config_path;
  std::string level_name;
  std::string method_name;
  int jobs = 0;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub, bool selection) {
    sub->add_option("--config,-c", config_path, "experiment config (JSON)")->required();
    sub->add_option("--jobs,-j", jobs, "worker threads (overrides the config)")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "override every seed in the config");
    sub->add_flag("--verbose,-v", verbose, "debug logging");
    sub->add_flag("--quiet,-q", quiet, "warnings and errors only");
    if (selection) {
      sub->add_option("--level", level_name, "restrict to one level")
          ->check(CLI::IsMember({"primary", "secondary", "feeder", "household"}));
      sub->add_option("--method", method_name, "restrict to one method");
    }
  };

  auto* build = app.add_subcommand("build", "ingest data, build the hierarchy and the feature store");
  auto* fitc = app.add_subcommand("fit", "fit models for every node and partition");
  auto* forecast = app.add_subcommand("forecast", "issue day-ahead forecasts");
  auto* fuse = app.add_subcommand("fuse", "combine half-hourly, peak and timing forecasts");
  auto* evaluate = app.add_subcommand("evaluate", "score forecasts and write the summary");
  auto* report = app.add_subcommand("report", "write the markdown and CSV report tables");
  auto* run = app.add_subcommand("run", "run every stage in order");
  add_common(build, false);
  add_common(fitc, true);
  add_common(forecast, true);
  add_common(fuse, true);
  add_common(evaluate, false);
  add_common(report, false);
  add_common(run, false);

  auto* synth = app.add_subcommand("synth", "write a synthetic smart-meter CSV");
  std::string synth_out;
  lvfc::SyntheticOptions so;
  synth->add_option("--output,-o", synth_out, "output CSV")->required();
  synth->add_option("--households", so.households, "number of households")->check(CLI::PositiveNumber);
  synth->add_option("--year", so.year, "calendar year");
  synth->add_option("--seed", so.seed, "random seed")->required();
  synth->add_option("--empty-fraction", so.empty_fraction, "share of households with an empty spell");
  synth->add_option("--incomplete", so.incomplete, "households missing one day");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const auto min_level = verbose ? lvfc::LogLevel::debug : quiet ? lvfc::LogLevel::warn : lvfc::LogLevel::info;
  lvfc::set_log_sink([min_level](lvfc::LogLevel level, const std::string& msg) {
    if (level < min_level) return;
    static const char* names[] = {"debug", "info", "warn", "error"};
    std::fprintf(stderr, "[%s] %s\n", names[static_cast<int>(level)], msg.c_str());
  });

  if (synth->parsed()) {
    try {
      std::ofstream os(synth_out);
      if (!os) throw lvfc::DataError("cannot write '" + synth_out + "'");
      lvfc::write_long_csv(os, lvfc::synthesize_households(so));
      return 0;
    } catch (const std::exception& e) {
      print_error_json("synth", e.what());
      return 1;
    }
  }

  lvfc::ExperimentConfig cfg;
  try {
    cfg = lvfc::ExperimentConfig::load(config_path);
    if (jobs > 0) cfg.jobs = jobs;
    if (seed) {
      cfg.hierarchy_seed = *seed;
      cfg.evaluation_seed = *seed;
      if (cfg.synthetic) cfg.synthetic->seed = *seed;
    }
    cfg.validate();
  } catch (const std::exception& e) {
    print_error_json("config", e.what());
    return 1;
  }

  lvfc::NodeSelection sel;
  if (!level_name.empty()) sel.level = lvfc::level_from_string(level_name);
  if (!method_name.empty()) sel.method = method_name;

  auto report_stage = [](const lvfc::StageResult& r, double seconds) {
    lvfc::log(lvfc::LogLevel::info, r.stage + ": " + std::to_string(r.ok) + " ok, " +
                                         std::to_string(r.failures.size()) + " failed (" +
                                         std::to_string(static_cast<int>(seconds)) + " s)");
    for (const auto& f : r.failures) lvfc::log(lvfc::LogLevel::warn, r.stage + ": " + f);
    if (!r.failures.empty()) std::cout << r.to_json().dump() << std::endl;
  };

  try {
    const auto t0 = std::chrono::steady_clock::now();
    auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    lvfc::StageResult r;
    if (build->parsed()) r = lvfc::cmd_build(cfg);
    if (fitc->parsed()) r = lvfc::cmd_fit(cfg, sel);
    if (forecast->parsed()) r = lvfc::cmd_forecast(cfg, sel);
    if (fuse->parsed()) r = lvfc::cmd_fuse(cfg, sel);
    if (evaluate->parsed()) r = lvfc::cmd_evaluate(cfg);
    if (report->parsed()) r = lvfc::cmd_report(cfg);
    if (run->parsed()) {
      int code = 0;
      for (const auto& s : lvfc::run_all(cfg)) {
        report_stage(s, seconds());
        code = std::max(code == 1 ? 1 : code, s.exit_code());
        if (s.exit_code() == 1) code = 1;
      }
      return code;
    }
    report_stage(r, seconds());
    return r.exit_code();
  } catch (const lvfc::DataError& e) {
    print_error_json("data", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error_json("fatal", e.what());
    return 1;
  }
}
