// SPDX-License-Identifier: Apache-2.0
//
// nncheck: run monitored training, analyze traces, replay the fault lab and
// audit the engine's gradients.
//
// Exit status: 0 no issues, 1 issues found, 2 usage or runtime error.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nncheck/faultlab.hpp"
#include "nncheck/gradcheck.hpp"
#include "nncheck/session.hpp"
#include "nncheck/trace.hpp"

namespace {

using namespace nncheck;

constexpr int kClean = 0;
constexpr int kIssues = 1;
constexpr int kError = 2;

/// One --<threshold> flag per CheckConfig field, kept as text until the
/// config is known so that "Infinity" and friends decode like config values.
struct ThresholdFlags {
  std::map<std::string, std::string> values;

  void add_to(CLI::App& cmd) {
    for (const auto& f : threshold_fields()) {
      std::string flag = f.name;
      std::replace(flag.begin(), flag.end(), '_', '-');
      cmd.add_option("--" + flag, values[f.name], std::string("override ") + f.name)
          ->group("Thresholds");
    }
  }

  void apply(CheckConfig& cfg) const {
    json j = json::object();
    for (const auto& [name, text] : values) {
      if (text.empty()) continue;
      json v;
      try {
        v = json::parse(text);
      } catch (const json::exception&) {
        v = text;
      }
      j[name] = v;
    }
    apply_thresholds(j, cfg);
    cfg.validate();
  }
};

void write_output(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw UsageError("cannot open report file for writing: " + path);
  out << text;
  if (!out) throw UsageError("write to " + path + " failed");
}

struct Common {
  std::string config;
  std::string scenario;
  std::string format = "text";
  std::string report;
  ThresholdFlags thresholds;

  void add_source(CLI::App& cmd) {
    auto* c = cmd.add_option("--config", config, "run configuration (JSON)")->check(CLI::ExistingFile);
    auto* s = cmd.add_option("--scenario", scenario, "fault-lab scenario name");
    c->excludes(s);
  }
  void add_output(CLI::App& cmd) {
    cmd.add_option("--format", format, "report format")->check(CLI::IsMember({"text", "json"}));
    cmd.add_option("--report", report, "write the report here instead of stdout");
  }

  std::optional<RunConfig> load() const {
    if (!config.empty()) return load_run_config(config);
    if (!scenario.empty()) return build_scenario(scenario_from_string(scenario)).config;
    return std::nullopt;
  }
  bool scenario_preflight() const {
    return !scenario.empty() && build_scenario(scenario_from_string(scenario)).preflight;
  }
};

int cmd_run(const Common& c, std::optional<std::uint64_t> seed, std::optional<std::int64_t> steps,
            const std::string& trace, const std::string& payload, bool preflight) {
  std::optional<RunConfig> rc = c.load();
  if (!rc) throw UsageError("run needs --config or --scenario");
  c.thresholds.apply(rc->checks);
  if (steps) {
    if (*steps < 0) throw UsageError("--steps must be >= 0");
    rc->steps = *steps;
  }
  RunOptions opt;
  opt.seed = seed;
  opt.preflight = preflight || c.scenario_preflight();
  std::optional<TraceWriter> writer;
  if (!trace.empty()) {
    writer.emplace(trace, payload_from_string(payload));
    opt.sink = &*writer;
  }
  const RunOutcome out = run_config(*rc, opt);
  const SessionReport report = out.combined();
  write_output(emit_report(report, report_format_from_string(c.format)), c.report);
  return report.issues.empty() ? kClean : kIssues;
}

int cmd_analyze(const Common& c, const std::string& trace) {
  RunConfig rc;
  if (auto loaded = c.load()) rc = *loaded;
  c.thresholds.apply(rc.checks);
  std::vector<std::string> warnings;
  const SessionReport report = analyze_trace(trace, rc.checks, rc.hooks, rc.policy, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  write_output(emit_report(report, report_format_from_string(c.format)), c.report);
  return report.issues.empty() ? kClean : kIssues;
}

int cmd_casestudy(const Common& c, const std::vector<std::string>& names, bool override_thresholds) {
  std::vector<FaultScenario> scenarios;
  if (names.empty()) {
    for (ScenarioId id : kAllScenarios) scenarios.push_back(build_scenario(id));
  } else {
    for (const auto& n : names) scenarios.push_back(build_scenario(scenario_from_string(n)));
  }
  std::optional<CheckConfig> cfg;
  if (override_thresholds) {
    cfg.emplace();
    c.thresholds.apply(*cfg);
  }
  const CaseStudy study = run_case_study(scenarios, cfg);
  const std::string text =
      c.format == "json" ? to_json(study).dump(2) + "\n" : render_case_study(study);
  write_output(text, c.report);
  return study.pass ? kClean : kIssues;
}

int cmd_gradcheck(const Common& c, std::uint64_t seed, std::size_t per_combo, double tolerance) {
  GradCheckOptions opt;
  opt.tolerance = tolerance;
  const GradAudit audit = run_gradient_audit(seed, per_combo, opt);
  std::string text;
  if (c.format == "json") {
    json cases = json::array();
    for (const auto& k : audit.cases) {
      cases.push_back({{"activation", std::string(to_string(k.activation))},
                       {"loss", std::string(to_string(k.loss))},
                       {"regularization", std::string(to_string(k.regularization))},
                       {"widths", k.widths},
                       {"checked", k.result.checked},
                       {"skipped", k.result.skipped},
                       {"max_rel_error", k.result.max_rel_error},
                       {"worst", k.result.worst},
                       {"pass", k.result.passed(opt)}});
    }
    text = json{{"schema", "nncheck-gradcheck"},
                {"epsilon", opt.epsilon},
                {"tolerance", opt.tolerance},
                {"pass", audit.passed()},
                {"cases", std::move(cases)}}
               .dump(2) +
           "\n";
  } else {
    char buf[256];
    double worst = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    for (const auto& k : audit.cases) {
      worst = std::max(worst, k.result.max_rel_error);
      checked += k.result.checked;
      skipped += k.result.skipped;
      if (!k.result.passed(opt)) {
        std::snprintf(buf, sizeof buf, "FAIL %s/%s/%s rel error %.3g at %s\n",
                      std::string(to_string(k.activation)).c_str(),
                      std::string(to_string(k.loss)).c_str(),
                      std::string(to_string(k.regularization)).c_str(), k.result.max_rel_error,
                      k.result.worst.c_str());
        text += buf;
      }
    }
    std::snprintf(buf, sizeof buf,
                  "%zu models, %zu coordinates checked, %zu skipped, max rel error %.3g "
                  "(tolerance %.3g): %s\n",
                  audit.cases.size(), checked, skipped, worst, opt.tolerance,
                  audit.passed() ? "PASS" : "FAIL");
    text += buf;
  }
  write_output(text, c.report);
  return audit.passed() ? kClean : kIssues;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Verification routines for neural network training"};
  app.require_subcommand(1);

  Common run_c;
  std::optional<std::uint64_t> run_seed;
  std::optional<std::int64_t> run_steps;
  std::string run_trace;
  std::string run_payload = "full";
  bool run_preflight = false;
  auto* run = app.add_subcommand("run", "train a configured model under monitoring");
  run_c.add_source(*run);
  run->add_option("--seed", run_seed, "override the training seed");
  run->add_option("--steps", run_steps, "override the step budget");
  run->add_option("--trace", run_trace, "write a telemetry trace to this path");
  run->add_option("--payload", run_payload, "trace payload mode")
      ->check(CLI::IsMember({"full", "summary"}));
  run->add_flag("--preflight", run_preflight,
                "fit a small sample before training (on by default for scenarios that use it)");
  run_c.add_output(*run);
  run_c.thresholds.add_to(*run);

  Common an_c;
  std::string an_trace;
  auto* analyze = app.add_subcommand("analyze", "run the checks over a recorded trace");
  analyze->add_option("--trace", an_trace, "trace file")->required()->check(CLI::ExistingFile);
  an_c.add_source(*analyze);
  an_c.add_output(*analyze);
  an_c.thresholds.add_to(*analyze);

  Common cs_c;
  std::vector<std::string> cs_names;
  auto* casestudy = app.add_subcommand("casestudy", "run the fault lab and print the fired-check matrix");
  casestudy->add_option("--scenario", cs_names, "restrict to these scenarios");
  cs_c.add_output(*casestudy);
  cs_c.thresholds.add_to(*casestudy);

  Common gc_c;
  std::uint64_t gc_seed = 1;
  std::size_t gc_per = 1;
  double gc_tol = GradCheckOptions{}.tolerance;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of backpropagation");
  gradcheck->add_option("--seed", gc_seed, "seed for the random models");
  gradcheck->add_option("--models", gc_per, "models per activation/loss/regularization combination")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--tolerance", gc_tol, "maximum relative error")->check(CLI::PositiveNumber);
  gc_c.add_output(*gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kError;
  }

  try {
    if (*run) return cmd_run(run_c, run_seed, run_steps, run_trace, run_payload, run_preflight);
    if (*analyze) return cmd_analyze(an_c, an_trace);
    if (*casestudy) {
      bool any = false;
      for (const auto& [name, v] : cs_c.thresholds.values) any = any || !v.empty();
      return cmd_casestudy(cs_c, cs_names, any);
    }
    if (*gradcheck) return cmd_gradcheck(gc_c, gc_seed, gc_per, gc_tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kError;
  }
  return kError;
}
