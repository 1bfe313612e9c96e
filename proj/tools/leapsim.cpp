// Copyright 2026 The leapsim Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// leapsim: run, explore, compare, bench, replay and sweep from the shell.
//
// Exit codes: 0 clean, 1 invariant violation / unblocked attack /
// counterexample / replay mismatch, 2 bad input, 3 exploration budget hit.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "leapsim/bench.hpp"

using namespace leapsim;

namespace
{

struct Common
{
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::vector<std::string> mutate;
  std::string trace_out;
  std::string metrics_out;
};

void
write_lines(const std::string& path, const std::vector<std::string>& lines)
{
  std::ofstream out(path);
  if (not out)
    throw LeapError(ErrorCode::ValidationError, "cannot write '" + path + "'");
  for (const auto& l : lines)
    out << l << '\n';
}

void
write_json(const std::string& path, const Json& j)
{
  if (path.empty())
    return;
  std::ofstream out(path);
  if (not out)
    throw LeapError(ErrorCode::ValidationError, "cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

std::vector<std::string>
read_lines(const std::string& path)
{
  std::ifstream in(path);
  if (not in)
    throw LeapError(ErrorCode::ValidationError, "cannot open '" + path + "'");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);)
    if (not l.empty())
      lines.push_back(l);
  return lines;
}

Scenario
load(const std::string& path, const Common& c)
{
  Scenario s = load_scenario(path);
  if (c.seed)
    s.seed = *c.seed;
  if (c.mode == "leap")
    s.mode = IsolationMode::Leap;
  else if (c.mode == "tzasc")
    s.mode = IsolationMode::Tzasc;
  s.platform.mode = s.mode;
  for (const auto& m : c.mutate)
    apply_mutation(s.flags, m);
  return s;
}

void
add_common(CLI::App* cmd, Common& c, bool trace)
{
  cmd->add_option("--seed", c.seed, "Override the scenario seed");
  cmd->add_option("--mode", c.mode, "Isolation mode")->check(CLI::IsMember({"leap", "tzasc"}));
  cmd->add_option("--mutate", c.mutate,
                  "Disable a defense (no_verify, no_sanitize, no_legality_check, no_smmu)");
  if (trace)
    cmd->add_option("--trace-out", c.trace_out, "Write the trace (JSON lines)");
  cmd->add_option("--metrics-out", c.metrics_out, "Write metrics (JSON)");
}

int
cmd_run(const std::string& path, const Common& c)
{
  const Scenario s = load(path, c);
  RunOptions o;
  o.trace_mode = c.trace_out.empty() ? Trace::Mode::DigestOnly : Trace::Mode::Full;
  const RunResult r = run_scenario(s, o);
  if (not c.trace_out.empty())
    write_lines(c.trace_out, r.trace_lines);
  write_json(c.metrics_out, r.metrics);

  std::cout << "scenario " << s.name << ": " << r.events << " events, end "
            << to_ms(r.end_time) << " ms, trace digest " << hex64(r.trace_digest) << "\n";
  for (const auto& e : r.errors)
    std::cout << "  directive " << e.index << " " << e.op << ": " << to_string(e.code) << "\n";
  for (const auto& a : r.attacks)
    std::cout << "  attack " << to_string(a.kind) << ": "
              << (a.blocked ? "blocked by " + a.mechanism : "NOT blocked") << ", leaked "
              << a.leaked_bytes << " bytes\n";
  for (const auto& v : r.violations)
    std::cout << "  VIOLATION " << to_string(v.id) << " after " << v.event << ": " << v.detail
              << "\n";
  return r.exit_code();
}

void
print_explore(const ExploreResult& r)
{
  std::cout << "states " << r.states_visited << ", transitions " << r.transitions << ", depth "
            << r.depth_reached << ", violating states " << r.violating_states << "\n";
}

int
cmd_explore(const std::string& path, const Common& c, std::optional<std::uint32_t> depth,
            std::optional<std::size_t> budget, const std::string& out_dir)
{
  const Scenario s = load(path, c);
  ExploreConfig cfg = explore_config(s);
  if (depth)
    cfg.depth = *depth;
  if (budget)
    cfg.budget = *budget;

  ExploreResult r;
  try
    {
      r = explore(cfg);
    }
  catch (const BudgetExceeded& e)
    {
      std::cout << e.what() << "\npartial: ";
      print_explore(e.partial());
      return 3;
    }
  print_explore(r);
  if (not r.counterexamples.empty())
    std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < r.counterexamples.size(); ++i)
    {
      const auto& cx = r.counterexamples[i];
      const std::string file = (std::filesystem::path(out_dir)
                                / ("counterexample-" + std::to_string(i + 1) + ".jsonl")).string();
      write_lines(file, counterexample_trace(s, cfg, cx));
      std::cout << "counterexample " << i + 1 << " (" << file << "):";
      for (const auto& st : cx.steps)
        std::cout << ' ' << to_string(st);
      std::cout << "\n";
      for (const auto& v : cx.violations)
        std::cout << "  " << to_string(v.id) << ": " << v.detail << "\n";
      for (const auto& l : cx.leaks)
        std::cout << "  leak " << l.kind << ": " << l.detail << "\n";
    }
  write_json(c.metrics_out, {{"states", r.states_visited}, {"transitions", r.transitions},
                             {"depth", r.depth_reached}, {"violating_states", r.violating_states},
                             {"counterexamples", r.counterexamples.size()},
                             {"level_sizes", r.level_sizes}});
  return r.counterexamples.empty() ? 0 : 1;
}

int
cmd_compare(const std::string& path, const Common& c)
{
  const Scenario s = load(path, c);
  const CompareReport r = compare_modes(s);
  for (const ModeReport* m : {&r.leap, &r.tzasc})
    std::cout << to_string(m->mode) << ": max concurrent " << m->max_concurrent << ", created "
              << m->created << ", rejected " << m->rejected << "\n";
  for (const auto& [h, d] : r.delta_ms)
    std::cout << "  " << h << " completion delta (tzasc - leap) " << d << " ms\n";
  write_json(c.metrics_out, to_json(r));
  return r.leap.violations + r.tzasc.violations == 0 ? 0 : 1;
}

int
cmd_attack(const std::vector<std::string>& kinds, const Common& c)
{
  DefenseFlags flags;
  for (const auto& m : c.mutate)
    apply_mutation(flags, m);
  std::vector<AttackKind> list;
  if (kinds.empty() or kinds == std::vector<std::string>{"all"})
    list = all_attacks();
  else
    for (const auto& k : kinds)
      list.push_back(parse_attack_kind(k));

  Json out = Json::array();
  int rc = 0;
  for (AttackKind k : list)
    {
      PlatformConfig pc = default_platform();
      pc.render = false;
      World w = build_world(default_machine_config(), pc, flags);
      const AttackOutcome a = run_attack(w, k);
      std::cout << to_string(k) << ": " << (a.blocked ? "blocked" : "NOT blocked")
                << ", mechanism " << a.mechanism << ", leaked " << a.leaked_bytes << " bytes";
      if (not a.detail.empty())
        std::cout << " (" << a.detail << ")";
      std::cout << "\n";
      if (not a.blocked)
        rc = 1;
      out.push_back({{"attack", std::string(to_string(k))}, {"blocked", a.blocked},
                     {"mechanism", a.mechanism}, {"leaked_bytes", a.leaked_bytes}});
    }
  write_json(c.metrics_out, out);
  return rc;
}

int
cmd_replay(const std::string& path)
{
  const ReplayReport r = replay_trace(read_lines(path));
  std::cout << r.kind << " replay " << (r.matched ? "matched" : "MISMATCH") << "\n  expected "
            << r.expected << "\n  actual   " << r.actual << "\n";
  return r.matched ? 0 : 1;
}

int
cmd_sweep(std::uint64_t first, std::size_t count, bool serial, const std::string& metrics_out)
{
  const auto t0 = std::chrono::steady_clock::now();
  const SweepResult r = serial ? sweep_serial(first, count) : sweep_parallel(first, count);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << r.scenarios << " scenarios, " << r.events << " events (max " << r.max_events
            << " per run), " << r.violations << " violations, " << r.directive_errors
            << " rejected directives, " << secs << " s\n";
  for (auto seed : r.failing_seeds)
    std::cout << "  violating seed " << seed << "\n";
  write_json(metrics_out, {{"scenarios", r.scenarios}, {"events", r.events},
                           {"violations", r.violations}, {"failing_seeds", r.failing_seeds},
                           {"seconds", secs}});
  return r.violations == 0 ? 0 : 1;
}

}  // namespace


int
main(int argc, char** argv)
{
  CLI::App app{"leapsim: deterministic simulator of a TrustZone sandbox architecture"};
  app.require_subcommand(1);

  Common common;
  std::string path;

  auto* run = app.add_subcommand("run", "Run a scenario file");
  run->add_option("scenario", path, "Scenario YAML")->required();
  add_common(run, common, true);

  std::optional<std::uint32_t> depth;
  std::optional<std::size_t> budget;
  std::string out_dir = "counterexamples";
  auto* exp = app.add_subcommand("explore", "Exhaustive bounded exploration");
  exp->add_option("scenario", path, "Scenario YAML (machine, platform, explore sections)")
    ->required();
  exp->add_option("--depth", depth, "Step bound");
  exp->add_option("--budget", budget, "State budget");
  exp->add_option("--out-dir", out_dir, "Directory for counterexample traces");
  add_common(exp, common, false);

  auto* cmp = app.add_subcommand("compare", "Run a scenario under leap and tzasc");
  cmp->add_option("scenario", path, "Scenario YAML")->required();
  add_common(cmp, common, false);

  std::string suite;
  auto* bench = app.add_subcommand("bench", "Built-in reproductions");
  bench->add_option("suite", suite, "cpu_adjust | dl_batch | mem_query")->required();
  bench->add_option("--metrics-out", common.metrics_out, "Write metrics (JSON)");

  std::vector<std::string> kinds;
  auto* atk = app.add_subcommand("attack", "Run attack scenarios on the default machine");
  atk->add_option("kinds", kinds, "Attack names, or 'all'");
  add_common(atk, common, false);

  auto* rep = app.add_subcommand("replay", "Re-execute a trace or counterexample file");
  rep->add_option("trace", path, "Trace file")->required();

  std::uint64_t first = 0;
  std::size_t count = 10000;
  bool serial = false;
  auto* sw = app.add_subcommand("sweep", "Random honest scenarios with invariant checks");
  sw->add_option("--seed", first, "First seed");
  sw->add_option("--count", count, "Number of scenarios");
  sw->add_flag("--serial", serial, "Use the serial reference kernel");
  sw->add_option("--metrics-out", common.metrics_out, "Write metrics (JSON)");

  CLI11_PARSE(app, argc, argv);

  try
    {
      if (*run)
        return cmd_run(path, common);
      if (*exp)
        return cmd_explore(path, common, depth, budget, out_dir);
      if (*cmp)
        return cmd_compare(path, common);
      if (*bench)
        {
          const Json j = run_suite(suite, std::cout);
          write_json(common.metrics_out, j);
          return 0;
        }
      if (*atk)
        return cmd_attack(kinds, common);
      if (*rep)
        return cmd_replay(path);
      if (*sw)
        return cmd_sweep(first, count, serial, common.metrics_out);
    }
  catch (const LeapError& e)
    {
      std::cerr << "leapsim: " << e.what() << "\n";
      return 2;
    }
  return 0;
}
