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

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "leapsim/adversary.hpp"
#include "leapsim/world.hpp"

namespace leapsim
{
  constexpr int kScenarioVersion = 1;

  struct AppSpec
  {
    std::string id;
    std::uint64_t size = 4096;   // payload bytes, generated from the id
    friend bool operator==(const AppSpec&, const AppSpec&) = default;
  };

  /// Deterministic image payload for an app.
  Bytes app_payload(const AppSpec& app);

  struct Directive
  {
    enum class Op : std::uint8_t
      {
        CreateSandbox, Terminate, RequestPeripheral, ReleasePeripheral, SendData,
        AttachMemory, DetachMemory, IncreaseCore, ReleaseCore, RosUseDevice, Attack
      };

    Nanos at{0};
    Op op = Op::CreateSandbox;
    std::string handle;

    // create_sandbox
    std::string app;
    std::optional<Quota> quota;
    std::optional<CoreClass> prefer;
    Workload workload;
    bool tamper = false;             // also: tampered driver on request_peripheral
    bool auto_terminate = false;     // terminate once the workload completes

    std::string device;              // peripherals
    std::uint64_t bytes = 0;         // send_data, attach/detach
    CopyDirection direction = CopyDirection::RosToSandbox;
    std::optional<CoreId> core;      // release_core
    Nanos hold{0};                   // ros_use_device
    AttackKind attack = AttackKind::MaliciousImageSwap;

    friend bool operator==(const Directive&, const Directive&) = default;
  };

  std::string_view to_string(Directive::Op op);

  struct ExploreSection
  {
    std::uint32_t depth = 12;
    std::size_t budget = 5'000'000;
    std::uint32_t max_sandboxes = 2;
    std::vector<StepOp> alphabet;    // empty: all ops
    friend bool operator==(const ExploreSection&, const ExploreSection&) = default;
  };

  struct Scenario
  {
    std::string name = "unnamed";
    std::uint64_t seed = 0;
    IsolationMode mode = IsolationMode::Leap;
    DefenseFlags flags;
    Nanos horizon{std::chrono::seconds(10)};
    bool stop_when_idle = true;

    std::string machine_preset = "default";
    MachineConfig machine = default_machine_config();
    std::string platform_preset = "default";
    PlatformConfig platform = default_platform();
    std::map<std::string, Nanos> cost_overrides;

    std::vector<AppSpec> apps;
    std::vector<Directive> timeline;
    std::optional<ExploreSection> explore;

    friend bool operator==(const Scenario&, const Scenario&) = default;
  };

  /// Parse the YAML scenario grammar. Syntax and type errors throw
  /// ParseError with line:column; unresolvable references and
  /// inconsistent configs throw ValidationError.
  Scenario parse_scenario(const std::string& text);
  Scenario load_scenario(const std::string& path);

  std::string serialize(const Scenario& s);

  /// Reference and ordering checks (parse_scenario calls this).
  void validate(const Scenario& s);

  CostTable costs_for(const Scenario& s);

  ExploreConfig explore_config(const Scenario& s);

  /// Random honest timeline on the default machine, at most max_events
  /// directives plus ticks. Pure function of seed.
  Scenario random_honest_scenario(std::uint64_t seed, std::size_t max_events = 200);

  struct RunOptions
  {
    Trace::Mode trace_mode = Trace::Mode::Full;
    bool check_invariants = true;       // after every dispatched event
    std::optional<IsolationMode> mode;  // override the scenario's mode
    std::optional<DefenseFlags> flags;  // override the scenario's flags
  };

  struct DirectiveError
  {
    std::size_t index;
    std::string op;
    ErrorCode code;
    std::string message;
  };

  struct RunResult
  {
    std::vector<ViolationReport> violations;
    std::vector<AttackOutcome> attacks;
    std::vector<DirectiveError> errors;
    std::size_t events = 0;
    Nanos end_time{0};
    std::uint64_t trace_digest = 0;
    std::size_t trace_records = 0;
    StateDigest final_state;
    std::vector<std::string> trace_lines;   // Full mode only
    Json metrics;
    std::uint32_t max_concurrent = 0;
    std::uint32_t creates_ok = 0;
    std::uint32_t creates_rejected = 0;
    std::map<std::string, double> completion_ms;   // handle -> elapsed

    bool unblocked_attack() const;
    /// 0 iff no violation and no unblocked attack.
    int exit_code() const { return violations.empty() and not unblocked_attack() ? 0 : 1; }
  };

  /// Build a world, schedule the timeline, ticks and render events, and run
  /// to the horizon (or until idle). The first trace record embeds the
  /// scenario; the last carries the final state digest.
  RunResult run_scenario(const Scenario& s, const RunOptions& opt = {});

  struct ReplayReport
  {
    bool matched = false;
    std::string kind;          // "run" or "counterexample"
    std::string expected;
    std::string actual;
  };

  /// Re-execute a trace written by run_scenario or a counterexample file.
  ReplayReport replay_trace(const std::vector<std::string>& lines);

  /// Counterexample trace: a header embedding the scenario and steps, then
  /// the full trace of the replayed steps.
  std::vector<std::string> counterexample_trace(const Scenario& s, const ExploreConfig& cfg,
                                                const Counterexample& c);

}  // namespace leapsim
