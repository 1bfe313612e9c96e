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
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "leapsim/world.hpp"

namespace leapsim
{
  enum class InvariantId : std::uint8_t
    { ExclMem, ExclDev, ExclCore, Contig, BootGate, Sanity, Cap };

  std::string_view to_string(InvariantId id);

  struct ViolationReport
  {
    InvariantId id;
    std::string detail;
    std::string event;   // filled by the caller that observed it
  };

  /// Evaluate all seven predicates by direct state inspection.
  std::vector<ViolationReport> check_invariants(const World& w);

  enum class AttackKind : std::uint8_t
    {
      MaliciousImageSwap, OverlappingMemoryConfig, DoubleCoreAlloc, IoEavesdrop,
      CacheDirectAttack, DmaBypass, StaleTlbRead
    };

  std::string_view to_string(AttackKind k);

  /// Throws ValidationError for unknown names.
  AttackKind parse_attack_kind(std::string_view name);

  const std::vector<AttackKind>& all_attacks();

  /// Defense expected to stop each attack ("integrity", "legality check",
  /// "stage-2", "sanitize", "SMMU").
  std::string_view expected_mechanism(AttackKind k);

  struct AttackOutcome
  {
    AttackKind kind;
    bool blocked = false;      // the defense fired and nothing leaked
    std::string mechanism;     // the defense that stopped it, or "none"
    std::uint64_t leaked_bytes = 0;
    std::vector<ViolationReport> violations;
    std::string detail;
  };

  /// Run one attack against w, creating whatever victims it needs through
  /// the public operations. Throws ValidationError when the world lacks
  /// resources to stage the attack.
  AttackOutcome run_attack(World& w, AttackKind kind);

  /// A confidentiality breach observable by a raw probe.
  struct LeakReport
  {
    std::string kind;      // "stage-2", "stale-tlb", "dma"
    std::string detail;
    std::uint64_t bytes = 0;
  };

  /// Adversarial raw probes: ROS translations reaching sandbox memory or
  /// devices, and DMA from a device into another context's RAM.
  std::vector<LeakReport> probe_leaks(const World& w);

  // Exploration alphabet.

  enum class StepOp : std::uint8_t
    {
      Create, CreateTampered, Attach, AttachOverlap, Detach, CoreInc, CoreDec, CoreSteal,
      Request, Release, Terminate, SandboxTouch, RosTouchAdjacent, RosTouchDevice
    };

  std::string_view to_string(StepOp op);
  bool step_takes_slot(StepOp op);

  struct Step
  {
    StepOp op = StepOp::Create;
    std::uint32_t slot = 0;   // sandbox id for per-sandbox steps

    friend bool operator==(const Step&, const Step&) = default;
  };

  std::string to_string(const Step& s);

  /// Inverse of to_string(Step). Throws ParseError.
  Step parse_step(std::string_view text);

  /// Every step over op_alphabet at the current state, in a fixed order.
  std::vector<Step> candidate_steps(const World& w, const std::set<StepOp>& alphabet,
                                    std::uint32_t max_sandboxes);

  /// Apply a step; protocol rejections are part of the model and are
  /// returned, not thrown.
  std::optional<ErrorCode> apply_step(World& w, const Step& s);

  struct ExploreConfig
  {
    MachineConfig machine = small_machine_config();
    PlatformConfig platform = small_platform();
    DefenseFlags flags;
    std::uint32_t depth = 12;
    std::size_t budget = 5'000'000;
    std::uint32_t max_sandboxes = 2;
    std::set<StepOp> alphabet;     // empty means all ops
    bool stop_at_first = false;    // stop after the first level with a violation
    std::size_t max_counterexamples = 16;
  };

  struct Counterexample
  {
    std::vector<Step> steps;
    std::vector<ViolationReport> violations;
    std::vector<LeakReport> leaks;
  };

  struct ExploreResult
  {
    std::size_t states_visited = 0;
    std::size_t transitions = 0;
    std::uint32_t depth_reached = 0;
    std::size_t violating_states = 0;
    std::vector<Counterexample> counterexamples;
    std::vector<std::size_t> level_sizes;
  };

  class BudgetExceeded : public LeapError
  {
  public:
    BudgetExceeded(ExploreResult partial, std::size_t budget);
    const ExploreResult& partial() const { return partial_; }

  private:
    ExploreResult partial_;
  };

  /// The world every exploration starts from.
  World explore_root(const ExploreConfig& cfg, Trace::Mode mode = Trace::Mode::Off);

  /// Breadth-first enumeration with canonical-digest deduplication; the
  /// first counterexample per level is minimal in length. Levels expand in
  /// parallel and merge in a fixed order, so the result is identical to
  /// explore_serial. Throws BudgetExceeded.
  ExploreResult explore(const ExploreConfig& cfg);
  ExploreResult explore_serial(const ExploreConfig& cfg);

  /// Re-apply steps from the root; returns the violations and leaks seen
  /// after the last step. trace_lines receives the full trace if given.
  Counterexample replay_steps(const ExploreConfig& cfg, const std::vector<Step>& steps,
                              std::vector<std::string>* trace_lines = nullptr);

  /// True if replay reproduces the same invariant ids and leak kinds.
  bool same_failure(const Counterexample& a, const Counterexample& b);

}  // namespace leapsim
