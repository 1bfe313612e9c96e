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
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "leapsim/scenario.hpp"

namespace leapsim
{
  // Built-in reproductions. Each returns plain rows; to_json renders them
  // for the cli and the metrics files.

  struct CpuAdjustRow
  {
    std::string name;            // "big-inc", "little-inc", "big-dec", "little-dec"
    CoreClass klass;
    AdjustDirection dir;
    double opt_ms = 0;           // busy-wait hand-off
    double nonopt_ms = 0;        // power off / on
    double ratio = 0;            // nonopt / opt
  };

  /// Moves one big and one little core into and out of a running sandbox
  /// with and without busy-wait, timing each transfer on the engine clock.
  std::vector<CpuAdjustRow> bench_cpu_adjust();

  struct DlPoint
  {
    std::uint32_t images = 0;
    double baseline_ms = 0;      // single core, no adjustment
    double elapsed_ms = 0;
    double speedup = 0;
    std::uint32_t max_cores = 0; // quota
    std::uint32_t adjustments = 0;
  };

  struct DlCurve
  {
    std::uint32_t extra_cores = 0;
    std::vector<DlPoint> points;
  };

  std::vector<std::uint32_t> default_dl_batches();

  /// Inference batches with quota 1 + extra cores, one curve per entry of
  /// extra, against a one-core baseline.
  std::vector<DlCurve> bench_dl_batch(const std::vector<std::uint32_t>& batches,
                                      const std::vector<std::uint32_t>& extra = {1, 2});

  struct MemStrategy
  {
    std::string name;
    bool flexible = false;
    std::uint64_t cache_bytes = 0;   // static: whole cache; flexible: base
    double completion_ms = 0;
    double utilization = 0;
    std::uint32_t adjustments = 0;
  };

  struct MemQueryResult
  {
    MemStrategy flexible;
    std::vector<MemStrategy> statics;
    /// Statics finishing within tolerance of the flexible run.
    std::vector<MemStrategy> matching(double tolerance = 0.05) const;
  };

  /// CipherQuery over a mixed file set, flexible attach/detach against a
  /// range of static cache pre-allocations.
  MemQueryResult bench_mem_query();

  struct ModeReport
  {
    IsolationMode mode;
    std::uint32_t max_concurrent = 0;
    std::uint32_t created = 0;
    std::uint32_t rejected = 0;
    std::map<std::string, double> completion_ms;
    std::uint64_t trace_digest = 0;
    std::size_t violations = 0;
  };

  struct CompareReport
  {
    ModeReport leap;
    ModeReport tzasc;
    std::map<std::string, double> delta_ms;   // tzasc - leap, both completed
  };

  /// Run a scenario under both isolation modes.
  CompareReport compare_modes(const Scenario& s);

  /// N concurrent inference sandboxes on the default machine.
  Scenario concurrent_scenario(std::uint32_t n);

  struct FootprintReport
  {
    std::vector<std::pair<ContextId, std::uint64_t>> per_context;
    std::uint64_t max_bytes = 0;
    std::uint64_t total_bytes = 0;
  };

  /// Fill the default machine: 7 sandboxes, every device handed out, each
  /// sandbox grown until the pool or its quota runs out.
  FootprintReport footprint_maximal();

  struct SweepResult
  {
    std::size_t scenarios = 0;
    std::size_t events = 0;
    std::size_t violations = 0;
    std::size_t directive_errors = 0;
    std::size_t max_events = 0;
    std::vector<std::uint64_t> failing_seeds;
    std::vector<std::uint64_t> trace_digests;   // in seed order
  };

  /// Random honest scenarios first_seed .. first_seed + n - 1 with
  /// invariant checks after every event. The parallel kernel splits seeds
  /// over OpenMP threads; results are identical to the serial one.
  SweepResult sweep_serial(std::uint64_t first_seed, std::size_t n);
  SweepResult sweep_parallel(std::uint64_t first_seed, std::size_t n);

  Json to_json(const std::vector<CpuAdjustRow>& rows);
  Json to_json(const std::vector<DlCurve>& curves);
  Json to_json(const MemQueryResult& r);
  Json to_json(const CompareReport& r);
  Json to_json(const FootprintReport& r);

  /// Print one suite ("cpu_adjust", "dl_batch", "mem_query") with the
  /// reference bands; returns its JSON. Throws UnknownSuite.
  Json run_suite(const std::string& name, std::ostream& out);

}  // namespace leapsim
