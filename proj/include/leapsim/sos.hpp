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
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "leapsim/monitor.hpp"
#include "leapsim/ros.hpp"
#include "leapsim/types.hpp"

namespace leapsim
{
  struct World;

  // CipherQuery work model, in work units per MB of file.
  constexpr double kScanUnitsPerMb = 40.0;     // first pass over the file
  constexpr double kMissUnitsPerMb = 40.0;     // per query, uncached part
  constexpr double kHitUnitsPerMb = 0.5;       // per query, whole file

  struct Workload
  {
    enum class Kind : std::uint8_t { Idle, InferenceBatch, CipherQuery };

    Kind kind = Kind::Idle;

    // InferenceBatch
    std::uint32_t images = 0;
    double units_per_image = 1500.0;
    bool parallelizable = true;
    double gpu_speedup = 3.57;

    // CipherQuery; sizes in bytes
    std::vector<std::uint64_t> file_sizes;
    std::uint64_t cache_base = 10 * MiB;
    std::uint32_t queries = 10;
    bool flexible_memory = true;

    // progress
    double remaining = 0.0;
    std::size_t next_file = 0;
    bool awaiting_file = false;
    std::uint64_t working_set = 0;

    static Workload idle() { return {}; }
    static Workload inference(std::uint32_t images, double units_per_image = 1500.0,
                              bool parallelizable = true, double gpu_speedup = 3.57);
    static Workload cipher(std::vector<std::uint64_t> file_sizes, std::uint64_t cache_base,
                           std::uint32_t queries = 10, bool flexible = true);

    bool done() const;
    friend bool operator==(const Workload&, const Workload&) = default;
  };

  /// Work units for one CipherQuery file of size bytes with cache bytes.
  double cipher_file_work(std::uint64_t size, std::uint64_t cache, std::uint32_t queries);

  /// Time-weighted per-core busy fractions.
  class UsageWindow
  {
  public:
    struct Sample
    {
      Nanos begin{0};
      Nanos end{0};
      std::vector<std::pair<CoreId, double>> busy;
      friend bool operator==(const Sample&, const Sample&) = default;
    };

    void add(Nanos begin, Nanos end, std::vector<std::pair<CoreId, double>> busy);

    /// Average over all owned cores during [now - window, now]; empty when
    /// the samples do not reach back that far.
    std::optional<double> aggregate(Nanos now, Nanos window) const;

    /// Average of one core; empty unless the core was owned throughout.
    std::optional<double> per_core(CoreId core, Nanos now, Nanos window) const;

    const std::deque<Sample>& samples() const { return samples_; }
    friend bool operator==(const UsageWindow&, const UsageWindow&) = default;

  private:
    std::deque<Sample> samples_;
    Nanos horizon_{std::chrono::seconds(10)};
  };

  struct SandboxRuntime
  {
    ContextId id = ContextId::Ros;
    std::string handle;
    std::string app_id;
    SandboxState state = SandboxState::Created;
    Quota quota;
    CoreId boot_core{};
    PhysRange base_ram;                         // launch-time RAM
    std::vector<CoreId> cores;                  // usable now
    std::map<DevId, DriverState> drivers;       // devices held
    Workload workload;
    UsageWindow usage;
    bool mem_pressure = false;
    std::uint64_t attached_bytes = 0;           // flexible memory on top of base

    Nanos started{0};
    Nanos last_sync{0};
    Nanos last_adjust{-std::chrono::hours(1)};
    std::optional<Nanos> completed;
    bool completion_reported = false;
    double work_done = 0.0;
    double busy_core_ns = 0.0;
    double owned_core_ns = 0.0;
    double mem_used_ns = 0.0;      // integral of min(working set, cache)/cache
    double mem_time_ns = 0.0;

    friend bool operator==(const SandboxRuntime&, const SandboxRuntime&) = default;
  };

  /// Legal successor states of s.
  bool valid_transition(SandboxState from, SandboxState to);

  /// Advance rt's workload over [from, to) with the given per-core rates
  /// (units/ms), scaled by multiplier. Appends a usage sample and returns
  /// the work done. Throws BadState unless Running.
  double step_workload(SandboxRuntime& rt, Nanos from, Nanos to,
                       const std::vector<std::pair<CoreId, double>>& rates,
                       double multiplier = 1.0);

  struct AdjustRequest
  {
    enum class Kind : std::uint8_t { IncreaseCore, ReleaseCore };
    Kind kind;
    std::optional<CoreId> core;   // ReleaseCore only
    friend bool operator==(const AdjustRequest&, const AdjustRequest&) = default;
  };

  constexpr Nanos kIncreaseWindow = std::chrono::seconds(2);
  constexpr Nanos kReleaseWindow = std::chrono::seconds(5);
  constexpr Nanos kHysteresis = std::chrono::seconds(1);
  constexpr double kIncreaseThreshold = 0.99;
  constexpr double kReleaseThreshold = 0.40;

  std::optional<AdjustRequest> monitor_cpu(const SandboxRuntime& rt, Nanos now);

  struct MemRequest
  {
    AdjustOp op;
    std::uint64_t bytes;
    friend bool operator==(const MemRequest&, const MemRequest&) = default;
  };

  /// Attach when the working set exceeds cache_base + attached (rounded up
  /// to granule); detach whole granules no longer needed.
  std::optional<MemRequest> monitor_memory(const SandboxRuntime& rt, std::uint64_t requested,
                                           std::uint64_t granule = 16 * MiB);

  // World-level sandbox actions. Each records its outcome in the trace.

  /// Throws DeviceBusy (the request is queued), UnsupportedDevice,
  /// IntegrityError (tampered driver; device back with ROS) or BadState.
  void request_peripheral(World& w, ContextId sandbox, DevId dev, bool tamper_driver = false);
  void release_peripheral(World& w, ContextId sandbox, DevId dev);

  /// Release devices, tear down, retire the runtime. Throws BadState.
  void terminate(World& w, ContextId sandbox);

  /// Throws QuotaExceeded, ResourceBusy (no free core), BadState.
  CoreId increase_core(World& w, ContextId sandbox);
  void release_core(World& w, ContextId sandbox, CoreId core);

  /// Flexible memory through the ROS allocator and the monitor verdict.
  PhysRange attach_memory(World& w, ContextId sandbox, std::uint64_t bytes);
  PhysRange detach_memory(World& w, ContextId sandbox, std::uint64_t bytes);

  /// Periodic runtime step: progress, CPU and memory monitors.
  void runtime_tick(World& w, ContextId sandbox);

}  // namespace leapsim
