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
#include <string>
#include <vector>

#include "leapsim/engine.hpp"
#include "leapsim/hw_model.hpp"
#include "leapsim/monitor.hpp"
#include "leapsim/ros.hpp"
#include "leapsim/secure_world.hpp"
#include "leapsim/sos.hpp"

namespace leapsim
{
  /// Normal-world software layout on top of a machine.
  struct PlatformConfig
  {
    std::vector<PhysRange> cma_extents;
    PhysRange shared_pool;
    std::uint64_t channel_bytes = 4 * MiB;
    std::uint64_t sandbox_base_bytes = 128 * MiB;
    std::uint64_t attach_granule = 16 * MiB;
    Quota default_quota;
    Nanos wait_timeout{std::chrono::seconds(5)};
    Nanos tick{std::chrono::milliseconds(100)};
    IsolationMode mode = IsolationMode::Leap;
    std::uint32_t tzasc_regions = 8;
    double big_rate = 1.0;        // work units per ms
    double little_rate = 0.35;
    bool optimized = true;        // busy-wait core hand-off
    bool render = true;           // ROS 60fps render events

    friend bool operator==(const PlatformConfig&, const PlatformConfig&) = default;
  };

  /// Two 512MB CMA extents, a 32MB shared pool with 4MB channels, 128MB
  /// sandbox base, 16MB memory granule.
  PlatformConfig default_platform();

  /// Frames 0-3 ROS, 4-5 shared pool (2MB channels), 6-15 CMA; 4MB base,
  /// 8MB limit, one-frame granule.
  PlatformConfig small_platform();

  /// Throws ConfigError.
  void validate(const PlatformConfig& p, const Machine& m);

  struct WorldStats
  {
    std::uint32_t sandboxes_created = 0;
    std::uint32_t creates_rejected = 0;
    std::uint32_t max_concurrent = 0;
    std::uint32_t core_adjustments = 0;
    std::uint32_t mem_adjustments = 0;
    std::uint32_t adjust_rejected = 0;
    std::vector<double> core_adjust_ms;
    std::vector<double> mem_adjust_ms;
    std::uint32_t waiter_timeouts = 0;

    friend bool operator==(const WorldStats&, const WorldStats&) = default;
  };

  struct World
  {
    Machine machine;
    KeyStore keys;
    Monitor monitor;
    Engine engine;
    PlatformConfig platform;
    RosState ros;
    std::map<ContextId, SandboxRuntime> runtimes;   // live sandboxes
    std::vector<SandboxRuntime> retired;
    std::map<std::string, EncryptedImage> images;   // as held by ROS
    WorldStats stats;

    SandboxRuntime& runtime(ContextId id);
    const SandboxRuntime& runtime(ContextId id) const;
    double core_rate(CoreId c) const;
  };

  World build_world(const MachineConfig& mc, const PlatformConfig& pc, DefenseFlags flags = {},
                    CostTable costs = CostTable::defaults(),
                    Trace::Mode trace_mode = Trace::Mode::Full);

  /// Register an app image and keep the sealed copy with ROS. Throws
  /// DuplicateApp.
  void register_app(World& w, const std::string& app_id, const Bytes& payload);

  /// Bring every running sandbox's workload up to the current clock.
  void sync(World& w);

  /// 128-bit canonical digest of the logical protocol state: ledger, table
  /// sets, TLBs, cache owner map, cores, ROS pools and drivers, runtime
  /// states. Clock values, statistics and the trace are excluded.
  struct StateDigest
  {
    std::uint64_t hi = 0;
    std::uint64_t lo = 0;
    std::string hex() const;
    friend bool operator==(const StateDigest&, const StateDigest&) = default;
    friend auto operator<=>(const StateDigest&, const StateDigest&) = default;
  };

  StateDigest state_digest(const World& w);

  /// The canonical text the digest is computed over (for debugging).
  std::string canonical_state(const World& w);

}  // namespace leapsim
