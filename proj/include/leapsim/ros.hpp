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
#include <set>
#include <string>
#include <vector>

#include "leapsim/engine.hpp"
#include "leapsim/monitor.hpp"
#include "leapsim/types.hpp"

namespace leapsim
{
  struct World;
  struct Workload;

  /// CMA-like pool of weakly reserved contiguous extents.
  class CmaPool
  {
  public:
    CmaPool() = default;
    explicit CmaPool(std::vector<PhysRange> extents);

    /// First-fit, lowest address. With adjacent_to, the result abuts it
    /// (above preferred, then below) inside the same extent. bytes must be
    /// a positive multiple of 2MB (ValidationError). Throws OutOfMemory or
    /// NoAdjacentSpace.
    PhysRange alloc(std::uint64_t bytes, ContextId owner,
                    std::optional<PhysRange> adjacent_to = std::nullopt);

    /// Return range; it must be exactly covered by allocations.
    void free(const PhysRange& range);
    void free_all(ContextId owner);

    const std::vector<PhysRange>& extents() const { return extents_; }

    struct Alloc
    {
      std::uint64_t end;
      ContextId owner;
      friend bool operator==(const Alloc&, const Alloc&) = default;
    };
    const std::map<std::uint64_t, Alloc>& allocations() const { return allocs_; }
    std::vector<PhysRange> allocated_to(ContextId owner) const;

    friend bool operator==(const CmaPool&, const CmaPool&) = default;

  private:
    bool is_free(const PhysRange& r) const;
    void insert(const PhysRange& r, ContextId owner);

    std::vector<PhysRange> extents_;
    std::map<std::uint64_t, Alloc> allocs_;
  };

  /// One contiguous region carved into fixed-size channel slots. A
  /// channel never changes while its sandbox lives.
  class SharedPool
  {
  public:
    SharedPool() = default;
    SharedPool(PhysRange base, std::uint64_t channel_bytes);

    /// Lowest free slot. Throws OutOfMemory.
    PhysRange alloc(ContextId owner);
    void free(ContextId owner);

    const PhysRange& base() const { return base_; }
    std::uint64_t channel_bytes() const { return channel_bytes_; }
    const std::map<ContextId, PhysRange>& channels() const { return channels_; }

    friend bool operator==(const SharedPool&, const SharedPool&) = default;

  private:
    PhysRange base_;
    std::uint64_t channel_bytes_ = 0;
    std::map<ContextId, PhysRange> channels_;
  };

  enum class DriverState : std::uint8_t { Loaded, Unloaded, SuspendedGpu };

  std::string_view to_string(DriverState s);

  /// A pending device request (FIFO per device).
  struct Waiter
  {
    ContextId who = ContextId::Ros;
    Nanos deadline{0};
    Nanos hold{0};        // ROS use duration once granted
    bool tamper_driver = false;
    friend bool operator==(const Waiter&, const Waiter&) = default;
  };

  struct RosState
  {
    CmaPool cma;
    SharedPool shared;
    std::map<DevId, DriverState> drivers;     // ROS driver per device
    std::map<DevId, Nanos> in_use_until;      // ROS-side device activity
    std::map<DevId, std::deque<Waiter>> waiters;

    bool gpu_suspended = false;
    Nanos gpu_suspended_at{0};
    std::vector<Nanos> frozen_intervals;
    std::uint64_t render_generation = 0;      // cancels stale render events
    std::uint64_t frames_rendered = 0;

    friend bool operator==(const RosState&, const RosState&) = default;
  };

  struct CreateRequest
  {
    std::string handle;
    std::string app_id;
    Quota quota;
    std::optional<CoreClass> prefer;
    bool tamper = false;                   // stage a modified image
    std::optional<CoreId> force_core;      // malicious ROS: name a specific core
  };

  /// Allocate RAM and a channel, stage the sealed image and ask the
  /// monitor to lock and launch. Rolls back pool allocations on failure.
  /// Throws TooManySandboxes, ResourceBusy, OutOfMemory, IntegrityError.
  ContextId create_sandbox(World& w, const CreateRequest& req, const Workload& workload);

  /// Copy bytes over the sandbox's channel. Returns the completion time.
  /// Throws BadState unless the sandbox is Running.
  Nanos send_data(World& w, ContextId sandbox, std::uint64_t bytes, CopyDirection dir);

  /// ROS side of a device hand-off: unload the driver, or suspend the GPU
  /// and pause rendering. Throws DeviceBusy or UnsupportedDevice.
  void prepare_peripheral(World& w, DevId dev);

  /// Reload the ROS driver after the device came back. Throws BadState
  /// while a sandbox still owns it.
  void reclaim_peripheral(World& w, DevId dev);

  /// ROS wants to use dev for hold. Queues behind a sandbox owner.
  void ros_use_device(World& w, DevId dev, Nanos hold);

  /// Drop queued requests whose deadline passed.
  void expire_waiters(World& w);

  /// Hand dev (now idle with ROS) to the first live waiter, if any.
  void serve_waiters(World& w, DevId dev);

  /// Choose a ROS-owned core other than core 0, preferring klass.
  std::optional<CoreId> pick_free_core(const World& w, std::optional<CoreClass> prefer);

}  // namespace leapsim
