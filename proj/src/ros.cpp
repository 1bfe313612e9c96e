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

#include "leapsim/ros.hpp"

#include <algorithm>

#include "leapsim/world.hpp"

namespace leapsim
{

namespace
{

constexpr std::string_view kActor = "ros";

}  // namespace


std::string_view
to_string(DriverState s)
{
  switch (s)
    {
    case DriverState::Loaded:       return "loaded";
    case DriverState::Unloaded:     return "unloaded";
    case DriverState::SuspendedGpu: return "suspended";
    }
  return "?";
}


CmaPool::CmaPool(std::vector<PhysRange> extents)
  : extents_(std::move(extents))
{
  std::sort(extents_.begin(), extents_.end());
  for (std::size_t i = 0; i < extents_.size(); ++i)
    {
      if (extents_[i].empty() or not extents_[i].aligned(kBlockBytes))
        throw LeapError(ErrorCode::ConfigError, "CMA extent " + to_string(extents_[i]));
      if (i > 0 and extents_[i - 1].overlaps(extents_[i]))
        throw LeapError(ErrorCode::ConfigError, "overlapping CMA extents");
    }
}


bool
CmaPool::is_free(const PhysRange& r) const
{
  auto it = allocs_.lower_bound(r.end);
  if (it == allocs_.begin())
    return true;
  --it;
  return it->second.end <= r.begin;
}


void
CmaPool::insert(const PhysRange& r, ContextId owner)
{
  allocs_.emplace(r.begin, Alloc{r.end, owner});
}


PhysRange
CmaPool::alloc(std::uint64_t bytes, ContextId owner, std::optional<PhysRange> adjacent_to)
{
  if (bytes == 0 or bytes % kBlockBytes != 0)
    throw LeapError(ErrorCode::ValidationError,
                    "allocation size must be a positive multiple of 2MB");

  if (adjacent_to)
    {
      for (const auto& ext : extents_)
        {
          if (not ext.contains(*adjacent_to))
            continue;
          const PhysRange above{adjacent_to->end, adjacent_to->end + bytes};
          if (ext.contains(above) and is_free(above))
            {
              insert(above, owner);
              return above;
            }
          if (adjacent_to->begin >= ext.begin + bytes)
            {
              const PhysRange below{adjacent_to->begin - bytes, adjacent_to->begin};
              if (is_free(below))
                {
                  insert(below, owner);
                  return below;
                }
            }
        }
      throw LeapError(ErrorCode::NoAdjacentSpace,
                      "no free space next to " + to_string(*adjacent_to));
    }

  for (const auto& ext : extents_)
    {
      std::uint64_t cursor = ext.begin;
      for (auto it = allocs_.lower_bound(ext.begin); it != allocs_.end() and it->first < ext.end;
           ++it)
        {
          if (it->first >= cursor + bytes)
            break;
          cursor = std::max(cursor, it->second.end);
        }
      if (cursor + bytes <= ext.end)
        {
          const PhysRange r{cursor, cursor + bytes};
          insert(r, owner);
          return r;
        }
    }
  throw LeapError(ErrorCode::OutOfMemory, "no contiguous " + std::to_string(bytes >> 20) + "MB");
}


void
CmaPool::free(const PhysRange& range)
{
  // Split at the edges, then require full coverage of the interior.
  auto split_at = [&](std::uint64_t at) {
    auto it = allocs_.upper_bound(at);
    if (it == allocs_.begin())
      return;
    --it;
    if (it->first < at and at < it->second.end)
      {
        Alloc tail{it->second.end, it->second.owner};
        it->second.end = at;
        allocs_.emplace(at, tail);
      }
  };
  std::uint64_t covered = range.begin;
  auto it = allocs_.upper_bound(range.begin);
  if (it != allocs_.begin())
    --it;
  for (; it != allocs_.end() and it->first <= covered and covered < range.end; ++it)
    covered = std::max(covered, it->second.end);
  if (covered < range.end)
    throw LeapError(ErrorCode::NotMappedError, "free of unallocated " + to_string(range));
  split_at(range.begin);
  split_at(range.end);
  allocs_.erase(allocs_.lower_bound(range.begin), allocs_.lower_bound(range.end));
}


void
CmaPool::free_all(ContextId owner)
{
  for (auto it = allocs_.begin(); it != allocs_.end();)
    it = it->second.owner == owner ? allocs_.erase(it) : std::next(it);
}


std::vector<PhysRange>
CmaPool::allocated_to(ContextId owner) const
{
  std::vector<PhysRange> out;
  for (const auto& [b, a] : allocs_)
    if (a.owner == owner)
      {
        if (not out.empty() and out.back().end == b)
          out.back().end = a.end;
        else
          out.push_back({b, a.end});
      }
  return out;
}


SharedPool::SharedPool(PhysRange base, std::uint64_t channel_bytes)
  : base_(base), channel_bytes_(channel_bytes)
{
  if (channel_bytes == 0 or channel_bytes % kBlockBytes != 0 or not base.aligned(kBlockBytes)
      or base.size() < channel_bytes)
    throw LeapError(ErrorCode::ConfigError, "shared pool " + to_string(base));
}


PhysRange
SharedPool::alloc(ContextId owner)
{
  for (std::uint64_t b = base_.begin; b + channel_bytes_ <= base_.end; b += channel_bytes_)
    {
      const PhysRange slot{b, b + channel_bytes_};
      bool used = false;
      for (const auto& [ctx, ch] : channels_)
        used = used or ch == slot;
      if (not used)
        {
          channels_[owner] = slot;
          return slot;
        }
    }
  throw LeapError(ErrorCode::OutOfMemory, "shared pool exhausted");
}


void
SharedPool::free(ContextId owner)
{
  channels_.erase(owner);
}


std::optional<CoreId>
pick_free_core(const World& w, std::optional<CoreClass> prefer)
{
  std::optional<CoreId> any;
  for (const Core& c : w.machine.cores())
    {
      if (index(c.id) == 0 or not w.monitor.ledger().core_owner.at(c.id).is(ContextId::Ros))
        continue;
      if (not prefer or c.klass == *prefer)
        return c.id;
      if (not any)
        any = c.id;
    }
  return any;
}


ContextId
create_sandbox(World& w, const CreateRequest& req, const Workload& workload)
{
  Engine& e = w.engine;
  const Json args = {{"handle", req.handle}, {"app", req.app_id}};
  auto reject = [&](ErrorCode code, const std::string& msg) {
    e.record(kActor, "create_sandbox", args, "rejected", to_string(code));
    ++w.stats.creates_rejected;
    throw LeapError(code, msg);
  };

  auto img = w.images.find(req.app_id);
  if (img == w.images.end())
    reject(ErrorCode::UnknownApp, "app '" + req.app_id + "' is not registered");

  const std::size_t live = w.monitor.sandbox_count();
  if (w.platform.mode == IsolationMode::Tzasc
      and 1 + 2 * (live + 1) > w.platform.tzasc_regions)
    reject(ErrorCode::TooManySandboxes, "TZASC protection regions exhausted");

  std::optional<CoreId> core = req.force_core ? req.force_core : pick_free_core(w, req.prefer);
  if (not core)
    {
      if (live + 1 > w.machine.cores().size() - 1)
        reject(ErrorCode::TooManySandboxes, "every non-boot core hosts a sandbox");
      reject(ErrorCode::ResourceBusy, "no free core");
    }

  const ContextId pending = *w.monitor.next_sandbox_id();
  PhysRange ram, channel;
  try
    {
      ram = w.ros.cma.alloc(w.platform.sandbox_base_bytes, pending);
    }
  catch (const LeapError& err)
    {
      reject(err.code(), err.what());
    }
  try
    {
      channel = w.ros.shared.alloc(pending);
    }
  catch (const LeapError& err)
    {
      w.ros.cma.free(ram);
      reject(err.code(), err.what());
    }
  e.record(kActor, "allocate", {{"handle", req.handle}, {"ram", Json::array({ram.begin, ram.end})},
                                {"channel", Json::array({channel.begin, channel.end})}});

  EncryptedImage image = img->second;
  if (req.tamper)
    {
      if (image.payload.empty())
        image.payload.push_back(0);
      image.payload[image.payload.size() / 2] ^= 0x5a;
    }

  // Staging writes the image through ROS's own mapping on the boot core.
  s2_translate(w.machine, CoreId{0}, ram.begin);
  cache_fill(w.machine, ContextId::Ros, CoreId{0}, ram.begin);
  e.record(kActor, "stage_image", {{"handle", req.handle}, {"bytes", image.payload.size()}});

  LaunchSpec spec{req.app_id, std::move(image), *core, ram, channel, req.quota};
  ContextId id;
  try
    {
      id = w.monitor.lock_and_launch(w.machine, w.keys, e, spec);
    }
  catch (const LeapError&)
    {
      w.ros.cma.free(ram);
      w.ros.shared.free(pending);
      ++w.stats.creates_rejected;
      throw;
    }

  sync(w);
  SandboxRuntime rt;
  rt.id = id;
  rt.handle = req.handle;
  rt.app_id = req.app_id;
  rt.quota = req.quota;
  rt.boot_core = *core;
  rt.base_ram = ram;
  rt.cores = {*core};
  rt.workload = workload;
  rt.started = e.now();
  rt.last_sync = e.now();
  const std::string actor = to_string(id);
  for (SandboxState s : {SandboxState::Verifying, SandboxState::Booting, SandboxState::Running})
    {
      e.record(actor, "state", {{"from", to_string(rt.state)}, {"to", to_string(s)}});
      rt.state = s;
    }
  w.runtimes[id] = std::move(rt);

  ++w.stats.sandboxes_created;
  w.stats.max_concurrent = std::max<std::uint32_t>(w.stats.max_concurrent,
                                                   w.monitor.sandbox_count());
  return id;
}


Nanos
send_data(World& w, ContextId sandbox, std::uint64_t bytes, CopyDirection dir)
{
  auto it = w.runtimes.find(sandbox);
  const Json args = {{"sandbox", to_string(sandbox)}, {"bytes", bytes},
                     {"dir", dir == CopyDirection::RosToSandbox ? "ros_to_sb" : "sb_to_ros"}};
  if (it == w.runtimes.end() or it->second.state != SandboxState::Running)
    {
      w.engine.record(kActor, "send_data", args, "rejected", "BadState");
      throw LeapError(ErrorCode::BadState, to_string(sandbox) + " is not running");
    }
  const std::string actor = dir == CopyDirection::RosToSandbox ? std::string(kActor)
                                                               : to_string(sandbox);
  w.engine.record(actor, "send_data", args);
  w.engine.charge(actor, CostTable::ipi_entry(dir));
  if (bytes > 0)
    w.engine.charge_value(actor, "copy", w.engine.costs().copy_cost(bytes), {{"bytes", bytes}});
  return w.engine.now();
}


void
prepare_peripheral(World& w, DevId dev)
{
  const PeripheralDesc& p = w.machine.peripheral(dev);
  const Json args = {{"dev", p.name}};
  auto fail = [&](ErrorCode code, const std::string& msg) {
    w.engine.record(kActor, "prepare_peripheral", args, "rejected", to_string(code));
    throw LeapError(code, msg);
  };

  if (w.monitor.ledger().dev_owner.at(dev) != ContextId::Ros)
    fail(ErrorCode::DeviceBusy, p.name + " is held by a sandbox");
  if (p.kind != DeviceKind::Gpu and not p.independent)
    fail(ErrorCode::UnsupportedDevice, p.name + " depends on a shared bus driver");
  if (p.kind != DeviceKind::Gpu)
    {
      auto busy = w.ros.in_use_until.find(dev);
      if (busy != w.ros.in_use_until.end() and busy->second > w.engine.now())
        fail(ErrorCode::DeviceBusy, p.name + " is in use by ROS");
    }
  if (w.ros.drivers.at(dev) != DriverState::Loaded)
    fail(ErrorCode::BadState, p.name + " is already released by ROS");

  if (p.kind == DeviceKind::Gpu)
    {
      w.ros.drivers[dev] = DriverState::SuspendedGpu;
      w.ros.gpu_suspended = true;
      w.ros.gpu_suspended_at = w.engine.now();
      ++w.ros.render_generation;
      w.engine.record(kActor, "gpu_suspend", args);
    }
  else
    {
      w.ros.drivers[dev] = DriverState::Unloaded;
      w.engine.record(kActor, "driver_unload", args);
    }
}


void
reclaim_peripheral(World& w, DevId dev)
{
  const PeripheralDesc& p = w.machine.peripheral(dev);
  const Json args = {{"dev", p.name}};
  if (w.monitor.ledger().dev_owner.at(dev) != ContextId::Ros
      or w.ros.drivers.at(dev) == DriverState::Loaded)
    {
      w.engine.record(kActor, "reclaim_peripheral", args, "rejected", "BadState");
      throw LeapError(ErrorCode::BadState, p.name + " is not back with ROS");
    }

  w.ros.drivers[dev] = DriverState::Loaded;
  if (p.kind == DeviceKind::Gpu)
    {
      const Nanos frozen = w.engine.now() - w.ros.gpu_suspended_at;
      w.ros.frozen_intervals.push_back(frozen);
      w.ros.gpu_suspended = false;
      ++w.ros.render_generation;
      if (w.platform.render)
        w.engine.schedule(w.engine.costs().at("render_period_ms"), std::string(kActor),
                          Action{ActionKind::Render, w.ros.render_generation});
      w.engine.record(kActor, "gpu_resume", {{"dev", p.name}, {"frozen_us", to_us(frozen)}});
    }
  else
    w.engine.record(kActor, "driver_load", args);
}


void
ros_use_device(World& w, DevId dev, Nanos hold)
{
  const PeripheralDesc& p = w.machine.peripheral(dev);
  const ContextId owner = w.monitor.ledger().dev_owner.at(dev);
  if (owner != ContextId::Ros)
    {
      w.ros.waiters[dev].push_back(Waiter{ContextId::Ros, w.engine.now() + w.platform.wait_timeout,
                                          hold, false});
      w.engine.record(kActor, "use_device", {{"dev", p.name}}, "queued", "DeviceBusy");
      return;
    }
  Nanos& until = w.ros.in_use_until[dev];
  until = std::max(until, w.engine.now() + hold);
  w.engine.record(kActor, "use_device", {{"dev", p.name}, {"hold_us", to_us(hold)}});
}


void
expire_waiters(World& w)
{
  for (auto& [dev, q] : w.ros.waiters)
    for (auto it = q.begin(); it != q.end();)
      {
        const bool gone = is_sandbox(it->who) and not w.runtimes.count(it->who);
        if (gone or it->deadline < w.engine.now())
          {
            if (not gone)
              {
                ++w.stats.waiter_timeouts;
                w.engine.record(to_string(it->who), "request_peripheral",
                                {{"dev", w.machine.peripheral(dev).name}}, "rejected", "Timeout");
              }
            it = q.erase(it);
          }
        else
          ++it;
      }
}


void
serve_waiters(World& w, DevId dev)
{
  expire_waiters(w);
  auto& q = w.ros.waiters[dev];
  while (not q.empty() and w.monitor.ledger().dev_owner.at(dev) == ContextId::Ros)
    {
      const Waiter next = q.front();
      q.pop_front();
      if (next.who == ContextId::Ros)
        {
          ros_use_device(w, dev, next.hold);
          return;
        }
      auto rt = w.runtimes.find(next.who);
      if (rt == w.runtimes.end() or rt->second.state != SandboxState::Running)
        continue;
      try
        {
          request_peripheral(w, next.who, dev, next.tamper_driver);
          return;
        }
      catch (const LeapError&)
        {
          // Recorded by request_peripheral; try the next waiter.
        }
    }
}

}  // namespace leapsim
