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

#include "leapsim/sos.hpp"

#include <algorithm>
#include <cmath>

#include "leapsim/world.hpp"

namespace leapsim
{

namespace
{

Json
range_json(const PhysRange& r)
{
  return Json::array({r.begin, r.end});
}


SandboxRuntime&
running(World& w, ContextId sandbox, std::string_view op)
{
  auto it = w.runtimes.find(sandbox);
  if (it == w.runtimes.end() or it->second.state != SandboxState::Running)
    {
      w.engine.record(to_string(sandbox), op, Json::object(), "rejected", "BadState");
      throw LeapError(ErrorCode::BadState, to_string(sandbox) + " is not running");
    }
  return it->second;
}


void
no_flexible_in_tzasc(World& w, ContextId sandbox, std::string_view op)
{
  if (w.platform.mode != IsolationMode::Tzasc)
    return;
  ++w.stats.adjust_rejected;
  w.engine.record(to_string(sandbox), op, Json::object(), "rejected", "BadState");
  throw LeapError(ErrorCode::BadState, "TZASC regions are fixed at launch");
}

}  // namespace


Workload
Workload::inference(std::uint32_t images, double units_per_image, bool parallelizable,
                    double gpu_speedup)
{
  Workload w;
  w.kind = Kind::InferenceBatch;
  w.images = images;
  w.units_per_image = units_per_image;
  w.parallelizable = parallelizable;
  w.gpu_speedup = gpu_speedup;
  w.remaining = double(images) * units_per_image;
  return w;
}


Workload
Workload::cipher(std::vector<std::uint64_t> file_sizes, std::uint64_t cache_base,
                 std::uint32_t queries, bool flexible)
{
  Workload w;
  w.kind = Kind::CipherQuery;
  w.file_sizes = std::move(file_sizes);
  w.cache_base = cache_base;
  w.queries = queries;
  w.flexible_memory = flexible;
  w.awaiting_file = true;
  return w;
}


bool
Workload::done() const
{
  switch (kind)
    {
    case Kind::Idle:           return false;
    case Kind::InferenceBatch: return remaining <= 0.0;
    case Kind::CipherQuery:    return next_file >= file_sizes.size() and awaiting_file;
    }
  return false;
}


double
cipher_file_work(std::uint64_t size, std::uint64_t cache, std::uint32_t queries)
{
  const double s = double(size) / double(MiB);
  const double q = queries;
  double work = s * kScanUnitsPerMb + q * s * kHitUnitsPerMb;
  if (size > cache)
    work += q * (double(size - cache) / double(MiB)) * kMissUnitsPerMb;
  return work;
}


void
UsageWindow::add(Nanos begin, Nanos end, std::vector<std::pair<CoreId, double>> busy)
{
  if (end <= begin)
    return;
  samples_.push_back(Sample{begin, end, std::move(busy)});
  while (not samples_.empty() and samples_.front().end < end - horizon_)
    samples_.pop_front();
}


std::optional<double>
UsageWindow::aggregate(Nanos now, Nanos window) const
{
  const Nanos start = now - window;
  if (samples_.empty() or samples_.front().begin > start or samples_.back().end < now)
    return std::nullopt;
  double num = 0.0, den = 0.0;
  for (const auto& s : samples_)
    {
      const Nanos lo = std::max(s.begin, start), hi = std::min(s.end, now);
      if (hi <= lo)
        continue;
      const double ov = double((hi - lo).count());
      for (const auto& [c, b] : s.busy)
        num += b * ov;
      den += double(s.busy.size()) * ov;
    }
  if (den <= 0.0)
    return std::nullopt;
  return num / den;
}


std::optional<double>
UsageWindow::per_core(CoreId core, Nanos now, Nanos window) const
{
  const Nanos start = now - window;
  if (samples_.empty() or samples_.front().begin > start or samples_.back().end < now)
    return std::nullopt;
  double num = 0.0, den = 0.0;
  for (const auto& s : samples_)
    {
      const Nanos lo = std::max(s.begin, start), hi = std::min(s.end, now);
      if (hi <= lo)
        continue;
      auto it = std::find_if(s.busy.begin(), s.busy.end(),
                             [&](const auto& p) { return p.first == core; });
      if (it == s.busy.end())
        return std::nullopt;
      const double ov = double((hi - lo).count());
      num += it->second * ov;
      den += ov;
    }
  if (den <= 0.0)
    return std::nullopt;
  return num / den;
}


bool
valid_transition(SandboxState from, SandboxState to)
{
  return static_cast<int>(to) == static_cast<int>(from) + 1;
}


double
step_workload(SandboxRuntime& rt, Nanos from, Nanos to,
              const std::vector<std::pair<CoreId, double>>& rates, double multiplier)
{
  if (rt.state != SandboxState::Running)
    throw LeapError(ErrorCode::BadState, to_string(rt.id) + " is not running");
  if (to <= from)
    return 0.0;

  const double dt_ns = double((to - from).count());
  const double dt_ms = dt_ns / 1e6;
  Workload& wl = rt.workload;

  // Parallel inference uses every core; serial work runs on the fastest.
  std::vector<bool> working(rates.size(), false);
  const bool has_work = wl.kind != Workload::Kind::Idle and not wl.done() and not wl.awaiting_file
                        and wl.remaining > 0.0;
  if (has_work and not rates.empty())
    {
      if (wl.kind == Workload::Kind::InferenceBatch and wl.parallelizable)
        std::fill(working.begin(), working.end(), true);
      else
        {
          auto best = std::max_element(rates.begin(), rates.end(), [](const auto& a, const auto& b) {
            return a.second < b.second;
          });
          working[best - rates.begin()] = true;
        }
    }

  double rate = 0.0;
  for (std::size_t i = 0; i < rates.size(); ++i)
    if (working[i])
      rate += rates[i].second;
  rate *= multiplier;

  double done = 0.0, fraction = 0.0;
  if (rate > 0.0)
    {
      const double capacity = rate * dt_ms;
      done = std::min(wl.remaining, capacity);
      fraction = done / capacity;
      wl.remaining -= done;
      if (wl.remaining <= 1e-9)
        {
          wl.remaining = 0.0;
          if (wl.kind == Workload::Kind::CipherQuery)
            wl.awaiting_file = true;
        }
    }

  // Memory utilization is tracked until the workload completes.
  if (wl.kind == Workload::Kind::CipherQuery and not rt.completed)
    {
      const double cache = double(wl.cache_base + rt.attached_bytes);
      const double used = std::min<double>(double(wl.working_set), cache);
      const double span = wl.done() ? dt_ns * fraction : dt_ns;
      rt.mem_used_ns += used / cache * span;
      rt.mem_time_ns += span;
    }

  if (wl.done() and not rt.completed)
    {
      rt.completed = from + Nanos(std::llround(dt_ns * fraction));
      wl.working_set = 0;
    }

  std::vector<std::pair<CoreId, double>> busy;
  busy.reserve(rates.size());
  for (std::size_t i = 0; i < rates.size(); ++i)
    busy.emplace_back(rates[i].first, working[i] ? fraction : 0.0);
  rt.busy_core_ns += fraction * dt_ns * double(std::count(working.begin(), working.end(), true));
  rt.owned_core_ns += dt_ns * double(rates.size());
  rt.usage.add(from, to, std::move(busy));
  rt.work_done += done;
  return done;
}


std::optional<AdjustRequest>
monitor_cpu(const SandboxRuntime& rt, Nanos now)
{
  if (rt.state != SandboxState::Running or now - rt.last_adjust < kHysteresis)
    return std::nullopt;
  if (rt.cores.size() < rt.quota.max_cores)
    {
      auto avg = rt.usage.aggregate(now, kIncreaseWindow);
      if (avg and *avg > kIncreaseThreshold)
        return AdjustRequest{AdjustRequest::Kind::IncreaseCore, std::nullopt};
    }
  for (CoreId c : rt.cores)
    {
      if (c == rt.boot_core)
        continue;
      auto avg = rt.usage.per_core(c, now, kReleaseWindow);
      if (avg and *avg < kReleaseThreshold)
        return AdjustRequest{AdjustRequest::Kind::ReleaseCore, c};
    }
  return std::nullopt;
}


std::optional<MemRequest>
monitor_memory(const SandboxRuntime& rt, std::uint64_t requested, std::uint64_t granule)
{
  if (rt.state != SandboxState::Running or granule == 0)
    return std::nullopt;
  const std::uint64_t have = rt.workload.cache_base + rt.attached_bytes;
  if (requested > have)
    {
      const std::uint64_t need = requested - have;
      return MemRequest{AdjustOp::Attach, (need + granule - 1) / granule * granule};
    }
  const std::uint64_t spare = std::min(rt.attached_bytes, have - requested);
  if (spare >= granule)
    return MemRequest{AdjustOp::Detach, spare / granule * granule};
  return std::nullopt;
}


void
request_peripheral(World& w, ContextId sandbox, DevId dev, bool tamper_driver)
{
  SandboxRuntime& rt = running(w, sandbox, "request_peripheral");
  const PeripheralDesc& p = w.machine.peripheral(dev);
  const std::string actor = to_string(sandbox);
  const Json args = {{"dev", p.name}};
  if (rt.drivers.count(dev))
    {
      w.engine.record(actor, "request_peripheral", args, "rejected", "BadState");
      throw LeapError(ErrorCode::BadState, actor + " already holds " + p.name);
    }

  w.engine.record(actor, "request_peripheral", args);
  w.engine.charge(actor, CostTable::ipi_entry(CopyDirection::SandboxToRos));

  const ContextId owner = w.monitor.ledger().dev_owner.at(dev);
  auto busy_until = w.ros.in_use_until.find(dev);
  const bool ros_busy = p.kind != DeviceKind::Gpu and busy_until != w.ros.in_use_until.end()
                        and busy_until->second > w.engine.now();
  if (owner != ContextId::Ros or ros_busy)
    {
      auto& q = w.ros.waiters[dev];
      const bool queued = std::any_of(q.begin(), q.end(),
                                      [&](const Waiter& x) { return x.who == sandbox; });
      if (not queued)
        q.push_back(Waiter{sandbox, w.engine.now() + w.platform.wait_timeout, Nanos(0),
                           tamper_driver});
      w.engine.record("ros", "grant_peripheral", args, "queued", "DeviceBusy");
      throw LeapError(ErrorCode::DeviceBusy, p.name + " is busy");
    }

  prepare_peripheral(w, dev);
  sync(w);
  w.monitor.switch_peripheral(w.machine, w.engine, dev, ContextId::Ros, sandbox, true);

  // ROS stages the driver; the sandbox checks it before installing.
  EncryptedImage blob = w.images.at("driver:" + p.name);
  if (tamper_driver)
    {
      if (blob.payload.empty())
        blob.payload.push_back(0);
      blob.payload.back() ^= 0x33;
    }
  try
    {
      w.keys.verify_and_decrypt(blob);
    }
  catch (const LeapError& e)
    {
      w.engine.record(actor, "driver_install", args, "rejected", to_string(e.code()));
      w.monitor.switch_peripheral(w.machine, w.engine, dev, sandbox, ContextId::Ros, true);
      reclaim_peripheral(w, dev);
      throw;
    }
  rt.drivers[dev] = DriverState::Loaded;
  w.engine.record(actor, "driver_install", args);
}


void
release_peripheral(World& w, ContextId sandbox, DevId dev)
{
  const PeripheralDesc& p = w.machine.peripheral(dev);
  const std::string actor = to_string(sandbox);
  const Json args = {{"dev", p.name}};
  auto it = w.runtimes.find(sandbox);
  if (it == w.runtimes.end()
      or (it->second.state != SandboxState::Running
          and it->second.state != SandboxState::Terminating))
    {
      w.engine.record(actor, "release_peripheral", args, "rejected", "BadState");
      throw LeapError(ErrorCode::BadState, actor + " is not running");
    }
  SandboxRuntime& rt = it->second;
  if (not rt.drivers.count(dev))
    {
      w.engine.record(actor, "release_peripheral", args, "rejected", "NotOwner");
      throw LeapError(ErrorCode::NotOwner, actor + " does not hold " + p.name);
    }

  sync(w);
  rt.drivers.erase(dev);
  w.engine.record(actor, "driver_unload", args);
  w.engine.charge(actor, CostTable::ipi_entry(CopyDirection::SandboxToRos));
  w.monitor.switch_peripheral(w.machine, w.engine, dev, sandbox, ContextId::Ros, true);
  reclaim_peripheral(w, dev);
  serve_waiters(w, dev);
}


void
terminate(World& w, ContextId sandbox)
{
  SandboxRuntime& rt = running(w, sandbox, "terminate");
  const std::string actor = to_string(sandbox);
  sync(w);

  std::vector<DevId> held;
  for (const auto& [d, s] : rt.drivers)
    held.push_back(d);
  for (DevId d : held)
    release_peripheral(w, sandbox, d);

  w.engine.record(actor, "state", {{"from", to_string(rt.state)}, {"to", "terminating"}});
  rt.state = SandboxState::Terminating;
  rt.cores.clear();
  w.engine.charge(actor, CostTable::ipi_entry(CopyDirection::SandboxToRos));
  w.monitor.teardown(w.machine, w.engine, sandbox, SandboxState::Terminating);
  w.ros.cma.free_all(sandbox);
  w.ros.shared.free(sandbox);

  w.engine.record(actor, "state", {{"from", "terminating"}, {"to", "dead"}});
  rt.state = SandboxState::Dead;
  w.retired.push_back(std::move(rt));
  w.runtimes.erase(sandbox);
  expire_waiters(w);
}


CoreId
increase_core(World& w, ContextId sandbox)
{
  SandboxRuntime& rt = running(w, sandbox, "increase_core");
  no_flexible_in_tzasc(w, sandbox, "increase_core");
  const std::string actor = to_string(sandbox);
  auto fail = [&](ErrorCode code, const std::string& msg) {
    ++w.stats.adjust_rejected;
    w.engine.record(actor, "increase_core", Json::object(), "rejected", to_string(code));
    throw LeapError(code, msg);
  };
  if (rt.cores.size() >= rt.quota.max_cores)
    fail(ErrorCode::QuotaExceeded, actor + " is at its core quota");

  w.engine.record(actor, "increase_core");
  w.engine.charge(actor, CostTable::ipi_entry(CopyDirection::SandboxToRos));
  auto core = pick_free_core(w, CoreClass::Big);
  if (not core)
    fail(ErrorCode::ResourceBusy, "no free core");

  sync(w);
  const Nanos t0 = w.engine.now();
  try
    {
      w.monitor.transfer_core(w.machine, w.engine, *core, ContextId::Ros, sandbox,
                              w.platform.optimized);
    }
  catch (const LeapError&)
    {
      ++w.stats.adjust_rejected;
      throw;
    }
  sync(w);
  rt.cores.push_back(*core);
  rt.last_adjust = w.engine.now();
  ++w.stats.core_adjustments;
  w.stats.core_adjust_ms.push_back(to_ms(w.engine.now() - t0));
  return *core;
}


void
release_core(World& w, ContextId sandbox, CoreId core)
{
  SandboxRuntime& rt = running(w, sandbox, "release_core");
  const std::string actor = to_string(sandbox);
  auto pos = std::find(rt.cores.begin(), rt.cores.end(), core);
  if (pos == rt.cores.end() or core == rt.boot_core)
    {
      ++w.stats.adjust_rejected;
      const ErrorCode code = pos == rt.cores.end() ? ErrorCode::NotOwner : ErrorCode::LastCoreError;
      w.engine.record(actor, "release_core", {{"core", index(core)}}, "rejected", to_string(code));
      throw LeapError(code, actor + " cannot release core " + std::to_string(index(core)));
    }

  sync(w);
  rt.cores.erase(pos);
  w.engine.record(actor, "release_core", {{"core", index(core)}});
  w.engine.charge(actor, CostTable::ipi_entry(CopyDirection::SandboxToRos));
  const Nanos t0 = w.engine.now();
  try
    {
      w.monitor.transfer_core(w.machine, w.engine, core, sandbox, ContextId::Ros,
                              w.platform.optimized);
    }
  catch (const LeapError&)
    {
      ++w.stats.adjust_rejected;
      rt.cores.push_back(core);
      throw;
    }
  rt.last_adjust = w.engine.now();
  ++w.stats.core_adjustments;
  w.stats.core_adjust_ms.push_back(to_ms(w.engine.now() - t0));
}


PhysRange
attach_memory(World& w, ContextId sandbox, std::uint64_t bytes)
{
  SandboxRuntime& rt = running(w, sandbox, "attach_memory");
  no_flexible_in_tzasc(w, sandbox, "attach_memory");
  const std::string actor = to_string(sandbox);
  w.engine.record(actor, "attach_memory", {{"bytes", bytes}});
  w.engine.charge(actor, CostTable::ipi_entry(CopyDirection::SandboxToRos));

  const auto interval = w.monitor.ledger().interval_of(sandbox);
  PhysRange region;
  try
    {
      region = w.ros.cma.alloc(bytes, sandbox, interval);
    }
  catch (const LeapError& e)
    {
      ++w.stats.adjust_rejected;
      w.engine.record("ros", "alloc_contiguous", {{"bytes", bytes}}, "rejected",
                      to_string(e.code()));
      throw;
    }
  w.engine.record("ros", "alloc_contiguous", {{"region", range_json(region)}});

  sync(w);
  const Nanos t0 = w.engine.now();
  try
    {
      w.monitor.attach_memory(w.machine, w.engine, sandbox, region);
    }
  catch (const LeapError&)
    {
      ++w.stats.adjust_rejected;
      w.ros.cma.free(region);
      throw;
    }
  sync(w);
  rt.attached_bytes += region.size();
  ++w.stats.mem_adjustments;
  w.stats.mem_adjust_ms.push_back(to_ms(w.engine.now() - t0));
  return region;
}


PhysRange
detach_memory(World& w, ContextId sandbox, std::uint64_t bytes)
{
  SandboxRuntime& rt = running(w, sandbox, "detach_memory");
  no_flexible_in_tzasc(w, sandbox, "detach_memory");
  const std::string actor = to_string(sandbox);
  const auto interval = w.monitor.ledger().interval_of(sandbox);
  auto fail = [&](ErrorCode code, const std::string& msg) {
    ++w.stats.adjust_rejected;
    w.engine.record(actor, "detach_memory", {{"bytes", bytes}}, "rejected", to_string(code));
    throw LeapError(code, msg);
  };
  if (not interval or bytes == 0 or bytes > interval->size())
    fail(ErrorCode::QuotaExceeded, "nothing to detach");

  // Give back attached memory from whichever end lies outside the base.
  PhysRange region{interval->end - bytes, interval->end};
  if (region.overlaps(rt.base_ram))
    region = {interval->begin, interval->begin + bytes};
  if (region.overlaps(rt.base_ram))
    fail(ErrorCode::QuotaExceeded, "detach would cut into the launch memory");

  w.engine.record(actor, "detach_memory", {{"bytes", bytes}});
  w.engine.charge(actor, CostTable::ipi_entry(CopyDirection::SandboxToRos));
  sync(w);
  const Nanos t0 = w.engine.now();
  try
    {
      w.monitor.detach_memory(w.machine, w.engine, sandbox, region);
    }
  catch (const LeapError&)
    {
      ++w.stats.adjust_rejected;
      throw;
    }
  w.ros.cma.free(region);
  rt.attached_bytes -= region.size();
  ++w.stats.mem_adjustments;
  w.stats.mem_adjust_ms.push_back(to_ms(w.engine.now() - t0));
  return region;
}


void
runtime_tick(World& w, ContextId sandbox)
{
  auto it = w.runtimes.find(sandbox);
  if (it == w.runtimes.end() or it->second.state != SandboxState::Running)
    return;
  sync(w);
  SandboxRuntime& rt = it->second;
  Workload& wl = rt.workload;
  const std::string actor = to_string(sandbox);

  if (rt.completed and not rt.completion_reported)
    {
      rt.completion_reported = true;
      w.engine.record(actor, "workload_complete",
                      {{"completed_us", to_us(*rt.completed)},
                       {"elapsed_us", to_us(*rt.completed - rt.started)}});
    }

  // Memory pressure hook: runs when the next file is opened, and once more
  // to hand back memory after the last one.
  if (wl.kind == Workload::Kind::CipherQuery and wl.awaiting_file)
    {
      const std::uint64_t want = wl.next_file < wl.file_sizes.size()
                                   ? wl.file_sizes[wl.next_file] : 0;
      if (wl.flexible_memory and w.platform.mode == IsolationMode::Leap)
        if (auto req = monitor_memory(rt, want, w.platform.attach_granule))
          {
            rt.mem_pressure = req->op == AdjustOp::Attach;
            try
              {
                if (req->op == AdjustOp::Attach)
                  attach_memory(w, sandbox, req->bytes);
                else
                  detach_memory(w, sandbox, req->bytes);
              }
            catch (const LeapError&)
              {
                // Recorded; the file runs with the memory it has.
              }
            rt.mem_pressure = false;
          }
      if (wl.next_file < wl.file_sizes.size())
        {
          wl.working_set = want;
          wl.remaining = cipher_file_work(want, wl.cache_base + rt.attached_bytes, wl.queries);
          wl.awaiting_file = false;
          ++wl.next_file;
          w.engine.record(actor, "open_file", {{"bytes", want}, {"work", wl.remaining}});
        }
    }

  if (auto req = monitor_cpu(rt, w.engine.now()))
    {
      try
        {
          if (req->kind == AdjustRequest::Kind::IncreaseCore)
            increase_core(w, sandbox);
          else
            release_core(w, sandbox, *req->core);
        }
      catch (const LeapError&)
        {
          rt.last_adjust = w.engine.now();
        }
    }
}

}  // namespace leapsim
