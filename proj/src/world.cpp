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

#include "leapsim/world.hpp"

#include <charconv>

namespace leapsim
{

PlatformConfig
default_platform()
{
  PlatformConfig p;
  p.cma_extents = {{1 * GiB, 1 * GiB + 512 * MiB}, {2 * GiB, 2 * GiB + 512 * MiB}};
  p.shared_pool = {0x3000'0000, 0x3000'0000 + 32 * MiB};
  p.channel_bytes = 4 * MiB;
  p.sandbox_base_bytes = 128 * MiB;
  p.attach_granule = 16 * MiB;
  p.default_quota = Quota{1, 512 * MiB};
  return p;
}


PlatformConfig
small_platform()
{
  PlatformConfig p;
  p.cma_extents = {{6 * kBlockBytes, 16 * kBlockBytes}};
  p.shared_pool = {4 * kBlockBytes, 6 * kBlockBytes};
  p.channel_bytes = kBlockBytes;
  p.sandbox_base_bytes = 2 * kBlockBytes;
  p.attach_granule = kBlockBytes;
  p.default_quota = Quota{2, 4 * kBlockBytes};
  p.render = false;
  return p;
}


void
validate(const PlatformConfig& p, const Machine& m)
{
  auto fail = [](const std::string& msg) { throw LeapError(ErrorCode::ConfigError, msg); };
  auto in_ram = [&](const PhysRange& r) {
    for (const auto& f : m.ram_ranges())
      if (f.contains(r))
        return true;
    return false;
  };

  if (p.cma_extents.empty())
    fail("at least one CMA extent required");
  for (std::size_t i = 0; i < p.cma_extents.size(); ++i)
    {
      const auto& e = p.cma_extents[i];
      if (e.empty() or not e.aligned(kBlockBytes) or not in_ram(e))
        fail("CMA extent " + to_string(e) + " must be 2MB-aligned RAM");
      if (e.overlaps(p.shared_pool))
        fail("CMA extent overlaps the shared pool");
      for (std::size_t j = 0; j < i; ++j)
        if (e.overlaps(p.cma_extents[j]))
          fail("CMA extents overlap");
    }
  if (p.shared_pool.empty() or not p.shared_pool.aligned(kBlockBytes) or not in_ram(p.shared_pool))
    fail("shared pool must be 2MB-aligned RAM");
  if (p.channel_bytes == 0 or p.channel_bytes % kBlockBytes or p.channel_bytes > p.shared_pool.size())
    fail("channel size must be a 2MB multiple that fits the shared pool");
  if (p.sandbox_base_bytes == 0 or p.sandbox_base_bytes % kBlockBytes)
    fail("sandbox base must be a positive 2MB multiple");
  if (p.attach_granule == 0 or p.attach_granule % kBlockBytes)
    fail("attach granule must be a positive 2MB multiple");
  if (p.default_quota.max_cores == 0 or p.default_quota.max_memory < p.sandbox_base_bytes)
    fail("default quota below the sandbox base");
  if (p.tick.count() <= 0 or p.wait_timeout.count() < 0)
    fail("tick must be positive and timeout non-negative");
  if (p.big_rate <= 0 or p.little_rate <= 0)
    fail("core rates must be positive");
}


SandboxRuntime&
World::runtime(ContextId id)
{
  auto it = runtimes.find(id);
  if (it == runtimes.end())
    throw LeapError(ErrorCode::BadState, to_string(id) + " is not a live sandbox");
  return it->second;
}


const SandboxRuntime&
World::runtime(ContextId id) const
{
  auto it = runtimes.find(id);
  if (it == runtimes.end())
    throw LeapError(ErrorCode::BadState, to_string(id) + " is not a live sandbox");
  return it->second;
}


double
World::core_rate(CoreId c) const
{
  return machine.core(c).klass == CoreClass::Big ? platform.big_rate : platform.little_rate;
}


World
build_world(const MachineConfig& mc, const PlatformConfig& pc, DefenseFlags flags,
            CostTable costs, Trace::Mode trace_mode)
{
  World w;
  w.machine = build_machine(mc);
  validate(pc, w.machine);
  w.platform = pc;
  w.monitor = Monitor(w.machine, flags);
  w.engine = Engine(std::move(costs), trace_mode);
  w.ros.cma = CmaPool(pc.cma_extents);
  w.ros.shared = SharedPool(pc.shared_pool, pc.channel_bytes);
  for (const auto& p : mc.peripherals)
    {
      w.ros.drivers[p.id] = DriverState::Loaded;
      const Bytes blob(p.name.begin(), p.name.end());
      register_app(w, "driver:" + p.name, blob);
    }
  return w;
}


void
register_app(World& w, const std::string& app_id, const Bytes& payload)
{
  w.keys.register_image(app_id, payload);
  w.images[app_id] = w.keys.seal(app_id, payload);
}


void
sync(World& w)
{
  const Nanos now = w.engine.now();
  for (auto& [id, rt] : w.runtimes)
    {
      if (rt.state == SandboxState::Running and now > rt.last_sync)
        {
          std::vector<std::pair<CoreId, double>> rates;
          rates.reserve(rt.cores.size());
          for (CoreId c : rt.cores)
            rates.emplace_back(c, w.core_rate(c));
          double mult = 1.0;
          if (rt.workload.kind == Workload::Kind::InferenceBatch)
            for (const auto& [d, s] : rt.drivers)
              if (s == DriverState::Loaded and w.machine.peripheral(d).kind == DeviceKind::Gpu)
                mult = rt.workload.gpu_speedup;
          step_workload(rt, rt.last_sync, now, rates, mult);
        }
      rt.last_sync = now;
    }
}


namespace
{

void
put(std::string& s, std::uint64_t v)
{
  char buf[24];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v, 16);
  s.append(buf, p);
  s.push_back(',');
}

}  // namespace


std::string
canonical_state(const World& w)
{
  std::string s;
  s.reserve(2048);

  s += "C:";
  for (const Core& c : w.machine.cores())
    {
      put(s, std::uint64_t(c.state));
      put(s, index(c.running));
      put(s, c.active_tables ? index(*c.active_tables) + 1 : 0);
    }

  const ResourceLedger& l = w.monitor.ledger();
  s += "|L:";
  for (const auto& [c, o] : l.core_owner)
    {
      put(s, std::uint64_t(o.kind));
      put(s, index(o.ctx));
    }
  s += "R:";
  for (const auto& [b, p] : l.ram_owner)
    {
      put(s, b);
      put(s, p.end);
      put(s, index(p.owner));
    }
  s += "D:";
  for (const auto& [d, o] : l.dev_owner)
    put(s, index(o));
  s += "H:";
  for (const auto& [ctx, ch] : l.shared_channels)
    {
      put(s, index(ctx));
      put(s, ch.begin);
      put(s, ch.end);
    }
  s += "S:";
  for (const auto& [ctx, r] : l.sandboxes)
    {
      put(s, index(ctx));
      s += r.app_id;
      s.push_back(',');
      put(s, index(r.boot_core));
      put(s, r.base_bytes);
      put(s, r.quota.max_cores);
      put(s, r.quota.max_memory);
      put(s, r.verified);
      put(s, r.verified_digest);
      put(s, r.running_digest);
    }

  s += "|T:";
  for (const auto& [ctx, t] : w.machine.tables())
    {
      put(s, index(ctx));
      for (const auto& [b, e] : t.extents())
        {
          put(s, b);
          put(s, e.end);
          put(s, std::uint64_t(e.attr));
        }
      s.push_back(';');
    }

  s += "|B:";
  for (const Tlb& t : w.machine.tlbs())
    {
      for (const TlbEntry& e : t.entries())
        {
          put(s, index(e.context));
          put(s, e.ipa_block);
          put(s, std::uint64_t(e.granularity));
        }
      s.push_back(';');
    }

  s += "|K:";
  for (const auto& [pa, line] : w.machine.cache().lines())
    {
      put(s, pa);
      put(s, index(line.fill_owner));
      put(s, index(line.fill_core));
    }

  s += "|O:";
  for (const auto& [b, a] : w.ros.cma.allocations())
    {
      put(s, b);
      put(s, a.end);
      put(s, index(a.owner));
    }
  s += "P:";
  for (const auto& [ctx, ch] : w.ros.shared.channels())
    {
      put(s, index(ctx));
      put(s, ch.begin);
    }
  s += "V:";
  for (const auto& [d, st] : w.ros.drivers)
    put(s, std::uint64_t(st));
  s += "W:";
  for (const auto& [d, q] : w.ros.waiters)
    {
      put(s, index(d));
      for (const Waiter& x : q)
        {
          put(s, index(x.who));
          put(s, x.tamper_driver);
        }
      s.push_back(';');
    }
  put(s, w.ros.gpu_suspended);

  s += "|X:";
  for (const auto& [id, rt] : w.runtimes)
    {
      put(s, index(id));
      s += rt.app_id;
      s.push_back(',');
      put(s, std::uint64_t(rt.state));
      put(s, rt.quota.max_cores);
      put(s, rt.quota.max_memory);
      put(s, index(rt.boot_core));
      put(s, rt.base_ram.begin);
      put(s, rt.base_ram.end);
      for (CoreId c : rt.cores)
        put(s, index(c));
      s.push_back('/');
      for (const auto& [d, st] : rt.drivers)
        {
          put(s, index(d));
          put(s, std::uint64_t(st));
        }
      put(s, rt.attached_bytes);
      put(s, std::uint64_t(rt.workload.kind));
      put(s, rt.workload.next_file);
      s.push_back(';');
    }
  return s;
}


std::string
StateDigest::hex() const
{
  return hex64(hi) + hex64(lo);
}


StateDigest
state_digest(const World& w)
{
  const std::string s = canonical_state(w);
  StateDigest d;
  d.lo = fnv1a(s);
  // Second lane: different basis plus a final avalanche.
  std::uint64_t h = fnv1a(s, 0x6c62272e07bb0142ULL);
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdULL;
  h ^= h >> 33;
  d.hi = h;
  return d;
}

}  // namespace leapsim
