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

#include "leapsim/adversary.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <functional>
#include <unordered_set>

#include <omp.h>

namespace leapsim
{

namespace
{

constexpr std::size_t kMaxReportsPerInvariant = 8;
constexpr const char* kAttackApp = "victim";

struct Reports
{
  std::vector<ViolationReport> out;
  std::array<std::size_t, 7> per{};

  void add(InvariantId id, std::string detail)
  {
    if (per[std::size_t(id)]++ < kMaxReportsPerInvariant)
      out.push_back({id, std::move(detail), ""});
  }
};


bool
in_ram(const ResourceLedger& l, const PhysRange& r)
{
  for (const auto& f : l.ram_frames)
    if (f.contains(r))
      return true;
  return false;
}


/// May context who legitimately hold a translation or a cache line for r?
bool
may_touch(const World& w, const PhysRange& r, ContextId who)
{
  const ResourceLedger& l = w.monitor.ledger();
  if (in_ram(l, r))
    {
      for (const auto& [s, ch] : l.shared_channels)
        if (ch.contains(r))
          return who == ContextId::Ros or who == s;
      return l.ram_owner_at(r.begin) == who and l.ram_owner_at(r.end - 1) == who;
    }
  const MachineConfig& mc = w.machine.config();
  if (mc.io_window.contains(r))
    {
      for (const auto& p : mc.peripherals)
        if (p.mmio.overlaps(r))
          return l.dev_owner.at(p.id) == who;
      return who == ContextId::Ros;
    }
  return false;
}


void
check_excl_mem(const World& w, Reports& rep)
{
  struct Ext
  {
    std::uint64_t b, e;
    ContextId ctx;
    S2Attr attr;
  };
  const ResourceLedger& l = w.monitor.ledger();

  std::vector<Ext> all;
  for (const auto& [ctx, t] : w.machine.tables())
    for (const auto& [b, x] : t.extents())
      if (x.attr != S2Attr::Device)
        all.push_back({b, x.end, ctx, x.attr});
  std::sort(all.begin(), all.end(), [](const Ext& a, const Ext& b) {
    return a.b != b.b ? a.b < b.b : index(a.ctx) < index(b.ctx);
  });

  auto shared_ok = [&](const Ext& a, const Ext& b, const PhysRange& ov) {
    if (a.attr != S2Attr::SharedChannel or b.attr != S2Attr::SharedChannel)
      return false;
    const ContextId s = a.ctx == ContextId::Ros ? b.ctx : a.ctx;
    if ((a.ctx != ContextId::Ros and b.ctx != ContextId::Ros) or s == ContextId::Ros)
      return false;
    auto ch = l.shared_channels.find(s);
    return ch != l.shared_channels.end() and ch->second.contains(ov);
  };

  std::vector<Ext> active;
  for (const Ext& x : all)
    {
      std::erase_if(active, [&](const Ext& a) { return a.e <= x.b; });
      for (const Ext& a : active)
        {
          const PhysRange ov{std::max(a.b, x.b), std::min(a.e, x.e)};
          if (ov.empty() or shared_ok(a, x, ov))
            continue;
          rep.add(InvariantId::ExclMem, to_string(a.ctx) + " and " + to_string(x.ctx)
                  + " both map " + to_string(ov));
        }
      active.push_back(x);
    }

  for (const auto& [s, ch] : l.shared_channels)
    {
      auto t = w.machine.tables().find(s);
      const bool in_sb = t != w.machine.tables().end()
        and t->second.fully_mapped(ch, S2Attr::SharedChannel);
      if (not in_sb or not w.machine.tables(ContextId::Ros).fully_mapped(ch, S2Attr::SharedChannel))
        rep.add(InvariantId::ExclMem, "channel " + to_string(ch) + " of " + to_string(s)
                + " is not shared by exactly ROS and its owner");
    }
  for (const Ext& x : all)
    {
      if (x.attr != S2Attr::SharedChannel)
        continue;
      // ROS extents coalesce across neighbouring channels; check per block.
      for (std::uint64_t b = x.b; b < x.e; b += kBlockBytes)
        {
          const PhysRange r{b, b + kBlockBytes};
          bool covered = false;
          for (const auto& [s, ch] : l.shared_channels)
            if (ch.contains(r) and (x.ctx == ContextId::Ros or x.ctx == s))
              covered = true;
          if (not covered)
            rep.add(InvariantId::ExclMem, to_string(x.ctx) + " maps " + to_string(r)
                    + " as a channel it does not own");
        }
    }
}


void
check_excl_dev(const World& w, Reports& rep)
{
  const ResourceLedger& l = w.monitor.ledger();
  for (const auto& p : w.machine.config().peripherals)
    {
      std::vector<ContextId> holders;
      for (const auto& [ctx, t] : w.machine.tables())
        if (t.any_mapped(p.mmio))
          holders.push_back(ctx);
      const ContextId owner = l.dev_owner.at(p.id);
      if (holders.size() > 1 or (holders.size() == 1 and holders[0] != owner))
        {
          std::string who;
          for (ContextId c : holders)
            who += (who.empty() ? "" : ",") + to_string(c);
          rep.add(InvariantId::ExclDev, p.name + " mapped by {" + who + "}, owner "
                  + to_string(owner));
        }
    }
}


void
check_excl_core(const World& w, Reports& rep)
{
  const ResourceLedger& l = w.monitor.ledger();
  for (const Core& c : w.machine.cores())
    {
      const std::string name = "core " + std::to_string(index(c.id));
      const CoreOwner& o = l.core_owner.at(c.id);
      bool ok = true;
      switch (o.kind)
        {
        case CoreOwner::Kind::Off:
          ok = c.state == CoreState::Off;
          break;
        case CoreOwner::Kind::BusyWait:
          ok = c.state == CoreState::BusyWait;
          break;
        case CoreOwner::Kind::Context:
          if (is_sandbox(o.ctx))
            ok = c.state == CoreState::RunningSandbox and c.running == o.ctx
              and c.active_tables == o.ctx;
          else
            ok = c.state == CoreState::RunningRos and c.active_tables == ContextId::Ros;
          break;
        }
      if (not ok)
        rep.add(InvariantId::ExclCore, name + " state disagrees with the ledger");
      if (index(c.id) == 0 and not o.is(ContextId::Ros))
        rep.add(InvariantId::ExclCore, "core 0 left ROS");
    }

  std::map<CoreId, ContextId> claimed;
  for (const auto& [id, rt] : w.runtimes)
    {
      if (rt.state != SandboxState::Running)
        continue;
      for (CoreId c : rt.cores)
        {
          const std::string name = "core " + std::to_string(index(c));
          auto [it, fresh] = claimed.emplace(c, id);
          if (not fresh)
            rep.add(InvariantId::ExclCore, name + " used by " + to_string(it->second)
                    + " and " + to_string(id));
          if (not l.core_owner.at(c).is(id))
            rep.add(InvariantId::ExclCore, name + " used by " + to_string(id)
                    + " but owned by someone else");
        }
    }
}


void
check_contig(const World& w, Reports& rep)
{
  const ResourceLedger& l = w.monitor.ledger();
  for (const auto& [s, rec] : l.sandboxes)
    {
      const auto pieces = l.ram_of(s);
      auto t = w.machine.tables().find(s);
      if (t == w.machine.tables().end())
        {
          rep.add(InvariantId::Contig, to_string(s) + " has no table set");
          continue;
        }
      std::vector<PhysRange> normal;
      for (const auto& [b, x] : t->second.extents())
        if (x.attr == S2Attr::Normal)
          normal.push_back({b, x.end});
      if (pieces.size() > 1 or normal.size() > 1)
        rep.add(InvariantId::Contig, to_string(s) + " memory is not one interval");
      else if (pieces != normal)
        rep.add(InvariantId::Contig, to_string(s) + " tables disagree with the ledger");
    }
}


void
check_boot_gate(const World& w, Reports& rep)
{
  for (const auto& [s, rec] : w.monitor.ledger().sandboxes)
    {
      if (not w.keys.contains(rec.app_id))
        {
          rep.add(InvariantId::BootGate, to_string(s) + " runs unregistered app " + rec.app_id);
          continue;
        }
      const std::uint64_t d = w.keys.record(rec.app_id).digest;
      if (not rec.verified or rec.verified_digest != d or rec.running_digest != d)
        rep.add(InvariantId::BootGate, to_string(s) + " runs an image that did not verify as "
                + rec.app_id);
    }
}


void
check_sanity(const World& w, Reports& rep)
{
  for (const Tlb& t : w.machine.tlbs())
    for (const TlbEntry& e : t.entries())
      if (not may_touch(w, e.covered(), e.context))
        rep.add(InvariantId::Sanity, "core " + std::to_string(index(e.core)) + " TLB keeps "
                + to_string(e.context) + " entry for " + to_string(e.covered()));

  const Cache& cache = w.machine.cache();
  for (const auto& [pa, line] : cache.lines())
    if (line.valid and not may_touch(w, {pa, pa + cache.line_bytes()}, line.fill_owner))
      rep.add(InvariantId::Sanity, "cache line " + hex64(pa) + " filled by "
              + to_string(line.fill_owner) + " survives reassignment");
}


void
check_cap(const World& w, Reports& rep)
{
  const std::size_t n = w.monitor.ledger().sandboxes.size();
  const std::size_t cap = w.machine.cores().size() - 1;
  if (n > cap)
    rep.add(InvariantId::Cap, std::to_string(n) + " sandboxes exceed the cap of "
            + std::to_string(cap));
}


std::optional<DevId>
attack_device(const World& w)
{
  const auto& ps = w.machine.config().peripherals;
  for (const auto& p : ps)
    if (p.kind == DeviceKind::Wifi and p.dma_capable)
      return p.id;
  for (const auto& p : ps)
    if (p.dma_capable)
      return p.id;
  return std::nullopt;
}


Bytes
attack_payload()
{
  Bytes b(4096);
  for (std::size_t i = 0; i < b.size(); ++i)
    b[i] = std::uint8_t((i * 131 + 7) & 0xff);
  return b;
}


ContextId
spawn(World& w, bool tamper = false, std::optional<CoreId> force = std::nullopt)
{
  if (not w.keys.contains(kAttackApp))
    register_app(w, kAttackApp, attack_payload());
  Quota q = w.platform.default_quota;
  q.max_memory = std::max(q.max_memory,
                          w.platform.sandbox_base_bytes + 4 * w.platform.attach_granule);
  CreateRequest req{"", kAttackApp, q, std::nullopt, tamper, force};
  return create_sandbox(w, req, Workload::idle());
}


/// Region owned by victim that ROS claims for requester: the victim's
/// granule bordering the requester when they touch, else its first granule.
PhysRange
overlap_region(const World& w, ContextId requester, ContextId victim)
{
  const ResourceLedger& l = w.monitor.ledger();
  const PhysRange r = *l.interval_of(requester);
  const PhysRange v = *l.interval_of(victim);
  const std::uint64_t g = std::min(w.platform.attach_granule, v.size());
  if (v.end == r.begin)
    return {v.end - g, v.end};
  return {v.begin, v.begin + g};
}


void
touch_blocks(World& w, ContextId ctx, CoreId core, const PhysRange& region)
{
  for (std::uint64_t pa = region.begin; pa < region.end; pa += kBlockBytes)
    if (s2_translate(w.machine, core, pa).hit())
      cache_fill(w.machine, ctx, core, pa);
}


std::optional<ErrorCode>
guarded(const std::function<void()>& f)
{
  try
    {
      f();
      return std::nullopt;
    }
  catch (const LeapError& e)
    {
      return e.code();
    }
}

}  // namespace


std::string_view
to_string(InvariantId id)
{
  switch (id)
    {
    case InvariantId::ExclMem: return "EXCL-MEM";
    case InvariantId::ExclDev: return "EXCL-DEV";
    case InvariantId::ExclCore: return "EXCL-CORE";
    case InvariantId::Contig: return "CONTIG";
    case InvariantId::BootGate: return "BOOT-GATE";
    case InvariantId::Sanity: return "SANITY";
    case InvariantId::Cap: return "CAP";
    }
  return "?";
}


std::vector<ViolationReport>
check_invariants(const World& w)
{
  Reports rep;
  check_excl_mem(w, rep);
  check_excl_dev(w, rep);
  check_excl_core(w, rep);
  check_contig(w, rep);
  check_boot_gate(w, rep);
  check_sanity(w, rep);
  check_cap(w, rep);
  return std::move(rep.out);
}


std::vector<LeakReport>
probe_leaks(const World& w)
{
  std::vector<LeakReport> out;
  const ResourceLedger& l = w.monitor.ledger();
  const MachineConfig& mc = w.machine.config();

  // Translations that reach memory or devices owned by another sandbox.
  for (const Tlb& t : w.machine.tlbs())
    for (const TlbEntry& e : t.entries())
      {
        const PhysRange r = e.covered();
        for (const auto& [s, rec] : l.sandboxes)
          {
            if (s == e.context)
              continue;
            for (const PhysRange& piece : l.ram_of(s))
              if (piece.overlaps(r))
                out.push_back({"stale-tlb", to_string(e.context) + " reaches " + to_string(s)
                               + " RAM via core " + std::to_string(index(e.core)),
                               std::min(piece.end, r.end) - std::max(piece.begin, r.begin)});
            for (DevId d : l.devices_of(s))
              if (mc.peripherals.at(index(d)).mmio.overlaps(r))
                out.push_back({"stale-tlb", to_string(e.context) + " reaches "
                               + mc.peripherals.at(index(d)).name + " held by " + to_string(s),
                               kPageBytes});
          }
      }

  // Table mappings of one context over another sandbox's resources.
  for (const auto& [ctx, t] : w.machine.tables())
    for (const auto& [s, rec] : l.sandboxes)
      {
        if (s == ctx)
          continue;
        for (const PhysRange& piece : l.ram_of(s))
          if (t.any_mapped(piece))
            out.push_back({"stage-2", to_string(ctx) + " maps RAM of " + to_string(s),
                           piece.size()});
        for (DevId d : l.devices_of(s))
          if (t.any_mapped(mc.peripherals.at(index(d)).mmio))
            out.push_back({"stage-2", to_string(ctx) + " maps a device of " + to_string(s),
                           kPageBytes});
      }

  // DMA from any device into a sandbox that does not own it.
  for (const auto& p : mc.peripherals)
    {
      if (not p.dma_capable)
        continue;
      const ContextId owner = l.dev_owner.at(p.id);
      for (const auto& [s, rec] : l.sandboxes)
        {
          if (s == owner)
            continue;
          const auto iv = l.interval_of(s);
          if (iv and w.monitor.dma_permitted(p.id, iv->begin))
            out.push_back({"dma", p.name + " (" + to_string(owner) + ") can DMA into "
                           + to_string(s), kPageBytes});
        }
    }
  return out;
}


std::string_view
to_string(AttackKind k)
{
  switch (k)
    {
    case AttackKind::MaliciousImageSwap: return "MaliciousImageSwap";
    case AttackKind::OverlappingMemoryConfig: return "OverlappingMemoryConfig";
    case AttackKind::DoubleCoreAlloc: return "DoubleCoreAlloc";
    case AttackKind::IoEavesdrop: return "IoEavesdrop";
    case AttackKind::CacheDirectAttack: return "CacheDirectAttack";
    case AttackKind::DmaBypass: return "DmaBypass";
    case AttackKind::StaleTlbRead: return "StaleTlbRead";
    }
  return "?";
}


AttackKind
parse_attack_kind(std::string_view name)
{
  for (AttackKind k : all_attacks())
    if (to_string(k) == name)
      return k;
  throw LeapError(ErrorCode::ValidationError, "unknown attack '" + std::string(name) + "'");
}


const std::vector<AttackKind>&
all_attacks()
{
  static const std::vector<AttackKind> all = {
    AttackKind::MaliciousImageSwap, AttackKind::OverlappingMemoryConfig,
    AttackKind::DoubleCoreAlloc, AttackKind::IoEavesdrop, AttackKind::CacheDirectAttack,
    AttackKind::DmaBypass, AttackKind::StaleTlbRead,
  };
  return all;
}


std::string_view
expected_mechanism(AttackKind k)
{
  switch (k)
    {
    case AttackKind::MaliciousImageSwap: return "integrity";
    case AttackKind::OverlappingMemoryConfig: return "legality check";
    case AttackKind::DoubleCoreAlloc: return "legality check";
    case AttackKind::IoEavesdrop: return "stage-2";
    case AttackKind::CacheDirectAttack: return "sanitize";
    case AttackKind::DmaBypass: return "SMMU";
    case AttackKind::StaleTlbRead: return "stage-2";
    }
  return "?";
}


AttackOutcome
run_attack(World& w, AttackKind kind)
{
  AttackOutcome out;
  out.kind = kind;
  Engine& e = w.engine;
  const std::string name(to_string(kind));
  e.record("adversary", "attack_begin", {{"attack", name}});

  bool fired = false;          // the expected defense rejected or faulted
  std::vector<ContextId> spawned;
  auto setup_fail = [&](const LeapError& err) {
    e.record("adversary", "attack_setup", {{"attack", name}}, "rejected", to_string(err.code()));
    throw LeapError(ErrorCode::ValidationError, "cannot stage " + name + ": " + err.what());
  };
  auto victim = [&](bool tamper = false) {
    try
      {
        spawned.push_back(spawn(w, tamper));
      }
    catch (const LeapError& err)
      {
        setup_fail(err);
      }
    return spawned.back();
  };
  const CoreId ros_core{0};

  switch (kind)
    {
    case AttackKind::MaliciousImageSwap:
      {
        if (not w.keys.contains(kAttackApp))
          register_app(w, kAttackApp, attack_payload());
        try
          {
            spawned.push_back(spawn(w, true));
            out.detail = "modified image booted";
          }
        catch (const LeapError& err)
          {
            if (err.code() != ErrorCode::IntegrityError)
              setup_fail(err);
            fired = true;
            out.detail = "image rejected before boot";
          }
        break;
      }

    case AttackKind::OverlappingMemoryConfig:
      {
        const ContextId v = victim();
        const ContextId r = victim();
        const PhysRange region = overlap_region(w, r, v);
        out.detail = "requested " + to_string(region) + " of " + to_string(v) + " for "
          + to_string(r);
        const auto code = guarded([&] { w.monitor.attach_memory(w.machine, e, r, region); });
        if (code)
          fired = true;
        else
          out.leaked_bytes = region.size();
        break;
      }

    case AttackKind::DoubleCoreAlloc:
      {
        const ContextId v = victim();
        const CoreId c = w.runtime(v).boot_core;
        out.detail = "second launch on core " + std::to_string(index(c));
        try
          {
            spawned.push_back(spawn(w, false, c));
          }
        catch (const LeapError& err)
          {
            if (err.code() != ErrorCode::ResourceBusy and err.code() != ErrorCode::NotOwner)
              setup_fail(err);
            fired = true;
          }
        break;
      }

    case AttackKind::IoEavesdrop:
      {
        const auto dev = attack_device(w);
        if (not dev)
          setup_fail(LeapError(ErrorCode::ConfigError, "no DMA-capable device"));
        const ContextId v = victim();
        try
          {
            request_peripheral(w, v, *dev);
          }
        catch (const LeapError& err)
          {
            setup_fail(err);
          }
        const PhysRange mmio = w.machine.peripheral(*dev).mmio;
        const auto t = s2_translate(w.machine, ros_core, mmio.begin);
        out.detail = "ROS read of " + w.machine.peripheral(*dev).name + " MMIO";
        if (t.hit())
          out.leaked_bytes = kPageBytes;
        else
          fired = true;
        break;
      }

    case AttackKind::CacheDirectAttack:
      {
        const ContextId v = victim();
        const auto iv = w.monitor.ledger().interval_of(v);
        CmaPool dry = w.ros.cma;
        PhysRange predicted;
        try
          {
            predicted = dry.alloc(w.platform.attach_granule, v, iv);
          }
        catch (const LeapError& err)
          {
            setup_fail(err);
          }
        // ROS primes translations and lines over the region it will hand out.
        touch_blocks(w, ContextId::Ros, ros_core, predicted);
        PhysRange region;
        try
          {
            region = attach_memory(w, v, w.platform.attach_granule);
          }
        catch (const LeapError& err)
          {
            setup_fail(err);
          }
        touch_blocks(w, v, w.runtime(v).boot_core, region);
        std::uint64_t leaked = 0;
        for (std::uint64_t pa = region.begin; pa < region.end; pa += kBlockBytes)
          if (s2_translate(w.machine, ros_core, pa).hit())
            {
              const auto line = cache_probe(w.machine, pa);
              leaked += line and line->fill_owner == v ? w.machine.cache().line_bytes()
                                                        : kBlockBytes;
            }
        out.detail = "ROS re-read of " + to_string(region) + " after attach";
        out.leaked_bytes = leaked;
        fired = leaked == 0;
        break;
      }

    case AttackKind::DmaBypass:
      {
        const auto dev = attack_device(w);
        if (not dev)
          setup_fail(LeapError(ErrorCode::ConfigError, "no DMA-capable device"));
        const ContextId v = victim();
        const std::uint64_t target = w.monitor.ledger().interval_of(v)->begin;
        out.detail = w.machine.peripheral(*dev).name + " DMA into " + to_string(v);
        if (w.monitor.dma_permitted(*dev, target))
          out.leaked_bytes = kPageBytes;
        else
          fired = true;
        break;
      }

    case AttackKind::StaleTlbRead:
      {
        const auto dev = attack_device(w);
        if (not dev)
          setup_fail(LeapError(ErrorCode::ConfigError, "no DMA-capable device"));
        const PhysRange mmio = w.machine.peripheral(*dev).mmio;
        s2_translate(w.machine, ros_core, mmio.begin);   // warm the TLB
        const ContextId v = victim();
        try
          {
            request_peripheral(w, v, *dev);
          }
        catch (const LeapError& err)
          {
            setup_fail(err);
          }
        out.detail = "ROS read of " + w.machine.peripheral(*dev).name + " through a warm TLB";
        if (s2_translate(w.machine, ros_core, mmio.begin).hit())
          out.leaked_bytes = kPageBytes;
        else
          fired = true;
        break;
      }
    }

  out.violations = check_invariants(w);
  for (auto& v : out.violations)
    v.event = "attack " + name;
  out.blocked = fired and out.leaked_bytes == 0;
  out.mechanism = out.blocked ? std::string(expected_mechanism(kind)) : "none";
  e.record("adversary", "attack", {{"attack", name}, {"leaked_bytes", out.leaked_bytes},
                                   {"violations", out.violations.size()}},
           out.blocked ? "blocked" : "breached", out.mechanism);

  if (out.blocked and out.violations.empty())
    for (ContextId s : spawned)
      if (w.runtimes.count(s))
        terminate(w, s);
  return out;
}


// Exploration.

namespace
{

constexpr std::array<StepOp, 14> kAllOps = {
  StepOp::Create, StepOp::CreateTampered, StepOp::Attach, StepOp::AttachOverlap,
  StepOp::Detach, StepOp::CoreInc, StepOp::CoreDec, StepOp::CoreSteal, StepOp::Request,
  StepOp::Release, StepOp::Terminate, StepOp::SandboxTouch, StepOp::RosTouchAdjacent,
  StepOp::RosTouchDevice,
};

const char* kExploreApp = "app";

}  // namespace


std::string_view
to_string(StepOp op)
{
  switch (op)
    {
    case StepOp::Create: return "create";
    case StepOp::CreateTampered: return "create_tampered";
    case StepOp::Attach: return "attach";
    case StepOp::AttachOverlap: return "attach_overlap";
    case StepOp::Detach: return "detach";
    case StepOp::CoreInc: return "core_inc";
    case StepOp::CoreDec: return "core_dec";
    case StepOp::CoreSteal: return "core_steal";
    case StepOp::Request: return "request";
    case StepOp::Release: return "release";
    case StepOp::Terminate: return "terminate";
    case StepOp::SandboxTouch: return "sandbox_touch";
    case StepOp::RosTouchAdjacent: return "ros_touch_adjacent";
    case StepOp::RosTouchDevice: return "ros_touch_device";
    }
  return "?";
}


bool
step_takes_slot(StepOp op)
{
  return op != StepOp::Create and op != StepOp::CreateTampered and op != StepOp::RosTouchDevice;
}


std::string
to_string(const Step& s)
{
  std::string out(to_string(s.op));
  if (step_takes_slot(s.op))
    out += "(sb" + std::to_string(s.slot) + ")";
  return out;
}


Step
parse_step(std::string_view text)
{
  auto fail = [&] {
    throw LeapError(ErrorCode::ParseError, "bad step '" + std::string(text) + "'");
  };
  std::string_view name = text;
  std::uint32_t slot = 0;
  const auto open = text.find('(');
  if (open != std::string_view::npos)
    {
      name = text.substr(0, open);
      if (text.size() < open + 5 or text.substr(open, 3) != "(sb" or text.back() != ')')
        fail();
      const std::string_view num = text.substr(open + 3, text.size() - open - 4);
      auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), slot);
      if (ec != std::errc() or p != num.data() + num.size() or slot == 0)
        fail();
    }
  for (StepOp op : kAllOps)
    if (to_string(op) == name)
      {
        if (step_takes_slot(op) != (open != std::string_view::npos))
          fail();
        return Step{op, slot};
      }
  fail();
  return {};
}


std::vector<Step>
candidate_steps(const World& w, const std::set<StepOp>& alphabet, std::uint32_t max_sandboxes)
{
  auto allowed = [&](StepOp op) { return alphabet.empty() or alphabet.count(op) != 0; };
  std::vector<Step> out;
  const std::size_t live = w.runtimes.size();
  // One create beyond the bound lets the CAP rejection itself be explored.
  if (live <= max_sandboxes)
    for (StepOp op : {StepOp::Create, StepOp::CreateTampered})
      if (allowed(op))
        out.push_back({op, 0});
  for (const auto& [id, rt] : w.runtimes)
    for (StepOp op : kAllOps)
      {
        if (not step_takes_slot(op) or not allowed(op))
          continue;
        if ((op == StepOp::AttachOverlap or op == StepOp::CoreSteal) and live < 2)
          continue;
        out.push_back({op, index(id)});
      }
  if (allowed(StepOp::RosTouchDevice) and not w.machine.config().peripherals.empty())
    out.push_back({StepOp::RosTouchDevice, 0});
  return out;
}


std::optional<ErrorCode>
apply_step(World& w, const Step& s)
{
  if (w.engine.trace().mode() != Trace::Mode::Off)
    w.engine.record("explore", "step", {{"step", to_string(s)}});

  const ContextId sb = sandbox_ctx(s.slot);
  const CoreId ros_core{0};
  const DevId dev{0};
  auto other = [&]() -> std::optional<ContextId> {
    for (const auto& [id, rt] : w.runtimes)
      if (id != sb)
        return id;
    return std::nullopt;
  };

  std::optional<ErrorCode> result;
  try
    {
      if (step_takes_slot(s.op) and not w.runtimes.count(sb))
        throw LeapError(ErrorCode::BadState, to_string(sb) + " is not live");

      switch (s.op)
        {
        case StepOp::Create:
        case StepOp::CreateTampered:
          {
            if (not w.keys.contains(kExploreApp))
              throw LeapError(ErrorCode::UnknownApp, "explore app missing");
            CreateRequest req{"", kExploreApp, w.platform.default_quota, std::nullopt,
                              s.op == StepOp::CreateTampered, std::nullopt};
            create_sandbox(w, req, Workload::idle());
            break;
          }
        case StepOp::Attach:
          attach_memory(w, sb, w.platform.attach_granule);
          break;
        case StepOp::AttachOverlap:
          {
            const auto v = other();
            if (not v)
              throw LeapError(ErrorCode::BadState, "no victim");
            w.monitor.attach_memory(w.machine, w.engine, sb, overlap_region(w, sb, *v));
            break;
          }
        case StepOp::Detach:
          detach_memory(w, sb, w.platform.attach_granule);
          break;
        case StepOp::CoreInc:
          increase_core(w, sb);
          break;
        case StepOp::CoreDec:
          {
            const SandboxRuntime& rt = w.runtime(sb);
            CoreId c = rt.boot_core;
            for (CoreId x : rt.cores)
              if (x != rt.boot_core)
                c = x;
            release_core(w, sb, c);
            break;
          }
        case StepOp::CoreSteal:
          {
            const auto v = other();
            if (not v)
              throw LeapError(ErrorCode::BadState, "no victim");
            w.monitor.transfer_core(w.machine, w.engine, w.runtime(*v).boot_core,
                                    ContextId::Ros, sb, w.platform.optimized);
            break;
          }
        case StepOp::Request:
          request_peripheral(w, sb, dev);
          break;
        case StepOp::Release:
          release_peripheral(w, sb, dev);
          break;
        case StepOp::Terminate:
          terminate(w, sb);
          break;
        case StepOp::SandboxTouch:
          {
            const CoreId core = w.runtime(sb).boot_core;
            for (const auto& [b, x] : w.machine.tables(sb).extents())
              if (x.attr == S2Attr::Normal)
                touch_blocks(w, sb, core, {b, x.end});
            break;
          }
        case StepOp::RosTouchAdjacent:
          {
            const auto iv = w.monitor.ledger().interval_of(sb);
            if (not iv)
              throw LeapError(ErrorCode::BadState, "no interval");
            // Inside the sandbox first (must fault), then the frame above or below.
            touch_blocks(w, ContextId::Ros, ros_core, {iv->begin, iv->begin + kBlockBytes});
            const PhysRange above{iv->end, iv->end + kBlockBytes};
            const ResourceLedger& l = w.monitor.ledger();
            if (in_ram(l, above))
              touch_blocks(w, ContextId::Ros, ros_core, above);
            else if (iv->begin >= kBlockBytes and in_ram(l, {iv->begin - kBlockBytes, iv->begin}))
              touch_blocks(w, ContextId::Ros, ros_core, {iv->begin - kBlockBytes, iv->begin});
            break;
          }
        case StepOp::RosTouchDevice:
          s2_translate(w.machine, ros_core, w.machine.peripheral(dev).mmio.begin);
          break;
        }
    }
  catch (const LeapError& e)
    {
      result = e.code();
    }
  return result;
}


BudgetExceeded::BudgetExceeded(ExploreResult partial, std::size_t budget)
  : LeapError(ErrorCode::BudgetExceeded, "state budget of " + std::to_string(budget)
              + " exceeded after " + std::to_string(partial.states_visited) + " states"),
    partial_(std::move(partial))
{ }


World
explore_root(const ExploreConfig& cfg, Trace::Mode mode)
{
  World w = build_world(cfg.machine, cfg.platform, cfg.flags, CostTable::defaults(), mode);
  register_app(w, kExploreApp, attack_payload());
  return w;
}


namespace
{

struct DigestHash
{
  std::size_t operator()(const StateDigest& d) const { return std::size_t(d.lo ^ (d.hi << 1)); }
};

std::string
failure_signature(const Counterexample& c)
{
  std::set<std::string> keys;
  for (const auto& v : c.violations)
    keys.insert(std::string(to_string(v.id)));
  for (const auto& l : c.leaks)
    keys.insert("leak:" + l.kind);
  std::string s;
  for (const auto& k : keys)
    s += k + ";";
  return s;
}

ExploreResult
run_explore(const ExploreConfig& cfg, bool parallel)
{
  struct Node
  {
    std::int64_t parent;
    Step step;
  };
  struct Succ
  {
    StateDigest digest;
    Step step;
    bool duplicate = false;
    std::vector<ViolationReport> violations;
    std::vector<LeakReport> leaks;
  };

  ExploreResult res;
  std::vector<Node> nodes;
  std::unordered_set<StateDigest, DigestHash> seen;
  std::set<std::string> signatures;

  World root = explore_root(cfg);
  seen.insert(state_digest(root));
  nodes.push_back({-1, {}});
  res.states_visited = 1;
  res.level_sizes.push_back(1);

  auto path_of = [&](std::int64_t n) {
    std::vector<Step> steps;
    for (; nodes[n].parent >= 0; n = nodes[n].parent)
      steps.push_back(nodes[n].step);
    std::reverse(steps.begin(), steps.end());
    return steps;
  };

  std::vector<std::pair<World, std::int64_t>> frontier;
  frontier.emplace_back(std::move(root), 0);

  for (std::uint32_t d = 1; d <= cfg.depth and not frontier.empty(); ++d)
    {
      // Expand every frontier state; the shared set is only read here.
      std::vector<std::vector<Succ>> out(frontier.size());
      const auto n = static_cast<std::int64_t>(frontier.size());
#pragma omp parallel for schedule(dynamic, 4) if (parallel)
      for (std::int64_t i = 0; i < n; ++i)
        {
          const World& src = frontier[i].first;
          for (const Step& st : candidate_steps(src, cfg.alphabet, cfg.max_sandboxes))
            {
              World next = src;
              apply_step(next, st);
              Succ s;
              s.digest = state_digest(next);
              s.step = st;
              s.duplicate = seen.count(s.digest) != 0;
              if (not s.duplicate)
                {
                  s.violations = check_invariants(next);
                  s.leaks = probe_leaks(next);
                }
              out[i].push_back(std::move(s));
            }
        }

      // Merge in frontier order so the result does not depend on threads.
      std::vector<std::pair<std::size_t, std::int64_t>> expand;   // (frontier idx, node)
      std::vector<Step> expand_steps;
      std::size_t fresh = 0;
      bool found = false;
      for (std::size_t i = 0; i < out.size(); ++i)
        for (Succ& s : out[i])
          {
            ++res.transitions;
            if (s.duplicate or not seen.insert(s.digest).second)
              continue;
            ++fresh;
            ++res.states_visited;
            nodes.push_back({frontier[i].second, s.step});
            const auto id = static_cast<std::int64_t>(nodes.size() - 1);
            if (not s.violations.empty() or not s.leaks.empty())
              {
                ++res.violating_states;
                found = true;
                Counterexample c{path_of(id), std::move(s.violations), std::move(s.leaks)};
                if (res.counterexamples.size() < cfg.max_counterexamples
                    and signatures.insert(failure_signature(c)).second)
                  res.counterexamples.push_back(std::move(c));
                continue;
              }
            expand.emplace_back(i, id);
            expand_steps.push_back(s.step);
          }
      if (fresh > 0)
        {
          res.depth_reached = d;
          res.level_sizes.push_back(fresh);
        }
      if (res.states_visited > cfg.budget)
        throw BudgetExceeded(std::move(res), cfg.budget);
      if (found and cfg.stop_at_first)
        break;
      if (d == cfg.depth)
        break;

      std::vector<std::pair<World, std::int64_t>> next(expand.size());
      const auto m = static_cast<std::int64_t>(expand.size());
#pragma omp parallel for schedule(dynamic, 4) if (parallel)
      for (std::int64_t k = 0; k < m; ++k)
        {
          World wk = frontier[expand[k].first].first;
          apply_step(wk, expand_steps[k]);
          next[k] = {std::move(wk), expand[k].second};
        }
      frontier = std::move(next);
    }
  return res;
}

}  // namespace


ExploreResult
explore(const ExploreConfig& cfg)
{
  return run_explore(cfg, true);
}


ExploreResult
explore_serial(const ExploreConfig& cfg)
{
  return run_explore(cfg, false);
}


Counterexample
replay_steps(const ExploreConfig& cfg, const std::vector<Step>& steps,
             std::vector<std::string>* trace_lines)
{
  World w = explore_root(cfg, trace_lines ? Trace::Mode::Full : Trace::Mode::Off);
  for (const Step& s : steps)
    apply_step(w, s);
  Counterexample c{steps, check_invariants(w), probe_leaks(w)};
  if (trace_lines)
    {
      for (const auto& v : c.violations)
        w.engine.record("checker", "violation", {{"detail", v.detail}}, "violation",
                        to_string(v.id));
      for (const auto& l : c.leaks)
        w.engine.record("checker", "leak", {{"detail", l.detail}, {"bytes", l.bytes}},
                        "violation", l.kind);
      *trace_lines = w.engine.trace().lines();
    }
  return c;
}


bool
same_failure(const Counterexample& a, const Counterexample& b)
{
  return failure_signature(a) == failure_signature(b);
}

}  // namespace leapsim
