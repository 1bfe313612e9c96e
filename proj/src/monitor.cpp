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

#include "leapsim/monitor.hpp"

#include <algorithm>
#include <iterator>

namespace leapsim
{

namespace
{

constexpr std::string_view kActor = "monitor";

// Memory adjustment cost is measured per 16MB block.
constexpr std::uint64_t kMemCostBlock = 16 * MiB;

std::uint64_t
mem_blocks(const PhysRange& r)
{
  return std::max<std::uint64_t>(1, (r.size() + kMemCostBlock - 1) / kMemCostBlock);
}


// Unmap only the mapped parts of range. Used where a disabled legality
// check lets the monitor act on ROS-supplied ranges it would otherwise
// reject.
void
unmap_present(Stage2TableSet& set, const PhysRange& range)
{
  std::vector<PhysRange> parts;
  for (const auto& [b, e] : set.extents())
    {
      PhysRange x{std::max(b, range.begin), std::min(e.end, range.end)};
      if (not x.empty())
        parts.push_back(x);
    }
  for (const auto& p : parts)
    set.unmap(p);
}


void
map_absent(Stage2TableSet& set, const PhysRange& range, S2Attr attr)
{
  std::uint64_t cursor = range.begin;
  std::vector<PhysRange> gaps;
  for (const auto& [b, e] : set.extents())
    {
      if (e.end <= cursor or b >= range.end)
        continue;
      if (b > cursor)
        gaps.push_back({cursor, b});
      cursor = std::max(cursor, e.end);
    }
  if (cursor < range.end)
    gaps.push_back({cursor, range.end});
  for (const auto& g : gaps)
    set.map(g, attr);
}


Json
range_json(const PhysRange& r)
{
  return Json::array({r.begin, r.end});
}

}  // namespace


std::string_view
to_string(SandboxState s)
{
  switch (s)
    {
    case SandboxState::Created:     return "created";
    case SandboxState::Verifying:   return "verifying";
    case SandboxState::Booting:     return "booting";
    case SandboxState::Running:     return "running";
    case SandboxState::Terminating: return "terminating";
    case SandboxState::Dead:        return "dead";
    }
  return "?";
}


std::string_view
to_string(RejectReason r)
{
  switch (r)
    {
    case RejectReason::Overlap:       return "Overlap";
    case RejectReason::NotContiguous: return "NotContiguous";
    case RejectReason::QuotaExceeded: return "QuotaExceeded";
    case RejectReason::NotFree:       return "NotFree";
    case RejectReason::BadAlignment:  return "BadAlignment";
    }
  return "?";
}


std::string
AdjustVerdict::describe() const
{
  if (approved())
    return "Approved";
  return "Rejected(" + std::string(to_string(*rejected)) + ")";
}


ContextId
ResourceLedger::ram_owner_at(std::uint64_t pa) const
{
  auto it = ram_owner.upper_bound(pa);
  if (it == ram_owner.begin())
    return ContextId::Ros;
  --it;
  return pa < it->second.end ? it->second.owner : ContextId::Ros;
}


std::vector<PhysRange>
ResourceLedger::ram_of(ContextId ctx) const
{
  std::vector<PhysRange> out;
  for (const auto& [b, p] : ram_owner)
    if (p.owner == ctx)
      {
        if (not out.empty() and out.back().end == b)
          out.back().end = p.end;
        else
          out.push_back({b, p.end});
      }
  return out;
}


std::optional<PhysRange>
ResourceLedger::interval_of(ContextId ctx) const
{
  auto pieces = ram_of(ctx);
  if (pieces.empty())
    return std::nullopt;
  return PhysRange{pieces.front().begin, pieces.back().end};
}


void
ResourceLedger::assign_ram(const PhysRange& range, ContextId owner)
{
  // Split pieces straddling the range boundaries, then erase the interior.
  auto split_at = [&](std::uint64_t at) {
    auto it = ram_owner.upper_bound(at);
    if (it == ram_owner.begin())
      return;
    --it;
    if (it->first < at and at < it->second.end)
      {
        RamPiece tail{it->second.end, it->second.owner};
        it->second.end = at;
        ram_owner.emplace(at, tail);
      }
  };
  split_at(range.begin);
  split_at(range.end);
  ram_owner.erase(ram_owner.lower_bound(range.begin), ram_owner.lower_bound(range.end));
  if (owner == ContextId::Ros)
    return;

  auto it = ram_owner.emplace(range.begin, RamPiece{range.end, owner}).first;
  if (it != ram_owner.begin())
    {
      auto prev = std::prev(it);
      if (prev->second.end == it->first and prev->second.owner == owner)
        {
          prev->second.end = it->second.end;
          ram_owner.erase(it);
          it = prev;
        }
    }
  auto next = std::next(it);
  if (next != ram_owner.end() and next->first == it->second.end and next->second.owner == owner)
    {
      it->second.end = next->second.end;
      ram_owner.erase(next);
    }
}


bool
ResourceLedger::is_ram(const PhysRange& range) const
{
  for (const auto& f : ram_frames)
    if (f.contains(range))
      return true;
  return false;
}


std::vector<CoreId>
ResourceLedger::cores_of(ContextId ctx) const
{
  std::vector<CoreId> out;
  for (const auto& [c, o] : core_owner)
    if (o.is(ctx))
      out.push_back(c);
  return out;
}


std::vector<DevId>
ResourceLedger::devices_of(ContextId ctx) const
{
  std::vector<DevId> out;
  for (const auto& [d, o] : dev_owner)
    if (o == ctx)
      out.push_back(d);
  return out;
}


AdjustVerdict
verify_region_legality(const ResourceLedger& ledger, ContextId sandbox,
                       const PhysRange& region, AdjustOp op)
{
  auto reject = [](RejectReason r) { return AdjustVerdict{r}; };

  if (region.empty() or not region.aligned(kBlockBytes))
    return reject(RejectReason::BadAlignment);
  auto rec = ledger.sandboxes.find(sandbox);
  auto current = ledger.interval_of(sandbox);
  if (rec == ledger.sandboxes.end() or not current)
    return reject(RejectReason::NotFree);

  if (op == AdjustOp::Attach)
    {
      for (const auto& [b, p] : ledger.ram_owner)
        if (p.owner != sandbox and region.overlaps({b, p.end}))
          return reject(RejectReason::Overlap);
      if (region.overlaps(*current) or not ledger.is_ram(region))
        return reject(RejectReason::NotFree);
      for (const auto& [ctx, ch] : ledger.shared_channels)
        if (region.overlaps(ch))
          return reject(RejectReason::NotFree);
      if (not region.adjoins(*current))
        return reject(RejectReason::NotContiguous);
      if (current->size() + region.size() > rec->second.quota.max_memory)
        return reject(RejectReason::QuotaExceeded);
      return {};
    }

  if (not current->contains(region))
    return reject(RejectReason::NotFree);
  if (region.begin != current->begin and region.end != current->end)
    return reject(RejectReason::NotContiguous);
  if (current->size() - region.size() < rec->second.base_bytes)
    return reject(RejectReason::QuotaExceeded);
  return {};
}


Monitor::Monitor(const Machine& machine, DefenseFlags flags)
  : flags_(flags)
{
  for (const auto& c : machine.cores())
    ledger_.core_owner[c.id] = CoreOwner{};
  for (const auto& p : machine.config().peripherals)
    ledger_.dev_owner[p.id] = ContextId::Ros;
  ledger_.ram_frames = machine.ram_ranges();
}


std::optional<ContextId>
Monitor::next_sandbox_id() const
{
  for (std::uint32_t i = 1;; ++i)
    if (not ledger_.sandboxes.count(sandbox_ctx(i)))
      return sandbox_ctx(i);
}


void
Monitor::check_launch(const Machine& machine, const LaunchSpec& spec) const
{
  if (spec.ram.empty() or not spec.ram.aligned(kBlockBytes))
    throw LeapError(ErrorCode::AlignmentError, "sandbox RAM " + to_string(spec.ram));
  if (spec.channel.empty() or not spec.channel.aligned(kBlockBytes))
    throw LeapError(ErrorCode::AlignmentError, "shared channel " + to_string(spec.channel));
  if (flags_.no_legality_check)
    return;

  auto busy = [](const std::string& what) { throw LeapError(ErrorCode::ResourceBusy, what); };

  if (index(spec.core) >= machine.cores().size())
    busy("no such core");
  if (index(spec.core) == 0)
    busy("core 0 is the ROS boot core");
  if (not ledger_.core_owner.at(spec.core).is(ContextId::Ros))
    busy("core " + std::to_string(index(spec.core)) + " is already occupied");

  if (not ledger_.is_ram(spec.ram) or not ledger_.is_ram(spec.channel))
    busy("launch ranges are not RAM");
  if (spec.ram.overlaps(spec.channel))
    busy("channel overlaps sandbox RAM");
  for (const auto& [b, p] : ledger_.ram_owner)
    if (spec.ram.overlaps({b, p.end}) or spec.channel.overlaps({b, p.end}))
      busy("launch ranges overlap memory owned by " + to_string(p.owner));
  for (const auto& [ctx, ch] : ledger_.shared_channels)
    if (spec.ram.overlaps(ch) or spec.channel.overlaps(ch))
      busy("launch ranges overlap the channel of " + to_string(ctx));

  const auto& ros = machine.tables(ContextId::Ros);
  if (not ros.fully_mapped(spec.ram, S2Attr::Normal)
      or not ros.fully_mapped(spec.channel, S2Attr::Normal))
    busy("launch ranges are not held by ROS");
}


ContextId
Monitor::lock_and_launch(Machine& machine, const KeyStore& keys, Engine& engine,
                         const LaunchSpec& spec)
{
  const std::size_t cap = machine.cores().size() - 1;
  if (ledger_.sandboxes.size() + 1 > cap)
    {
      engine.record(kActor, "lock_and_launch", {{"app", spec.app_id}}, "rejected",
                    "TooManySandboxes");
      throw LeapError(ErrorCode::TooManySandboxes,
                      "at most " + std::to_string(cap) + " sandboxes on this machine");
    }
  try
    {
      check_launch(machine, spec);
    }
  catch (const LeapError& e)
    {
      engine.record(kActor, "lock_and_launch", {{"app", spec.app_id}}, "rejected",
                    to_string(e.code()));
      throw;
    }

  const ContextId id = *next_sandbox_id();
  const std::string actor(kActor);
  Stage2TableSet& ros = machine.tables(ContextId::Ros);

  // Isolate the staged image from ROS before the secure world looks at it.
  if (flags_.no_legality_check)
    unmap_present(ros, spec.ram);
  else
    ros.unmap(spec.ram);
  engine.record(kActor, "isolate_image", {{"sandbox", to_string(id)}, {"ram", range_json(spec.ram)}});

  SandboxRecord rec;
  rec.id = id;
  rec.app_id = spec.app_id;
  rec.boot_core = spec.core;
  rec.base_bytes = spec.ram.size();
  rec.quota = spec.quota;

  if (flags_.no_verify)
    {
      rec.running_digest = image_digest(keys.decrypt(spec.image));
      engine.record(kActor, "verify_image", {{"sandbox", to_string(id)}}, "skipped", "no_verify");
    }
  else
    {
      try
        {
          Bytes plain = keys.verify_and_decrypt(spec.image);
          rec.verified = true;
          rec.verified_digest = image_digest(plain);
          rec.running_digest = rec.verified_digest;
          engine.record(kActor, "verify_image",
                        {{"sandbox", to_string(id)}, {"digest", hex64(rec.verified_digest)}});
        }
      catch (const LeapError& e)
        {
          map_absent(ros, spec.ram, S2Attr::Normal);
          engine.record(kActor, "verify_image", {{"sandbox", to_string(id)}}, "rejected",
                        to_string(e.code()));
          throw;
        }
    }

  if (not flags_.no_sanitize)
    sanitize(machine, engine, spec.ram, id);

  Stage2TableSet tables(id);
  tables.map(spec.ram, S2Attr::Normal);
  tables.map(spec.channel, S2Attr::SharedChannel);
  machine.tables()[id] = std::move(tables);

  if (flags_.no_legality_check)
    unmap_present(ros, spec.channel);
  else
    ros.unmap(spec.channel);
  map_absent(ros, spec.channel, S2Attr::SharedChannel);

  // Hotplug the core out of ROS and start it in the sandbox context.
  Core& core = machine.core(spec.core);
  const CoreOwner prev = ledger_.core_owner.at(spec.core);
  machine.cache().clean_core(spec.core, prev.ctx);
  core.state = CoreState::RunningSandbox;
  core.running = id;
  core.active_tables = id;
  ledger_.core_owner[spec.core] = CoreOwner{CoreOwner::Kind::Context, id};

  ledger_.assign_ram(spec.ram, id);
  ledger_.shared_channels[id] = spec.channel;
  ledger_.sandboxes[id] = rec;

  engine.record(kActor, "lock_and_launch",
                {{"sandbox", to_string(id)}, {"app", spec.app_id},
                 {"core", index(spec.core)}, {"ram", range_json(spec.ram)},
                 {"channel", range_json(spec.channel)}});
  engine.charge(actor, "boot_ms", {{"sandbox", to_string(id)}});
  return id;
}


void
Monitor::attach_memory(Machine& machine, Engine& engine, ContextId sandbox,
                       const PhysRange& region)
{
  if (not ledger_.sandboxes.count(sandbox))
    throw LeapError(ErrorCode::BadState, to_string(sandbox) + " is not a live sandbox");
  const Json args = {{"sandbox", to_string(sandbox)}, {"region", range_json(region)}};

  if (not flags_.no_legality_check)
    {
      const AdjustVerdict v = verify(sandbox, region, AdjustOp::Attach);
      engine.record(kActor, "verify_region", args, v.approved() ? "approved" : "rejected",
                    v.approved() ? "" : to_string(*v.rejected));
      if (not v.approved())
        throw LeapError(ErrorCode::VerdictError, "attach " + to_string(region) + ": "
                        + v.describe());
      machine.tables(ContextId::Ros).unmap(region);
    }
  else
    {
      if (region.empty() or not region.aligned(kBlockBytes))
        throw LeapError(ErrorCode::AlignmentError, to_string(region));
      unmap_present(machine.tables(ContextId::Ros), region);
    }

  if (not flags_.no_sanitize)
    sanitize(machine, engine, region, sandbox);
  map_absent(machine.tables(sandbox), region, S2Attr::Normal);
  ledger_.assign_ram(region, sandbox);

  engine.record(kActor, "attach_memory", args);
  engine.charge_value(std::string(kActor), "mem_inc_ms",
                      engine.costs().at("mem_inc_ms") * mem_blocks(region),
                      {{"blocks", mem_blocks(region)}});
}


void
Monitor::detach_memory(Machine& machine, Engine& engine, ContextId sandbox,
                       const PhysRange& region)
{
  if (not ledger_.sandboxes.count(sandbox))
    throw LeapError(ErrorCode::BadState, to_string(sandbox) + " is not a live sandbox");
  const Json args = {{"sandbox", to_string(sandbox)}, {"region", range_json(region)}};

  if (not flags_.no_legality_check)
    {
      const AdjustVerdict v = verify(sandbox, region, AdjustOp::Detach);
      engine.record(kActor, "verify_region", args, v.approved() ? "approved" : "rejected",
                    v.approved() ? "" : to_string(*v.rejected));
      if (not v.approved())
        throw LeapError(ErrorCode::VerdictError, "detach " + to_string(region) + ": "
                        + v.describe());
      machine.tables(sandbox).unmap(region);
    }
  else
    {
      if (region.empty() or not region.aligned(kBlockBytes))
        throw LeapError(ErrorCode::AlignmentError, to_string(region));
      unmap_present(machine.tables(sandbox), region);
    }

  if (not flags_.no_sanitize)
    sanitize(machine, engine, region, ContextId::Ros);
  map_absent(machine.tables(ContextId::Ros), region, S2Attr::Normal);
  ledger_.assign_ram(region, ContextId::Ros);

  engine.record(kActor, "detach_memory", args);
  engine.charge_value(std::string(kActor), "mem_dec_ms",
                      engine.costs().at("mem_dec_ms") * mem_blocks(region),
                      {{"blocks", mem_blocks(region)}});
}


void
Monitor::transfer_core(Machine& machine, Engine& engine, CoreId core_id, ContextId from,
                       ContextId to, bool optimized)
{
  const Json args = {{"core", index(core_id)}, {"from", to_string(from)},
                     {"to", to_string(to)}, {"optimized", optimized}};
  auto fail = [&](ErrorCode code, const std::string& msg) {
    engine.record(kActor, "transfer_core", args, "rejected", to_string(code));
    throw LeapError(code, msg);
  };

  if (index(core_id) >= machine.cores().size())
    fail(ErrorCode::NotOwner, "no such core");
  if (from == to)
    fail(ErrorCode::NotOwner, "transfer to the same context");
  if (is_sandbox(to) and not ledger_.sandboxes.count(to))
    fail(ErrorCode::BadState, to_string(to) + " is not a live sandbox");

  if (not flags_.no_legality_check)
    {
      if (not ledger_.core_owner.at(core_id).is(from))
        fail(ErrorCode::NotOwner, "core " + std::to_string(index(core_id)) + " is not owned by "
             + to_string(from));
      if (index(core_id) == 0)
        fail(ErrorCode::LastCoreError, "core 0 is the ROS boot core");
      if (is_sandbox(from))
        {
          const auto& rec = ledger_.sandboxes.at(from);
          if (core_id == rec.boot_core or ledger_.cores_of(from).size() <= 1)
            fail(ErrorCode::LastCoreError, to_string(from) + " must keep its boot core");
        }
      if (is_sandbox(to)
          and ledger_.cores_of(to).size() + 1 > ledger_.sandboxes.at(to).quota.max_cores)
        fail(ErrorCode::QuotaExceeded, to_string(to) + " is at its core quota");
    }

  Core& core = machine.core(core_id);
  const ContextId departing = ledger_.core_owner.at(core_id).ctx;
  const std::size_t cleaned = machine.cache().clean_core(core_id, departing);
  engine.record(kActor, "core_clean", {{"core", index(core_id)}, {"lines", cleaned}});

  if (optimized)
    {
      core.state = CoreState::BusyWait;
      ledger_.core_owner[core_id] = CoreOwner{CoreOwner::Kind::BusyWait, ContextId::Ros};
      engine.record(kActor, "core_busy_wait", {{"core", index(core_id)}});
    }

  core.state = is_sandbox(to) ? CoreState::RunningSandbox : CoreState::RunningRos;
  core.running = to;
  core.active_tables = to;
  ledger_.core_owner[core_id] = CoreOwner{CoreOwner::Kind::Context, to};

  const AdjustDirection dir = is_sandbox(to) ? AdjustDirection::Increase
                                             : AdjustDirection::Decrease;
  engine.record(kActor, "transfer_core", args);
  engine.charge(kActor, CostTable::core_entry(core.klass, dir, optimized),
                {{"core", index(core_id)}});
}


void
Monitor::switch_peripheral(Machine& machine, Engine& engine, DevId dev, ContextId from,
                           ContextId to, bool from_released)
{
  const Json args = {{"dev", machine.peripheral(dev).name}, {"from", to_string(from)},
                     {"to", to_string(to)}};
  auto fail = [&](ErrorCode code, const std::string& msg) {
    engine.record(kActor, "switch_peripheral", args, "rejected", to_string(code));
    throw LeapError(code, msg);
  };

  if (is_sandbox(to) and not ledger_.sandboxes.count(to))
    fail(ErrorCode::BadState, to_string(to) + " is not a live sandbox");
  if (from == to)
    fail(ErrorCode::NotOwner, "switch to the same context");
  if (not flags_.no_legality_check)
    {
      const ContextId owner = ledger_.dev_owner.at(dev);
      if (owner != from)
        {
          if (is_sandbox(owner))
            fail(ErrorCode::DeviceBusy, machine.peripheral(dev).name + " is held by "
                 + to_string(owner));
          fail(ErrorCode::NotOwner, machine.peripheral(dev).name + " is not owned by "
               + to_string(from));
        }
      if (not from_released)
        fail(ErrorCode::DeviceBusy, to_string(from) + " has not released "
             + machine.peripheral(dev).name);
    }

  const PeripheralDesc& p = machine.peripheral(dev);
  auto from_set = machine.tables().find(from);
  if (from_set == machine.tables().end())
    fail(ErrorCode::NotOwner, to_string(from) + " has no table set");
  from_set->second.unmap(p.mmio);
  if (not flags_.no_sanitize)
    tlb_flush_pages(machine, p.mmio);
  machine.tables(to).map(p.mmio, S2Attr::Device);
  ledger_.dev_owner[dev] = to;

  engine.record(kActor, "switch_peripheral", args);
  engine.charge(kActor, CostTable::periph_entry(p.kind, false, is_sandbox(from)),
                {{"dev", p.name}});
  engine.charge(kActor, CostTable::periph_entry(p.kind, true, is_sandbox(to)),
                {{"dev", p.name}});
}


void
Monitor::sanitize(Machine& machine, Engine& engine, const PhysRange& region,
                  ContextId incoming) const
{
  const std::size_t tlb = tlb_flush_range(machine, region);
  const std::size_t lines = machine.cache().invalidate_foreign(region, incoming);
  engine.record(kActor, "sanitize",
                {{"region", range_json(region)}, {"incoming", to_string(incoming)},
                 {"tlb_entries", tlb}, {"cache_lines", lines}});
}


void
Monitor::teardown(Machine& machine, Engine& engine, ContextId sandbox, SandboxState state)
{
  if (state != SandboxState::Terminating or not ledger_.sandboxes.count(sandbox))
    {
      engine.record(kActor, "teardown", {{"sandbox", to_string(sandbox)}}, "rejected",
                    "BadState");
      throw LeapError(ErrorCode::BadState, to_string(sandbox) + " is not terminating");
    }

  for (CoreId c : ledger_.cores_of(sandbox))
    {
      machine.cache().clean_core(c, sandbox);
      Core& core = machine.core(c);
      core.state = CoreState::RunningRos;
      core.running = ContextId::Ros;
      core.active_tables = ContextId::Ros;
      ledger_.core_owner[c] = CoreOwner{};
    }

  Stage2TableSet& own = machine.tables(sandbox);
  Stage2TableSet& ros = machine.tables(ContextId::Ros);
  for (DevId d : ledger_.devices_of(sandbox))
    {
      const PeripheralDesc& p = machine.peripheral(d);
      own.unmap(p.mmio);
      if (not flags_.no_sanitize)
        tlb_flush_pages(machine, p.mmio);
      map_absent(ros, p.mmio, S2Attr::Device);
      ledger_.dev_owner[d] = ContextId::Ros;
    }

  for (const PhysRange& r : ledger_.ram_of(sandbox))
    {
      unmap_present(own, r);
      if (not flags_.no_sanitize)
        sanitize(machine, engine, r, ContextId::Ros);
      map_absent(ros, r, S2Attr::Normal);
      ledger_.assign_ram(r, ContextId::Ros);
    }

  if (auto ch = ledger_.shared_channels.find(sandbox); ch != ledger_.shared_channels.end())
    {
      unmap_present(ros, ch->second);
      if (not flags_.no_sanitize)
        sanitize(machine, engine, ch->second, ContextId::Ros);
      map_absent(ros, ch->second, S2Attr::Normal);
      ledger_.shared_channels.erase(ch);
    }

  if (not flags_.no_sanitize)
    tlb_flush_context(machine, sandbox);
  machine.tables().erase(sandbox);
  ledger_.sandboxes.erase(sandbox);

  engine.record(kActor, "teardown", {{"sandbox", to_string(sandbox)}});
  engine.charge(kActor, "shutdown_ms", {{"sandbox", to_string(sandbox)}});
}


bool
Monitor::dma_permitted(DevId dev, std::uint64_t pa) const
{
  if (flags_.no_smmu)
    return true;
  const ContextId owner = ledger_.dev_owner.at(dev);
  bool ram = false;
  for (const auto& f : ledger_.ram_frames)
    ram = ram or f.contains(pa);
  if (not ram)
    return false;
  // Channels stay ROS-owned in the ledger, so ROS devices reach them too.
  if (ledger_.ram_owner_at(pa) == owner)
    return true;
  auto ch = ledger_.shared_channels.find(owner);
  return ch != ledger_.shared_channels.end() and ch->second.contains(pa);
}

}  // namespace leapsim
