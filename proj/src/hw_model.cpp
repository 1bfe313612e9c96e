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

#include "leapsim/hw_model.hpp"

#include <algorithm>
#include <set>

namespace leapsim
{

std::string_view
to_string(CoreClass c)
{
  return c == CoreClass::Big ? "big" : "little";
}


std::string_view
to_string(CoreState s)
{
  switch (s)
    {
    case CoreState::RunningRos:     return "running_ros";
    case CoreState::RunningSandbox: return "running_sandbox";
    case CoreState::BusyWait:       return "busy_wait";
    case CoreState::Off:            return "off";
    }
  return "?";
}


std::string_view
to_string(DeviceKind k)
{
  switch (k)
    {
    case DeviceKind::Gpu:       return "gpu";
    case DeviceKind::Wifi:      return "wifi";
    case DeviceKind::Bluetooth: return "bluetooth";
    case DeviceKind::Other:     return "other";
    }
  return "?";
}


MachineConfig
default_machine_config()
{
  MachineConfig c;
  c.address_space_bytes = 4 * GiB;
  c.ram_bytes = 3 * GiB + 512 * MiB;
  c.io_window = {3 * GiB + 512 * MiB, 4 * GiB};
  for (std::uint32_t i = 0; i < 8; ++i)
    c.cores.push_back({CoreId{i}, i < 4 ? CoreClass::Little : CoreClass::Big});

  const std::uint64_t io = c.io_window.begin;
  c.peripherals = {
    {DevId{0}, "gpu", DeviceKind::Gpu, {io + 0x0800'0000, io + 0x0801'0000}, true, true, true},
    {DevId{1}, "wifi", DeviceKind::Wifi, {io + 0x0900'0000, io + 0x0900'4000}, true, true, false},
    {DevId{2}, "bt", DeviceKind::Bluetooth, {io + 0x0910'0000, io + 0x0910'2000}, false, true, false},
    {DevId{3}, "usb", DeviceKind::Other, {io + 0x0a00'0000, io + 0x0a00'1000}, true, false, false},
  };

  const std::uint64_t top = c.ram_bytes;
  c.reserved = {
    {top - 32 * MiB, top - 16 * MiB},   // secure-world carve-out
    {top - 16 * MiB, top},              // monitor stage-2 table storage
  };
  return c;
}


MachineConfig
small_machine_config()
{
  MachineConfig c;
  c.address_space_bytes = 128 * MiB;
  c.ram_bytes = 32 * MiB;
  c.io_window = {96 * MiB, 128 * MiB};
  c.cores = {{CoreId{0}, CoreClass::Little}, {CoreId{1}, CoreClass::Big},
             {CoreId{2}, CoreClass::Big}};
  c.peripherals = {
    {DevId{0}, "wifi", DeviceKind::Wifi, {96 * MiB, 96 * MiB + kPageBytes}, true, true, false},
  };
  c.tlb_capacity = 16;
  return c;
}


void
validate(const MachineConfig& c)
{
  auto fail = [](const std::string& msg) { throw LeapError(ErrorCode::ConfigError, msg); };

  if (c.cores.size() < 2)
    fail("at least 2 cores required (ROS keeps one)");
  for (std::size_t i = 0; i < c.cores.size(); ++i)
    if (index(c.cores[i].id) != i)
      fail("core ids must be unique and dense from 0");

  if (c.ram_bytes == 0 or c.ram_bytes % kBlockBytes != 0)
    fail("ram_bytes must be a nonzero multiple of 2MB");
  if (c.ram_bytes > c.address_space_bytes)
    fail("RAM exceeds the physical address space");
  if (c.io_window.empty() or not c.io_window.aligned(kPageBytes))
    fail("IO window must be a nonempty 4KB-aligned range");
  if (c.io_window.end > c.address_space_bytes)
    fail("IO window outside the physical address space");
  if (c.io_window.overlaps({0, c.ram_bytes}))
    fail("IO window overlaps RAM");
  if (c.cache_line_bytes == 0 or (c.cache_line_bytes & (c.cache_line_bytes - 1)) != 0)
    fail("cache line size must be a power of two");
  if (c.tlb_capacity == 0)
    fail("TLB capacity must be positive");

  for (const auto& r : c.reserved)
    if (r.empty() or not r.aligned(kBlockBytes) or r.end > c.ram_bytes)
      fail("reserved range " + to_string(r) + " must be 2MB-aligned inside RAM");

  std::set<std::string> names;
  for (std::size_t i = 0; i < c.peripherals.size(); ++i)
    {
      const auto& p = c.peripherals[i];
      if (index(p.id) != i)
        fail("peripheral ids must be unique and dense from 0");
      if (not names.insert(p.name).second)
        fail("duplicate peripheral name '" + p.name + "'");
      if (p.mmio.empty() or not p.mmio.aligned(kPageBytes))
        fail("peripheral '" + p.name + "' MMIO range is not 4KB-aligned");
      if (not c.io_window.contains(p.mmio))
        fail("peripheral '" + p.name + "' MMIO range outside the IO window");
      for (std::size_t j = 0; j < i; ++j)
        if (c.peripherals[j].mmio.overlaps(p.mmio))
          fail("peripherals '" + c.peripherals[j].name + "' and '" + p.name
               + "' share MMIO pages");
    }
}


std::optional<DevId>
Machine::find_peripheral(std::string_view name) const
{
  for (const auto& p : config_.peripherals)
    if (p.name == name)
      return p.id;
  return std::nullopt;
}


AddressClass
Machine::classify(std::uint64_t pa) const
{
  if (pa < config_.ram_bytes)
    {
      for (const auto& r : config_.reserved)
        if (r.contains(pa))
          return AddressClass::Hole;
      return AddressClass::RamFrame;
    }
  if (config_.io_window.contains(pa))
    return AddressClass::MmioPage;
  return AddressClass::Hole;
}


std::vector<PhysRange>
Machine::ram_ranges() const
{
  std::vector<PhysRange> holes = config_.reserved;
  std::sort(holes.begin(), holes.end());
  std::vector<PhysRange> out;
  std::uint64_t cursor = 0;
  for (const auto& h : holes)
    {
      if (h.begin > cursor)
        out.push_back({cursor, h.begin});
      cursor = std::max(cursor, h.end);
    }
  if (cursor < config_.ram_bytes)
    out.push_back({cursor, config_.ram_bytes});
  return out;
}


Machine
build_machine(const MachineConfig& config)
{
  validate(config);

  Machine m;
  m.config_ = config;
  m.cache_ = Cache(config.cache_line_bytes, config.cache_capacity);
  for (const auto& cd : config.cores)
    {
      m.cores_.push_back(Core{cd.id, cd.klass, CoreState::RunningRos, ContextId::Ros,
                              ContextId::Ros});
      m.tlbs_.emplace_back(config.tlb_capacity);
    }

  Stage2TableSet ros(ContextId::Ros);
  for (const auto& r : m.ram_ranges())
    ros.map(r, S2Attr::Normal);
  ros.map(config.io_window, S2Attr::Device);
  m.tables_.emplace(ContextId::Ros, std::move(ros));
  return m;
}


const TlbEntry*
Tlb::find(ContextId ctx, std::uint64_t ipa) const
{
  for (const auto& e : entries_)
    if (e.context == ctx and e.covered().contains(ipa))
      return &e;
  return nullptr;
}


void
Tlb::insert(const TlbEntry& e)
{
  for (const auto& x : entries_)
    if (x.context == e.context and x.ipa_block == e.ipa_block and x.granularity == e.granularity)
      return;
  if (entries_.size() >= capacity_)
    entries_.pop_front();
  entries_.push_back(e);
}


std::size_t
Tlb::flush(const PhysRange& range)
{
  return std::erase_if(entries_, [&](const TlbEntry& e) { return e.covered().overlaps(range); });
}


std::size_t
Tlb::flush_context(ContextId ctx)
{
  return std::erase_if(entries_, [&](const TlbEntry& e) { return e.context == ctx; });
}


void
Cache::fill(ContextId owner, CoreId core, std::uint64_t pa)
{
  const std::uint64_t line = line_of(pa);
  auto [it, inserted] = lines_.insert_or_assign(line, CacheLine{line, owner, core, true});
  (void)it;
  if (capacity_ == 0)
    return;
  if (inserted)
    fifo_.push_back(line);
  while (lines_.size() > capacity_ and not fifo_.empty())
    {
      lines_.erase(fifo_.front());
      fifo_.pop_front();
    }
}


std::optional<CacheLine>
Cache::probe(std::uint64_t pa) const
{
  auto it = lines_.find(line_of(pa));
  if (it == lines_.end())
    return std::nullopt;
  return it->second;
}


std::size_t
Cache::invalidate_foreign(const PhysRange& range, ContextId keep)
{
  std::size_t n = 0;
  for (auto it = lines_.lower_bound(line_of(range.begin)); it != lines_.end()
         and it->first < range.end;)
    {
      if (it->second.fill_owner != keep)
        {
          if (capacity_ != 0)
            std::erase(fifo_, it->first);
          it = lines_.erase(it);
          ++n;
        }
      else
        ++it;
    }
  return n;
}


std::size_t
Cache::clean_core(CoreId core, ContextId owner)
{
  std::size_t n = 0;
  for (auto it = lines_.begin(); it != lines_.end();)
    {
      if (it->second.fill_core == core and it->second.fill_owner == owner)
        {
          if (capacity_ != 0)
            std::erase(fifo_, it->first);
          it = lines_.erase(it);
          ++n;
        }
      else
        ++it;
    }
  return n;
}


void
cache_fill(Machine& machine, ContextId ctx, CoreId core, std::uint64_t pa)
{
  machine.cache().fill(ctx, core, pa);
}


std::optional<CacheLine>
cache_probe(const Machine& machine, std::uint64_t pa)
{
  return machine.cache().probe(pa);
}


std::size_t
tlb_flush_range(Machine& machine, const PhysRange& range)
{
  if (range.empty() or not range.aligned(kBlockBytes))
    throw LeapError(ErrorCode::AlignmentError, to_string(range) + " is not 2MB-aligned");
  std::size_t n = 0;
  for (const auto& c : machine.cores())
    n += machine.tlb(c.id).flush(range);
  return n;
}


std::size_t
tlb_flush_pages(Machine& machine, const PhysRange& range)
{
  if (range.empty() or not range.aligned(kPageBytes))
    throw LeapError(ErrorCode::AlignmentError, to_string(range) + " is not 4KB-aligned");
  std::size_t n = 0;
  for (const auto& c : machine.cores())
    n += machine.tlb(c.id).flush(range);
  return n;
}


std::size_t
tlb_flush_context(Machine& machine, ContextId ctx)
{
  std::size_t n = 0;
  for (const auto& c : machine.cores())
    n += machine.tlb(c.id).flush_context(ctx);
  return n;
}

}  // namespace leapsim
