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

#include "leapsim/stage2.hpp"

#include <iterator>
#include <set>

#include "leapsim/hw_model.hpp"

namespace leapsim
{

std::string_view
to_string(S2Attr a)
{
  switch (a)
    {
    case S2Attr::Normal:        return "normal";
    case S2Attr::Device:        return "device";
    case S2Attr::SharedChannel: return "shared";
    }
  return "?";
}


std::size_t
Stage2TableSet::map(const PhysRange& range, S2Attr attr)
{
  const std::uint64_t granule = granule_bytes(granularity_of(attr));
  if (range.empty() or not range.aligned(granule))
    throw LeapError(ErrorCode::AlignmentError,
                    to_string(range) + " not aligned to " + std::to_string(granule));
  if (any_mapped(range))
    throw LeapError(ErrorCode::DoubleMapError,
                    to_string(range) + " already mapped for " + to_string(ctx_));

  extents_.emplace(range.begin, Extent{range.end, attr});
  coalesce_around(range.begin);
  return range.size() / granule;
}


std::size_t
Stage2TableSet::unmap(const PhysRange& range)
{
  if (range.empty())
    throw LeapError(ErrorCode::AlignmentError, "empty unmap range");

  // Validate coverage and alignment before touching anything.
  std::size_t count = 0;
  std::uint64_t cursor = range.begin;
  auto it = extents_.upper_bound(range.begin);
  if (it != extents_.begin())
    --it;
  for (; cursor < range.end; ++it)
    {
      if (it == extents_.end() or it->first > cursor or it->second.end <= cursor)
        throw LeapError(ErrorCode::NotMappedError,
                        "0x" + hex64(cursor) + " not mapped for " + to_string(ctx_));
      const std::uint64_t granule = granule_bytes(granularity_of(it->second.attr));
      const std::uint64_t lo = cursor;
      const std::uint64_t hi = std::min(range.end, it->second.end);
      if (lo % granule != 0 or hi % granule != 0)
        throw LeapError(ErrorCode::AlignmentError,
                        to_string(range) + " splits a " + std::to_string(granule) + " entry");
      count += (hi - lo) / granule;
      cursor = hi;
    }

  // Carve range out of the overlapping extents.
  it = extents_.upper_bound(range.begin);
  if (it != extents_.begin())
    --it;
  while (it != extents_.end() and it->first < range.end)
    {
      const std::uint64_t b = it->first;
      const Extent e = it->second;
      if (e.end <= range.begin)
        {
          ++it;
          continue;
        }
      it = extents_.erase(it);
      if (b < range.begin)
        extents_.emplace(b, Extent{range.begin, e.attr});
      if (e.end > range.end)
        it = extents_.emplace(range.end, Extent{e.end, e.attr}).first;
    }
  return count;
}


std::optional<S2Attr>
Stage2TableSet::lookup(std::uint64_t ipa) const
{
  auto it = extents_.upper_bound(ipa);
  if (it == extents_.begin())
    return std::nullopt;
  --it;
  if (ipa < it->second.end)
    return it->second.attr;
  return std::nullopt;
}


bool
Stage2TableSet::any_mapped(const PhysRange& range) const
{
  auto it = extents_.upper_bound(range.begin);
  if (it != extents_.begin())
    {
      auto prev = std::prev(it);
      if (prev->second.end > range.begin)
        return true;
    }
  return it != extents_.end() and it->first < range.end;
}


bool
Stage2TableSet::fully_mapped(const PhysRange& range, S2Attr attr) const
{
  std::uint64_t cursor = range.begin;
  auto it = extents_.upper_bound(range.begin);
  if (it != extents_.begin())
    --it;
  for (; cursor < range.end and it != extents_.end(); ++it)
    {
      if (it->second.end <= cursor)
        continue;
      if (it->first > cursor or it->second.attr != attr)
        return false;
      cursor = it->second.end;
    }
  return cursor >= range.end;
}


std::size_t
Stage2TableSet::entry_count() const
{
  std::size_t n = 0;
  for (const auto& [begin, e] : extents_)
    n += (e.end - begin) / granule_bytes(granularity_of(e.attr));
  return n;
}


std::uint64_t
Stage2TableSet::footprint_bytes() const
{
  std::set<std::uint64_t> level2;   // 1GB regions
  std::set<std::uint64_t> level3;   // 2MB regions with 4KB pages
  for (const auto& [begin, e] : extents_)
    {
      for (std::uint64_t g = begin >> 30; g <= (e.end - 1) >> 30; ++g)
        level2.insert(g);
      if (e.attr == S2Attr::Device)
        for (std::uint64_t b = begin / kBlockBytes; b <= (e.end - 1) / kBlockBytes; ++b)
          level3.insert(b);
    }
  return kUpperLevelOverhead + kTableBytes * (level2.size() + level3.size());
}


void
Stage2TableSet::coalesce_around(std::uint64_t addr)
{
  auto it = extents_.find(addr);
  if (it == extents_.end())
    return;
  if (it != extents_.begin())
    {
      auto prev = std::prev(it);
      if (prev->second.end == it->first and prev->second.attr == it->second.attr)
        {
          prev->second.end = it->second.end;
          extents_.erase(it);
          it = prev;
        }
    }
  auto next = std::next(it);
  if (next != extents_.end() and next->first == it->second.end
      and next->second.attr == it->second.attr)
    {
      it->second.end = next->second.end;
      extents_.erase(next);
    }
}


std::size_t
s2_map(Stage2TableSet& tables, const PhysRange& range, S2Attr attr)
{
  return tables.map(range, attr);
}


std::size_t
s2_unmap(Stage2TableSet& tables, const PhysRange& range)
{
  return tables.unmap(range);
}


std::uint64_t
s2_footprint(const Stage2TableSet& tables)
{
  return tables.footprint_bytes();
}


namespace
{

TranslationResult
lookup_translation(const Machine& machine, CoreId core_id, std::uint64_t ipa,
                   std::optional<TlbEntry>* fill)
{
  const Core& core = machine.core(core_id);
  if (not core.active_tables)
    return {};
  const ContextId ctx = *core.active_tables;

  if (machine.tlb(core_id).find(ctx, ipa))
    return {TranslationOutcome::Hit, ipa, true};

  auto sets = machine.tables().find(ctx);
  if (sets == machine.tables().end())
    return {};
  auto attr = sets->second.lookup(ipa);
  if (not attr)
    return {};

  if (fill)
    {
      const Granularity g = granularity_of(*attr);
      const std::uint64_t block = ipa - ipa % granule_bytes(g);
      *fill = TlbEntry{core_id, ctx, block, block, g};
    }
  return {TranslationOutcome::Hit, ipa, false};
}

}  // namespace


TranslationResult
s2_translate(Machine& machine, CoreId core, std::uint64_t ipa)
{
  std::optional<TlbEntry> fill;
  auto res = lookup_translation(machine, core, ipa, &fill);
  if (fill)
    machine.tlb(core).insert(*fill);
  return res;
}


TranslationResult
s2_probe(const Machine& machine, CoreId core, std::uint64_t ipa)
{
  return lookup_translation(machine, core, ipa, nullptr);
}

}  // namespace leapsim
