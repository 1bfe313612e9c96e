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

#include <doctest.h>

#include <optional>
#include <random>
#include <set>
#include <vector>

#include "leapsim/hw_model.hpp"
#include "leapsim/stage2.hpp"

using namespace leapsim;

namespace
{

template <typename F>
std::optional<ErrorCode>
code_of(F&& f)
{
  try
    {
      f();
    }
  catch (const LeapError& e)
    {
      return e.code();
    }
  return std::nullopt;
}

// Brute-force oracle: one slot per 4KB page of a small address space.
struct PageModel
{
  std::vector<std::optional<S2Attr>> pages;

  explicit PageModel(std::uint64_t bytes) : pages(bytes / kPageBytes) { }

  static std::uint64_t granule(S2Attr a) { return a == S2Attr::Device ? kPageBytes : kBlockBytes; }

  std::optional<ErrorCode> map(PhysRange r, S2Attr a)
  {
    if (r.begin >= r.end or r.begin % granule(a) or r.end % granule(a))
      return ErrorCode::AlignmentError;
    for (auto p = r.begin; p < r.end; p += kPageBytes)
      if (pages[p / kPageBytes])
        return ErrorCode::DoubleMapError;
    for (auto p = r.begin; p < r.end; p += kPageBytes)
      pages[p / kPageBytes] = a;
    return std::nullopt;
  }

  // End of the maximal same-attr run containing page p.
  std::uint64_t run_end(std::uint64_t p) const
  {
    const auto a = pages[p / kPageBytes];
    while (p < pages.size() * kPageBytes and pages[p / kPageBytes] == a)
      p += kPageBytes;
    return p;
  }

  std::optional<ErrorCode> unmap(PhysRange r, std::size_t* count)
  {
    if (r.begin >= r.end)
      return ErrorCode::AlignmentError;
    std::size_t n = 0;
    for (auto cur = r.begin; cur < r.end;)
      {
        if (cur % kPageBytes or not pages[cur / kPageBytes])
          return ErrorCode::NotMappedError;
        const auto g = granule(*pages[cur / kPageBytes]);
        const auto hi = std::min(r.end, run_end(cur));
        if (cur % g or hi % g)
          return ErrorCode::AlignmentError;
        n += (hi - cur) / g;
        cur = hi;
      }
    for (auto p = r.begin; p < r.end; p += kPageBytes)
      pages[p / kPageBytes].reset();
    *count = n;
    return std::nullopt;
  }

  std::size_t entries() const
  {
    std::size_t n = 0;
    for (std::size_t i = 0; i < pages.size(); ++i)
      if (pages[i])
        {
          if (*pages[i] == S2Attr::Device)
            ++n;
          else if (i % (kBlockBytes / kPageBytes) == 0)
            ++n;
        }
    return n;
  }

  std::uint64_t footprint() const
  {
    std::set<std::uint64_t> gb, l3;
    for (std::size_t i = 0; i < pages.size(); ++i)
      if (pages[i])
        {
          const std::uint64_t pa = i * kPageBytes;
          gb.insert(pa >> 30);
          if (*pages[i] == S2Attr::Device)
            l3.insert(pa / kBlockBytes);
        }
    return 4 * KiB * (1 + gb.size() + l3.size());
  }
};

}  // namespace


TEST_CASE("s2_map: 128MB of RAM at 2MB blocks")
{
  Stage2TableSet t(sandbox_ctx(1));
  CHECK(s2_map(t, {256 * MiB, 384 * MiB}, S2Attr::Normal) == 64);
  CHECK(t.entry_count() == 64);
  CHECK(t.lookup(300 * MiB) == S2Attr::Normal);
  CHECK(s2_unmap(t, {256 * MiB, 384 * MiB}) == 64);
  CHECK(t.entry_count() == 0);
}

TEST_CASE("s2_map: alignment, double map and strict unmap")
{
  Stage2TableSet t(sandbox_ctx(1));
  CHECK(code_of([&] { s2_map(t, {256 * MiB, 256 * MiB + 4 * KiB}, S2Attr::Normal); })
        == ErrorCode::AlignmentError);
  s2_map(t, {0, 4 * MiB}, S2Attr::Normal);
  CHECK(code_of([&] { s2_map(t, {2 * MiB, 6 * MiB}, S2Attr::Normal); })
        == ErrorCode::DoubleMapError);
  CHECK(code_of([&] { s2_unmap(t, {8 * MiB, 10 * MiB}); }) == ErrorCode::NotMappedError);
  CHECK(code_of([&] { s2_unmap(t, {0, 4 * KiB}); }) == ErrorCode::AlignmentError);
  CHECK(t.entry_count() == 2);
}

TEST_CASE("s2_map: device pages at 4KB")
{
  const MachineConfig mc = default_machine_config();
  const PhysRange gpu = mc.peripherals[0].mmio;
  Stage2TableSet t(sandbox_ctx(1));
  CHECK(s2_map(t, gpu, S2Attr::Device) == gpu.size() / kPageBytes);
  CHECK(s2_unmap(t, {gpu.begin, gpu.begin + kPageBytes}) == 1);
  CHECK(not t.lookup(gpu.begin));
  CHECK(t.lookup(gpu.begin + kPageBytes) == S2Attr::Device);
}

TEST_CASE("stage-2 table set agrees with a per-page model under random operations")
{
  constexpr std::uint64_t kSpace = 64 * MiB;
  std::mt19937_64 rng(42);
  for (int round = 0; round < 40; ++round)
    {
      Stage2TableSet t(sandbox_ctx(1));
      PageModel m(kSpace);
      for (int op = 0; op < 200; ++op)
        {
          const bool device = rng() % 3 == 0;
          const std::uint64_t unit = rng() % 4 == 0 ? kPageBytes : (device ? kPageBytes : kBlockBytes);
          const std::uint64_t span = unit * (1 + rng() % 6);
          const std::uint64_t begin = (rng() % (kSpace / unit)) * unit;
          const PhysRange r{begin, std::min(kSpace, begin + span)};
          if (rng() % 2)
            {
              const S2Attr a = device ? S2Attr::Device
                                      : (rng() % 2 ? S2Attr::Normal : S2Attr::SharedChannel);
              const auto want = m.map(r, a);
              const auto got = code_of([&] { t.map(r, a); });
              REQUIRE(got == want);
            }
          else
            {
              std::size_t want_n = 0, got_n = 0;
              const auto want = m.unmap(r, &want_n);
              const auto got = code_of([&] { got_n = t.unmap(r); });
              REQUIRE(got == want);
              if (not got)
                CHECK(got_n == want_n);
            }
          REQUIRE(t.entry_count() == m.entries());
          REQUIRE(t.footprint_bytes() == m.footprint());
        }
      for (std::uint64_t p = 0; p < kSpace; p += kPageBytes)
        REQUIRE(t.lookup(p) == m.pages[p / kPageBytes]);
    }
}

TEST_CASE("footprint: empty set is the fixed overhead")
{
  Stage2TableSet t(sandbox_ctx(3));
  CHECK(s2_footprint(t) == kUpperLevelOverhead);
}

TEST_CASE("footprint: all RAM at 2MB plus the whole IO window at 4KB stays under 2MB")
{
  const MachineConfig mc = default_machine_config();
  Stage2TableSet t(ContextId::Ros);
  s2_map(t, {0, mc.ram_bytes}, S2Attr::Normal);
  s2_map(t, mc.io_window, S2Attr::Device);
  // Oracle: 1 root + 4 level-2 tables + one level-3 table per 2MB of IO.
  const std::uint64_t expect = 4 * KiB * (1 + 4 + mc.io_window.size() / kBlockBytes);
  CHECK(s2_footprint(t) == expect);
  CHECK(s2_footprint(t) <= 2 * MiB);
  CHECK(8 * s2_footprint(t) <= 16 * MiB);
}

TEST_CASE("translate: identity hits, faults elsewhere, TLB keeps stale entries")
{
  Machine m = build_machine(default_machine_config());
  const CoreId c2{2};
  const auto hit = s2_translate(m, c2, 0x1000'0000);
  CHECK(hit.hit());
  CHECK(hit.pa == 0x1000'0000);
  CHECK(m.tlb(c2).size() == 1);

  // Unmap the block from ROS without a flush: the stale TLB entry still
  // translates (the window the sanitizer closes); a fresh core faults.
  s2_unmap(m.tables(ContextId::Ros), {0x1000'0000, 0x1000'0000 + kBlockBytes});
  CHECK(s2_translate(m, c2, 0x1000'0000).hit());
  CHECK(s2_translate(m, c2, 0x1000'0000).from_tlb);
  CHECK(not s2_translate(m, CoreId{3}, 0x1000'0000).hit());
  CHECK(tlb_flush_range(m, {0x1000'0000, 0x1000'0000 + kBlockBytes}) == 1);
  CHECK(not s2_translate(m, c2, 0x1000'0000).hit());
}

TEST_CASE("translate agrees with the table set when TLBs are empty")
{
  Machine m = build_machine(small_machine_config());
  Stage2TableSet& ros = m.tables(ContextId::Ros);
  std::mt19937_64 rng(7);
  for (int i = 0; i < 6; ++i)
    {
      const std::uint64_t b = (rng() % 16) * kBlockBytes;
      if (ros.lookup(b))
        s2_unmap(ros, {b, b + kBlockBytes});
    }
  const std::uint64_t space = m.config().address_space_bytes;
  for (std::uint64_t ipa = 0; ipa < space; ipa += kPageBytes)
    {
      tlb_flush_context(m, ContextId::Ros);
      REQUIRE(s2_translate(m, CoreId{1}, ipa).hit() == ros.lookup(ipa).has_value());
    }
}
