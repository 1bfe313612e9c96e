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

#include <algorithm>
#include <random>
#include <vector>

#include "leapsim/hw_model.hpp"

using namespace leapsim;

namespace
{

ErrorCode
config_error(const MachineConfig& c)
{
  try
    {
      build_machine(c);
    }
  catch (const LeapError& e)
    {
      return e.code();
    }
  return ErrorCode::BadState;   // sentinel: no error
}

// Linear-scan reference TLB: a vector with FIFO eviction and no dedup
// beyond an exact (context, block, granularity) match.
struct RefTlb
{
  std::size_t cap;
  std::vector<TlbEntry> v;

  void insert(const TlbEntry& e)
  {
    for (const auto& x : v)
      if (x.context == e.context and x.ipa_block == e.ipa_block and x.granularity == e.granularity)
        return;
    if (v.size() == cap)
      v.erase(v.begin());
    v.push_back(e);
  }

  bool hit(ContextId ctx, std::uint64_t ipa) const
  {
    return std::any_of(v.begin(), v.end(), [&](const TlbEntry& e) {
      const std::uint64_t g = e.granularity == Granularity::Block2M ? kBlockBytes : kPageBytes;
      return e.context == ctx and ipa >= e.ipa_block and ipa < e.ipa_block + g;
    });
  }

  std::size_t flush(const PhysRange& r)
  {
    const auto before = v.size();
    std::erase_if(v, [&](const TlbEntry& e) {
      const std::uint64_t g = e.granularity == Granularity::Block2M ? kBlockBytes : kPageBytes;
      return e.pa_block < r.end and r.begin < e.pa_block + g;
    });
    return before - v.size();
  }
};

}  // namespace


TEST_CASE("default machine: eight cores all running ROS")
{
  const Machine m = build_machine(default_machine_config());
  REQUIRE(m.cores().size() == 8);
  int big = 0;
  for (const Core& c : m.cores())
    {
      CHECK(c.state == CoreState::RunningRos);
      CHECK(c.active_tables == ContextId::Ros);
      big += c.klass == CoreClass::Big;
    }
  CHECK(big == 4);
  CHECK(m.config().address_space_bytes == 4 * GiB);
  CHECK(m.config().io_window == PhysRange{3 * GiB + 512 * MiB, 4 * GiB});
  for (const auto& t : m.tlbs())
    CHECK(t.size() == 0);
  CHECK(m.cache().size() == 0);
  CHECK(m.tables().size() == 1);
}

TEST_CASE("machine config errors")
{
  MachineConfig one = default_machine_config();
  one.cores.resize(1);
  CHECK(config_error(one) == ErrorCode::ConfigError);

  MachineConfig shared = default_machine_config();
  shared.peripherals[1].mmio = shared.peripherals[0].mmio;
  CHECK(config_error(shared) == ErrorCode::ConfigError);

  MachineConfig misaligned = default_machine_config();
  misaligned.peripherals[2].mmio.begin += 16;
  CHECK(config_error(misaligned) == ErrorCode::ConfigError);

  CHECK(config_error(default_machine_config()) == ErrorCode::BadState);
  CHECK(config_error(small_machine_config()) == ErrorCode::BadState);
}

TEST_CASE("address classification is total and stable")
{
  const Machine m = build_machine(default_machine_config());
  const MachineConfig& c = m.config();
  for (std::uint64_t pa = 0; pa < c.address_space_bytes; pa += kBlockBytes / 2)
    {
      const AddressClass k = m.classify(pa);
      bool reserved = false;
      for (const auto& r : c.reserved)
        reserved |= r.contains(pa);
      AddressClass expect = AddressClass::Hole;
      if (pa < c.ram_bytes and not reserved)
        expect = AddressClass::RamFrame;
      else if (c.io_window.contains(pa))
        expect = AddressClass::MmioPage;
      REQUIRE(k == expect);
      REQUIRE(m.classify(pa) == k);
    }
}

TEST_CASE("cache: fill then probe, unaligned fill, owner tag")
{
  Machine m = build_machine(default_machine_config());
  cache_fill(m, ContextId::Ros, CoreId{0}, 0x1000);
  auto line = cache_probe(m, 0x1000);
  REQUIRE(line);
  CHECK(line->fill_owner == ContextId::Ros);

  cache_fill(m, sandbox_ctx(1), CoreId{4}, 0x2013);
  line = cache_probe(m, 0x2000);
  REQUIRE(line);
  CHECK(line->pa_line == 0x2000);
  CHECK(line->fill_owner == sandbox_ctx(1));
  CHECK(m.cache().size() == 2);
}

TEST_CASE("cache: bounded FIFO eviction and determinism")
{
  auto run = [](std::uint64_t seed) {
    Cache c(64, 32);
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 500; ++i)
      c.fill(sandbox_ctx(std::uint32_t(rng() % 3)), CoreId{std::uint32_t(rng() % 8)},
             (rng() % 128) * 64);
    return c;
  };
  const Cache a = run(5), b = run(5);
  CHECK(a == b);
  CHECK(a.size() <= 32);
}

TEST_CASE("cache: invalidate_foreign keeps the incoming owner's lines")
{
  Cache c(64);
  c.fill(ContextId::Ros, CoreId{0}, 0x0);
  c.fill(sandbox_ctx(1), CoreId{1}, 0x40);
  c.fill(ContextId::Ros, CoreId{0}, 0x1000);
  CHECK(c.invalidate_foreign({0, 0x1000}, sandbox_ctx(1)) == 1);
  CHECK(not c.probe(0x0));
  CHECK(c.probe(0x40));
  CHECK(c.probe(0x1000));
}

TEST_CASE("tlb_flush_range: counts match a linear scan")
{
  Machine m = build_machine(default_machine_config());
  auto put = [&](CoreId c, std::uint64_t block) {
    m.tlb(c).insert({c, ContextId::Ros, block, block, Granularity::Block2M});
  };
  put(CoreId{1}, 0x4000'0000);
  put(CoreId{1}, 0x4020'0000);
  put(CoreId{2}, 0x4000'0000);
  put(CoreId{2}, 0x8000'0000);
  CHECK(tlb_flush_range(m, {0x4000'0000, 0x4040'0000}) == 3);
  CHECK(tlb_flush_range(m, {0x1000'0000, 0x1020'0000}) == 0);
  CHECK(tlb_flush_range(m, {0x8000'0000, 0x8020'0000}) == 1);

  bool threw = false;
  try
    {
      tlb_flush_range(m, {0x1000, 0x2000});
    }
  catch (const LeapError& e)
    {
      threw = e.code() == ErrorCode::AlignmentError;
    }
  CHECK(threw);
}

TEST_CASE("tlb_flush_range after one translate on core 2 removes one entry")
{
  Machine m = build_machine(default_machine_config());
  REQUIRE(s2_translate(m, CoreId{2}, 0x2000'0000).hit());
  CHECK(tlb_flush_range(m, {0x2000'0000, 0x2020'0000}) == 1);
}

TEST_CASE("TLB agrees with a linear-scan FIFO reference")
{
  std::mt19937_64 rng(99);
  for (int round = 0; round < 20; ++round)
    {
      const std::size_t cap = 1 + rng() % 12;
      Tlb t(cap);
      RefTlb ref{cap, {}};
      for (int i = 0; i < 400; ++i)
        {
          const auto ctx = sandbox_ctx(std::uint32_t(rng() % 3));
          const bool page = rng() % 3 == 0;
          const std::uint64_t g = page ? kPageBytes : kBlockBytes;
          const std::uint64_t block = (rng() % 64) * g;
          switch (rng() % 4)
            {
            case 0:
            case 1:
              {
                const TlbEntry e{CoreId{0}, ctx, block, block,
                                 page ? Granularity::Page4K : Granularity::Block2M};
                t.insert(e);
                ref.insert(e);
                break;
              }
            case 2:
              {
                const std::uint64_t b = (rng() % 64) * kBlockBytes;
                const PhysRange r{b, b + kBlockBytes * (1 + rng() % 3)};
                REQUIRE(t.flush(r) == ref.flush(r));
                break;
              }
            default:
              {
                const std::uint64_t ipa = rng() % (64 * kBlockBytes);
                REQUIRE((t.find(ctx, ipa) != nullptr) == ref.hit(ctx, ipa));
              }
            }
          REQUIRE(t.size() == ref.v.size());
        }
    }
}
