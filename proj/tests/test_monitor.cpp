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

#include <random>
#include <vector>

#include "leapsim/monitor.hpp"
#include "support.hpp"

using namespace leapsim;
using leapsim::testing::code_of;

namespace
{

constexpr std::uint64_t B = kBlockBytes;

struct Fixture
{
  Machine machine = build_machine(default_machine_config());
  Monitor monitor{machine, {}};
  KeyStore keys;
  Engine engine;
  Bytes payload = Bytes(3000, 0x5a);

  Fixture() { keys.register_image("app", payload); }

  LaunchSpec spec(std::uint32_t core, std::uint64_t ram_begin, std::uint64_t blocks = 4)
  {
    LaunchSpec s;
    s.app_id = "app";
    s.image = keys.seal("app", payload);
    s.core = CoreId{core};
    s.ram = {ram_begin, ram_begin + blocks * B};
    s.channel = {ram_begin + blocks * B, ram_begin + (blocks + 1) * B};
    s.quota = {3, 64 * MiB};
    return s;
  }
};

// Block-level oracle for the legality check on a 16-block RAM. owner[i]
// is 0 for ROS, k for sandbox k, -1 for a shared channel.
struct LegalityOracle
{
  std::vector<int> owner;
  std::uint64_t quota;
  std::uint64_t base;

  bool approved(int s, std::uint64_t lo, std::uint64_t hi, AdjustOp op) const
  {
    if (lo >= hi)
      return false;
    std::uint64_t first = ~0ULL, last = 0;
    for (std::uint64_t i = 0; i < owner.size(); ++i)
      if (owner[i] == s)
        first = std::min(first, i), last = i + 1;
    if (first == ~0ULL)
      return false;
    if (op == AdjustOp::Attach)
      {
        if (hi > owner.size())
          return false;
        for (std::uint64_t i = lo; i < hi; ++i)
          if (owner[i] != 0)
            return false;
        if (hi != first and lo != last)
          return false;
        return (last - first + hi - lo) * B <= quota;
      }
    if (lo < first or hi > last)
      return false;
    if (lo != first and hi != last)
      return false;
    return (last - first - (hi - lo)) * B >= base;
  }

  bool touches_other(int s, std::uint64_t lo, std::uint64_t hi) const
  {
    for (std::uint64_t i = lo; i < std::min<std::uint64_t>(hi, owner.size()); ++i)
      if (owner[i] > 0 and owner[i] != s)
        return true;
    return false;
  }
};

}  // namespace


TEST_CASE("legality verdict agrees with a block-level oracle")
{
  const Machine m = build_machine(small_machine_config());
  std::mt19937_64 rng(17);
  for (int round = 0; round < 300; ++round)
    {
      Monitor mon(m, {});
      ResourceLedger& L = mon.ledger_for_test();
      LegalityOracle o{std::vector<int>(16, 0), (2 + rng() % 8) * B, (1 + rng() % 3) * B};
      for (int s = 1; s <= 2; ++s)
        {
          // Contiguous sandbox interval plus a one-block channel, placed
          // on free blocks.
          for (int attempt = 0; attempt < 20; ++attempt)
            {
              const std::uint64_t len = 1 + rng() % 4;
              const std::uint64_t lo = rng() % (16 - len);
              const std::uint64_t ch = rng() % 16;
              bool free = ch < lo or ch >= lo + len + 0;
              for (std::uint64_t i = lo; i < lo + len; ++i)
                free = free and o.owner[i] == 0;
              free = free and o.owner[ch] == 0 and (ch < lo or ch >= lo + len);
              if (not free)
                continue;
              for (std::uint64_t i = lo; i < lo + len; ++i)
                o.owner[i] = s;
              o.owner[ch] = -1;
              const ContextId id = sandbox_ctx(std::uint32_t(s));
              L.assign_ram({lo * B, (lo + len) * B}, id);
              L.shared_channels[id] = {ch * B, (ch + 1) * B};
              SandboxRecord rec;
              rec.id = id;
              rec.base_bytes = o.base;
              rec.quota = {1, o.quota};
              L.sandboxes[id] = rec;
              break;
            }
        }
      for (int s = 1; s <= 2; ++s)
        {
          if (not L.sandboxes.count(sandbox_ctx(std::uint32_t(s))))
            continue;
          for (std::uint64_t lo = 0; lo <= 18; ++lo)
            for (std::uint64_t hi = lo; hi <= 18; ++hi)
              for (AdjustOp op : {AdjustOp::Attach, AdjustOp::Detach})
                {
                  const AdjustVerdict v = verify_region_legality(
                    L, sandbox_ctx(std::uint32_t(s)), {lo * B, hi * B}, op);
                  REQUIRE(v.approved() == o.approved(s, lo, hi, op));
                  if (op == AdjustOp::Attach and o.touches_other(s, lo, hi))
                    REQUIRE(v.rejected == RejectReason::Overlap);
                }
          // Misaligned regions never pass.
          CHECK(verify_region_legality(L, sandbox_ctx(std::uint32_t(s)),
                                       {4 * KiB, B}, AdjustOp::Attach).rejected
                == RejectReason::BadAlignment);
        }
    }
}

TEST_CASE("launch: success charges boot and hands resources over")
{
  Fixture f;
  const LaunchSpec s = f.spec(3, 256 * MiB);
  const ContextId id = f.monitor.lock_and_launch(f.machine, f.keys, f.engine, s);
  CHECK(id == sandbox_ctx(1));
  CHECK(f.engine.now() == from_ms(532));
  const ResourceLedger& L = f.monitor.ledger();
  CHECK(L.core_owner.at(CoreId{3}).is(id));
  CHECK(L.interval_of(id) == s.ram);
  CHECK(L.shared_channels.at(id) == s.channel);
  CHECK(L.sandboxes.at(id).verified);
  CHECK(f.machine.core(CoreId{3}).state == CoreState::RunningSandbox);
  CHECK(f.machine.tables(id).fully_mapped(s.ram, S2Attr::Normal));
  CHECK(f.machine.tables(id).fully_mapped(s.channel, S2Attr::SharedChannel));
  CHECK(not f.machine.tables(ContextId::Ros).lookup(s.ram.begin));
  CHECK(f.machine.tables(ContextId::Ros).lookup(s.channel.begin) == S2Attr::SharedChannel);
}

TEST_CASE("launch: failures leave the monitor and tables untouched")
{
  Fixture f;
  f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(1, 256 * MiB));
  const Monitor before = f.monitor;
  const Machine mbefore = f.machine;

  LaunchSpec tampered = f.spec(2, 512 * MiB);
  tampered.image.payload[10] ^= 1;
  CHECK(code_of([&] { f.monitor.lock_and_launch(f.machine, f.keys, f.engine, tampered); })
        == ErrorCode::IntegrityError);
  CHECK(code_of([&] { f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(0, 512 * MiB)); })
        == ErrorCode::ResourceBusy);
  CHECK(code_of([&] { f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(1, 512 * MiB)); })
        == ErrorCode::ResourceBusy);
  CHECK(code_of([&] { f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(2, 258 * MiB)); })
        == ErrorCode::ResourceBusy);
  LaunchSpec odd = f.spec(2, 512 * MiB);
  odd.ram.end -= 4 * KiB;
  CHECK(code_of([&] { f.monitor.lock_and_launch(f.machine, f.keys, f.engine, odd); })
        == ErrorCode::AlignmentError);
  LaunchSpec io = f.spec(2, 3 * GiB + 512 * MiB);
  CHECK(code_of([&] { f.monitor.lock_and_launch(f.machine, f.keys, f.engine, io); })
        == ErrorCode::ResourceBusy);

  CHECK(f.monitor == before);
  CHECK(f.machine == mbefore);
}

TEST_CASE("launch: at most cores - 1 sandboxes")
{
  Fixture f;
  for (std::uint32_t c = 1; c <= 7; ++c)
    f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(c, c * 64 * MiB));
  CHECK(f.monitor.sandbox_count() == 7);
  CHECK(code_of([&] { f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(1, 1 * GiB)); })
        == ErrorCode::TooManySandboxes);
}

TEST_CASE("core transfer rules")
{
  Fixture f;
  const ContextId sb = f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(1, 256 * MiB));
  auto xfer = [&](std::uint32_t c, ContextId from, ContextId to) {
    return code_of([&] { f.monitor.transfer_core(f.machine, f.engine, CoreId{c}, from, to, true); });
  };
  CHECK(xfer(0, ContextId::Ros, sb) == ErrorCode::LastCoreError);
  CHECK(xfer(1, sb, ContextId::Ros) == ErrorCode::LastCoreError);
  CHECK(xfer(2, sb, ContextId::Ros) == ErrorCode::NotOwner);

  const Nanos t0 = f.engine.now();
  CHECK(xfer(5, ContextId::Ros, sb) == std::nullopt);
  CHECK(f.engine.now() - t0 == from_ms(79));
  CHECK(xfer(2, ContextId::Ros, sb) == std::nullopt);
  CHECK(xfer(3, ContextId::Ros, sb) == ErrorCode::QuotaExceeded);
  CHECK(xfer(5, ContextId::Ros, sb) == ErrorCode::NotOwner);
  CHECK(f.monitor.ledger().cores_of(sb).size() == 3);

  const Nanos t1 = f.engine.now();
  CHECK(code_of([&] { f.monitor.transfer_core(f.machine, f.engine, CoreId{2}, sb, ContextId::Ros, false); })
        == std::nullopt);
  CHECK(f.engine.now() - t1 == from_ms(72));
  CHECK(f.machine.core(CoreId{2}).state == CoreState::RunningRos);
}

TEST_CASE("memory attach/detach through the monitor")
{
  Fixture f;
  const ContextId sb = f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(1, 256 * MiB));
  const PhysRange below{256 * MiB - 2 * B, 256 * MiB};
  const Nanos t0 = f.engine.now();
  f.monitor.attach_memory(f.machine, f.engine, sb, below);
  CHECK(f.engine.now() - t0 == from_ms(54));   // one 16MB cost block
  CHECK(f.monitor.ledger().interval_of(sb) == PhysRange{below.begin, 256 * MiB + 4 * B});
  CHECK(code_of([&] { f.monitor.attach_memory(f.machine, f.engine, sb, {1 * GiB, 1 * GiB + B}); })
        == ErrorCode::VerdictError);
  CHECK(code_of([&] { f.monitor.detach_memory(f.machine, f.engine, sb, {256 * MiB, 256 * MiB + B}); })
        == ErrorCode::VerdictError);
  f.monitor.detach_memory(f.machine, f.engine, sb, below);
  CHECK(f.monitor.ledger().interval_of(sb) == f.spec(1, 256 * MiB).ram);
  CHECK(f.machine.tables(ContextId::Ros).fully_mapped(below, S2Attr::Normal));
}

TEST_CASE("teardown returns every resource to ROS")
{
  Fixture f;
  const Machine fresh = f.machine;
  const ContextId sb = f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(1, 256 * MiB));
  f.monitor.transfer_core(f.machine, f.engine, CoreId{6}, ContextId::Ros, sb, true);
  f.monitor.switch_peripheral(f.machine, f.engine, DevId{1}, ContextId::Ros, sb, true);
  f.monitor.attach_memory(f.machine, f.engine, sb, {256 * MiB - 8 * B, 256 * MiB});

  CHECK(code_of([&] { f.monitor.teardown(f.machine, f.engine, sb, SandboxState::Running); })
        == ErrorCode::BadState);
  const Nanos t0 = f.engine.now();
  f.monitor.teardown(f.machine, f.engine, sb, SandboxState::Terminating);
  CHECK(f.engine.now() - t0 == from_ms(629));
  CHECK(f.monitor.sandbox_count() == 0);
  CHECK(f.monitor.ledger().ram_owner.empty());
  CHECK(f.monitor.ledger().dev_owner.at(DevId{1}) == ContextId::Ros);
  CHECK(f.machine.tables() == fresh.tables());
  CHECK(f.machine.cores() == fresh.cores());
  CHECK(code_of([&] { f.monitor.teardown(f.machine, f.engine, sb, SandboxState::Terminating); })
        == ErrorCode::BadState);
}

TEST_CASE("peripheral switch requires the owner's release")
{
  Fixture f;
  const ContextId a = f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(1, 256 * MiB));
  const ContextId b = f.monitor.lock_and_launch(f.machine, f.keys, f.engine, f.spec(2, 512 * MiB));
  auto sw = [&](ContextId from, ContextId to, bool rel) {
    return code_of([&] { f.monitor.switch_peripheral(f.machine, f.engine, DevId{1}, from, to, rel); });
  };
  CHECK(sw(ContextId::Ros, a, false) == ErrorCode::DeviceBusy);
  const Nanos t0 = f.engine.now();
  CHECK(sw(ContextId::Ros, a, true) == std::nullopt);
  CHECK(f.engine.now() - t0 == from_ms(43 + 188));
  CHECK(sw(ContextId::Ros, b, true) == ErrorCode::DeviceBusy);
  CHECK(sw(b, ContextId::Ros, true) == ErrorCode::DeviceBusy);
  const PhysRange wifi = f.machine.peripheral(DevId{1}).mmio;
  CHECK(f.machine.tables(a).fully_mapped(wifi, S2Attr::Device));
  CHECK(not f.machine.tables(ContextId::Ros).lookup(wifi.begin));
}

TEST_CASE("DMA permission follows the ledger")
{
  Fixture f;
  const LaunchSpec s = f.spec(1, 256 * MiB);
  const ContextId sb = f.monitor.lock_and_launch(f.machine, f.keys, f.engine, s);
  const DevId wifi{1};
  CHECK(f.monitor.dma_permitted(wifi, 0x1000));
  CHECK(not f.monitor.dma_permitted(wifi, s.ram.begin));
  CHECK(not f.monitor.dma_permitted(wifi, 3 * GiB + 600 * MiB));
  f.monitor.switch_peripheral(f.machine, f.engine, wifi, ContextId::Ros, sb, true);
  CHECK(f.monitor.dma_permitted(wifi, s.ram.begin));
  CHECK(f.monitor.dma_permitted(wifi, s.channel.begin));
  CHECK(not f.monitor.dma_permitted(wifi, 0x1000));

  Monitor open(f.machine, DefenseFlags{false, false, false, true});
  CHECK(open.dma_permitted(wifi, s.ram.begin));
}
