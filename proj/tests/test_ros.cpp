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

#include "leapsim/world.hpp"
#include "support.hpp"

using namespace leapsim;
using leapsim::testing::code_of;

namespace
{

constexpr std::uint64_t B = kBlockBytes;

// First-fit over a block bitmap, one extent per vector of blocks.
struct BitmapPool
{
  std::vector<std::pair<std::uint64_t, std::uint64_t>> extents;   // [first, last) blocks
  std::vector<int> owner;                                        // 0 = free

  std::optional<std::uint64_t> alloc(std::uint64_t n, int who)
  {
    for (auto [lo, hi] : extents)
      for (std::uint64_t b = lo; b + n <= hi; ++b)
        {
          bool ok = true;
          for (std::uint64_t i = b; i < b + n; ++i)
            ok = ok and owner[i] == 0;
          if (ok)
            {
              for (std::uint64_t i = b; i < b + n; ++i)
                owner[i] = who;
              return b;
            }
        }
    return std::nullopt;
  }

  void free_all(int who)
  {
    for (auto& o : owner)
      if (o == who)
        o = 0;
  }
};

World
small_world()
{
  PlatformConfig p = small_platform();
  p.render = false;
  World w = build_world(small_machine_config(), p);
  register_app(w, "app", Bytes(2048, 7));
  return w;
}

World
default_world(bool render = true)
{
  PlatformConfig p = default_platform();
  p.render = render;
  World w = build_world(default_machine_config(), p);
  register_app(w, "app", Bytes(2048, 7));
  return w;
}

}  // namespace


TEST_CASE("CMA first-fit agrees with a bitmap allocator")
{
  std::mt19937_64 rng(23);
  for (int round = 0; round < 50; ++round)
    {
      // Two extents over 64 blocks with a gap.
      CmaPool pool({{0, 24 * B}, {32 * B, 64 * B}});
      BitmapPool ref{{{0, 24}, {32, 64}}, std::vector<int>(64, 0)};
      for (int op = 0; op < 200; ++op)
        {
          const int who = 1 + int(rng() % 5);
          if (rng() % 3)
            {
              const std::uint64_t n = 1 + rng() % 10;
              const auto want = ref.alloc(n, who);
              std::optional<PhysRange> got;
              const auto err = code_of([&] { got = pool.alloc(n * B, sandbox_ctx(std::uint32_t(who))); });
              if (want)
                {
                  REQUIRE(not err);
                  REQUIRE(got->begin == *want * B);
                  REQUIRE(got->size() == n * B);
                }
              else
                REQUIRE(err == ErrorCode::OutOfMemory);
            }
          else
            {
              pool.free_all(sandbox_ctx(std::uint32_t(who)));
              ref.free_all(who);
            }
          for (int s = 1; s <= 5; ++s)
            {
              std::uint64_t bytes = 0;
              for (const auto& r : pool.allocated_to(sandbox_ctx(std::uint32_t(s))))
                bytes += r.size();
              REQUIRE(bytes / B == std::uint64_t(std::count(ref.owner.begin(), ref.owner.end(), s)));
            }
        }
    }
}

TEST_CASE("CMA adjacent allocation prefers above, then below, same extent")
{
  CmaPool pool({{0, 16 * B}});
  const PhysRange a = pool.alloc(4 * B, sandbox_ctx(1));
  CHECK(a == PhysRange{0, 4 * B});
  CHECK(pool.alloc(2 * B, sandbox_ctx(1), a) == PhysRange{4 * B, 6 * B});
  const PhysRange b = pool.alloc(4 * B, sandbox_ctx(2));
  CHECK(b == PhysRange{6 * B, 10 * B});
  CHECK(code_of([&] { pool.alloc(2 * B, sandbox_ctx(1), PhysRange{0, 6 * B}); })
        == ErrorCode::NoAdjacentSpace);
  pool.free({0, 2 * B});
  CHECK(pool.alloc(2 * B, sandbox_ctx(2), b) == PhysRange{10 * B, 12 * B});
  CHECK(pool.alloc(2 * B, sandbox_ctx(1), PhysRange{2 * B, 6 * B}) == PhysRange{0, 2 * B});
  CHECK(code_of([&] { pool.alloc(3 * MiB, sandbox_ctx(1)); }) == ErrorCode::ValidationError);
  CHECK(code_of([&] { pool.free({12 * B, 14 * B}); }) == ErrorCode::NotMappedError);
}

TEST_CASE("shared pool hands out the lowest free slot")
{
  SharedPool sp({64 * MiB, 64 * MiB + 12 * MiB}, 4 * MiB);
  CHECK(sp.alloc(sandbox_ctx(1)).begin == 64 * MiB);
  CHECK(sp.alloc(sandbox_ctx(2)).begin == 68 * MiB);
  CHECK(sp.alloc(sandbox_ctx(3)).begin == 72 * MiB);
  CHECK(code_of([&] { sp.alloc(sandbox_ctx(4)); }) == ErrorCode::OutOfMemory);
  sp.free(sandbox_ctx(1));
  CHECK(sp.alloc(sandbox_ctx(4)).begin == 64 * MiB);
  CHECK(code_of([] { SharedPool({0, 2 * MiB}, 4 * MiB); }) == ErrorCode::ConfigError);
}

TEST_CASE("create and terminate on the small platform")
{
  World w = small_world();
  const Machine fresh = w.machine;
  const ContextId sb = create_sandbox(w, {"h", "app", Quota{2, 8 * MiB}, std::nullopt, false, std::nullopt},
                                      Workload::idle());
  CHECK(w.runtime(sb).state == SandboxState::Running);
  CHECK(w.monitor.ledger().interval_of(sb)->size() == w.platform.sandbox_base_bytes);
  CHECK(code_of([&] { create_sandbox(w, {"x", "nope", Quota{}, std::nullopt, false, std::nullopt},
                                     Workload::idle()); })
        == ErrorCode::UnknownApp);
  terminate(w, sb);
  CHECK(w.runtimes.empty());
  CHECK(w.ros.cma.allocations().empty());
  CHECK(w.ros.shared.channels().empty());
  CHECK(w.machine.tables() == fresh.tables());
  CHECK(code_of([&] { terminate(w, sb); }) == ErrorCode::BadState);
}

TEST_CASE("tampered image is rejected and pools are rolled back")
{
  World w = small_world();
  const CmaPool cma = w.ros.cma;
  CHECK(code_of([&] { create_sandbox(w, {"h", "app", Quota{}, std::nullopt, true, std::nullopt},
                                     Workload::idle()); })
        == ErrorCode::IntegrityError);
  CHECK(w.ros.cma == cma);
  CHECK(w.ros.shared.channels().empty());
  CHECK(w.monitor.sandbox_count() == 0);
  CHECK(w.stats.creates_rejected == 1);
}

TEST_CASE("GPU hand-off freezes the GUI until it comes back")
{
  World w = default_world();
  const ContextId sb = create_sandbox(w, {"h", "app", Quota{}, std::nullopt, false, std::nullopt},
                                      Workload::idle());
  const DevId gpu = *w.machine.find_peripheral("gpu");
  request_peripheral(w, sb, gpu);
  CHECK(w.ros.gpu_suspended);
  CHECK(w.ros.drivers.at(gpu) == DriverState::SuspendedGpu);
  CHECK(w.monitor.ledger().dev_owner.at(gpu) == sb);
  const Nanos t0 = w.ros.gpu_suspended_at;
  w.engine.advance(from_ms(500));
  release_peripheral(w, sb, gpu);
  CHECK(not w.ros.gpu_suspended);
  REQUIRE(w.ros.frozen_intervals.size() == 1);
  CHECK(w.ros.frozen_intervals[0] == w.engine.now() - t0);
  CHECK(w.ros.frozen_intervals[0] >= from_ms(500));
  CHECK(w.monitor.ledger().dev_owner.at(gpu) == ContextId::Ros);
}

TEST_CASE("busy device queues the request and serves it later")
{
  World w = default_world(false);
  const DevId wifi = *w.machine.find_peripheral("wifi");
  ros_use_device(w, wifi, from_ms(300));
  const ContextId sb = create_sandbox(w, {"h", "app", Quota{}, std::nullopt, false, std::nullopt},
                                      Workload::idle());
  // Boot takes 532ms, so the hold already expired: grant now.
  request_peripheral(w, sb, wifi);
  CHECK(w.monitor.ledger().dev_owner.at(wifi) == sb);

  const ContextId sb2 = create_sandbox(w, {"h2", "app", Quota{}, std::nullopt, false, std::nullopt},
                                       Workload::idle());
  CHECK(code_of([&] { request_peripheral(w, sb2, wifi); }) == ErrorCode::DeviceBusy);
  CHECK(w.ros.waiters.at(wifi).size() == 1);
  release_peripheral(w, sb, wifi);
  CHECK(w.monitor.ledger().dev_owner.at(wifi) == sb2);
  CHECK(w.ros.waiters.at(wifi).empty());
}

TEST_CASE("waiters expire after the timeout")
{
  World w = default_world(false);
  const DevId bt = *w.machine.find_peripheral("bt");
  const ContextId a = create_sandbox(w, {"a", "app", Quota{}, std::nullopt, false, std::nullopt},
                                     Workload::idle());
  const ContextId b = create_sandbox(w, {"b", "app", Quota{}, std::nullopt, false, std::nullopt},
                                     Workload::idle());
  request_peripheral(w, a, bt);
  CHECK(code_of([&] { request_peripheral(w, b, bt); }) == ErrorCode::DeviceBusy);
  w.engine.advance(w.platform.wait_timeout + from_ms(1));
  expire_waiters(w);
  CHECK(w.stats.waiter_timeouts == 1);
  CHECK(w.ros.waiters.at(bt).empty());
}

TEST_CASE("bus-attached device is unsupported")
{
  World w = default_world(false);
  const ContextId sb = create_sandbox(w, {"h", "app", Quota{}, std::nullopt, false, std::nullopt},
                                      Workload::idle());
  const DevId usb = *w.machine.find_peripheral("usb");
  CHECK(code_of([&] { request_peripheral(w, sb, usb); }) == ErrorCode::UnsupportedDevice);
  CHECK(w.monitor.ledger().dev_owner.at(usb) == ContextId::Ros);
}

TEST_CASE("pick_free_core honours the preferred class and skips core 0")
{
  World w = default_world(false);
  CHECK(pick_free_core(w, CoreClass::Big) == CoreId{4});
  CHECK(pick_free_core(w, CoreClass::Little) == CoreId{1});
  CHECK(pick_free_core(w, std::nullopt) == CoreId{1});
}
