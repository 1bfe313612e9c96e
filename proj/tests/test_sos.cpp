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

#include <cmath>
#include <random>
#include <vector>

#include "leapsim/world.hpp"
#include "support.hpp"

using namespace leapsim;
using leapsim::testing::code_of;

namespace
{

// Millisecond-grid oracle: busy[t][core] for every covered ms.
struct GridUsage
{
  std::vector<std::map<std::uint32_t, double>> ms;   // index = ms since 0

  void add(std::int64_t lo, std::int64_t hi, const std::map<std::uint32_t, double>& busy)
  {
    if (std::int64_t(ms.size()) < hi)
      ms.resize(std::size_t(hi));
    for (auto t = lo; t < hi; ++t)
      ms[std::size_t(t)] = busy;
  }

  std::optional<double> aggregate(std::int64_t now, std::int64_t window) const
  {
    if (now - window < 0 or now > std::int64_t(ms.size()))
      return std::nullopt;
    double num = 0, den = 0;
    for (auto t = now - window; t < now; ++t)
      for (const auto& [c, b] : ms[std::size_t(t)])
        num += b, den += 1;
    if (den == 0)
      return std::nullopt;
    return num / den;
  }

  std::optional<double> per_core(std::uint32_t core, std::int64_t now, std::int64_t window) const
  {
    if (now - window < 0 or now > std::int64_t(ms.size()))
      return std::nullopt;
    double num = 0;
    for (auto t = now - window; t < now; ++t)
      {
        auto it = ms[std::size_t(t)].find(core);
        if (it == ms[std::size_t(t)].end())
          return std::nullopt;
        num += it->second;
      }
    return window > 0 ? std::optional(num / double(window)) : std::nullopt;
  }
};

SandboxRuntime
running_runtime(std::uint32_t max_cores, std::vector<CoreId> cores)
{
  SandboxRuntime rt;
  rt.id = sandbox_ctx(1);
  rt.state = SandboxState::Running;
  rt.quota = {max_cores, 512 * MiB};
  rt.boot_core = cores.front();
  rt.cores = std::move(cores);
  return rt;
}

void
fill_usage(SandboxRuntime& rt, Nanos until, const std::vector<std::pair<CoreId, double>>& busy)
{
  for (Nanos t{0}; t < until; t += from_ms(100))
    rt.usage.add(t, t + from_ms(100), busy);
}

}  // namespace


TEST_CASE("usage window agrees with a per-millisecond grid")
{
  std::mt19937_64 rng(31);
  for (int round = 0; round < 20; ++round)
    {
      UsageWindow u;
      GridUsage g;
      std::int64_t t = 0;
      while (t < 20'000)
        {
          const std::int64_t len = 10 + std::int64_t(rng() % 490);
          std::vector<std::pair<CoreId, double>> busy;
          std::map<std::uint32_t, double> gb;
          for (std::uint32_t c = 1; c <= 3; ++c)
            if (c == 1 or rng() % 4)
              {
                const double b = double(rng() % 1001) / 1000.0;
                busy.emplace_back(CoreId{c}, b);
                gb[c] = b;
              }
          u.add(from_ms(double(t)), from_ms(double(t + len)), busy);
          g.add(t, t + len, gb);
          t += len;

          const std::int64_t now = t - std::int64_t(rng() % 300);
          for (std::int64_t window : {2000, 5000})
            {
              const auto a = u.aggregate(from_ms(double(now)), from_ms(double(window)));
              const auto ga = g.aggregate(now, window);
              REQUIRE(a.has_value() == ga.has_value());
              if (a)
                REQUIRE(*a == doctest::Approx(*ga).epsilon(1e-9));
              for (std::uint32_t c = 1; c <= 3; ++c)
                {
                  const auto p = u.per_core(CoreId{c}, from_ms(double(now)), from_ms(double(window)));
                  const auto gp = g.per_core(c, now, window);
                  REQUIRE(p.has_value() == gp.has_value());
                  if (p)
                    REQUIRE(*p == doctest::Approx(*gp).epsilon(1e-9));
                }
            }
        }
    }
}

TEST_CASE("monitor_cpu: increase above 99% over 2s, respecting quota and hysteresis")
{
  SandboxRuntime rt = running_runtime(2, {CoreId{4}});
  fill_usage(rt, from_ms(3000), {{CoreId{4}, 1.0}});
  CHECK(monitor_cpu(rt, from_ms(3000))
        == AdjustRequest{AdjustRequest::Kind::IncreaseCore, std::nullopt});

  rt.last_adjust = from_ms(2500);
  CHECK(not monitor_cpu(rt, from_ms(3000)));

  SandboxRuntime full = running_runtime(1, {CoreId{4}});
  fill_usage(full, from_ms(3000), {{CoreId{4}, 1.0}});
  CHECK(not monitor_cpu(full, from_ms(3000)));

  SandboxRuntime lazy = running_runtime(2, {CoreId{4}});
  fill_usage(lazy, from_ms(3000), {{CoreId{4}, 0.98}});
  CHECK(not monitor_cpu(lazy, from_ms(3000)));

  SandboxRuntime young = running_runtime(2, {CoreId{4}});
  fill_usage(young, from_ms(1500), {{CoreId{4}, 1.0}});
  CHECK(not monitor_cpu(young, from_ms(1500)));
}

TEST_CASE("monitor_cpu: release a non-boot core under 40% over 5s")
{
  SandboxRuntime rt = running_runtime(3, {CoreId{4}, CoreId{5}});
  fill_usage(rt, from_ms(6000), {{CoreId{4}, 0.1}, {CoreId{5}, 0.39}});
  CHECK(monitor_cpu(rt, from_ms(6000)) == AdjustRequest{AdjustRequest::Kind::ReleaseCore, CoreId{5}});

  SandboxRuntime busy = running_runtime(3, {CoreId{4}, CoreId{5}});
  fill_usage(busy, from_ms(6000), {{CoreId{4}, 0.1}, {CoreId{5}, 0.41}});
  CHECK(not monitor_cpu(busy, from_ms(6000)));

  SandboxRuntime boot_only = running_runtime(3, {CoreId{4}});
  fill_usage(boot_only, from_ms(6000), {{CoreId{4}, 0.0}});
  CHECK(not monitor_cpu(boot_only, from_ms(6000)));
}

TEST_CASE("monitor_memory rounds to granules")
{
  SandboxRuntime rt = running_runtime(1, {CoreId{4}});
  rt.workload = Workload::cipher({}, 10 * MiB);
  CHECK(not monitor_memory(rt, 10 * MiB));
  CHECK(monitor_memory(rt, 11 * MiB) == MemRequest{AdjustOp::Attach, 16 * MiB});
  CHECK(monitor_memory(rt, 60 * MiB) == MemRequest{AdjustOp::Attach, 64 * MiB});
  rt.attached_bytes = 64 * MiB;
  CHECK(not monitor_memory(rt, 60 * MiB));
  CHECK(monitor_memory(rt, 40 * MiB) == MemRequest{AdjustOp::Detach, 32 * MiB});
  CHECK(monitor_memory(rt, 0) == MemRequest{AdjustOp::Detach, 64 * MiB});
}

TEST_CASE("cipher file work")
{
  // scan + hits + misses, all per MB.
  CHECK(cipher_file_work(32 * MiB, 10 * MiB, 10)
        == doctest::Approx(32 * 40.0 + 10 * 32 * 0.5 + 10 * 22 * 40.0));
  CHECK(cipher_file_work(8 * MiB, 10 * MiB, 10) == doctest::Approx(8 * 40.0 + 10 * 8 * 0.5));
  CHECK(cipher_file_work(64 * MiB, 64 * MiB, 3) == doctest::Approx(64 * 40.0 + 3 * 64 * 0.5));
  for (std::uint64_t c = 0; c < 100 * MiB; c += 16 * MiB)
    CHECK(cipher_file_work(100 * MiB, c + 16 * MiB, 10) < cipher_file_work(100 * MiB, c, 10));
}

TEST_CASE("step_workload conserves work and never exceeds capacity")
{
  std::mt19937_64 rng(5);
  for (int round = 0; round < 50; ++round)
    {
      const bool par = rng() % 2;
      SandboxRuntime rt = running_runtime(4, {CoreId{4}, CoreId{1}});
      rt.workload = Workload::inference(1 + std::uint32_t(rng() % 20), 1500.0, par);
      const double total = rt.workload.remaining;
      const std::vector<std::pair<CoreId, double>> rates = {{CoreId{4}, 1.0}, {CoreId{1}, 0.35}};
      const double rate = par ? 1.35 : 1.0;
      Nanos t{0};
      double sum = 0;
      while (not rt.workload.done())
        {
          const Nanos dt = from_ms(double(1 + rng() % 5000));
          const double d = step_workload(rt, t, t + dt, rates);
          REQUIRE(d <= rate * to_ms(dt) + 1e-6);
          sum += d;
          t += dt;
        }
      CHECK(sum == doctest::Approx(total));
      CHECK(rt.work_done == doctest::Approx(total));
      REQUIRE(rt.completed);
      // Completion time equals the ideal at the constant rate.
      CHECK(to_ms(*rt.completed) == doctest::Approx(total / rate).epsilon(1e-6));
      CHECK(step_workload(rt, t, t + from_ms(10), rates) == 0.0);
    }
  SandboxRuntime dead = running_runtime(1, {CoreId{4}});
  dead.state = SandboxState::Dead;
  CHECK(code_of([&] { step_workload(dead, Nanos(0), from_ms(1), {}); }) == ErrorCode::BadState);
}

TEST_CASE("sandbox lifecycle transitions")
{
  using S = SandboxState;
  const S all[] = {S::Created, S::Verifying, S::Booting, S::Running, S::Terminating, S::Dead};
  int legal = 0;
  for (S a : all)
    for (S b : all)
      legal += valid_transition(a, b);
  CHECK(legal == 5);
  CHECK(valid_transition(S::Running, S::Terminating));
  CHECK(not valid_transition(S::Dead, S::Created));
  CHECK(not valid_transition(S::Running, S::Running));
}

TEST_CASE("world-level core and memory adjustment")
{
  PlatformConfig p = default_platform();
  p.render = false;
  World w = build_world(default_machine_config(), p);
  register_app(w, "app", Bytes(100, 1));
  const ContextId sb = create_sandbox(
    w, {"h", "app", Quota{2, 256 * MiB}, CoreClass::Big, false, std::nullopt}, Workload::idle());
  const CoreId c = increase_core(w, sb);
  CHECK(w.runtime(sb).cores.size() == 2);
  CHECK(code_of([&] { increase_core(w, sb); }) == ErrorCode::QuotaExceeded);
  release_core(w, sb, c);
  CHECK(w.runtime(sb).cores.size() == 1);

  const PhysRange r = attach_memory(w, sb, 32 * MiB);
  CHECK(r.size() == 32 * MiB);
  CHECK(w.monitor.ledger().interval_of(sb)->size() == 160 * MiB);
  CHECK(code_of([&] { attach_memory(w, sb, 128 * MiB); }) == ErrorCode::VerdictError);
  detach_memory(w, sb, 32 * MiB);
  CHECK(w.monitor.ledger().interval_of(sb)->size() == 128 * MiB);
}

TEST_CASE("TZASC mode has no flexible resources")
{
  PlatformConfig p = default_platform();
  p.render = false;
  p.mode = IsolationMode::Tzasc;
  World w = build_world(default_machine_config(), p);
  register_app(w, "app", Bytes(100, 1));
  const ContextId sb = create_sandbox(
    w, {"h", "app", Quota{2, 256 * MiB}, std::nullopt, false, std::nullopt}, Workload::idle());
  CHECK(code_of([&] { increase_core(w, sb); }) == ErrorCode::BadState);
  CHECK(code_of([&] { attach_memory(w, sb, 16 * MiB); }) == ErrorCode::BadState);
}
