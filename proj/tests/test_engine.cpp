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

#include "leapsim/engine.hpp"
#include "support.hpp"

using namespace leapsim;
using leapsim::testing::code_of;

namespace
{

// Reference copy model in floating point: interpolate between measured
// points (KB, ms) with (0, 0) in front, extrapolate the last segment.
double
copy_ms_ref(double kb)
{
  const std::vector<std::pair<double, double>> pts = {
    {0, 0}, {64, 16.58}, {256, 17.69}, {1024, 22.46},
    {4096, 39.46}, {16384, 110.65}, {65536, 323.42}};
  std::size_t i = 1;
  while (i + 1 < pts.size() and pts[i].first < kb)
    ++i;
  const auto [x0, y0] = pts[i - 1];
  const auto [x1, y1] = pts[i];
  return y0 + (y1 - y0) * (kb - x0) / (x1 - x0);
}

}  // namespace


TEST_CASE("default cost table holds the measured values")
{
  const CostTable t = CostTable::defaults();
  struct Row { const char* name; double ms; };
  const Row rows[] = {
    {"boot_ms", 532}, {"shutdown_ms", 629},
    {"ipi_ros_to_sb_us", 0.02389}, {"ipi_sb_to_ros_us", 0.05312},
    {"core_big_inc_nonopt_ms", 199}, {"core_big_inc_opt_ms", 79},
    {"core_little_inc_nonopt_ms", 137}, {"core_little_inc_opt_ms", 55},
    {"core_big_dec_nonopt_ms", 92}, {"core_big_dec_opt_ms", 62},
    {"core_little_dec_nonopt_ms", 72}, {"core_little_dec_opt_ms", 42},
    {"gpu_map_ros_ms", 55}, {"gpu_map_sandbox_ms", 121},
    {"gpu_unmap_ros_ms", 35}, {"gpu_unmap_sandbox_ms", 23},
    {"wifi_map_ros_ms", 193}, {"wifi_map_sandbox_ms", 188},
    {"wifi_unmap_ros_ms", 43}, {"wifi_unmap_sandbox_ms", 37},
    {"bt_map_ros_ms", 117}, {"bt_map_sandbox_ms", 125},
    {"bt_unmap_ros_ms", 33}, {"bt_unmap_sandbox_ms", 29},
  };
  for (const Row& r : rows)
    {
      INFO(r.name);
      CHECK(to_ms(t.at(r.name)) == doctest::Approx(r.ms).epsilon(1e-9));
    }
  CHECK(t.copy_anchors().size() == 6);
}

TEST_CASE("entry name helpers")
{
  CHECK(CostTable::core_entry(CoreClass::Big, AdjustDirection::Increase, true)
        == "core_big_inc_opt_ms");
  CHECK(CostTable::core_entry(CoreClass::Little, AdjustDirection::Decrease, false)
        == "core_little_dec_nonopt_ms");
  CHECK(CostTable::periph_entry(DeviceKind::Wifi, true, true) == "wifi_map_sandbox_ms");
  CHECK(CostTable::periph_entry(DeviceKind::Bluetooth, false, false) == "bt_unmap_ros_ms");
  CHECK(CostTable::ipi_entry(CopyDirection::SandboxToRos) == "ipi_sb_to_ros_us");
  const CostTable t = CostTable::defaults();
  for (auto k : {CoreClass::Big, CoreClass::Little})
    for (auto d : {AdjustDirection::Increase, AdjustDirection::Decrease})
      for (bool o : {true, false})
        CHECK(t.has(CostTable::core_entry(k, d, o)));
  for (auto k : {DeviceKind::Gpu, DeviceKind::Wifi, DeviceKind::Bluetooth, DeviceKind::Other})
    for (bool m : {true, false})
      for (bool s : {true, false})
        CHECK(t.has(CostTable::periph_entry(k, m, s)));
}

TEST_CASE("copy cost: anchors exact, piecewise linear between, monotone")
{
  const CostTable t = CostTable::defaults();
  for (const auto& [bytes, ns] : t.copy_anchors())
    CHECK(t.copy_cost(bytes) == ns);
  CHECK(t.copy_cost(0) == Nanos(0));
  std::mt19937_64 rng(11);
  Nanos prev{0};
  for (std::uint64_t b = 0; b <= 128 * MiB; b += 64 * KiB + rng() % 4096)
    {
      const Nanos c = t.copy_cost(b);
      REQUIRE(std::abs(to_ms(c) - copy_ms_ref(double(b) / 1024)) < 1e-5);
      REQUIRE(c >= prev);
      prev = c;
    }
}

TEST_CASE("cost overrides are validated")
{
  CostTable t = CostTable::defaults();
  t.set("boot_ms", from_ms(100));
  CHECK(t.at("boot_ms") == from_ms(100));
  CHECK(code_of([&] { t.set("no_such_ms", from_ms(1)); }) == ErrorCode::ValidationError);
  CHECK(code_of([&] { t.set("boot_ms", Nanos(-1)); }) == ErrorCode::ValidationError);
  CHECK(code_of([&] { (void)t.at("nope"); }) == ErrorCode::ValidationError);
}

TEST_CASE("events dispatch in (time, seq) order")
{
  Engine e;
  std::mt19937_64 rng(3);
  std::vector<std::pair<std::int64_t, std::uint64_t>> expect;
  for (int i = 0; i < 500; ++i)
    {
      const std::int64_t t = std::int64_t(rng() % 50);
      const auto seq = e.schedule(Nanos(t), "x", {ActionKind::Custom, std::uint64_t(i)});
      expect.emplace_back(t, seq);
    }
  std::sort(expect.begin(), expect.end());
  std::vector<std::pair<std::int64_t, std::uint64_t>> got;
  CHECK(e.run_until(Nanos(1000), [&](const Event& ev) {
    got.emplace_back(ev.time.count(), ev.seq);
  }) == 500);
  CHECK(got == expect);
  CHECK(e.now() == Nanos(1000));
  CHECK(code_of([&] { e.schedule(Nanos(-1), "x", {}); }) == ErrorCode::ValidationError);
}

TEST_CASE("run-to-completion: charges push later events to the current clock")
{
  Engine e;
  e.schedule(Nanos(0), "a", {ActionKind::Custom, 0});
  e.schedule(from_ms(1), "b", {ActionKind::Custom, 1});
  std::vector<Nanos> at;
  e.run_until(from_ms(10), [&](const Event& ev) {
    at.push_back(ev.time);
    if (ev.action.arg == 0)
      e.charge("a", "boot_ms");
  });
  REQUIRE(at.size() == 2);
  CHECK(at[0] == Nanos(0));
  CHECK(at[1] == from_ms(532));
  CHECK(e.now() == from_ms(532));
}

TEST_CASE("trace digest is FNV-1a over newline-terminated records")
{
  Engine e;
  e.record("ros", "hello", Json{{"k", 1}});
  e.charge("monitor", "shutdown_ms", Json{{"sandbox", 1}});
  e.record("monitor", "deny", Json::object(), "deny", "because");
  const auto& lines = e.trace().lines();
  REQUIRE(lines.size() == 3);
  std::uint64_t h = kFnvOffset;
  for (const auto& l : lines)
    {
      h = fnv1a(l, h);
      h = fnv1a("\n", h);
      const Json j = Json::parse(l);
      CHECK(j["v"] == 1);
      CHECK(j.contains("time_us"));
      CHECK(j.contains("verdict"));
    }
  CHECK(e.trace().digest() == h);
  const Json c = Json::parse(lines[1]);
  CHECK(c["op"] == "charge");
  CHECK(c["args"]["entry"] == "shutdown_ms");
  CHECK(c["args"]["duration_us"].get<double>() == doctest::Approx(629000));
  CHECK(Json::parse(lines[2])["time_us"].get<double>() == doctest::Approx(629000));
}

TEST_CASE("digest-only mode matches full mode and keeps no lines")
{
  auto run = [](Trace::Mode m) {
    Engine e(CostTable::defaults(), m);
    for (int i = 0; i < 50; ++i)
      e.schedule(Nanos(i * 7 % 13), "x", {ActionKind::Custom, std::uint64_t(i)});
    e.run_until(from_ms(1), [&](const Event& ev) {
      e.record(ev.actor, "tick", Json{{"arg", ev.action.arg}});
      e.charge_value("x", "work", Nanos(std::int64_t(ev.action.arg)));
    });
    return std::pair(e.trace().digest(), e.trace().lines().size());
  };
  const auto full = run(Trace::Mode::Full);
  const auto dig = run(Trace::Mode::DigestOnly);
  CHECK(full.first == dig.first);
  CHECK(full.second == 100);
  CHECK(dig.second == 0);
  CHECK(run(Trace::Mode::Full) == full);
}
