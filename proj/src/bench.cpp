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

#include "leapsim/bench.hpp"

#include <cstdio>
#include <ostream>

namespace leapsim
{

namespace
{

RunOptions
quiet()
{
  RunOptions o;
  o.trace_mode = Trace::Mode::DigestOnly;
  o.check_invariants = false;
  return o;
}

double
sandbox_field(const RunResult& r, const std::string& handle, const char* field)
{
  for (const auto& sb : r.metrics["sandboxes"])
    if (sb["handle"] == handle and not sb[field].is_null())
      return sb[field].get<double>();
  return -1.0;
}

std::string
fixed(double v, int digits = 2)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace


std::vector<CpuAdjustRow>
bench_cpu_adjust()
{
  std::vector<CpuAdjustRow> rows;
  for (CoreClass klass : {CoreClass::Big, CoreClass::Little})
    for (AdjustDirection dir : {AdjustDirection::Increase, AdjustDirection::Decrease})
      {
        CpuAdjustRow row{std::string(to_string(klass))
                           + (dir == AdjustDirection::Increase ? "-inc" : "-dec"),
                         klass, dir};
        for (bool optimized : {true, false})
          {
            PlatformConfig pc = default_platform();
            pc.render = false;
            pc.optimized = optimized;
            World w = build_world(default_machine_config(), pc, {}, CostTable::defaults(),
                                  Trace::Mode::Off);
            register_app(w, "adjust", Bytes(4096, 0x5a));
            Quota q = pc.default_quota;
            q.max_cores = static_cast<std::uint32_t>(w.machine.cores().size());
            const ContextId sb = create_sandbox(w, {"s", "adjust", q, CoreClass::Big, false, std::nullopt}, Workload::idle());

            const CoreId boot = w.runtime(sb).boot_core;
            CoreId target = boot;
            for (const Core& c : w.machine.cores())
              if (c.klass == klass and index(c.id) != 0 and c.id != boot)
                {
                  target = c.id;
                  break;
                }
            auto timed = [&](ContextId from, ContextId to) {
              const Nanos t0 = w.engine.now();
              w.monitor.transfer_core(w.machine, w.engine, target, from, to, optimized);
              return to_ms(w.engine.now() - t0);
            };
            const double inc = timed(ContextId::Ros, sb);
            const double dec = timed(sb, ContextId::Ros);
            (optimized ? row.opt_ms : row.nonopt_ms) = dir == AdjustDirection::Increase ? inc : dec;
          }
        row.ratio = row.nonopt_ms / row.opt_ms;
        rows.push_back(row);
      }
  return rows;
}


std::vector<std::uint32_t>
default_dl_batches()
{
  return {1, 2, 4, 8, 16, 32, 64};
}


namespace
{

Scenario
dl_scenario(std::uint32_t images, std::uint32_t cores)
{
  Scenario s;
  s.name = "dl-batch";
  s.platform.render = false;
  s.apps = {{"dl", 4096}};
  Directive d;
  d.op = Directive::Op::CreateSandbox;
  d.handle = "dl";
  d.app = "dl";
  d.quota = Quota{cores, 512 * MiB};
  d.prefer = CoreClass::Big;
  d.workload = Workload::inference(images);
  d.auto_terminate = true;
  s.timeline.push_back(d);
  s.horizon = std::chrono::milliseconds(std::int64_t(images) * 1600) + std::chrono::seconds(10);
  return s;
}

}  // namespace


std::vector<DlCurve>
bench_dl_batch(const std::vector<std::uint32_t>& batches, const std::vector<std::uint32_t>& extra)
{
  std::map<std::uint32_t, double> baseline;
  for (auto n : batches)
    baseline[n] = run_scenario(dl_scenario(n, 1), quiet()).completion_ms.at("dl");

  std::vector<DlCurve> curves;
  for (auto x : extra)
    {
      DlCurve c{x, {}};
      for (auto n : batches)
        {
          const RunResult r = run_scenario(dl_scenario(n, 1 + x), quiet());
          DlPoint p;
          p.images = n;
          p.baseline_ms = baseline[n];
          p.elapsed_ms = r.completion_ms.at("dl");
          p.speedup = p.baseline_ms / p.elapsed_ms;
          p.max_cores = 1 + x;
          p.adjustments = r.metrics["adjustments"]["core"].get<std::uint32_t>();
          c.points.push_back(p);
        }
      curves.push_back(std::move(c));
    }
  return curves;
}


std::vector<MemStrategy>
MemQueryResult::matching(double tolerance) const
{
  std::vector<MemStrategy> out;
  for (const auto& s : statics)
    if (std::abs(s.completion_ms - flexible.completion_ms) <= tolerance * flexible.completion_ms)
      out.push_back(s);
  return out;
}


namespace
{

const std::vector<std::uint64_t> kQueryFiles = {32 * MiB, 96 * MiB, 16 * MiB, 160 * MiB,
                                                48 * MiB, 128 * MiB, 16 * MiB, 64 * MiB};
constexpr std::uint64_t kQueryCacheBase = 10 * MiB;

MemStrategy
mem_run(bool flexible, std::uint64_t cache)
{
  Scenario s;
  s.name = "mem-query";
  s.platform.render = false;
  s.apps = {{"query", 4096}};
  Directive d;
  d.op = Directive::Op::CreateSandbox;
  d.handle = "q";
  d.app = "query";
  d.quota = Quota{1, 512 * MiB};
  d.prefer = CoreClass::Big;
  d.workload = Workload::cipher(kQueryFiles, cache, 10, flexible);
  d.auto_terminate = true;
  s.timeline.push_back(d);
  s.horizon = std::chrono::seconds(600);
  const RunResult r = run_scenario(s, quiet());

  MemStrategy m;
  m.flexible = flexible;
  m.cache_bytes = cache;
  m.name = flexible ? "flexible" : "static-" + std::to_string(cache / MiB) + "MiB";
  m.completion_ms = r.completion_ms.at("q");
  m.utilization = sandbox_field(r, "q", "mem_utilization");
  m.adjustments = r.metrics["adjustments"]["memory"].get<std::uint32_t>();
  return m;
}

}  // namespace


MemQueryResult
bench_mem_query()
{
  MemQueryResult r;
  r.flexible = mem_run(true, kQueryCacheBase);
  for (std::uint64_t extra = 0; extra <= 192 * MiB; extra += 16 * MiB)
    r.statics.push_back(mem_run(false, kQueryCacheBase + extra));
  return r;
}


Scenario
concurrent_scenario(std::uint32_t n)
{
  Scenario s;
  s.name = "concurrent-" + std::to_string(n);
  s.platform.render = false;
  s.apps = {{"app", 4096}};
  for (std::uint32_t i = 0; i < n; ++i)
    {
      Directive d;
      d.op = Directive::Op::CreateSandbox;
      d.handle = "s" + std::to_string(i + 1);
      d.app = "app";
      d.quota = Quota{1, 256 * MiB};
      d.workload = Workload::inference(4);
      d.auto_terminate = true;
      s.timeline.push_back(d);
    }
  s.horizon = std::chrono::seconds(60);
  return s;
}


CompareReport
compare_modes(const Scenario& s)
{
  auto one = [&](IsolationMode m) {
    RunOptions o;
    o.trace_mode = Trace::Mode::DigestOnly;
    o.mode = m;
    const RunResult r = run_scenario(s, o);
    ModeReport rep;
    rep.mode = m;
    rep.max_concurrent = r.max_concurrent;
    rep.created = r.creates_ok;
    rep.rejected = r.creates_rejected;
    rep.completion_ms = r.completion_ms;
    rep.trace_digest = r.trace_digest;
    rep.violations = r.violations.size();
    return rep;
  };
  CompareReport c{one(IsolationMode::Leap), one(IsolationMode::Tzasc), {}};
  for (const auto& [h, t] : c.leap.completion_ms)
    if (auto it = c.tzasc.completion_ms.find(h); it != c.tzasc.completion_ms.end())
      c.delta_ms[h] = it->second - t;
  return c;
}


FootprintReport
footprint_maximal()
{
  PlatformConfig pc = default_platform();
  pc.render = false;
  World w = build_world(default_machine_config(), pc, {}, CostTable::defaults(), Trace::Mode::Off);
  register_app(w, "fill", Bytes(4096, 0x33));

  std::vector<ContextId> sbs;
  for (;;)
    try
      {
        Quota q{1, 4 * GiB};
        sbs.push_back(create_sandbox(w, {"f" + std::to_string(sbs.size()), "fill", q, {}, false, std::nullopt},
                                     Workload::idle()));
      }
    catch (const LeapError&)
      {
        break;
      }

  // Hand each device to a different sandbox, then grow every sandbox.
  for (std::size_t d = 0; d < w.machine.config().peripherals.size() and not sbs.empty(); ++d)
    try
      {
        request_peripheral(w, sbs[d % sbs.size()], DevId{std::uint32_t(d)});
      }
    catch (const LeapError&)
      {
      }
  for (ContextId sb : sbs)
    for (;;)
      try
        {
          attach_memory(w, sb, pc.attach_granule);
        }
      catch (const LeapError&)
        {
          break;
        }

  FootprintReport rep;
  for (const auto& [ctx, t] : w.machine.tables())
    {
      const std::uint64_t f = s2_footprint(t);
      rep.per_context.emplace_back(ctx, f);
      rep.max_bytes = std::max(rep.max_bytes, f);
      rep.total_bytes += f;
    }
  return rep;
}


namespace
{

struct SeedOutcome
{
  std::size_t events = 0;
  std::size_t violations = 0;
  std::size_t errors = 0;
  std::uint64_t digest = 0;
};

SeedOutcome
sweep_one(std::uint64_t seed)
{
  RunOptions o;
  o.trace_mode = Trace::Mode::DigestOnly;
  const RunResult r = run_scenario(random_honest_scenario(seed), o);
  return {r.events, r.violations.size(), r.errors.size(), r.trace_digest};
}

SweepResult
reduce(std::uint64_t first_seed, const std::vector<SeedOutcome>& v)
{
  SweepResult out;
  out.scenarios = v.size();
  for (std::size_t i = 0; i < v.size(); ++i)
    {
      out.events += v[i].events;
      out.violations += v[i].violations;
      out.directive_errors += v[i].errors;
      out.max_events = std::max(out.max_events, v[i].events);
      out.trace_digests.push_back(v[i].digest);
      if (v[i].violations)
        out.failing_seeds.push_back(first_seed + i);
    }
  return out;
}

}  // namespace


SweepResult
sweep_serial(std::uint64_t first_seed, std::size_t n)
{
  std::vector<SeedOutcome> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = sweep_one(first_seed + i);
  return reduce(first_seed, v);
}


SweepResult
sweep_parallel(std::uint64_t first_seed, std::size_t n)
{
  std::vector<SeedOutcome> v(n);
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::int64_t i = 0; i < count; ++i)
    v[std::size_t(i)] = sweep_one(first_seed + std::uint64_t(i));
  return reduce(first_seed, v);
}


Json
to_json(const std::vector<CpuAdjustRow>& rows)
{
  Json j = Json::array();
  for (const auto& r : rows)
    j.push_back({{"case", r.name}, {"opt_ms", r.opt_ms}, {"nonopt_ms", r.nonopt_ms},
                 {"ratio", r.ratio}});
  return j;
}

Json
to_json(const std::vector<DlCurve>& curves)
{
  Json j = Json::array();
  for (const auto& c : curves)
    {
      Json pts = Json::array();
      for (const auto& p : c.points)
        pts.push_back({{"images", p.images}, {"baseline_ms", p.baseline_ms},
                       {"elapsed_ms", p.elapsed_ms}, {"speedup", p.speedup},
                       {"max_cores", p.max_cores}, {"core_adjustments", p.adjustments}});
      j.push_back({{"extra_cores", c.extra_cores}, {"points", std::move(pts)}});
    }
  return j;
}

Json
to_json(const MemQueryResult& r)
{
  auto one = [](const MemStrategy& m) {
    return Json{{"strategy", m.name}, {"cache_bytes", m.cache_bytes},
                {"completion_ms", m.completion_ms}, {"utilization", m.utilization},
                {"memory_adjustments", m.adjustments}};
  };
  Json statics = Json::array();
  for (const auto& m : r.statics)
    statics.push_back(one(m));
  Json matching = Json::array();
  for (const auto& m : r.matching())
    matching.push_back(m.name);
  return {{"flexible", one(r.flexible)}, {"statics", std::move(statics)},
          {"matching_within_5pct", std::move(matching)}};
}

Json
to_json(const CompareReport& r)
{
  auto one = [](const ModeReport& m) {
    return Json{{"mode", std::string(to_string(m.mode))}, {"max_concurrent", m.max_concurrent},
                {"created", m.created}, {"rejected", m.rejected},
                {"completion_ms", m.completion_ms}, {"trace_digest", hex64(m.trace_digest)},
                {"violations", m.violations}};
  };
  return {{"leap", one(r.leap)}, {"tzasc", one(r.tzasc)}, {"delta_ms", r.delta_ms}};
}

Json
to_json(const FootprintReport& r)
{
  Json per = Json::object();
  for (const auto& [ctx, b] : r.per_context)
    per[to_string(ctx)] = b;
  return {{"per_context_bytes", std::move(per)}, {"max_bytes", r.max_bytes},
          {"total_bytes", r.total_bytes}};
}


Json
run_suite(const std::string& name, std::ostream& out)
{
  if (name == "cpu_adjust")
    {
      const auto rows = bench_cpu_adjust();
      out << "case         opt_ms  nonopt_ms  ratio\n";
      for (const auto& r : rows)
        {
          char line[128];
          std::snprintf(line, sizeof line, "%-11s %7.2f %10.2f %6.3f\n", r.name.c_str(),
                        r.opt_ms, r.nonopt_ms, r.ratio);
          out << line;
        }
      out << "reference band: 1.48x to 2.51x faster with busy-wait\n";
      return to_json(rows);
    }
  if (name == "dl_batch")
    {
      const auto curves = bench_dl_batch(default_dl_batches());
      for (const auto& c : curves)
        {
          out << "quota +" << c.extra_cores << " core(s)\n  images  baseline_ms  elapsed_ms  speedup  adj\n";
          for (const auto& p : c.points)
            {
              char line[128];
              std::snprintf(line, sizeof line, "  %6u %12.1f %11.1f %8.3f %4u\n", p.images,
                            p.baseline_ms, p.elapsed_ms, p.speedup, p.adjustments);
              out << line;
            }
        }
      out << "expected: 1.00x at one image (no trigger), monotone toward the core bound\n";
      return to_json(curves);
    }
  if (name == "mem_query")
    {
      const auto r = bench_mem_query();
      auto line = [&](const MemStrategy& m) {
        out << "  " << m.name << std::string(m.name.size() < 16 ? 16 - m.name.size() : 1, ' ')
            << fixed(m.completion_ms, 1) << " ms  util " << fixed(100 * m.utilization) << "%\n";
      };
      out << "flexible:\n";
      line(r.flexible);
      out << "static pre-allocations:\n";
      for (const auto& m : r.statics)
        line(m);
      out << "statics within 5% of the flexible completion time:";
      for (const auto& m : r.matching())
        out << ' ' << m.name;
      out << "\nexpected: flexible utilization strictly above every matching static\n";
      return to_json(r);
    }
  throw LeapError(ErrorCode::UnknownSuite,
                  "unknown bench suite '" + name + "' (cpu_adjust, dl_batch, mem_query)");
}

}  // namespace leapsim
