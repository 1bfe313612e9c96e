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

#include "leapsim/engine.hpp"

#include <algorithm>
#include <cmath>

namespace leapsim
{

Nanos
from_ms(double ms)
{
  return Nanos(std::llround(ms * 1e6));
}


Nanos
from_us(double us)
{
  return Nanos(std::llround(us * 1e3));
}


double
to_ms(Nanos t)
{
  return double(t.count()) / 1e6;
}


double
to_us(Nanos t)
{
  return double(t.count()) / 1e3;
}


CostTable
CostTable::defaults()
{
  CostTable t;
  auto& s = t.scalars_;

  // Booting / shutdown.
  s["boot_ms"] = from_ms(532);
  s["shutdown_ms"] = from_ms(629);

  // IPI request latency.
  s["ipi_ros_to_sb_us"] = from_us(23.89);
  s["ipi_sb_to_ros_us"] = from_us(53.12);

  // Core and memory adjustment.
  s["core_little_inc_nonopt_ms"] = from_ms(137);
  s["core_little_inc_opt_ms"] = from_ms(55);
  s["core_big_inc_nonopt_ms"] = from_ms(199);
  s["core_big_inc_opt_ms"] = from_ms(79);
  s["core_little_dec_nonopt_ms"] = from_ms(72);
  s["core_little_dec_opt_ms"] = from_ms(42);
  s["core_big_dec_nonopt_ms"] = from_ms(92);
  s["core_big_dec_opt_ms"] = from_ms(62);
  s["mem_inc_ms"] = from_ms(54);
  s["mem_dec_ms"] = from_ms(56);

  // Peripheral stage-2 map/unmap, ROS column and sandbox column.
  auto periph = [&](const char* dev, double map_ros, double map_sb,
                    double unmap_ros, double unmap_sb) {
    const std::string d(dev);
    s[d + "_map_ros_ms"] = from_ms(map_ros);
    s[d + "_map_sandbox_ms"] = from_ms(map_sb);
    s[d + "_unmap_ros_ms"] = from_ms(unmap_ros);
    s[d + "_unmap_sandbox_ms"] = from_ms(unmap_sb);
  };
  periph("gpu", 55, 121, 35, 23);
  periph("wifi", 193, 188, 43, 37);
  periph("bt", 117, 125, 33, 29);
  periph("other", 117, 125, 33, 29);   // no measurement; mirrors Bluetooth

  s["render_period_ms"] = from_ms(16);

  t.anchors_ = {
    {64 * KiB, from_ms(16.58)},
    {256 * KiB, from_ms(17.69)},
    {1024 * KiB, from_ms(22.46)},
    {4 * MiB, from_ms(39.46)},
    {16 * MiB, from_ms(110.65)},
    {64 * MiB, from_ms(323.42)},
  };
  return t;
}


Nanos
CostTable::at(std::string_view name) const
{
  auto it = scalars_.find(name);
  if (it == scalars_.end())
    throw LeapError(ErrorCode::ValidationError, "unknown cost entry '" + std::string(name) + "'");
  return it->second;
}


void
CostTable::set(std::string_view name, Nanos value)
{
  auto it = scalars_.find(name);
  if (it == scalars_.end())
    throw LeapError(ErrorCode::ValidationError, "unknown cost entry '" + std::string(name) + "'");
  if (value.count() < 0)
    throw LeapError(ErrorCode::ValidationError, "negative cost for '" + std::string(name) + "'");
  it->second = value;
}


bool
CostTable::has(std::string_view name) const
{
  return scalars_.find(name) != scalars_.end();
}


void
CostTable::set_copy_anchors(std::vector<std::pair<std::uint64_t, Nanos>> anchors)
{
  if (anchors.empty())
    throw LeapError(ErrorCode::ValidationError, "copy anchors must not be empty");
  for (std::size_t i = 0; i < anchors.size(); ++i)
    {
      if (anchors[i].first == 0 or anchors[i].second.count() < 0)
        throw LeapError(ErrorCode::ValidationError, "copy anchors must be positive");
      if (i > 0 and (anchors[i].first <= anchors[i - 1].first
                     or anchors[i].second < anchors[i - 1].second))
        throw LeapError(ErrorCode::ValidationError, "copy anchors must be increasing");
    }
  anchors_ = std::move(anchors);
}


Nanos
CostTable::copy_cost(std::uint64_t bytes) const
{
  if (bytes == 0)
    return Nanos(0);

  std::uint64_t x0 = 0;
  std::int64_t y0 = 0;
  std::size_t i = 0;
  while (i < anchors_.size() and anchors_[i].first < bytes)
    {
      x0 = anchors_[i].first;
      y0 = anchors_[i].second.count();
      ++i;
    }
  if (i < anchors_.size() and anchors_[i].first == bytes)
    return anchors_[i].second;

  std::uint64_t x1;
  std::int64_t y1;
  if (i < anchors_.size())
    {
      x1 = anchors_[i].first;
      y1 = anchors_[i].second.count();
    }
  else
    {
      // Extend the last segment.
      const auto& a = anchors_[anchors_.size() - 1];
      const auto b = anchors_.size() >= 2 ? anchors_[anchors_.size() - 2]
                                          : std::pair<std::uint64_t, Nanos>{0, Nanos(0)};
      x0 = b.first;
      y0 = b.second.count();
      x1 = a.first;
      y1 = a.second.count();
    }

  // Round half up in integer nanoseconds.
  const __int128 num = __int128(y1 - y0) * __int128(bytes - x0);
  const __int128 den = __int128(x1 - x0);
  const __int128 q = (2 * num + den) / (2 * den);
  return Nanos(y0 + std::int64_t(q));
}


std::string
CostTable::core_entry(CoreClass klass, AdjustDirection dir, bool optimized)
{
  std::string s = "core_";
  s += klass == CoreClass::Big ? "big" : "little";
  s += dir == AdjustDirection::Increase ? "_inc" : "_dec";
  s += optimized ? "_opt_ms" : "_nonopt_ms";
  return s;
}


std::string
CostTable::mem_entry(AdjustDirection dir)
{
  return dir == AdjustDirection::Increase ? "mem_inc_ms" : "mem_dec_ms";
}


std::string
CostTable::ipi_entry(CopyDirection dir)
{
  return dir == CopyDirection::RosToSandbox ? "ipi_ros_to_sb_us" : "ipi_sb_to_ros_us";
}


std::string
CostTable::periph_entry(DeviceKind kind, bool map, bool sandbox_side)
{
  std::string s;
  switch (kind)
    {
    case DeviceKind::Gpu:       s = "gpu"; break;
    case DeviceKind::Wifi:      s = "wifi"; break;
    case DeviceKind::Bluetooth: s = "bt"; break;
    case DeviceKind::Other:     s = "other"; break;
    }
  s += map ? "_map" : "_unmap";
  s += sandbox_side ? "_sandbox_ms" : "_ros_ms";
  return s;
}


void
Trace::append(Nanos time, std::string_view actor, std::string_view op, Json args,
              std::string_view verdict, std::string_view reason)
{
  if (mode_ == Mode::Off)
    return;
  Json rec;
  rec["v"] = kSchemaVersion;
  rec["time_us"] = to_us(time);
  rec["actor"] = actor;
  rec["op"] = op;
  rec["args"] = std::move(args);
  rec["verdict"] = verdict;
  rec["reason"] = reason;
  std::string line = rec.dump();
  digest_ = fnv1a(line, digest_);
  digest_ = fnv1a("\n", digest_);
  ++count_;
  if (mode_ == Mode::Full)
    lines_.push_back(std::move(line));
}


std::uint64_t
Engine::schedule(Nanos delay, std::string actor, Action action)
{
  if (delay.count() < 0)
    throw LeapError(ErrorCode::ValidationError, "negative schedule delay");
  const std::uint64_t seq = next_seq_++;
  queue_.push(Event{now_ + delay, seq, std::move(actor), action});
  return seq;
}


std::size_t
Engine::run_until(Nanos t_end, const std::function<void(const Event&)>& dispatch)
{
  if (t_end < now_)
    throw LeapError(ErrorCode::ValidationError, "run_until into the past");
  std::size_t n = 0;
  while (not queue_.empty() and queue_.top().time <= t_end)
    {
      Event ev = queue_.top();
      queue_.pop();
      now_ = std::max(now_, ev.time);
      ev.time = now_;
      dispatch(ev);
      ++n;
    }
  now_ = std::max(now_, t_end);
  return n;
}


void
Engine::advance(Nanos d)
{
  now_ += d;
}


Nanos
Engine::charge(std::string_view actor, std::string_view entry, Json args)
{
  return charge_value(actor, entry, costs_.at(entry), std::move(args));
}


Nanos
Engine::charge_value(std::string_view actor, std::string_view entry, Nanos d, Json args)
{
  Json a;
  a["entry"] = entry;
  a["duration_us"] = to_us(d);
  for (auto& [k, v] : args.items())
    a[k] = v;
  trace_.append(now_, actor, "charge", std::move(a), "ok", "");
  now_ += d;
  return d;
}


void
Engine::record(std::string_view actor, std::string_view op, Json args,
               std::string_view verdict, std::string_view reason)
{
  trace_.append(now_, actor, op, std::move(args), verdict, reason);
}

}  // namespace leapsim
