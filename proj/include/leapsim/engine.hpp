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

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "leapsim/hw_model.hpp"
#include "leapsim/types.hpp"

namespace leapsim
{
  using Json = nlohmann::ordered_json;

  Nanos from_ms(double ms);
  Nanos from_us(double us);
  double to_ms(Nanos t);
  double to_us(Nanos t);

  enum class AdjustDirection : std::uint8_t { Increase, Decrease };
  enum class CopyDirection : std::uint8_t { RosToSandbox, SandboxToRos };

  /// Named latency parameters. Defaults are the measured values of the
  /// reference prototype: boot/shutdown, shared-memory copy anchors, IPI
  /// latency, core/memory adjustment (with and without the busy-wait
  /// optimization) and per-device stage-2 map/unmap times. Every value is
  /// held as integer nanoseconds so sub-microsecond entries stay exact.
  class CostTable
  {
  public:
    static CostTable defaults();

    /// Scalar entry by name, e.g. "boot_ms". Throws ValidationError.
    Nanos at(std::string_view name) const;

    /// Override a scalar entry. Throws ValidationError on unknown names
    /// or negative values.
    void set(std::string_view name, Nanos value);

    bool has(std::string_view name) const;
    const std::map<std::string, Nanos, std::less<>>& scalars() const { return scalars_; }

    /// (bytes, time) anchors for shared-memory copies, ascending in bytes.
    const std::vector<std::pair<std::uint64_t, Nanos>>& copy_anchors() const { return anchors_; }
    void set_copy_anchors(std::vector<std::pair<std::uint64_t, Nanos>> anchors);

    /// Piecewise-linear copy time; (0, 0) is an implicit first anchor and
    /// the last segment extends beyond the largest anchor.
    Nanos copy_cost(std::uint64_t bytes) const;

    static std::string core_entry(CoreClass klass, AdjustDirection dir, bool optimized);
    static std::string mem_entry(AdjustDirection dir);
    static std::string ipi_entry(CopyDirection dir);
    /// map: true for mapping, false for unmapping; sandbox_side selects the
    /// sandbox column rather than the ROS column.
    static std::string periph_entry(DeviceKind kind, bool map, bool sandbox_side);

    friend bool operator==(const CostTable&, const CostTable&) = default;

  private:
    std::map<std::string, Nanos, std::less<>> scalars_;
    std::vector<std::pair<std::uint64_t, Nanos>> anchors_;
  };

  /// Line-delimited structured trace. Each record is one JSON object:
  /// {"v":1,"time_us":..,"actor":..,"op":..,"args":{..},"verdict":..,"reason":..}
  class Trace
  {
  public:
    enum class Mode : std::uint8_t { Off, DigestOnly, Full };

    static constexpr int kSchemaVersion = 1;

    explicit Trace(Mode mode = Mode::Full) : mode_(mode) { }

    void append(Nanos time, std::string_view actor, std::string_view op, Json args,
                std::string_view verdict, std::string_view reason);

    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }

    std::uint64_t digest() const { return digest_; }
    std::size_t count() const { return count_; }
    const std::vector<std::string>& lines() const { return lines_; }

  private:
    Mode mode_;
    std::uint64_t digest_ = kFnvOffset;
    std::size_t count_ = 0;
    std::vector<std::string> lines_;
  };

  enum class ActionKind : std::uint8_t { Directive, Tick, Render, DeviceIdle, Custom };

  struct Action
  {
    ActionKind kind = ActionKind::Custom;
    std::uint64_t arg = 0;
  };

  struct Event
  {
    Nanos time{0};
    std::uint64_t seq = 0;
    std::string actor;
    Action action;
  };

  /// Deterministic discrete-event scheduler. Dispatch order is
  /// (time, seq); operations charge their costs by advancing the clock, so
  /// an event whose time has already passed is dispatched at the current
  /// clock (run-to-completion).
  class Engine
  {
  public:
    explicit Engine(CostTable costs = CostTable::defaults(),
                    Trace::Mode mode = Trace::Mode::Full)
      : costs_(std::move(costs)), trace_(mode)
    { }

    Nanos now() const { return now_; }

    /// Enqueue an event at now + delay. Throws ValidationError on a
    /// negative delay.
    std::uint64_t schedule(Nanos delay, std::string actor, Action action);

    /// Dispatch every event with time <= t_end in order, then set the
    /// clock to at least t_end. Returns the number dispatched.
    std::size_t run_until(Nanos t_end, const std::function<void(const Event&)>& dispatch);

    std::size_t pending() const { return queue_.size(); }

    /// Advance the clock by d without a cost record.
    void advance(Nanos d);

    /// Charge a named cost: emits a "charge" record and advances the clock.
    Nanos charge(std::string_view actor, std::string_view entry, Json args = Json::object());

    /// Charge a computed duration attributed to a named entry.
    Nanos charge_value(std::string_view actor, std::string_view entry, Nanos d,
                       Json args = Json::object());

    void record(std::string_view actor, std::string_view op, Json args = Json::object(),
                std::string_view verdict = "ok", std::string_view reason = "");

    const CostTable& costs() const { return costs_; }
    CostTable& costs() { return costs_; }
    Trace& trace() { return trace_; }
    const Trace& trace() const { return trace_; }

  private:
    struct Later
    {
      bool operator()(const Event& a, const Event& b) const
      { return a.time != b.time ? a.time > b.time : a.seq > b.seq; }
    };

    Nanos now_{0};
    std::uint64_t next_seq_ = 0;
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    CostTable costs_;
    Trace trace_;
  };

}  // namespace leapsim
