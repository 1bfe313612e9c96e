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

#include "leapsim/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace leapsim
{

namespace
{

// Scalar grammar helpers.

[[noreturn]] void
parse_fail(const YAML::Mark& m, const std::string& msg)
{
  throw LeapError(ErrorCode::ParseError, "line " + std::to_string(m.line + 1) + ", column "
                  + std::to_string(m.column + 1) + ": " + msg);
}

[[noreturn]] void
parse_fail(const YAML::Node& n, const std::string& msg)
{
  parse_fail(n.Mark(), msg);
}

std::string
scalar(const YAML::Node& n, const std::string& what)
{
  if (not n.IsScalar())
    parse_fail(n, what + " must be a scalar");
  return n.Scalar();
}

template <typename T>
T
as(const YAML::Node& n, const std::string& what)
{
  if (not n.IsScalar())
    parse_fail(n, what + " must be a scalar");
  try
    {
      return n.as<T>();
    }
  catch (const YAML::Exception&)
    {
      parse_fail(n, "invalid " + what + " '" + n.Scalar() + "'");
    }
}

bool
as_bool(const YAML::Node& n, const std::string& what)
{
  return as<bool>(n, what);
}

void
check_keys(const YAML::Node& n, const std::string& what, std::initializer_list<const char*> keys)
{
  if (not n.IsMap())
    parse_fail(n, what + " must be a mapping");
  for (const auto& kv : n)
    {
      const std::string k = kv.first.Scalar();
      if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; }))
        parse_fail(kv.first, "unknown key '" + k + "' in " + what);
    }
}

struct Unit
{
  const char* suffix;
  std::uint64_t factor;
};

constexpr Unit kSizeUnits[] = {{"GiB", GiB}, {"MiB", MiB}, {"KiB", KiB}, {"B", 1}};
constexpr Unit kTimeUnits[] = {{"s", 1'000'000'000}, {"ms", 1'000'000}, {"us", 1'000}, {"ns", 1}};

/// "<number><unit>"; integers only for sizes, decimals allowed for times.
template <std::size_t N>
std::uint64_t
parse_quantity(const YAML::Node& n, const std::string& what, const Unit (&units)[N],
               bool bare_ok)
{
  const std::string s = scalar(n, what);
  std::size_t split = 0;
  while (split < s.size() and (std::isdigit(static_cast<unsigned char>(s[split])) or s[split] == '.'
                               or s[split] == 'x' or std::isxdigit(static_cast<unsigned char>(s[split]))))
    {
      // Stop before a unit suffix that starts with a hex letter ("B").
      bool unit_here = false;
      for (const Unit& u : units)
        if (s.compare(split, std::string::npos, u.suffix) == 0)
          unit_here = true;
      if (unit_here)
        break;
      ++split;
    }
  const std::string num = s.substr(0, split);
  const std::string unit = s.substr(split);
  if (num.empty())
    parse_fail(n, "invalid " + what + " '" + s + "'");
  std::uint64_t factor = 0;
  if (unit.empty())
    {
      if (not bare_ok)
        parse_fail(n, what + " '" + s + "' needs a unit");
      factor = 1;
    }
  for (const Unit& u : units)
    if (unit == u.suffix)
      factor = u.factor;
  if (factor == 0)
    parse_fail(n, "unknown unit in " + what + " '" + s + "'");
  try
    {
      if (num.find('.') != std::string::npos)
        {
          std::size_t used = 0;
          const double v = std::stod(num, &used);
          if (used != num.size() or v < 0)
            throw std::invalid_argument(num);
          return static_cast<std::uint64_t>(std::llround(v * double(factor)));
        }
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(num, &used, 0);
      if (used != num.size())
        throw std::invalid_argument(num);
      return v * factor;
    }
  catch (const std::logic_error&)
    {
      parse_fail(n, "invalid " + what + " '" + s + "'");
    }
}

std::uint64_t
parse_size(const YAML::Node& n, const std::string& what)
{
  return parse_quantity(n, what, kSizeUnits, true);
}

Nanos
parse_duration(const YAML::Node& n, const std::string& what)
{
  return Nanos(static_cast<std::int64_t>(parse_quantity(n, what, kTimeUnits, false)));
}

template <std::size_t N>
std::string
format_quantity(std::uint64_t v, const Unit (&units)[N], bool bare)
{
  for (const Unit& u : units)
    if (v != 0 and v % u.factor == 0 and (u.factor != 1 or not bare))
      return std::to_string(v / u.factor) + u.suffix;
  return bare ? std::to_string(v) : std::to_string(v) + units[N - 1].suffix;
}

std::string
format_size(std::uint64_t v)
{
  if (v == 0)
    return "0";
  for (const Unit& u : kSizeUnits)
    if (u.factor > 1 and v % u.factor == 0)
      return std::to_string(v / u.factor) + u.suffix;
  return std::to_string(v);
}

std::string
format_duration(Nanos d)
{
  const auto v = static_cast<std::uint64_t>(d.count());
  if (v == 0)
    return "0ms";
  return format_quantity(v, kTimeUnits, false);
}

PhysRange
parse_range(const YAML::Node& n, const std::string& what)
{
  if (not n.IsSequence() or n.size() != 2)
    parse_fail(n, what + " must be [begin, end]");
  return {parse_size(n[0], what), parse_size(n[1], what)};
}

template <typename E, std::size_t N>
E
parse_enum(const YAML::Node& n, const std::string& what, const std::pair<const char*, E> (&table)[N])
{
  const std::string s = scalar(n, what);
  for (const auto& [name, v] : table)
    if (s == name)
      return v;
  parse_fail(n, "unknown " + what + " '" + s + "'");
}

constexpr std::pair<const char*, CoreClass> kClasses[] = {{"big", CoreClass::Big},
                                                          {"little", CoreClass::Little}};
constexpr std::pair<const char*, DeviceKind> kKinds[] = {
  {"gpu", DeviceKind::Gpu}, {"wifi", DeviceKind::Wifi}, {"bluetooth", DeviceKind::Bluetooth},
  {"other", DeviceKind::Other}};
constexpr std::pair<const char*, IsolationMode> kModes[] = {{"leap", IsolationMode::Leap},
                                                            {"tzasc", IsolationMode::Tzasc}};
constexpr std::pair<const char*, CopyDirection> kDirections[] = {
  {"to_sandbox", CopyDirection::RosToSandbox}, {"to_ros", CopyDirection::SandboxToRos}};
constexpr std::pair<const char*, Directive::Op> kOps[] = {
  {"create_sandbox", Directive::Op::CreateSandbox},
  {"terminate", Directive::Op::Terminate},
  {"request_peripheral", Directive::Op::RequestPeripheral},
  {"release_peripheral", Directive::Op::ReleasePeripheral},
  {"send_data", Directive::Op::SendData},
  {"attach_memory", Directive::Op::AttachMemory},
  {"detach_memory", Directive::Op::DetachMemory},
  {"increase_core", Directive::Op::IncreaseCore},
  {"release_core", Directive::Op::ReleaseCore},
  {"ros_use_device", Directive::Op::RosUseDevice},
  {"attack", Directive::Op::Attack},
};

template <typename E, std::size_t N>
std::string
enum_name(E v, const std::pair<const char*, E> (&table)[N])
{
  for (const auto& [name, x] : table)
    if (x == v)
      return name;
  return "?";
}


// Machine and platform sections: a preset plus field overrides.

MachineConfig
machine_preset(const std::string& name, const YAML::Node& at)
{
  if (name == "default")
    return default_machine_config();
  if (name == "small")
    return small_machine_config();
  parse_fail(at, "unknown machine preset '" + name + "'");
}

PlatformConfig
platform_preset(const std::string& name, const YAML::Node& at)
{
  if (name == "default")
    return default_platform();
  if (name == "small")
    return small_platform();
  parse_fail(at, "unknown platform preset '" + name + "'");
}

void
parse_machine(const YAML::Node& n, Scenario& s)
{
  check_keys(n, "machine", {"preset", "address_space", "ram", "io_window", "cores", "peripherals",
                            "reserved", "cache_line", "tlb_capacity", "cache_capacity"});
  if (n["preset"])
    s.machine_preset = scalar(n["preset"], "machine preset");
  MachineConfig& m = s.machine = machine_preset(s.machine_preset, n["preset"] ? n["preset"] : n);
  if (n["address_space"])
    m.address_space_bytes = parse_size(n["address_space"], "address_space");
  if (n["ram"])
    m.ram_bytes = parse_size(n["ram"], "ram");
  if (n["io_window"])
    m.io_window = parse_range(n["io_window"], "io_window");
  if (n["cache_line"])
    m.cache_line_bytes = parse_size(n["cache_line"], "cache_line");
  if (n["tlb_capacity"])
    m.tlb_capacity = as<std::size_t>(n["tlb_capacity"], "tlb_capacity");
  if (n["cache_capacity"])
    m.cache_capacity = as<std::size_t>(n["cache_capacity"], "cache_capacity");
  if (const auto cores = n["cores"])
    {
      if (not cores.IsSequence())
        parse_fail(cores, "cores must be a list of core classes");
      m.cores.clear();
      for (std::size_t i = 0; i < cores.size(); ++i)
        m.cores.push_back({CoreId{std::uint32_t(i)}, parse_enum(cores[i], "core class", kClasses)});
    }
  if (const auto ps = n["peripherals"])
    {
      if (not ps.IsSequence())
        parse_fail(ps, "peripherals must be a list");
      m.peripherals.clear();
      for (std::size_t i = 0; i < ps.size(); ++i)
        {
          const auto& p = ps[i];
          check_keys(p, "peripheral", {"name", "kind", "mmio", "dma", "independent",
                                       "always_busy"});
          if (not p["name"] or not p["kind"] or not p["mmio"])
            parse_fail(p, "peripheral needs name, kind and mmio");
          PeripheralDesc d;
          d.id = DevId{std::uint32_t(i)};
          d.name = scalar(p["name"], "peripheral name");
          d.kind = parse_enum(p["kind"], "device kind", kKinds);
          d.mmio = parse_range(p["mmio"], "mmio");
          d.dma_capable = p["dma"] ? as_bool(p["dma"], "dma") : false;
          d.independent = p["independent"] ? as_bool(p["independent"], "independent") : true;
          d.always_busy_in_ros = p["always_busy"] ? as_bool(p["always_busy"], "always_busy") : false;
          m.peripherals.push_back(d);
        }
    }
  if (const auto rs = n["reserved"])
    {
      if (not rs.IsSequence())
        parse_fail(rs, "reserved must be a list of ranges");
      m.reserved.clear();
      for (const auto& r : rs)
        m.reserved.push_back(parse_range(r, "reserved range"));
    }
}

void
parse_platform(const YAML::Node& n, Scenario& s)
{
  check_keys(n, "platform", {"preset", "cma", "shared_pool", "channel", "sandbox_base",
                             "attach_granule", "quota", "wait_timeout", "tick", "tzasc_regions",
                             "big_rate", "little_rate", "optimized", "render"});
  if (n["preset"])
    s.platform_preset = scalar(n["preset"], "platform preset");
  PlatformConfig& p = s.platform = platform_preset(s.platform_preset, n["preset"] ? n["preset"] : n);
  if (const auto c = n["cma"])
    {
      if (not c.IsSequence())
        parse_fail(c, "cma must be a list of ranges");
      p.cma_extents.clear();
      for (const auto& r : c)
        p.cma_extents.push_back(parse_range(r, "cma extent"));
    }
  if (n["shared_pool"])
    p.shared_pool = parse_range(n["shared_pool"], "shared_pool");
  if (n["channel"])
    p.channel_bytes = parse_size(n["channel"], "channel");
  if (n["sandbox_base"])
    p.sandbox_base_bytes = parse_size(n["sandbox_base"], "sandbox_base");
  if (n["attach_granule"])
    p.attach_granule = parse_size(n["attach_granule"], "attach_granule");
  if (const auto q = n["quota"])
    {
      check_keys(q, "quota", {"cores", "memory"});
      if (q["cores"])
        p.default_quota.max_cores = as<std::uint32_t>(q["cores"], "quota cores");
      if (q["memory"])
        p.default_quota.max_memory = parse_size(q["memory"], "quota memory");
    }
  if (n["wait_timeout"])
    p.wait_timeout = parse_duration(n["wait_timeout"], "wait_timeout");
  if (n["tick"])
    p.tick = parse_duration(n["tick"], "tick");
  if (n["tzasc_regions"])
    p.tzasc_regions = as<std::uint32_t>(n["tzasc_regions"], "tzasc_regions");
  if (n["big_rate"])
    p.big_rate = as<double>(n["big_rate"], "big_rate");
  if (n["little_rate"])
    p.little_rate = as<double>(n["little_rate"], "little_rate");
  if (n["optimized"])
    p.optimized = as_bool(n["optimized"], "optimized");
  if (n["render"])
    p.render = as_bool(n["render"], "render");
}

Quota
parse_quota(const YAML::Node& q, const Quota& base)
{
  check_keys(q, "quota", {"cores", "memory"});
  Quota out = base;
  if (q["cores"])
    out.max_cores = as<std::uint32_t>(q["cores"], "quota cores");
  if (q["memory"])
    out.max_memory = parse_size(q["memory"], "quota memory");
  return out;
}

Workload
parse_workload(const YAML::Node& n)
{
  if (not n.IsMap() or not n["kind"])
    parse_fail(n, "workload needs a kind");
  const std::string kind = scalar(n["kind"], "workload kind");
  if (kind == "idle")
    {
      check_keys(n, "workload", {"kind"});
      return Workload::idle();
    }
  if (kind == "inference")
    {
      check_keys(n, "workload", {"kind", "images", "units_per_image", "parallelizable",
                                 "gpu_speedup"});
      if (not n["images"])
        parse_fail(n, "inference workload needs images");
      const Workload d = Workload::inference(1);
      return Workload::inference(
        as<std::uint32_t>(n["images"], "images"),
        n["units_per_image"] ? as<double>(n["units_per_image"], "units_per_image") : d.units_per_image,
        n["parallelizable"] ? as_bool(n["parallelizable"], "parallelizable") : d.parallelizable,
        n["gpu_speedup"] ? as<double>(n["gpu_speedup"], "gpu_speedup") : d.gpu_speedup);
    }
  if (kind == "cipher")
    {
      check_keys(n, "workload", {"kind", "files", "cache", "queries", "flexible"});
      if (not n["files"] or not n["files"].IsSequence())
        parse_fail(n, "cipher workload needs a files list");
      std::vector<std::uint64_t> files;
      for (const auto& f : n["files"])
        files.push_back(parse_size(f, "file size"));
      const Workload d = Workload::cipher({}, 10 * MiB);
      return Workload::cipher(std::move(files),
                              n["cache"] ? parse_size(n["cache"], "cache") : d.cache_base,
                              n["queries"] ? as<std::uint32_t>(n["queries"], "queries") : d.queries,
                              n["flexible"] ? as_bool(n["flexible"], "flexible") : d.flexible_memory);
    }
  parse_fail(n["kind"], "unknown workload kind '" + kind + "'");
}

Directive
parse_directive(const YAML::Node& n, const PlatformConfig& p)
{
  check_keys(n, "directive", {"at", "op", "handle", "app", "quota", "prefer", "workload", "tamper",
                              "auto_terminate", "device", "bytes", "direction", "core", "hold",
                              "attack"});
  if (not n["at"] or not n["op"])
    parse_fail(n, "directive needs 'at' and 'op'");
  Directive d;
  d.at = parse_duration(n["at"], "at");
  d.op = parse_enum(n["op"], "directive op", kOps);
  using Op = Directive::Op;

  auto need = [&](const char* key) {
    if (not n[key])
      parse_fail(n, std::string(to_string(d.op)) + " needs '" + key + "'");
    return n[key];
  };
  const bool per_sandbox = d.op != Op::RosUseDevice and d.op != Op::Attack;
  if (per_sandbox)
    d.handle = scalar(need("handle"), "handle");

  switch (d.op)
    {
    case Op::CreateSandbox:
      d.app = scalar(need("app"), "app");
      if (n["quota"])
        d.quota = parse_quota(n["quota"], p.default_quota);
      if (n["prefer"])
        d.prefer = parse_enum(n["prefer"], "core class", kClasses);
      if (n["workload"])
        d.workload = parse_workload(n["workload"]);
      if (n["auto_terminate"])
        d.auto_terminate = as_bool(n["auto_terminate"], "auto_terminate");
      break;
    case Op::RequestPeripheral:
    case Op::ReleasePeripheral:
      d.device = scalar(need("device"), "device");
      break;
    case Op::SendData:
      d.bytes = parse_size(need("bytes"), "bytes");
      if (n["direction"])
        d.direction = parse_enum(n["direction"], "direction", kDirections);
      break;
    case Op::AttachMemory:
    case Op::DetachMemory:
      d.bytes = parse_size(need("bytes"), "bytes");
      break;
    case Op::ReleaseCore:
      if (n["core"])
        d.core = CoreId{as<std::uint32_t>(n["core"], "core")};
      break;
    case Op::RosUseDevice:
      d.device = scalar(need("device"), "device");
      d.hold = parse_duration(need("hold"), "hold");
      break;
    case Op::Attack:
      {
        const auto a = need("attack");
        try
          {
            d.attack = parse_attack_kind(scalar(a, "attack"));
          }
        catch (const LeapError&)
          {
            parse_fail(a, "unknown attack '" + a.Scalar() + "'");
          }
        break;
      }
    case Op::Terminate:
    case Op::IncreaseCore:
      break;
    }
  if (n["tamper"])
    {
      if (d.op != Op::CreateSandbox and d.op != Op::RequestPeripheral)
        parse_fail(n["tamper"], "tamper applies to create_sandbox and request_peripheral");
      d.tamper = as_bool(n["tamper"], "tamper");
    }
  return d;
}


// Serialization.

void
emit_range(YAML::Emitter& out, const PhysRange& r)
{
  out << YAML::Flow << YAML::BeginSeq << format_size(r.begin) << format_size(r.end)
      << YAML::EndSeq;
}

void
emit_machine(YAML::Emitter& out, const Scenario& s)
{
  const MachineConfig base = s.machine_preset == "small" ? small_machine_config()
                                                         : default_machine_config();
  const MachineConfig& m = s.machine;
  out << YAML::Key << "machine" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "preset" << YAML::Value << s.machine_preset;
  if (m.address_space_bytes != base.address_space_bytes)
    out << YAML::Key << "address_space" << YAML::Value << format_size(m.address_space_bytes);
  if (m.ram_bytes != base.ram_bytes)
    out << YAML::Key << "ram" << YAML::Value << format_size(m.ram_bytes);
  if (m.io_window != base.io_window)
    {
      out << YAML::Key << "io_window" << YAML::Value;
      emit_range(out, m.io_window);
    }
  if (m.cores != base.cores)
    {
      out << YAML::Key << "cores" << YAML::Value << YAML::Flow << YAML::BeginSeq;
      for (const auto& c : m.cores)
        out << std::string(to_string(c.klass));
      out << YAML::EndSeq;
    }
  if (m.peripherals != base.peripherals)
    {
      out << YAML::Key << "peripherals" << YAML::Value << YAML::BeginSeq;
      for (const auto& p : m.peripherals)
        {
          out << YAML::Flow << YAML::BeginMap;
          out << YAML::Key << "name" << YAML::Value << p.name;
          out << YAML::Key << "kind" << YAML::Value << enum_name(p.kind, kKinds);
          out << YAML::Key << "mmio" << YAML::Value;
          emit_range(out, p.mmio);
          out << YAML::Key << "dma" << YAML::Value << p.dma_capable;
          out << YAML::Key << "independent" << YAML::Value << p.independent;
          out << YAML::Key << "always_busy" << YAML::Value << p.always_busy_in_ros;
          out << YAML::EndMap;
        }
      out << YAML::EndSeq;
    }
  if (m.reserved != base.reserved)
    {
      out << YAML::Key << "reserved" << YAML::Value << YAML::BeginSeq;
      for (const auto& r : m.reserved)
        emit_range(out, r);
      out << YAML::EndSeq;
    }
  if (m.cache_line_bytes != base.cache_line_bytes)
    out << YAML::Key << "cache_line" << YAML::Value << format_size(m.cache_line_bytes);
  if (m.tlb_capacity != base.tlb_capacity)
    out << YAML::Key << "tlb_capacity" << YAML::Value << m.tlb_capacity;
  if (m.cache_capacity != base.cache_capacity)
    out << YAML::Key << "cache_capacity" << YAML::Value << m.cache_capacity;
  out << YAML::EndMap;
}

void
emit_quota(YAML::Emitter& out, const Quota& q)
{
  out << YAML::Flow << YAML::BeginMap << YAML::Key << "cores" << YAML::Value << q.max_cores
      << YAML::Key << "memory" << YAML::Value << format_size(q.max_memory) << YAML::EndMap;
}

void
emit_platform(YAML::Emitter& out, const Scenario& s)
{
  const PlatformConfig base = s.platform_preset == "small" ? small_platform() : default_platform();
  const PlatformConfig& p = s.platform;
  out << YAML::Key << "platform" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "preset" << YAML::Value << s.platform_preset;
  if (p.cma_extents != base.cma_extents)
    {
      out << YAML::Key << "cma" << YAML::Value << YAML::BeginSeq;
      for (const auto& r : p.cma_extents)
        emit_range(out, r);
      out << YAML::EndSeq;
    }
  if (p.shared_pool != base.shared_pool)
    {
      out << YAML::Key << "shared_pool" << YAML::Value;
      emit_range(out, p.shared_pool);
    }
  if (p.channel_bytes != base.channel_bytes)
    out << YAML::Key << "channel" << YAML::Value << format_size(p.channel_bytes);
  if (p.sandbox_base_bytes != base.sandbox_base_bytes)
    out << YAML::Key << "sandbox_base" << YAML::Value << format_size(p.sandbox_base_bytes);
  if (p.attach_granule != base.attach_granule)
    out << YAML::Key << "attach_granule" << YAML::Value << format_size(p.attach_granule);
  if (p.default_quota != base.default_quota)
    {
      out << YAML::Key << "quota" << YAML::Value;
      emit_quota(out, p.default_quota);
    }
  if (p.wait_timeout != base.wait_timeout)
    out << YAML::Key << "wait_timeout" << YAML::Value << format_duration(p.wait_timeout);
  if (p.tick != base.tick)
    out << YAML::Key << "tick" << YAML::Value << format_duration(p.tick);
  if (p.tzasc_regions != base.tzasc_regions)
    out << YAML::Key << "tzasc_regions" << YAML::Value << p.tzasc_regions;
  if (p.big_rate != base.big_rate)
    out << YAML::Key << "big_rate" << YAML::Value << p.big_rate;
  if (p.little_rate != base.little_rate)
    out << YAML::Key << "little_rate" << YAML::Value << p.little_rate;
  if (p.optimized != base.optimized)
    out << YAML::Key << "optimized" << YAML::Value << p.optimized;
  if (p.render != base.render)
    out << YAML::Key << "render" << YAML::Value << p.render;
  out << YAML::EndMap;
}

void
emit_workload(YAML::Emitter& out, const Workload& w)
{
  out << YAML::Flow << YAML::BeginMap;
  switch (w.kind)
    {
    case Workload::Kind::Idle:
      out << YAML::Key << "kind" << YAML::Value << "idle";
      break;
    case Workload::Kind::InferenceBatch:
      out << YAML::Key << "kind" << YAML::Value << "inference";
      out << YAML::Key << "images" << YAML::Value << w.images;
      out << YAML::Key << "units_per_image" << YAML::Value << w.units_per_image;
      out << YAML::Key << "parallelizable" << YAML::Value << w.parallelizable;
      out << YAML::Key << "gpu_speedup" << YAML::Value << w.gpu_speedup;
      break;
    case Workload::Kind::CipherQuery:
      out << YAML::Key << "kind" << YAML::Value << "cipher";
      out << YAML::Key << "files" << YAML::Value << YAML::Flow << YAML::BeginSeq;
      for (auto f : w.file_sizes)
        out << format_size(f);
      out << YAML::EndSeq;
      out << YAML::Key << "cache" << YAML::Value << format_size(w.cache_base);
      out << YAML::Key << "queries" << YAML::Value << w.queries;
      out << YAML::Key << "flexible" << YAML::Value << w.flexible_memory;
      break;
    }
  out << YAML::EndMap;
}

void
emit_directive(YAML::Emitter& out, const Directive& d)
{
  using Op = Directive::Op;
  out << YAML::BeginMap;
  out << YAML::Key << "at" << YAML::Value << format_duration(d.at);
  out << YAML::Key << "op" << YAML::Value << std::string(to_string(d.op));
  if (not d.handle.empty())
    out << YAML::Key << "handle" << YAML::Value << d.handle;
  switch (d.op)
    {
    case Op::CreateSandbox:
      out << YAML::Key << "app" << YAML::Value << d.app;
      if (d.quota)
        {
          out << YAML::Key << "quota" << YAML::Value;
          emit_quota(out, *d.quota);
        }
      if (d.prefer)
        out << YAML::Key << "prefer" << YAML::Value << std::string(to_string(*d.prefer));
      if (d.workload.kind != Workload::Kind::Idle)
        {
          out << YAML::Key << "workload" << YAML::Value;
          emit_workload(out, d.workload);
        }
      if (d.auto_terminate)
        out << YAML::Key << "auto_terminate" << YAML::Value << true;
      break;
    case Op::RequestPeripheral:
    case Op::ReleasePeripheral:
      out << YAML::Key << "device" << YAML::Value << d.device;
      break;
    case Op::SendData:
      out << YAML::Key << "bytes" << YAML::Value << format_size(d.bytes);
      out << YAML::Key << "direction" << YAML::Value << enum_name(d.direction, kDirections);
      break;
    case Op::AttachMemory:
    case Op::DetachMemory:
      out << YAML::Key << "bytes" << YAML::Value << format_size(d.bytes);
      break;
    case Op::ReleaseCore:
      if (d.core)
        out << YAML::Key << "core" << YAML::Value << index(*d.core);
      break;
    case Op::RosUseDevice:
      out << YAML::Key << "device" << YAML::Value << d.device;
      out << YAML::Key << "hold" << YAML::Value << format_duration(d.hold);
      break;
    case Op::Attack:
      out << YAML::Key << "attack" << YAML::Value << std::string(to_string(d.attack));
      break;
    case Op::Terminate:
    case Op::IncreaseCore:
      break;
    }
  if (d.tamper)
    out << YAML::Key << "tamper" << YAML::Value << true;
  out << YAML::EndMap;
}

std::vector<std::string>
flag_names(const DefenseFlags& f)
{
  std::vector<std::string> out;
  if (f.no_verify)
    out.emplace_back("no_verify");
  if (f.no_sanitize)
    out.emplace_back("no_sanitize");
  if (f.no_legality_check)
    out.emplace_back("no_legality_check");
  if (f.no_smmu)
    out.emplace_back("no_smmu");
  return out;
}

}  // namespace


std::string_view
to_string(Directive::Op op)
{
  for (const auto& [name, v] : kOps)
    if (v == op)
      return name;
  return "?";
}


Bytes
app_payload(const AppSpec& app)
{
  std::mt19937_64 rng(fnv1a(app.id));
  Bytes out(app.size);
  for (auto& b : out)
    b = static_cast<std::uint8_t>(rng() >> 56);
  return out;
}


Scenario
parse_scenario(const std::string& text)
{
  YAML::Node root;
  try
    {
      root = YAML::Load(text);
    }
  catch (const YAML::Exception& e)
    {
      parse_fail(e.mark, e.msg);
    }
  if (not root.IsMap())
    throw LeapError(ErrorCode::ParseError, "line 1, column 1: scenario must be a mapping");
  check_keys(root, "scenario", {"leapsim_scenario", "name", "seed", "mode", "defenses", "horizon",
                                "stop_when_idle", "machine", "platform", "costs", "apps",
                                "timeline", "explore"});
  if (not root["leapsim_scenario"])
    parse_fail(root, "missing 'leapsim_scenario' version header");
  if (as<int>(root["leapsim_scenario"], "version") != kScenarioVersion)
    parse_fail(root["leapsim_scenario"], "unsupported scenario version");

  Scenario s;
  if (root["name"])
    s.name = scalar(root["name"], "name");
  if (root["seed"])
    s.seed = as<std::uint64_t>(root["seed"], "seed");
  if (root["mode"])
    s.mode = parse_enum(root["mode"], "mode", kModes);
  if (const auto f = root["defenses"])
    {
      if (not f.IsSequence())
        parse_fail(f, "defenses must be a list of mutation flags");
      for (const auto& x : f)
        try
          {
            apply_mutation(s.flags, scalar(x, "mutation flag"));
          }
        catch (const LeapError&)
          {
            parse_fail(x, "unknown mutation flag '" + x.Scalar() + "'");
          }
    }
  if (root["horizon"])
    s.horizon = parse_duration(root["horizon"], "horizon");
  if (root["stop_when_idle"])
    s.stop_when_idle = as_bool(root["stop_when_idle"], "stop_when_idle");
  if (root["machine"])
    parse_machine(root["machine"], s);
  if (root["platform"])
    parse_platform(root["platform"], s);
  s.platform.mode = s.mode;

  if (const auto c = root["costs"])
    {
      if (not c.IsMap())
        parse_fail(c, "costs must be a mapping");
      const CostTable defaults = CostTable::defaults();
      for (const auto& kv : c)
        {
          const std::string k = kv.first.Scalar();
          if (not defaults.has(k))
            parse_fail(kv.first, "unknown cost entry '" + k + "'");
          s.cost_overrides[k] = parse_duration(kv.second, k);
        }
    }
  if (const auto a = root["apps"])
    {
      if (not a.IsSequence())
        parse_fail(a, "apps must be a list");
      for (const auto& x : a)
        {
          check_keys(x, "app", {"id", "size"});
          if (not x["id"])
            parse_fail(x, "app needs an id");
          AppSpec app{scalar(x["id"], "app id"), 4096};
          if (x["size"])
            app.size = parse_size(x["size"], "app size");
          s.apps.push_back(app);
        }
    }
  if (const auto t = root["timeline"])
    {
      if (not t.IsSequence())
        parse_fail(t, "timeline must be a list");
      for (const auto& x : t)
        s.timeline.push_back(parse_directive(x, s.platform));
    }
  if (const auto e = root["explore"])
    {
      check_keys(e, "explore", {"depth", "budget", "max_sandboxes", "alphabet"});
      ExploreSection x;
      if (e["depth"])
        x.depth = as<std::uint32_t>(e["depth"], "depth");
      if (e["budget"])
        x.budget = as<std::size_t>(e["budget"], "budget");
      if (e["max_sandboxes"])
        x.max_sandboxes = as<std::uint32_t>(e["max_sandboxes"], "max_sandboxes");
      if (const auto al = e["alphabet"])
        {
          if (not al.IsSequence())
            parse_fail(al, "alphabet must be a list of step names");
          for (const auto& op : al)
            {
              const std::string name = scalar(op, "step name");
              bool found = false;
              for (std::uint8_t k = 0; k <= std::uint8_t(StepOp::RosTouchDevice); ++k)
                if (to_string(StepOp(k)) == name)
                  {
                    x.alphabet.push_back(StepOp(k));
                    found = true;
                  }
              if (not found)
                parse_fail(op, "unknown step '" + name + "'");
            }
        }
      s.explore = x;
    }
  validate(s);
  return s;
}


Scenario
load_scenario(const std::string& path)
{
  std::ifstream in(path);
  if (not in)
    throw LeapError(ErrorCode::ValidationError, "cannot open scenario '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}


std::string
serialize(const Scenario& s)
{
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "leapsim_scenario" << YAML::Value << kScenarioVersion;
  out << YAML::Key << "name" << YAML::Value << s.name;
  out << YAML::Key << "seed" << YAML::Value << s.seed;
  out << YAML::Key << "mode" << YAML::Value << enum_name(s.mode, kModes);
  const auto flags = flag_names(s.flags);
  if (not flags.empty())
    out << YAML::Key << "defenses" << YAML::Value << YAML::Flow << flags;
  out << YAML::Key << "horizon" << YAML::Value << format_duration(s.horizon);
  if (not s.stop_when_idle)
    out << YAML::Key << "stop_when_idle" << YAML::Value << false;
  emit_machine(out, s);
  emit_platform(out, s);
  if (not s.cost_overrides.empty())
    {
      out << YAML::Key << "costs" << YAML::Value << YAML::BeginMap;
      for (const auto& [k, v] : s.cost_overrides)
        out << YAML::Key << k << YAML::Value << format_duration(v);
      out << YAML::EndMap;
    }
  if (not s.apps.empty())
    {
      out << YAML::Key << "apps" << YAML::Value << YAML::BeginSeq;
      for (const auto& a : s.apps)
        out << YAML::Flow << YAML::BeginMap << YAML::Key << "id" << YAML::Value << a.id
            << YAML::Key << "size" << YAML::Value << format_size(a.size) << YAML::EndMap;
      out << YAML::EndSeq;
    }
  out << YAML::Key << "timeline" << YAML::Value << YAML::BeginSeq;
  for (const auto& d : s.timeline)
    emit_directive(out, d);
  out << YAML::EndSeq;
  if (s.explore)
    {
      out << YAML::Key << "explore" << YAML::Value << YAML::BeginMap;
      out << YAML::Key << "depth" << YAML::Value << s.explore->depth;
      out << YAML::Key << "budget" << YAML::Value << s.explore->budget;
      out << YAML::Key << "max_sandboxes" << YAML::Value << s.explore->max_sandboxes;
      if (not s.explore->alphabet.empty())
        {
          out << YAML::Key << "alphabet" << YAML::Value << YAML::Flow << YAML::BeginSeq;
          for (StepOp op : s.explore->alphabet)
            out << std::string(to_string(op));
          out << YAML::EndSeq;
        }
      out << YAML::EndMap;
    }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}


void
validate(const Scenario& s)
{
  auto fail = [](const std::string& msg) { throw LeapError(ErrorCode::ValidationError, msg); };
  try
    {
      validate(s.machine);
      validate(s.platform, build_machine(s.machine));
    }
  catch (const LeapError& e)
    {
      fail(std::string("configuration: ") + e.what());
    }
  if (s.horizon.count() <= 0)
    fail("horizon must be positive");

  std::set<std::string> apps;
  for (const auto& a : s.apps)
    {
      if (a.id.empty() or a.id.rfind("driver:", 0) == 0)
        fail("invalid app id '" + a.id + "'");
      if (not apps.insert(a.id).second)
        fail("duplicate app '" + a.id + "'");
    }

  auto device_ok = [&](const std::string& name) {
    for (const auto& p : s.machine.peripherals)
      if (p.name == name)
        return true;
    return false;
  };

  std::set<std::string> handles;
  Nanos prev{0};
  for (std::size_t i = 0; i < s.timeline.size(); ++i)
    {
      const Directive& d = s.timeline[i];
      const std::string where = "directive " + std::to_string(i) + " ("
        + std::string(to_string(d.op)) + ")";
      if (d.at < prev)
        fail(where + ": timeline is not sorted by time");
      prev = d.at;
      using Op = Directive::Op;
      if (d.op == Op::CreateSandbox)
        {
          if (d.handle.empty())
            fail(where + ": empty handle");
          if (not apps.count(d.app))
            fail(where + ": unknown app '" + d.app + "'");
          handles.insert(d.handle);
          if (d.quota and d.quota->max_cores == 0)
            fail(where + ": quota needs at least one core");
        }
      else if (d.op != Op::RosUseDevice and d.op != Op::Attack and not handles.count(d.handle))
        fail(where + ": unknown sandbox handle '" + d.handle + "'");
      if ((d.op == Op::RequestPeripheral or d.op == Op::ReleasePeripheral
           or d.op == Op::RosUseDevice) and not device_ok(d.device))
        fail(where + ": unknown device '" + d.device + "'");
      if (d.op == Op::ReleaseCore and d.core and index(*d.core) >= s.machine.cores.size())
        fail(where + ": no core " + std::to_string(index(*d.core)));
      if ((d.op == Op::AttachMemory or d.op == Op::DetachMemory) and d.bytes == 0)
        fail(where + ": zero-byte memory change");
    }
  if (s.explore and s.explore->max_sandboxes == 0)
    fail("explore.max_sandboxes must be positive");
}


CostTable
costs_for(const Scenario& s)
{
  CostTable t = CostTable::defaults();
  for (const auto& [k, v] : s.cost_overrides)
    t.set(k, v);
  return t;
}


ExploreConfig
explore_config(const Scenario& s)
{
  ExploreConfig c;
  c.machine = s.machine;
  c.platform = s.platform;
  c.flags = s.flags;
  if (s.explore)
    {
      c.depth = s.explore->depth;
      c.budget = s.explore->budget;
      c.max_sandboxes = s.explore->max_sandboxes;
      c.alphabet = {s.explore->alphabet.begin(), s.explore->alphabet.end()};
    }
  return c;
}


Scenario
random_honest_scenario(std::uint64_t seed, std::size_t max_events)
{
  std::mt19937_64 rng(seed);
  auto pick = [&](std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng); };
  auto chance = [&](double p) { return std::uniform_real_distribution<double>(0, 1)(rng) < p; };

  Scenario s;
  s.name = "random-" + std::to_string(seed);
  s.seed = seed;
  s.platform.render = false;
  s.apps = {{"app0", 4096}, {"app1", 8192}};

  const Nanos span = std::chrono::seconds(4);
  s.horizon = span + std::chrono::seconds(1);
  const std::size_t ticks = std::size_t(s.horizon / s.platform.tick);
  const std::size_t budget = max_events > ticks + 10 ? max_events - ticks : 10;
  const std::size_t n = 5 + pick(budget - 4);

  std::vector<Nanos> times(n);
  for (auto& t : times)
    t = Nanos(std::int64_t(pick(std::uint64_t(span.count()) / 1000)) * 1000);
  std::sort(times.begin(), times.end());

  const char* devices[] = {"gpu", "wifi", "bt", "usb"};
  const std::uint64_t mem_sizes[] = {16 * MiB, 32 * MiB};
  std::vector<std::string> handles;
  using Op = Directive::Op;

  for (std::size_t i = 0; i < n; ++i)
    {
      Directive d;
      d.at = times[i];
      const auto roll = pick(100);
      if (handles.empty() or roll < 20)
        {
          d.op = Op::CreateSandbox;
          d.handle = "h" + std::to_string(handles.size());
          handles.push_back(d.handle);
          d.app = s.apps[pick(s.apps.size())].id;
          d.quota = Quota{std::uint32_t(1 + pick(3)), (128 << pick(3)) * MiB};
          if (chance(0.5))
            d.prefer = chance(0.5) ? CoreClass::Big : CoreClass::Little;
          switch (pick(3))
            {
            case 0:
              d.workload = Workload::idle();
              break;
            case 1:
              d.workload = Workload::inference(std::uint32_t(1 + pick(8)), 1500.0, chance(0.7));
              break;
            default:
              {
                std::vector<std::uint64_t> files(1 + pick(3));
                for (auto& f : files)
                  f = (16ull << pick(3)) * MiB;
                d.workload = Workload::cipher(files, 10 * MiB, 10, chance(0.7));
              }
            }
          d.auto_terminate = chance(0.3);
        }
      else
        {
          d.handle = handles[pick(handles.size())];
          if (roll < 28)
            d.op = Op::Terminate;
          else if (roll < 40)
            {
              d.op = Op::RequestPeripheral;
              d.device = devices[pick(4)];
            }
          else if (roll < 50)
            {
              d.op = Op::ReleasePeripheral;
              d.device = devices[pick(4)];
            }
          else if (roll < 60)
            {
              d.op = Op::SendData;
              d.bytes = (4 * KiB) << pick(13);
              d.direction = chance(0.5) ? CopyDirection::RosToSandbox : CopyDirection::SandboxToRos;
            }
          else if (roll < 70)
            {
              d.op = Op::AttachMemory;
              d.bytes = mem_sizes[pick(2)];
            }
          else if (roll < 78)
            {
              d.op = Op::DetachMemory;
              d.bytes = mem_sizes[pick(2)];
            }
          else if (roll < 85)
            d.op = Op::IncreaseCore;
          else if (roll < 90)
            d.op = Op::ReleaseCore;
          else
            {
              d.op = Op::RosUseDevice;
              d.handle.clear();
              d.device = devices[pick(3)];
              d.hold = std::chrono::milliseconds(50 + pick(450));
            }
        }
      s.timeline.push_back(std::move(d));
    }
  return s;
}


bool
RunResult::unblocked_attack() const
{
  return std::any_of(attacks.begin(), attacks.end(), [](const AttackOutcome& a) { return not a.blocked; });
}


namespace
{

constexpr std::size_t kMaxViolations = 256;

double
mean(const std::vector<double>& v)
{
  if (v.empty())
    return 0.0;
  double s = 0;
  for (double x : v)
    s += x;
  return s / double(v.size());
}

Json
sandbox_metrics(const SandboxRuntime& rt)
{
  Json j;
  j["handle"] = rt.handle;
  j["id"] = to_string(rt.id);
  j["app"] = rt.app_id;
  j["started_ms"] = to_ms(rt.started);
  if (rt.completed)
    {
      j["completed_ms"] = to_ms(*rt.completed);
      j["elapsed_ms"] = to_ms(*rt.completed - rt.started);
    }
  else
    {
      j["completed_ms"] = nullptr;
      j["elapsed_ms"] = nullptr;
    }
  j["cpu_utilization"] = rt.owned_core_ns > 0 ? rt.busy_core_ns / rt.owned_core_ns : 0.0;
  j["mem_utilization"] = rt.mem_time_ns > 0 ? rt.mem_used_ns / rt.mem_time_ns : 0.0;
  j["final_state"] = std::string(to_string(rt.state));
  return j;
}

class Runner
{
public:
  Runner(const Scenario& s, const RunOptions& opt) : s_(s), opt_(opt) { }

  RunResult run();

private:
  ContextId live(const std::string& handle) const;
  DevId device(const std::string& name) const;
  void directive(std::size_t i);
  void tick();
  void render(std::uint64_t generation);
  bool idle() const;
  void check(const std::string& event);
  Json metrics() const;

  const Scenario& s_;
  RunOptions opt_;
  World w_;
  RunResult r_;
  std::map<std::string, ContextId> handles_;
  std::set<ContextId> auto_terminate_;
  std::size_t directives_done_ = 0;
  Nanos last_event_{0};
};

ContextId
Runner::live(const std::string& handle) const
{
  auto it = handles_.find(handle);
  if (it == handles_.end() or not w_.runtimes.count(it->second))
    throw LeapError(ErrorCode::BadState, "sandbox '" + handle + "' is not live");
  return it->second;
}

DevId
Runner::device(const std::string& name) const
{
  if (auto d = w_.machine.find_peripheral(name))
    return *d;
  throw LeapError(ErrorCode::ValidationError, "unknown device '" + name + "'");
}

void
Runner::directive(std::size_t i)
{
  const Directive& d = s_.timeline[i];
  ++directives_done_;
  using Op = Directive::Op;
  try
    {
      switch (d.op)
        {
        case Op::CreateSandbox:
          {
            CreateRequest req{d.handle, d.app, d.quota.value_or(w_.platform.default_quota),
                              d.prefer, d.tamper, std::nullopt};
            const ContextId id = create_sandbox(w_, req, d.workload);
            handles_[d.handle] = id;
            if (d.auto_terminate)
              auto_terminate_.insert(id);
            ++r_.creates_ok;
            break;
          }
        case Op::Terminate:
          terminate(w_, live(d.handle));
          break;
        case Op::RequestPeripheral:
          request_peripheral(w_, live(d.handle), device(d.device), d.tamper);
          break;
        case Op::ReleasePeripheral:
          release_peripheral(w_, live(d.handle), device(d.device));
          break;
        case Op::SendData:
          send_data(w_, live(d.handle), d.bytes, d.direction);
          break;
        case Op::AttachMemory:
          attach_memory(w_, live(d.handle), d.bytes);
          break;
        case Op::DetachMemory:
          detach_memory(w_, live(d.handle), d.bytes);
          break;
        case Op::IncreaseCore:
          increase_core(w_, live(d.handle));
          break;
        case Op::ReleaseCore:
          {
            const ContextId id = live(d.handle);
            const SandboxRuntime& rt = w_.runtime(id);
            CoreId c = rt.boot_core;
            if (d.core)
              c = *d.core;
            else
              for (CoreId x : rt.cores)
                if (x != rt.boot_core)
                  c = x;
            release_core(w_, id, c);
            break;
          }
        case Op::RosUseDevice:
          ros_use_device(w_, device(d.device), d.hold);
          break;
        case Op::Attack:
          r_.attacks.push_back(run_attack(w_, d.attack));
          break;
        }
    }
  catch (const LeapError& e)
    {
      r_.errors.push_back({i, std::string(to_string(d.op)), e.code(), e.what()});
    }
}

bool
Runner::idle() const
{
  if (not s_.stop_when_idle or directives_done_ < s_.timeline.size() or not w_.runtimes.empty())
    return false;
  for (const auto& [d, q] : w_.ros.waiters)
    if (not q.empty())
      return false;
  return true;
}

void
Runner::tick()
{
  std::vector<ContextId> ids;
  for (const auto& [id, rt] : w_.runtimes)
    ids.push_back(id);
  for (ContextId id : ids)
    runtime_tick(w_, id);
  for (ContextId id : ids)
    {
      auto it = w_.runtimes.find(id);
      if (it != w_.runtimes.end() and auto_terminate_.count(id) and it->second.completion_reported
          and it->second.state == SandboxState::Running)
        try
          {
            terminate(w_, id);
          }
        catch (const LeapError& e)
          {
            r_.errors.push_back({s_.timeline.size(), "auto_terminate", e.code(), e.what()});
          }
    }
  for (auto& [dev, q] : w_.ros.waiters)
    {
      if (q.empty() or w_.monitor.ledger().dev_owner.at(dev) != ContextId::Ros)
        continue;
      auto until = w_.ros.in_use_until.find(dev);
      const bool ros_busy = until != w_.ros.in_use_until.end() and until->second > w_.engine.now()
        and not w_.machine.peripheral(dev).always_busy_in_ros;
      if (not ros_busy)
        serve_waiters(w_, dev);
    }
  expire_waiters(w_);

  const Nanos next = w_.engine.now() + w_.platform.tick;
  if (next <= s_.horizon and not idle())
    w_.engine.schedule(w_.platform.tick, "engine", Action{ActionKind::Tick, 0});
}

void
Runner::render(std::uint64_t generation)
{
  if (generation != w_.ros.render_generation or w_.ros.gpu_suspended or idle())
    return;
  ++w_.ros.frames_rendered;
  const Nanos period = w_.engine.costs().at("render_period_ms");
  if (w_.engine.now() + period <= s_.horizon)
    w_.engine.schedule(period, "ros", Action{ActionKind::Render, generation});
}

void
Runner::check(const std::string& event)
{
  if (not opt_.check_invariants)
    return;
  for (auto& v : check_invariants(w_))
    {
      if (r_.violations.size() >= kMaxViolations)
        return;
      v.event = event;
      w_.engine.record("checker", "violation", {{"detail", v.detail}, {"event", event}},
                       "violation", to_string(v.id));
      r_.violations.push_back(std::move(v));
    }
}

Json
Runner::metrics() const
{
  Json m;
  m["scenario"] = s_.name;
  m["seed"] = s_.seed;
  m["mode"] = std::string(to_string(w_.platform.mode));
  m["trace_digest"] = hex64(w_.engine.trace().digest());
  m["state_digest"] = r_.final_state.hex();
  m["events"] = r_.events;
  m["end_time_ms"] = to_ms(r_.end_time);

  Json sbs = Json::array();
  double busy = 0, owned = 0, mem_used = 0, mem_time = 0;
  auto add = [&](const SandboxRuntime& rt) {
    sbs.push_back(sandbox_metrics(rt));
    busy += rt.busy_core_ns;
    owned += rt.owned_core_ns;
    mem_used += rt.mem_used_ns;
    mem_time += rt.mem_time_ns;
  };
  for (const auto& rt : w_.retired)
    add(rt);
  for (const auto& [id, rt] : w_.runtimes)
    add(rt);
  m["sandboxes"] = std::move(sbs);
  m["utilization"] = {{"cpu", owned > 0 ? busy / owned : 0.0},
                      {"memory", mem_time > 0 ? mem_used / mem_time : 0.0}};

  const WorldStats& st = w_.stats;
  m["adjustments"] = {{"core", st.core_adjustments}, {"memory", st.mem_adjustments},
                      {"rejected", st.adjust_rejected},
                      {"core_latency_ms_mean", mean(st.core_adjust_ms)},
                      {"memory_latency_ms_mean", mean(st.mem_adjust_ms)}};
  Json frozen = Json::array();
  for (Nanos f : w_.ros.frozen_intervals)
    frozen.push_back(to_ms(f));
  m["frozen_gui_ms"] = std::move(frozen);
  m["gpu_suspended_at_end"] = w_.ros.gpu_suspended;
  m["frames_rendered"] = w_.ros.frames_rendered;
  m["max_concurrent"] = st.max_concurrent;
  m["sandboxes_created"] = st.sandboxes_created;
  m["creates_rejected"] = st.creates_rejected;
  m["waiter_timeouts"] = st.waiter_timeouts;

  Json viol = Json::array();
  for (const auto& v : r_.violations)
    viol.push_back({{"invariant", std::string(to_string(v.id))}, {"detail", v.detail},
                    {"event", v.event}});
  m["violations"] = std::move(viol);
  Json att = Json::array();
  for (const auto& a : r_.attacks)
    att.push_back({{"attack", std::string(to_string(a.kind))}, {"blocked", a.blocked},
                   {"mechanism", a.mechanism}, {"leaked_bytes", a.leaked_bytes},
                   {"detail", a.detail}});
  m["attacks"] = std::move(att);
  Json errs = Json::array();
  for (const auto& e : r_.errors)
    errs.push_back({{"directive", e.index}, {"op", e.op},
                    {"code", std::string(to_string(e.code))}});
  m["directive_errors"] = std::move(errs);
  m["exit_code"] = r_.exit_code();
  return m;
}

RunResult
Runner::run()
{
  Scenario eff = s_;
  if (opt_.mode)
    eff.mode = *opt_.mode;
  if (opt_.flags)
    eff.flags = *opt_.flags;
  eff.platform.mode = eff.mode;

  w_ = build_world(eff.machine, eff.platform, eff.flags, costs_for(eff), opt_.trace_mode);
  Engine& e = w_.engine;
  e.record("cli", "scenario", {{"version", kScenarioVersion}, {"name", eff.name},
                               {"seed", eff.seed}, {"yaml", serialize(eff)}});
  for (const auto& app : eff.apps)
    register_app(w_, app.id, app_payload(app));

  for (std::size_t i = 0; i < eff.timeline.size(); ++i)
    e.schedule(eff.timeline[i].at, "timeline", Action{ActionKind::Directive, i});
  e.schedule(w_.platform.tick, "engine", Action{ActionKind::Tick, 0});
  if (w_.platform.render)
    e.schedule(e.costs().at("render_period_ms"), "ros",
               Action{ActionKind::Render, w_.ros.render_generation});

  check("start");
  e.run_until(eff.horizon, [&](const Event& ev) {
    ++r_.events;
    std::string what;
    switch (ev.action.kind)
      {
      case ActionKind::Directive:
        directive(ev.action.arg);
        if (opt_.check_invariants)
          what = "directive " + std::to_string(ev.action.arg) + " "
            + std::string(to_string(eff.timeline[ev.action.arg].op));
        break;
      case ActionKind::Tick:
        tick();
        what = "tick";
        break;
      case ActionKind::Render:
        render(ev.action.arg);
        what = "render";
        break;
      case ActionKind::DeviceIdle:
      case ActionKind::Custom:
        what = "event";
        break;
      }
    last_event_ = e.now();
    check(what);
  });

  r_.end_time = last_event_;
  r_.final_state = state_digest(w_);
  r_.max_concurrent = w_.stats.max_concurrent;
  r_.creates_rejected = w_.stats.creates_rejected;
  for (const auto& rt : w_.retired)
    if (rt.completed)
      r_.completion_ms[rt.handle] = to_ms(*rt.completed - rt.started);
  for (const auto& [id, rt] : w_.runtimes)
    if (rt.completed)
      r_.completion_ms[rt.handle] = to_ms(*rt.completed - rt.started);
  e.record("cli", "run_end", {{"state_digest", r_.final_state.hex()}, {"events", r_.events},
                              {"violations", r_.violations.size()},
                              {"attacks_unblocked", r_.unblocked_attack()}});
  r_.trace_digest = e.trace().digest();
  r_.trace_records = e.trace().count();
  r_.metrics = metrics();
  if (opt_.trace_mode == Trace::Mode::Full)
    r_.trace_lines = e.trace().lines();
  return std::move(r_);
}

}  // namespace


RunResult
run_scenario(const Scenario& s, const RunOptions& opt)
{
  Runner r(s, opt);
  return r.run();
}


std::vector<std::string>
counterexample_trace(const Scenario& s, const ExploreConfig& cfg, const Counterexample& c)
{
  Scenario eff = s;
  eff.flags = cfg.flags;
  ExploreSection x;
  x.depth = cfg.depth;
  x.budget = cfg.budget;
  x.max_sandboxes = cfg.max_sandboxes;
  x.alphabet.assign(cfg.alphabet.begin(), cfg.alphabet.end());
  eff.explore = x;

  Json steps = Json::array();
  for (const Step& st : c.steps)
    steps.push_back(to_string(st));
  std::set<std::string> inv, leaks;
  for (const auto& v : c.violations)
    inv.insert(std::string(to_string(v.id)));
  for (const auto& l : c.leaks)
    leaks.insert(l.kind);

  Trace header(Trace::Mode::Full);
  header.append(Nanos(0), "explore", "counterexample",
                {{"version", kScenarioVersion}, {"yaml", serialize(eff)}, {"steps", steps},
                 {"invariants", inv}, {"leaks", leaks}},
                "violation", "");
  std::vector<std::string> out = header.lines();
  std::vector<std::string> body;
  replay_steps(cfg, c.steps, &body);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}


ReplayReport
replay_trace(const std::vector<std::string>& lines)
{
  if (lines.empty())
    throw LeapError(ErrorCode::ParseError, "line 1, column 1: empty trace");
  Json head;
  try
    {
      head = Json::parse(lines.front());
    }
  catch (const Json::exception& e)
    {
      throw LeapError(ErrorCode::ParseError, std::string("line 1: ") + e.what());
    }
  if (not head.contains("op") or not head.contains("args") or not head["args"].contains("yaml"))
    throw LeapError(ErrorCode::ValidationError, "trace does not start with a scenario header");
  const Scenario s = parse_scenario(head["args"]["yaml"].get<std::string>());
  const std::string op = head["op"].get<std::string>();

  ReplayReport rep;
  if (op == "counterexample")
    {
      rep.kind = "counterexample";
      const ExploreConfig cfg = explore_config(s);
      std::vector<Step> steps;
      for (const auto& st : head["args"]["steps"])
        steps.push_back(parse_step(st.get<std::string>()));
      const Counterexample got = replay_steps(cfg, steps);
      std::set<std::string> inv, leaks;
      for (const auto& v : got.violations)
        inv.insert(std::string(to_string(v.id)));
      for (const auto& l : got.leaks)
        leaks.insert(l.kind);
      rep.expected = head["args"]["invariants"].dump() + head["args"]["leaks"].dump();
      rep.actual = Json(inv).dump() + Json(leaks).dump();
      rep.matched = rep.expected == rep.actual and (not inv.empty() or not leaks.empty());
      return rep;
    }
  if (op != "scenario")
    throw LeapError(ErrorCode::ValidationError, "unknown trace header '" + op + "'");

  rep.kind = "run";
  for (auto it = lines.rbegin(); it != lines.rend(); ++it)
    {
      const Json rec = Json::parse(*it, nullptr, false);
      if (rec.is_object() and rec.value("op", "") == "run_end")
        {
          rep.expected = rec["args"]["state_digest"].get<std::string>();
          break;
        }
    }
  if (rep.expected.empty())
    throw LeapError(ErrorCode::ValidationError, "trace has no run_end record");
  RunOptions opt;
  opt.trace_mode = Trace::Mode::DigestOnly;
  rep.actual = run_scenario(s, opt).final_state.hex();
  rep.matched = rep.expected == rep.actual;
  return rep;
}

}  // namespace leapsim
