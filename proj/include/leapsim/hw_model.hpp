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

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "leapsim/stage2.hpp"
#include "leapsim/types.hpp"

namespace leapsim
{
  enum class CoreClass : std::uint8_t { Little, Big };
  enum class CoreState : std::uint8_t { RunningRos, RunningSandbox, BusyWait, Off };
  enum class DeviceKind : std::uint8_t { Gpu, Wifi, Bluetooth, Other };
  enum class AddressClass : std::uint8_t { RamFrame, MmioPage, Hole };

  std::string_view to_string(CoreClass c);
  std::string_view to_string(CoreState s);
  std::string_view to_string(DeviceKind k);

  struct CoreDesc
  {
    CoreId id{};
    CoreClass klass = CoreClass::Little;
    friend bool operator==(const CoreDesc&, const CoreDesc&) = default;
  };

  struct PeripheralDesc
  {
    DevId id{};
    std::string name;
    DeviceKind kind = DeviceKind::Other;
    PhysRange mmio;
    bool dma_capable = false;
    bool independent = true;          // driver is a loadable, unshared module
    bool always_busy_in_ros = false;  // GPU: ROS renders continuously

    friend bool operator==(const PeripheralDesc&, const PeripheralDesc&) = default;
  };

  struct MachineConfig
  {
    std::uint64_t address_space_bytes = 4 * GiB;
    std::uint64_t ram_bytes = 3 * GiB + 512 * MiB;
    PhysRange io_window{3 * GiB + 512 * MiB, 4 * GiB};
    std::vector<CoreDesc> cores;
    std::vector<PeripheralDesc> peripherals;
    /// Ranges inside RAM that are never mapped into any normal-world context
    /// (secure-world carve-out, monitor-owned stage-2 table storage).
    std::vector<PhysRange> reserved;
    std::uint64_t cache_line_bytes = 64;
    std::size_t tlb_capacity = 512;
    std::size_t cache_capacity = 0;  // lines; 0 means unbounded

    friend bool operator==(const MachineConfig&, const MachineConfig&) = default;
  };

  /// 8 cores (0-3 little, 4-7 big), 4GB space, IO window [3.5GB, 4GB),
  /// GPU / WiFi / Bluetooth plus a bus-attached USB controller.
  MachineConfig default_machine_config();

  /// Desk-scale config for exhaustive exploration: 3 cores, 16 x 2MB
  /// frames, one DMA-capable peripheral.
  MachineConfig small_machine_config();

  struct Core
  {
    CoreId id{};
    CoreClass klass = CoreClass::Little;
    CoreState state = CoreState::RunningRos;
    ContextId running = ContextId::Ros;       // meaningful in RunningSandbox
    std::optional<ContextId> active_tables;   // VTTBR analogue

    friend bool operator==(const Core&, const Core&) = default;
  };

  struct TlbEntry
  {
    CoreId core{};
    ContextId context = ContextId::Ros;
    std::uint64_t ipa_block = 0;
    std::uint64_t pa_block = 0;
    Granularity granularity = Granularity::Block2M;

    PhysRange covered() const { return {pa_block, pa_block + granule_bytes(granularity)}; }
    friend bool operator==(const TlbEntry&, const TlbEntry&) = default;
  };

  struct CacheLine
  {
    std::uint64_t pa_line = 0;
    ContextId fill_owner = ContextId::Ros;
    CoreId fill_core{};
    bool valid = true;

    friend bool operator==(const CacheLine&, const CacheLine&) = default;
  };

  /// Per-core FIFO TLB.
  class Tlb
  {
  public:
    explicit Tlb(std::size_t capacity = 512) : capacity_(capacity) { }

    const TlbEntry* find(ContextId ctx, std::uint64_t ipa) const;
    void insert(const TlbEntry& e);
    std::size_t flush(const PhysRange& range);
    std::size_t flush_context(ContextId ctx);
    std::size_t size() const { return entries_.size(); }
    const std::deque<TlbEntry>& entries() const { return entries_; }

    friend bool operator==(const Tlb&, const Tlb&) = default;

  private:
    std::size_t capacity_;
    std::deque<TlbEntry> entries_;
  };

  /// Shared physically indexed cache; lines record their fill owner.
  class Cache
  {
  public:
    Cache(std::uint64_t line_bytes = 64, std::size_t capacity = 0)
      : line_bytes_(line_bytes), capacity_(capacity)
    { }

    std::uint64_t line_of(std::uint64_t pa) const { return pa - pa % line_bytes_; }
    std::uint64_t line_bytes() const { return line_bytes_; }

    void fill(ContextId owner, CoreId core, std::uint64_t pa);
    std::optional<CacheLine> probe(std::uint64_t pa) const;

    /// Invalidate lines in range whose owner differs from keep.
    std::size_t invalidate_foreign(const PhysRange& range, ContextId keep);

    /// Invalidate lines owned by owner that were filled via core.
    std::size_t clean_core(CoreId core, ContextId owner);

    std::size_t size() const { return lines_.size(); }
    const std::map<std::uint64_t, CacheLine>& lines() const { return lines_; }

    friend bool operator==(const Cache&, const Cache&) = default;

  private:
    std::uint64_t line_bytes_;
    std::size_t capacity_;
    std::map<std::uint64_t, CacheLine> lines_;
    std::deque<std::uint64_t> fifo_;   // only maintained when capacity_ > 0
  };

  class Machine
  {
  public:
    Machine() = default;

    const MachineConfig& config() const { return config_; }

    std::vector<Core>& cores() { return cores_; }
    const std::vector<Core>& cores() const { return cores_; }
    Core& core(CoreId id) { return cores_.at(index(id)); }
    const Core& core(CoreId id) const { return cores_.at(index(id)); }

    Tlb& tlb(CoreId id) { return tlbs_.at(index(id)); }
    const Tlb& tlb(CoreId id) const { return tlbs_.at(index(id)); }
    const std::vector<Tlb>& tlbs() const { return tlbs_; }

    Cache& cache() { return cache_; }
    const Cache& cache() const { return cache_; }

    std::map<ContextId, Stage2TableSet>& tables() { return tables_; }
    const std::map<ContextId, Stage2TableSet>& tables() const { return tables_; }
    Stage2TableSet& tables(ContextId ctx) { return tables_.at(ctx); }
    const Stage2TableSet& tables(ContextId ctx) const { return tables_.at(ctx); }

    const PeripheralDesc& peripheral(DevId id) const { return config_.peripherals.at(index(id)); }
    std::optional<DevId> find_peripheral(std::string_view name) const;

    AddressClass classify(std::uint64_t pa) const;

    /// RAM frames available to normal-world contexts, as maximal ranges.
    std::vector<PhysRange> ram_ranges() const;

    friend Machine build_machine(const MachineConfig& config);
    friend bool operator==(const Machine&, const Machine&) = default;

  private:
    MachineConfig config_;
    std::vector<Core> cores_;
    std::vector<Tlb> tlbs_;
    Cache cache_;
    std::map<ContextId, Stage2TableSet> tables_;
  };

  /// Validate config and construct a machine with every core running ROS,
  /// all RAM and MMIO mapped in the ROS table set, empty TLBs and cache.
  /// Throws ConfigError.
  Machine build_machine(const MachineConfig& config);

  void validate(const MachineConfig& config);

  void cache_fill(Machine& machine, ContextId ctx, CoreId core, std::uint64_t pa);
  std::optional<CacheLine> cache_probe(const Machine& machine, std::uint64_t pa);

  /// Remove every TLB entry on every core whose block intersects a
  /// 2MB-aligned range. Throws AlignmentError.
  std::size_t tlb_flush_range(Machine& machine, const PhysRange& range);

  /// Same for 4KB-aligned device page ranges.
  std::size_t tlb_flush_pages(Machine& machine, const PhysRange& range);

  std::size_t tlb_flush_context(Machine& machine, ContextId ctx);

}  // namespace leapsim
