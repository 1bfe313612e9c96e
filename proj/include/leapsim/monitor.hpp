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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "leapsim/engine.hpp"
#include "leapsim/hw_model.hpp"
#include "leapsim/secure_world.hpp"
#include "leapsim/types.hpp"

namespace leapsim
{
  struct Quota
  {
    std::uint32_t max_cores = 1;
    std::uint64_t max_memory = 512 * MiB;
    friend bool operator==(const Quota&, const Quota&) = default;
  };

  enum class SandboxState : std::uint8_t
    { Created, Verifying, Booting, Running, Terminating, Dead };

  std::string_view to_string(SandboxState s);

  struct CoreOwner
  {
    enum class Kind : std::uint8_t { Context, Off, BusyWait };
    Kind kind = Kind::Context;
    ContextId ctx = ContextId::Ros;

    bool is(ContextId c) const { return kind == Kind::Context and ctx == c; }
    friend bool operator==(const CoreOwner&, const CoreOwner&) = default;
  };

  /// The monitor's trusted view of one sandbox.
  struct SandboxRecord
  {
    ContextId id = ContextId::Ros;
    std::string app_id;
    CoreId boot_core{};
    std::uint64_t base_bytes = 0;
    Quota quota;
    bool verified = false;
    std::uint64_t verified_digest = 0;   // digest checked by the secure world
    std::uint64_t running_digest = 0;    // digest of the plaintext actually booted

    friend bool operator==(const SandboxRecord&, const SandboxRecord&) = default;
  };

  struct ResourceLedger
  {
    struct RamPiece
    {
      std::uint64_t end;
      ContextId owner;
      friend bool operator==(const RamPiece&, const RamPiece&) = default;
    };

    std::map<CoreId, CoreOwner> core_owner;
    /// Sandbox-owned RAM. Every RAM frame not covered here belongs to ROS.
    std::map<std::uint64_t, RamPiece> ram_owner;
    std::map<DevId, ContextId> dev_owner;
    std::map<ContextId, PhysRange> shared_channels;
    std::map<ContextId, SandboxRecord> sandboxes;
    std::vector<PhysRange> ram_frames;   // RAM usable by normal-world contexts

    /// Owner of a RAM frame address (ROS when not sandbox-owned).
    ContextId ram_owner_at(std::uint64_t pa) const;

    /// Pieces of sandbox-owned RAM for ctx, ascending.
    std::vector<PhysRange> ram_of(ContextId ctx) const;

    /// Hull of ctx's RAM pieces (the sandbox interval when contiguous).
    std::optional<PhysRange> interval_of(ContextId ctx) const;

    /// Reassign range to owner; ROS erases sandbox ownership.
    void assign_ram(const PhysRange& range, ContextId owner);

    bool is_ram(const PhysRange& range) const;
    std::vector<CoreId> cores_of(ContextId ctx) const;
    std::vector<DevId> devices_of(ContextId ctx) const;

    friend bool operator==(const ResourceLedger&, const ResourceLedger&) = default;
  };

  enum class AdjustOp : std::uint8_t { Attach, Detach };

  enum class RejectReason : std::uint8_t
    { Overlap, NotContiguous, QuotaExceeded, NotFree, BadAlignment };

  std::string_view to_string(RejectReason r);

  struct AdjustVerdict
  {
    std::optional<RejectReason> rejected;   // empty means Approved

    bool approved() const { return not rejected.has_value(); }
    std::string describe() const;
    friend bool operator==(const AdjustVerdict&, const AdjustVerdict&) = default;
  };

  /// Legality of a dynamic memory change, evaluated on the ledger alone.
  /// Attach: region free, adjoining the sandbox interval, within the memory
  /// limit. Detach: an end segment whose removal keeps the base size.
  AdjustVerdict verify_region_legality(const ResourceLedger& ledger, ContextId sandbox,
                                       const PhysRange& region, AdjustOp op);

  struct LaunchSpec
  {
    std::string app_id;
    EncryptedImage image;   // as staged by ROS inside ram
    CoreId core{};
    PhysRange ram;
    PhysRange channel;
    Quota quota;
  };

  /// Trusted enforcement actor: owns the resource ledger and is the only
  /// component that edits stage-2 tables after boot.
  class Monitor
  {
  public:
    Monitor() = default;
    Monitor(const Machine& machine, DefenseFlags flags);

    const DefenseFlags& flags() const { return flags_; }
    const ResourceLedger& ledger() const { return ledger_; }

    /// Test-only backdoor for constructing corrupted states.
    ResourceLedger& ledger_for_test() { return ledger_; }

    /// Verify and boot a sandbox on pre-allocated resources. Returns the
    /// new sandbox id. Throws TooManySandboxes, ResourceBusy,
    /// AlignmentError or IntegrityError; the ledger and tables are
    /// unchanged on error.
    ContextId lock_and_launch(Machine& machine, const KeyStore& keys, Engine& engine,
                              const LaunchSpec& spec);

    AdjustVerdict verify(ContextId sandbox, const PhysRange& region, AdjustOp op) const
    { return verify_region_legality(ledger_, sandbox, region, op); }

    /// Throws VerdictError when the region is not approved.
    void attach_memory(Machine& machine, Engine& engine, ContextId sandbox,
                       const PhysRange& region);
    void detach_memory(Machine& machine, Engine& engine, ContextId sandbox,
                       const PhysRange& region);

    /// Move core between contexts. Throws NotOwner, QuotaExceeded or
    /// LastCoreError.
    void transfer_core(Machine& machine, Engine& engine, CoreId core, ContextId from,
                       ContextId to, bool optimized);

    /// Move a peripheral's MMIO pages between table sets. from_released
    /// reports whether the current owner finished its driver-unload (or GPU
    /// suspend) handshake. Throws DeviceBusy or NotOwner.
    void switch_peripheral(Machine& machine, Engine& engine, DevId dev, ContextId from,
                           ContextId to, bool from_released);

    /// Flush TLB entries over region on every core and drop cache lines in
    /// region not owned by incoming. Throws AlignmentError.
    void sanitize(Machine& machine, Engine& engine, const PhysRange& region,
                  ContextId incoming) const;

    /// Release everything held by a terminating sandbox. Throws BadState.
    void teardown(Machine& machine, Engine& engine, ContextId sandbox, SandboxState state);

    /// SMMU model: may dev DMA to pa?
    bool dma_permitted(DevId dev, std::uint64_t pa) const;

    std::size_t sandbox_count() const { return ledger_.sandboxes.size(); }
    std::optional<ContextId> next_sandbox_id() const;

    friend bool operator==(const Monitor&, const Monitor&) = default;

  private:
    void check_launch(const Machine& machine, const LaunchSpec& spec) const;

    DefenseFlags flags_;
    ResourceLedger ledger_;
  };

}  // namespace leapsim
