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
#include <functional>
#include <map>
#include <optional>

#include "leapsim/types.hpp"

namespace leapsim
{
  class Machine;

  enum class S2Attr : std::uint8_t { Normal, Device, SharedChannel };
  enum class Granularity : std::uint8_t { Block2M, Page4K };

  constexpr Granularity granularity_of(S2Attr a)
  { return a == S2Attr::Device ? Granularity::Page4K : Granularity::Block2M; }

  constexpr std::uint64_t granule_bytes(Granularity g)
  { return g == Granularity::Block2M ? kBlockBytes : kPageBytes; }

  std::string_view to_string(S2Attr a);

  /// Modeled table storage: one 4KB root, one 4KB level-2 table per 1GB
  /// region holding any entry, one 4KB level-3 table per 2MB region
  /// holding any 4KB page entry.
  constexpr std::uint64_t kTableBytes = 4 * KiB;
  constexpr std::uint64_t kUpperLevelOverhead = kTableBytes;

  /// Per-context stage-2 table set. Every mapping is an identity mapping,
  /// so only the IPA side is stored; valid entries are kept as coalesced
  /// extents of equal attribute.
  class Stage2TableSet
  {
  public:
    struct Extent
    {
      std::uint64_t end;
      S2Attr attr;
      friend bool operator==(const Extent&, const Extent&) = default;
    };

    Stage2TableSet() = default;
    explicit Stage2TableSet(ContextId ctx) : ctx_(ctx) { }

    ContextId context() const { return ctx_; }

    /// Map range with attrs. Returns the number of entries created.
    /// Throws AlignmentError or DoubleMapError; no change on error.
    std::size_t map(const PhysRange& range, S2Attr attr);

    /// Invalidate every entry in range. Returns the number of entries
    /// removed. Throws AlignmentError or NotMappedError; no change on error.
    std::size_t unmap(const PhysRange& range);

    /// Attribute of the valid entry covering ipa, if any.
    std::optional<S2Attr> lookup(std::uint64_t ipa) const;

    /// True if some valid entry intersects range.
    bool any_mapped(const PhysRange& range) const;

    /// True if every byte of range is covered by entries of attr.
    bool fully_mapped(const PhysRange& range, S2Attr attr) const;

    /// Number of valid descriptors (2MB blocks plus 4KB pages).
    std::size_t entry_count() const;

    std::uint64_t footprint_bytes() const;

    const std::map<std::uint64_t, Extent>& extents() const { return extents_; }

    friend bool operator==(const Stage2TableSet&, const Stage2TableSet&) = default;

  private:
    void coalesce_around(std::uint64_t addr);

    ContextId ctx_ = ContextId::Ros;
    std::map<std::uint64_t, Extent> extents_;
  };

  enum class TranslationOutcome : std::uint8_t { Hit, Stage2Fault };

  struct TranslationResult
  {
    TranslationOutcome outcome = TranslationOutcome::Stage2Fault;
    std::uint64_t pa = 0;
    bool from_tlb = false;

    bool hit() const { return outcome == TranslationOutcome::Hit; }
  };

  std::size_t s2_map(Stage2TableSet& tables, const PhysRange& range, S2Attr attr);
  std::size_t s2_unmap(Stage2TableSet& tables, const PhysRange& range);
  std::uint64_t s2_footprint(const Stage2TableSet& tables);

  /// Translate ipa for the context active on core. Consults the core's
  /// TLB first, then the active table set; a table hit fills the TLB.
  TranslationResult s2_translate(Machine& machine, CoreId core, std::uint64_t ipa);

  /// Same lookup without filling the TLB (raw adversarial probes).
  TranslationResult s2_probe(const Machine& machine, CoreId core, std::uint64_t ipa);

}  // namespace leapsim
