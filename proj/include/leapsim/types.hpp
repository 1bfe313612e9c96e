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

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace leapsim
{
  using Nanos = std::chrono::nanoseconds;

  constexpr std::uint64_t KiB = 1024;
  constexpr std::uint64_t MiB = 1024 * KiB;
  constexpr std::uint64_t GiB = 1024 * MiB;

  constexpr std::uint64_t kBlockBytes = 2 * MiB;   // stage-2 RAM block
  constexpr std::uint64_t kPageBytes = 4 * KiB;    // stage-2 IO page

  /// Execution context: ROS is 0, sandboxes are 1..N.
  enum class ContextId : std::uint32_t { Ros = 0 };
  enum class CoreId : std::uint32_t {};
  enum class DevId : std::uint32_t {};

  constexpr std::uint32_t index(ContextId c) { return static_cast<std::uint32_t>(c); }
  constexpr std::uint32_t index(CoreId c) { return static_cast<std::uint32_t>(c); }
  constexpr std::uint32_t index(DevId d) { return static_cast<std::uint32_t>(d); }
  constexpr ContextId sandbox_ctx(std::uint32_t n) { return static_cast<ContextId>(n); }
  constexpr bool is_sandbox(ContextId c) { return c != ContextId::Ros; }

  std::string to_string(ContextId ctx);

  /// Half-open physical address range [begin, end).
  struct PhysRange
  {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    constexpr std::uint64_t size() const { return end - begin; }
    constexpr bool empty() const { return end <= begin; }
    constexpr bool contains(std::uint64_t pa) const { return pa >= begin and pa < end; }
    constexpr bool contains(const PhysRange& r) const { return r.begin >= begin and r.end <= end; }
    constexpr bool overlaps(const PhysRange& r) const { return begin < r.end and r.begin < end; }
    constexpr bool adjoins(const PhysRange& r) const { return r.end == begin or r.begin == end; }
    constexpr bool aligned(std::uint64_t granule) const
    { return begin % granule == 0 and end % granule == 0; }

    friend constexpr bool operator==(const PhysRange&, const PhysRange&) = default;
    friend constexpr auto operator<=>(const PhysRange&, const PhysRange&) = default;
  };

  std::string to_string(const PhysRange& r);

  enum class ErrorCode
    {
      ConfigError, AlignmentError, DoubleMapError, NotMappedError,
      IntegrityError, ResourceBusy, TooManySandboxes, VerdictError,
      QuotaExceeded, LastCoreError, NotOwner, DeviceBusy, BadState,
      DuplicateApp, UnknownApp, OutOfMemory, NoAdjacentSpace,
      UnsupportedDevice, BudgetExceeded, ParseError, ValidationError,
      UnknownSuite
    };

  std::string_view to_string(ErrorCode code);

  /// Every protocol or configuration failure surfaces as a LeapError with
  /// a stable code; messages are for humans only.
  class LeapError : public std::runtime_error
  {
  public:
    LeapError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code)
    { }

    ErrorCode code() const { return code_; }

  private:
    ErrorCode code_;
  };

  /// Test-only switches that each disable one defense.
  struct DefenseFlags
  {
    bool no_verify = false;
    bool no_sanitize = false;
    bool no_legality_check = false;
    bool no_smmu = false;

    bool any() const { return no_verify or no_sanitize or no_legality_check or no_smmu; }
    friend bool operator==(const DefenseFlags&, const DefenseFlags&) = default;
  };

  /// Parse a mutation flag name ("no_verify", ...) into the flag set.
  /// Throws ValidationError for unknown names.
  void apply_mutation(DefenseFlags& flags, std::string_view name);

  enum class IsolationMode { Leap, Tzasc };

  std::string_view to_string(IsolationMode m);

  /// 64-bit FNV-1a. Used for trace digests and the modeled image digest.
  constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
  constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

  constexpr std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset)
  {
    for (unsigned char c : bytes)
      {
        h ^= c;
        h *= kFnvPrime;
      }
    return h;
  }

  std::string hex64(std::uint64_t v);

}  // namespace leapsim
