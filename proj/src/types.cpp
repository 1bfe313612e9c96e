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

#include "leapsim/types.hpp"

#include <cstdio>

namespace leapsim
{

std::string
to_string(ContextId ctx)
{
  if (ctx == ContextId::Ros)
    return "ros";
  return "sb" + std::to_string(index(ctx));
}


std::string
to_string(const PhysRange& r)
{
  char buf[64];
  std::snprintf(buf, sizeof(buf), "[0x%llx,0x%llx)",
                static_cast<unsigned long long>(r.begin),
                static_cast<unsigned long long>(r.end));
  return buf;
}


std::string_view
to_string(ErrorCode code)
{
  switch (code)
    {
    case ErrorCode::ConfigError:       return "ConfigError";
    case ErrorCode::AlignmentError:    return "AlignmentError";
    case ErrorCode::DoubleMapError:    return "DoubleMapError";
    case ErrorCode::NotMappedError:    return "NotMappedError";
    case ErrorCode::IntegrityError:    return "IntegrityError";
    case ErrorCode::ResourceBusy:      return "ResourceBusy";
    case ErrorCode::TooManySandboxes:  return "TooManySandboxes";
    case ErrorCode::VerdictError:      return "VerdictError";
    case ErrorCode::QuotaExceeded:     return "QuotaExceeded";
    case ErrorCode::LastCoreError:     return "LastCoreError";
    case ErrorCode::NotOwner:          return "NotOwner";
    case ErrorCode::DeviceBusy:        return "DeviceBusy";
    case ErrorCode::BadState:          return "BadState";
    case ErrorCode::DuplicateApp:      return "DuplicateApp";
    case ErrorCode::UnknownApp:        return "UnknownApp";
    case ErrorCode::OutOfMemory:       return "OutOfMemory";
    case ErrorCode::NoAdjacentSpace:   return "NoAdjacentSpace";
    case ErrorCode::UnsupportedDevice: return "UnsupportedDevice";
    case ErrorCode::BudgetExceeded:    return "BudgetExceeded";
    case ErrorCode::ParseError:        return "ParseError";
    case ErrorCode::ValidationError:   return "ValidationError";
    case ErrorCode::UnknownSuite:      return "UnknownSuite";
    }
  return "UnknownError";
}


void
apply_mutation(DefenseFlags& flags, std::string_view name)
{
  if (name == "no_verify")
    flags.no_verify = true;
  else if (name == "no_sanitize")
    flags.no_sanitize = true;
  else if (name == "no_legality_check")
    flags.no_legality_check = true;
  else if (name == "no_smmu")
    flags.no_smmu = true;
  else
    throw LeapError(ErrorCode::ValidationError,
                    "unknown mutation flag '" + std::string(name) + "'");
}


std::string_view
to_string(IsolationMode m)
{
  return m == IsolationMode::Leap ? "leap" : "tzasc";
}


std::string
hex64(std::uint64_t v)
{
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace leapsim
