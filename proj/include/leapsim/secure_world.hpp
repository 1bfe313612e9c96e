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
#include <span>
#include <string>
#include <vector>

#include "leapsim/types.hpp"

namespace leapsim
{
  using Bytes = std::vector<std::uint8_t>;

  /// Modeled image digest: 64-bit FNV-1a over the plaintext. This is a
  /// stand-in for a cryptographic hash; it detects every single-byte
  /// change but offers no collision resistance against a chosen-input
  /// adversary.
  std::uint64_t image_digest(std::span<const std::uint8_t> payload);

  struct ImageRecord
  {
    std::string app_id;
    std::uint64_t digest = 0;
    std::uint32_t key_id = 0;
    std::uint64_t signature = 0;   // digest bound to key_id

    friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
  };

  struct EncryptedImage
  {
    std::string app_id;
    Bytes payload;
    bool encrypted = true;

    friend bool operator==(const EncryptedImage&, const EncryptedImage&) = default;
  };

  /// The secure-world key store: image registration, integrity
  /// verification and the modeled decryption. Key material never leaves
  /// this class.
  class KeyStore
  {
  public:
    /// Register payload for app_id under a fresh key. Throws DuplicateApp.
    ImageRecord register_image(const std::string& app_id, std::span<const std::uint8_t> payload);

    /// Produce the encrypted image handed to the rich OS for staging.
    /// Throws UnknownApp.
    EncryptedImage seal(const std::string& app_id, std::span<const std::uint8_t> payload) const;

    /// Decrypt without checking integrity (the verification-disabled
    /// mutation path). Throws UnknownApp.
    Bytes decrypt(const EncryptedImage& image) const;

    /// Decrypt and check integrity. Pure: never mutates the store.
    /// Throws UnknownApp or IntegrityError.
    Bytes verify_and_decrypt(const EncryptedImage& image) const;

    bool contains(const std::string& app_id) const { return records_.count(app_id) != 0; }
    const ImageRecord& record(const std::string& app_id) const;

    friend bool operator==(const KeyStore&, const KeyStore&) = default;

  private:
    std::uint64_t sign(std::uint64_t digest, std::uint32_t key_id) const;
    void transform(Bytes& data, std::uint32_t key_id) const;

    std::map<std::string, ImageRecord> records_;
    std::uint32_t next_key_id_ = 1;
    std::uint64_t root_secret_ = 0x9e3779b97f4a7c15ULL;
  };

}  // namespace leapsim
