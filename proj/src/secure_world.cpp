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

#include "leapsim/secure_world.hpp"

#include <string_view>

namespace leapsim
{

namespace
{

std::uint64_t
splitmix64(std::uint64_t& state)
{
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace


std::uint64_t
image_digest(std::span<const std::uint8_t> payload)
{
  std::uint64_t h = kFnvOffset;
  for (std::uint8_t b : payload)
    {
      h ^= b;
      h *= kFnvPrime;
    }
  return h;
}


ImageRecord
KeyStore::register_image(const std::string& app_id, std::span<const std::uint8_t> payload)
{
  if (records_.count(app_id))
    throw LeapError(ErrorCode::DuplicateApp, "app '" + app_id + "' already registered");
  ImageRecord r;
  r.app_id = app_id;
  r.digest = image_digest(payload);
  r.key_id = next_key_id_++;
  r.signature = sign(r.digest, r.key_id);
  records_.emplace(app_id, r);
  return r;
}


EncryptedImage
KeyStore::seal(const std::string& app_id, std::span<const std::uint8_t> payload) const
{
  const ImageRecord& r = record(app_id);
  EncryptedImage img{app_id, Bytes(payload.begin(), payload.end()), true};
  transform(img.payload, r.key_id);
  return img;
}


Bytes
KeyStore::decrypt(const EncryptedImage& image) const
{
  const ImageRecord& r = record(image.app_id);
  Bytes plain = image.payload;
  if (image.encrypted)
    transform(plain, r.key_id);
  return plain;
}


Bytes
KeyStore::verify_and_decrypt(const EncryptedImage& image) const
{
  const ImageRecord& r = record(image.app_id);
  Bytes plain = decrypt(image);
  const std::uint64_t d = image_digest(plain);
  if (d != r.digest or sign(d, r.key_id) != r.signature)
    throw LeapError(ErrorCode::IntegrityError,
                    "image for '" + image.app_id + "' failed verification");
  return plain;
}


const ImageRecord&
KeyStore::record(const std::string& app_id) const
{
  auto it = records_.find(app_id);
  if (it == records_.end())
    throw LeapError(ErrorCode::UnknownApp, "app '" + app_id + "' is not registered");
  return it->second;
}


std::uint64_t
KeyStore::sign(std::uint64_t digest, std::uint32_t key_id) const
{
  std::uint64_t state = root_secret_ ^ (std::uint64_t(key_id) << 32);
  return digest ^ splitmix64(state);
}


// Keyed XOR stream; applying it twice is the identity.
void
KeyStore::transform(Bytes& data, std::uint32_t key_id) const
{
  std::uint64_t state = root_secret_ + key_id * 0x632be59bd9b4e019ULL;
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    {
      if (i % 8 == 0)
        word = splitmix64(state);
      data[i] ^= static_cast<std::uint8_t>(word >> (8 * (i % 8)));
    }
}

}  // namespace leapsim
