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


#include <doctest.h>

#include <random>

#include "leapsim/secure_world.hpp"
#include "support.hpp"

using namespace leapsim;
using leapsim::testing::code_of;

namespace
{

Bytes
random_payload(std::uint64_t seed, std::size_t n)
{
  std::mt19937_64 rng(seed);
  Bytes b(n);
  for (auto& x : b)
    x = std::uint8_t(rng());
  return b;
}

// Reference FNV-1a, written out byte by byte.
std::uint64_t
fnv_ref(const Bytes& b)
{
  std::uint64_t h = 14695981039346656037ULL;
  for (std::uint8_t c : b)
    {
      h ^= c;
      h *= 1099511628211ULL;
    }
  return h;
}

}  // namespace


TEST_CASE("image digest is FNV-1a")
{
  for (std::uint64_t s = 0; s < 8; ++s)
    {
      const Bytes p = random_payload(s, 100 + s * 37);
      CHECK(image_digest(p) == fnv_ref(p));
    }
  CHECK(image_digest(Bytes{}) == 14695981039346656037ULL);
}

TEST_CASE("seal then verify round-trips")
{
  KeyStore ks;
  const Bytes p = random_payload(1, 4096);
  const ImageRecord rec = ks.register_image("app", p);
  CHECK(rec.app_id == "app");
  CHECK(rec.digest == fnv_ref(p));
  const EncryptedImage img = ks.seal("app", p);
  CHECK(img.encrypted);
  CHECK(img.payload != p);
  CHECK(ks.verify_and_decrypt(img) == p);
  CHECK(ks.decrypt(img) == p);
}

TEST_CASE("every single-byte flip of the sealed image is rejected")
{
  KeyStore ks;
  const Bytes p = random_payload(2, 512);
  ks.register_image("app", p);
  const EncryptedImage img = ks.seal("app", p);
  const KeyStore before = ks;
  for (std::size_t i = 0; i < img.payload.size(); ++i)
    for (std::uint8_t mask : {std::uint8_t(0x01), std::uint8_t(0x80), std::uint8_t(0xff)})
      {
        EncryptedImage bad = img;
        bad.payload[i] ^= mask;
        REQUIRE(code_of([&] { ks.verify_and_decrypt(bad); }) == ErrorCode::IntegrityError);
      }
  CHECK(ks == before);
}

TEST_CASE("another app's image does not verify under this app's record")
{
  KeyStore ks;
  const Bytes a = random_payload(3, 256), b = random_payload(4, 256);
  ks.register_image("a", a);
  ks.register_image("b", b);
  EncryptedImage swapped = ks.seal("b", b);
  swapped.app_id = "a";
  CHECK(code_of([&] { ks.verify_and_decrypt(swapped); }) == ErrorCode::IntegrityError);
  CHECK(ks.record("a").key_id != ks.record("b").key_id);
}

TEST_CASE("duplicate and unknown apps")
{
  KeyStore ks;
  const Bytes p = random_payload(5, 64);
  ks.register_image("x", p);
  CHECK(code_of([&] { ks.register_image("x", p); }) == ErrorCode::DuplicateApp);
  CHECK(code_of([&] { ks.seal("y", p); }) == ErrorCode::UnknownApp);
  CHECK(code_of([&] { ks.verify_and_decrypt(EncryptedImage{"y", p, true}); })
        == ErrorCode::UnknownApp);
  CHECK(ks.contains("x"));
  CHECK(not ks.contains("y"));
}
