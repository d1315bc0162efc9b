#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsa/rng.hpp"
#include "tsa/weights_io.hpp"

using namespace tsa;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

// Re-seals a tampered file so the parser, not the checksum, sees the damage.
void reseal(std::vector<unsigned char>& bytes) {
  const uint32_t crc = crc32(bytes.data(), bytes.size() - 4);
  for (int i = 0; i < 4; ++i)
    bytes[bytes.size() - 4 + static_cast<size_t>(i)] =
        static_cast<unsigned char>(crc >> (8 * i));
}

BackboneSpec tiny_spec() {
  BackboneSpec s;
  s.name = "tiny";
  s.stem = {8, 3, 1, 1, false};
  s.stage_channels = {8, 16};
  s.blocks_per_stage = 1;
  return s;
}

}  // namespace

TEST_CASE("crc32 known answers") {
  CHECK(crc32("123456789", 9) == 0xCBF43926u);
  CHECK(crc32("", 0) == 0x00000000u);
  const char* fox = "The quick brown fox jumps over the lazy dog";
  CHECK(crc32(fox, 43) == 0x414FA339u);
}

TEST_CASE("round trip preserves spec and tensors") {
  const std::string path = temp_path("tsa_roundtrip.tsaw");
  auto w = BackboneWeights::init(BackboneSpec::resnet_s(), 42, 3, 8);
  w.at("stem.bn.mean").data()[0] = 0.25;  // dirty a buffer so it must survive

  save_weights(w, path);
  auto r = load_weights(path);

  CHECK(r.spec.name == "resnet_s");
  CHECK(r.spec.stage_channels == std::vector<int>{16, 32, 64, 128});
  CHECK(r.spec.stem.kernel == 3);
  CHECK_FALSE(r.spec.stem.pool);

  // Heads stay behind by default.
  CHECK_FALSE(r.has("head0.weight"));
  size_t non_head = 0;
  for (const auto& [name, t] : w.tensors) non_head += !is_head_name(name);
  CHECK(r.tensors.size() == non_head);
  for (const auto& [name, t] : r.tensors) {
    CHECK(t.shape() == w.at(name).shape());
    CHECK(t.data() == w.at(name).data());
    CHECK_FALSE(t.requires_grad());
  }

  save_weights(w, path, true);
  auto rh = load_weights(path);
  CHECK(rh.has("head2.weight"));
  CHECK(rh.at("head2.weight").shape() == Shape{128, 8});
  std::remove(path.c_str());
}

TEST_CASE("saves are byte stable") {
  const std::string p1 = temp_path("tsa_stable1.tsaw");
  const std::string p2 = temp_path("tsa_stable2.tsaw");
  auto w = BackboneWeights::init(tiny_spec(), 9);
  save_weights(w, p1);
  save_weights(w, p2);
  auto b1 = slurp(p1);
  CHECK(b1 == slurp(p2));

  REQUIRE(b1.size() > 8);
  CHECK(b1[0] == 'T');
  CHECK(b1[1] == 'S');
  CHECK(b1[2] == 'A');
  CHECK(b1[3] == 'W');
  CHECK(b1[4] == kWeightsFormatVersion);
  CHECK(b1[5] == 0);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("load rejects damage") {
  const std::string path = temp_path("tsa_damage.tsaw");
  auto w = BackboneWeights::init(tiny_spec(), 11);
  save_weights(w, path);
  const auto good = slurp(path);

  CHECK_THROWS_WITH_AS(load_weights(temp_path("tsa_nonexistent.tsaw")),
                       doctest::Contains("cannot open"), std::runtime_error);

  auto bytes = good;
  bytes[10] ^= 0x40;  // any flipped bit breaks the checksum
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_weights(path), doctest::Contains("checksum"),
                       std::runtime_error);

  bytes = good;
  bytes[0] = 'X';
  reseal(bytes);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_weights(path), doctest::Contains("not a weights file"),
                       std::runtime_error);

  bytes = good;
  bytes[4] = 99;
  reseal(bytes);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_weights(path), doctest::Contains("unsupported version"),
                       std::runtime_error);

  // Cutting payload off the last record leaves extents promising more data
  // than remains.
  bytes = good;
  bytes.resize(bytes.size() - 64);
  reseal(bytes);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_weights(path), doctest::Contains("truncated"),
                       std::runtime_error);

  bytes = good;
  for (int i = 0; i < 40; ++i) bytes.push_back(0);
  reseal(bytes);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_weights(path), doctest::Contains("trailing"),
                       std::runtime_error);

  spit(path, {'T', 'S'});
  CHECK_THROWS_AS(load_weights(path), std::runtime_error);

  spit(path, good);
  CHECK_NOTHROW(load_weights(path));
  std::remove(path.c_str());
}

TEST_CASE("records of the other float width load with conversion") {
  // Hand-built file: empty-name spec, one stage, one [2,2] f32 record.
  std::vector<unsigned char> b = {'T', 'S', 'A', 'W'};
  auto u32 = [&](uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
  };
  auto f32 = [&](float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  };
  u32(kWeightsFormatVersion);
  u32(1);
  b.push_back('t');           // spec name "t"
  u32(3);                     // in_channels
  u32(8); u32(3); u32(1); u32(1);  // stem
  b.push_back(0);             // no pool
  u32(1); u32(8);             // one stage of 8 channels
  u32(1);                     // one block
  u32(1);                     // one record
  u32(4);
  b.insert(b.end(), {'s', 'o', 'm', 'e'});
  b.push_back(1);             // dtype f32
  u32(2); u32(2); u32(2);     // rank 2, 2x2
  f32(1.5f); f32(-2.0f); f32(0.25f); f32(8.0f);
  const uint32_t crc = crc32(b.data(), b.size());
  u32(crc);

  const std::string path = temp_path("tsa_f32.tsaw");
  spit(path, b);
  auto r = load_weights(path);
  CHECK(r.spec.name == "t");
  REQUIRE(r.has("some"));
  CHECK(r.at("some").shape() == Shape{2, 2});
  CHECK(r.at("some").data() == std::vector<real>{1.5, -2.0, 0.25, 8.0});
  std::remove(path.c_str());
}

TEST_CASE("loaded weights drive the forward pass") {
  const std::string path = temp_path("tsa_forward.tsaw");
  auto w = BackboneWeights::init(tiny_spec(), 17);
  Rng rng(3);
  std::vector<real> img(2 * 3 * 8 * 8);
  for (auto& v : img) v = static_cast<real>(rng.normal());
  Tensor x = Tensor::from({2, 3, 8, 8}, img);
  Tensor z = forward_features(w, x, false);

  save_weights(w, path);
  auto r = load_weights(path);
  Tensor z2 = forward_features(r, x, false);
  CHECK(z.data() == z2.data());
  std::remove(path.c_str());
}
