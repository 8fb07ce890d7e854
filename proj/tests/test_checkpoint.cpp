#include <catch_amalgamated.hpp>

#include "glpi/checkpoint.hpp"
#include "glpi/selftest.hpp"
#include "helpers.hpp"

using namespace glpi;

namespace {

Checkpoint sample(Arch a, std::uint64_t seed) {
  Rng rng(seed);
  auto cfg = random_tiny_config(rng, a);
  auto ck = random_checkpoint(cfg, rng);
  ck.step = 1234;
  ck.weights = round_to_f32(cfg, ck.weights);
  return ck;
}

bool same_weights(const Checkpoint& a, const Checkpoint& b) {
  std::vector<std::vector<double>> va, vb;
  for_each_tensor(a.config, a.weights, [&](ConstTensorView t) { va.emplace_back(t.values.begin(), t.values.end()); });
  for_each_tensor(b.config, b.weights, [&](ConstTensorView t) { vb.emplace_back(t.values.begin(), t.values.end()); });
  return va == vb;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  for (Arch a : {Arch::Dense, Arch::Moe}) {
    const auto ck = sample(a, a == Arch::Dense ? 1 : 2);
    const auto bytes = encode_checkpoint(ck);
    const auto back = decode_checkpoint(bytes);
    CHECK(back.step == 1234);
    CHECK(back.config == ck.config);
    CHECK(same_weights(ck, back));
    CHECK(encode_checkpoint(back) == bytes);
  }
}

TEST_CASE("checkpoint header layout") {
  const auto ck = sample(Arch::Dense, 3);
  const auto bytes = encode_checkpoint(ck);
  CHECK(bytes.substr(0, 4) == "GLPI");
  ByteReader r(bytes, "t");
  r.bytes(4);
  CHECK(r.u32() == 1);
  CHECK(r.u64() == 1234);
}

TEST_CASE("checkpoint files save atomically and load") {
  testing::TempDir dir("ckpt");
  const auto ck = sample(Arch::Moe, 4);
  save_checkpoint(dir.path() / "a.glpi", ck);
  CHECK_FALSE(fs::exists(dir.path() / "a.glpi.tmp"));
  CHECK(same_weights(load_checkpoint(dir.path() / "a.glpi"), ck));
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.glpi"), DataError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto ck = sample(Arch::Dense, 5);
  const auto bytes = encode_checkpoint(ck);
  SECTION("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(b), DataError);
  }
  SECTION("bad version") {
    auto b = bytes;
    b[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(b), DataError);
  }
  SECTION("truncated") {
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 30)), DataError);
  }
  SECTION("invalid config") {
    auto b = bytes;
    b[16 + 4 * 3] = 7;  // n_heads no longer divides d_model
    CHECK_THROWS_AS(decode_checkpoint(b), DataError);
  }
  SECTION("renamed tensor") {
    auto b = bytes;
    const auto pos = b.find("tok_embed");
    REQUIRE(pos != std::string::npos);
    b[pos] = 'x';
    CHECK_THROWS_AS(decode_checkpoint(b), DataError);
  }
}
