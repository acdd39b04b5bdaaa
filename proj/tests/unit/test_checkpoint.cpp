#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "moco/checkpoint.hpp"
#include "oracles.hpp"

namespace moco {
namespace {

namespace fs = std::filesystem;

Checkpoint sample_checkpoint() {
  std::mt19937_64 rng(1);
  Checkpoint ck;
  ck.put("b/weight", oracle::random_grid(Shape{3, 2, 2}, rng).cast<float>());
  ck.put("a/w", oracle::random_grid(Shape{5}, rng));
  ck.put_u64("rng", {1, 2, 0xffffffffffffffffull});
  return ck;
}

CheckpointErrorCode code_of(const std::vector<unsigned char>& bytes) {
  try {
    Checkpoint::deserialize(bytes);
  } catch (const CheckpointError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no CheckpointError";
  return CheckpointErrorCode::kIo;
}

TEST(Checkpoint, SerializeRoundTripIsBitExact) {
  const Checkpoint ck = sample_checkpoint();
  const Checkpoint back = Checkpoint::deserialize(ck.serialize());
  EXPECT_TRUE(bitwise_equal(back.grid<float>("b/weight"), ck.grid<float>("b/weight")));
  EXPECT_TRUE(bitwise_equal(back.grid<double>("a/w"), ck.grid<double>("a/w")));
  EXPECT_EQ(back.u64("rng"), ck.u64("rng"));
  EXPECT_EQ(back.serialize(), ck.serialize());
}

TEST(Checkpoint, InsertionOrderDoesNotChangeBytes) {
  Checkpoint a, b;
  a.put("x", Grid<double>(Shape{2}, 1.0));
  a.put("y", Grid<float>(Shape{1}, 2.0f));
  b.put("y", Grid<float>(Shape{1}, 2.0f));
  b.put("x", Grid<double>(Shape{2}, 1.0));
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(Checkpoint, HeaderLayout) {
  Checkpoint ck;
  ck.put("w", Grid<float>(Shape{2}, 1.0f));
  const auto bytes = ck.serialize();
  // magic 4 + version 4 + count 4 + name len 2 + name 1 + dtype 1 + rank 1 + dim 8 + 8 payload
  ASSERT_EQ(bytes.size(), 33u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MMC1");
  EXPECT_EQ(bytes[4], 1u);
  EXPECT_EQ(bytes[8], 1u);
  EXPECT_EQ(bytes[15], static_cast<unsigned char>(Dtype::kF32));
}

TEST(Checkpoint, EveryTruncationIsDetected) {
  const auto bytes = sample_checkpoint().serialize();
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<long>(n));
    EXPECT_EQ(code_of(cut), CheckpointErrorCode::kTruncated) << "length " << n;
  }
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_EQ(code_of(extra), CheckpointErrorCode::kTruncated);
}

TEST(Checkpoint, BadMagicVersionAndDtype) {
  auto bytes = sample_checkpoint().serialize();
  auto m = bytes;
  m[0] = 'X';
  EXPECT_EQ(code_of(m), CheckpointErrorCode::kBadMagic);
  auto v = bytes;
  v[4] = 2;
  EXPECT_EQ(code_of(v), CheckpointErrorCode::kBadVersion);
  Checkpoint one;
  one.put("w", Grid<float>(Shape{2}, 1.0f));
  auto d = one.serialize();
  d[15] = 9;
  EXPECT_EQ(code_of(d), CheckpointErrorCode::kBadDtype);
}

TEST(Checkpoint, TypedAccessChecksDtypeAndPresence) {
  const Checkpoint ck = sample_checkpoint();
  try {
    ck.grid<double>("b/weight");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::kBadDtype);
  }
  try {
    ck.grid<float>("missing");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::kMissingArray);
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos);
  }
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const fs::path dir = fs::temp_directory_path() / "moco_ckpt_test";
  fs::create_directories(dir);
  const Checkpoint ck = sample_checkpoint();
  ck.save(dir / "a.ckpt");
  ck.save(dir / "b.ckpt");
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
  std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(Checkpoint::load(dir / "a.ckpt").serialize(), ck.serialize());
  try {
    Checkpoint::load(dir / "nope.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::kIo);
  }
  try {
    Checkpoint::load(dir);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointErrorCode::kIo);
  }
  fs::remove_all(dir);
}

}  // namespace
}  // namespace moco
