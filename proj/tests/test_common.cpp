#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "editkit/common.hpp"

#include <cmath>
#include <limits>
#include <set>

using namespace editkit;

TEST_CASE("hash and seed primitives match published vectors") {
  CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

  // std::mt19937_64 reference: 10000th draw from the default seed
  Rng rng(5489);
  uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = rng.next_u64();
  CHECK(v == 9981545732273789042ULL);
}

TEST_CASE("derived seeds") {
  CHECK(derive_seed(1, "world") == splitmix64(1 ^ fnv1a64("world")));
  std::set<uint64_t> seen;
  for (const char* name : {"world", "data", "train", "eval", "text", "init", "step", "edit"})
    for (uint64_t root : {0ULL, 1ULL, 42ULL}) seen.insert(derive_seed(root, name));
  CHECK(seen.size() == 24);
}

TEST_CASE("rng draws") {
  Rng a(3), b(3);
  CHECK(a.normal_matrix(4, 5) == b.normal_matrix(4, 5));
  Rng rng(4);
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double x = rng.normal();
    sum += x, sq += x * x;
  }
  CHECK(std::abs(sum / 20000) < 0.03);
  CHECK(std::abs(sq / 20000 - 1.0) < 0.04);
  for (int i = 0; i < 1000; ++i) {
    const int k = rng.uniform_int(2, 4);
    CHECK(k >= 2);
    CHECK(k <= 4);
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("float rounding") {
  MatrixD m(1, 3);
  m << 0.1, 1.0 / 3.0, 1e300;
  round_to_float(m);
  CHECK(m(0, 0) == static_cast<double>(0.1f));
  CHECK(m(0, 1) == static_cast<double>(1.0f / 3.0f));
  CHECK(std::isinf(m(0, 2)));
  MatrixD again = m;
  round_to_float(again);
  CHECK(again.block(0, 0, 1, 2) == m.block(0, 0, 1, 2));
}

TEST_CASE("blobs") {
  const auto dir = std::filesystem::temp_directory_path() / "editkit_common_test";
  std::filesystem::create_directories(dir);
  Rng rng(5);
  MatrixD m = rng.normal_matrix(3, 7);
  round_to_float(m);
  write_matrix_blob(dir / "m.bin", m);
  CHECK(std::filesystem::file_size(dir / "m.bin") == 3 * 7 * 4);
  CHECK(read_matrix_blob(dir / "m.bin", 3, 7) == m);

  const std::vector<float> v{1.0f, -2.5f};
  write_blob(dir / "v.bin", v);
  CHECK(read_text_file(dir / "v.bin") == std::string("\x00\x00\x80\x3f\x00\x00\x20\xc0", 8));
  CHECK(sha256_file(dir / "v.bin") == sha256_hex(read_text_file(dir / "v.bin")));

  CHECK_THROWS_AS(read_blob(dir / "v.bin", 3), ArtifactError);
  CHECK_THROWS_AS(read_blob(dir / "absent.bin", 1), ArtifactError);
  CHECK_THROWS_AS(read_text_file(dir / "absent.txt"), ArtifactError);
  std::filesystem::remove_all(dir);
}
