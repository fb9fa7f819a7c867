#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "diffdet/checkpoint.hpp"
#include "diffdet/hash.hpp"
#include "diffdet/image.hpp"
#include "diffdet/rng.hpp"
#include "diffdet/tensor.hpp"

using namespace diffdet;

TEST_CASE("tensor shape and elementwise ops") {
  TensorF a({2, 3, 4});
  CHECK(a.numel() == 24);
  CHECK(a.channels() == 2);
  CHECK(a.height() == 3);
  CHECK(a.width() == 4);
  a.fill(1.5f);
  TensorF b = TensorF::full({2, 3, 4}, 0.5f);
  a.add_(b);
  CHECK(a[0] == doctest::Approx(2.0f));
  a.axpy_(2.0f, b);
  CHECK(a[23] == doctest::Approx(3.0f));
  CHECK_THROWS_AS(a.add_(TensorF({1, 3, 4})), std::invalid_argument);
  CHECK_THROWS_AS(TensorF({0, 3}), std::invalid_argument);
}

TEST_CASE("concat and split round-trip") {
  TensorF a({2, 2, 2}), b({3, 2, 2});
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = static_cast<float>(i);
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = 100.0f + static_cast<float>(i);
  TensorF cat = concat_channels(a, b);
  CHECK(cat.channels() == 5);
  TensorF a2({2, 2, 2}), b2({3, 2, 2});
  split_channels(cat, a2, b2);
  CHECK(a2.bitwise_equal(a));
  CHECK(b2.bitwise_equal(b));
}

TEST_CASE("rng determinism and moments") {
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) CHECK(r1.uniform() == r2.uniform());

  Rng rn(7);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rn.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(0.02));
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("rng poisson mean and variance") {
  Rng r(11);
  const double lambda = 130.0;  // forces the large-mean split path at 500+? no: small path
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = static_cast<double>(r.poisson(lambda));
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(mean == doctest::Approx(lambda).epsilon(0.02));
  CHECK(var == doctest::Approx(lambda).epsilon(0.05));

  // split path
  Rng r2(12);
  double m2 = 0;
  for (int i = 0; i < 2000; ++i) m2 += static_cast<double>(r2.poisson(1200.0));
  CHECK(m2 / 2000 == doctest::Approx(1200.0).epsilon(0.02));
}

TEST_CASE("sample_without_replacement gives distinct indices") {
  Rng r(3);
  auto idx = r.sample_without_replacement(100, 40);
  CHECK(idx.size() == 40);
  std::sort(idx.begin(), idx.end());
  CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
  for (auto i : idx) CHECK((i >= 0 && i < 100));
}

TEST_CASE("fnv1a64 and crc32 are stable") {
  CHECK(fnv1a64_hex(std::string("")) == "cbf29ce484222325");
  CHECK(fnv1a64_hex(std::string("a")) == "af63dc4c8601ec8c");
  const char* s = "123456789";
  CHECK(crc32(s, 9) == 0xcbf43926u);  // classic check value
}

TEST_CASE("value range conversions round-trip") {
  Image img{TensorF({1, 4, 4}), ValueRange::Unit};
  Rng r(5);
  for (std::int64_t i = 0; i < img.data.numel(); ++i)
    img.data[i] = static_cast<float>(r.uniform());
  const Image diff = to_diffusion_range(img);
  for (std::int64_t i = 0; i < img.data.numel(); ++i) {
    CHECK(diff.data[i] == doctest::Approx(2.0f * img.data[i] - 1.0f));
    CHECK(diff.data[i] >= -1.0f);
    CHECK(diff.data[i] <= 1.0f);
  }
  const Image back = to_unit_range(diff);
  for (std::int64_t i = 0; i < img.data.numel(); ++i)
    CHECK(back.data[i] == doctest::Approx(img.data[i]).epsilon(1e-6));
}

TEST_CASE("pgm io round-trips 8-bit images") {
  const auto dir = std::filesystem::temp_directory_path() / "diffdet_test_core";
  std::filesystem::create_directories(dir);
  Image img{TensorF({1, 6, 5}), ValueRange::Unit};
  Rng r(9);
  for (std::int64_t i = 0; i < img.data.numel(); ++i)
    img.data[i] = static_cast<float>(r.uniform());
  quantize_unit8(img.data);
  const auto path = (dir / "t.pgm").string();
  write_pgm(path, img);
  const Image back = read_pgm(path);
  CHECK(back.data.bitwise_equal(img.data));
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint container round-trips and detects corruption") {
  const auto dir = std::filesystem::temp_directory_path() / "diffdet_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "w.ckpt").string();

  TensorF w1({3, 4});
  TensorF w2({5});
  for (std::int64_t i = 0; i < w1.numel(); ++i) w1[i] = static_cast<float>(i) * 0.25f;
  for (std::int64_t i = 0; i < w2.numel(); ++i) w2[i] = -static_cast<float>(i);

  save_checkpoint(path, {{"kind", "test"}},
                  {{"a.w", w1.shape(), w1.data(), w1.numel()},
                   {"b.w", w2.shape(), w2.data(), w2.numel()}});
  const Checkpoint ckpt = load_checkpoint(path);
  CHECK(ckpt.header.at("kind") == "test");
  CHECK(ckpt.param("a.w").bitwise_equal(w1));
  CHECK(ckpt.param("b.w").bitwise_equal(w2));
  CHECK(ckpt.has_param("a.w"));
  CHECK(!ckpt.has_param("c.w"));
  CHECK_THROWS_AS(ckpt.param("missing"), CheckpointError);

  // flip one payload byte: checksum must catch it
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    char c;
    f.seekg(40);
    f.get(c);
    f.seekp(40);
    f.put(static_cast<char>(c ^ 0x1));
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("derive_seed separates purposes") {
  CHECK(derive_seed(0, "a") != derive_seed(0, "b"));
  CHECK(derive_seed(0, "a", 1) != derive_seed(0, "a", 2));
  CHECK(derive_seed(0, "a", 1) == derive_seed(0, "a", 1));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
}
