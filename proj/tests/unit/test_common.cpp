#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <limits>
#include <set>

#include "support.hpp"
#include "trajguard/common.hpp"
#include "trajguard/dataset.hpp"

using namespace trajguard;

TEST_CASE("float32 files round-trip and reject a wrong count") {
  support::TempDir dir("io");
  const std::vector<float> v{1.5f, -0.0f, 3.25e-8f, std::numeric_limits<float>::max()};
  io::write_f32(dir.path / "v.bin", v);
  CHECK(std::filesystem::file_size(dir.path / "v.bin") == 16);
  CHECK(support::bit_equal(io::read_f32(dir.path / "v.bin", 4), v));
  CHECK_THROWS_AS(io::read_f32(dir.path / "v.bin", 5), ShapeError);
  CHECK_THROWS(io::read_f32(dir.path / "missing.bin", 1));
  io::write_text(dir.path / "t.txt", "line\n");
  CHECK(io::read_text(dir.path / "t.txt") == "line\n");
}

TEST_CASE("file hashing matches known SHA-256 digests of the framed stream") {
  support::TempDir dir("sha");
  CHECK(io::sha256_files(dir.path, {}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  io::write_text(dir.path / "a", "bc");
  // name bytes, a NUL, then the file contents
  CHECK(io::sha256_files(dir.path, {"a"}) == "40bb547d936bbd31318ee37ac8799e7ecbb22eda2651f65e3214bffb8ce97bb4");

  std::string big;
  for (int r = 0; r < 300; ++r)
    for (int b = 0; b < 256; ++b) big.push_back(static_cast<char>(b));
  io::write_text(dir.path / "x.bin", big);
  io::write_text(dir.path / "y.txt", "hello");
  CHECK(io::sha256_files(dir.path, {"x.bin", "y.txt"}) ==
        "32097f8f0faf8ec65bf253842b44fd966f313e12714f11c9645b9d744700143c");
  CHECK(io::sha256_files(dir.path, {"y.txt", "x.bin"}) != io::sha256_files(dir.path, {"x.bin", "y.txt"}));
  CHECK_THROWS(io::sha256_files(dir.path, {"nope"}));
}

TEST_CASE("seed mixing is deterministic and spreads nearby inputs") {
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 30; ++a)
    for (std::uint64_t b = 0; b < 30; ++b) seen.insert(mix_seed(a, b));
  CHECK(seen.size() == 900);
}

TEST_CASE("finiteness checks") {
  CHECK(all_finite(std::vector<float>{0.0f, 1.0f}));
  CHECK_FALSE(all_finite(std::vector<float>{0.0f, std::numeric_limits<float>::infinity()}));
  CHECK_FALSE(all_finite(std::vector<double>{std::numeric_limits<double>::quiet_NaN()}));
}

TEST_CASE("glyph samples are a pure function of (seed, id)") {
  GlyphSetConfig g;
  const auto a = make_glyph_set(g, Split::train, 100, 30);
  const auto b = make_glyph_set(g, Split::test, 110, 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(support::bit_equal(a.sample(10 + i), b.sample(i)));
  g.seed = 8;
  const auto c = make_glyph_set(g, Split::train, 100, 1);
  CHECK_FALSE(support::bit_equal(a.sample(0), c.sample(0)));
  CHECK(a.shape == Shape{1, 28, 28});
  CHECK(a.split == Split::train);
  CHECK(b.split == Split::test);
}

TEST_CASE("labels are id mod 10 and pixels lie in the unit interval") {
  const auto d = make_glyph_set(GlyphSetConfig{}, Split::reserved, 37, 200);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d.ids[i] == 37 + i);
    CHECK(d.label(i) == static_cast<int>((37 + i) % 10));
  }
  for (float v : d.samples) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("corners stay free of glyph ink") {
  // With noise and gradient off, the corner block equals the flat background.
  GlyphSetConfig g;
  g.noise_sigma = 0.0f;
  g.gradient = 0.0f;
  const auto d = make_glyph_set(g, Split::train, 0, 100);
  const int n = g.size;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto s = d.sample(i);
    const float bg = s[0];
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        CHECK(s[static_cast<std::size_t>(y * n + x)] == bg);
        CHECK(s[static_cast<std::size_t>((n - 1 - y) * n + (n - 1 - x))] == bg);
      }
    }
  }
}

TEST_CASE("dataset persistence, subsets and validation") {
  const auto d = make_glyph_set(support::small_glyphs(), Split::validation, 5, 12);
  support::TempDir dir("ds");
  save_dataset(dir.path, d);
  const auto back = load_dataset(dir.path);
  CHECK(back.split == Split::validation);
  CHECK(back.shape == d.shape);
  CHECK(back.ids == d.ids);
  CHECK(back.labels == d.labels);
  CHECK(support::bit_equal(back.samples, d.samples));

  const std::vector<std::size_t> pick{3, 0, 7};
  const auto sub = d.subset(pick);
  CHECK(sub.size() == 3);
  CHECK(sub.ids == std::vector<std::uint64_t>{8, 5, 12});
  CHECK(d.head(4).size() == 4);

  auto broken = d;
  broken.labels.pop_back();
  CHECK_THROWS_AS(broken.validate(), ShapeError);
  CHECK(split_from_string(to_string(Split::reserved)) == Split::reserved);
  CHECK_THROWS(split_from_string("holdout"));
}
