#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "trajguard/dataset.hpp"
#include "trajguard/model.hpp"

namespace support {

using namespace trajguard;

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("trajguard_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline GlyphSetConfig small_glyphs() {
  GlyphSetConfig g;
  g.size = 16;
  return g;
}

// Four conv taps on 16x16 inputs; fast enough to train inside a unit test.
inline model::ModelSpec tiny_spec(std::uint64_t seed = 0) {
  model::ModelSpec spec;
  spec.input_shape = {1, 16, 16};
  spec.output_arity = kGlyphClasses;
  spec.seed = seed;
  using model::LayerKind;
  using model::Activation;
  spec.layers = {{LayerKind::conv, 4, 3, Activation::relu},
                 {LayerKind::maxpool, 0, 2, Activation::identity},
                 {LayerKind::conv, 6, 3, Activation::relu},
                 {LayerKind::conv, 6, 3, Activation::relu},
                 {LayerKind::maxpool, 0, 2, Activation::identity},
                 {LayerKind::conv, 8, 3, Activation::relu}};
  return spec;
}

inline model::Network trained_tiny(std::size_t count = 600, int epochs = 4, std::uint64_t seed = 0) {
  const auto data = make_glyph_set(small_glyphs(), Split::train, 0, count);
  model::TrainOptions o;
  o.epochs = epochs;
  o.lr = 3e-3;
  o.seed = seed;
  return model::train_model(model::build_model(tiny_spec(seed)), data, o);
}

inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace support
