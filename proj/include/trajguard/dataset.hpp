#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "trajguard/common.hpp"

namespace trajguard {

enum class Split { train, validation, reserved, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// Samples are stored flat, channel-major then row-major, values in [0,1] for images.
struct LabeledDataset {
  Shape shape;
  Split split = Split::train;
  std::vector<float> samples;
  std::vector<float> labels;
  std::vector<std::uint64_t> ids;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::span<const float> sample(std::size_t i) const {
    return {samples.data() + i * shape.size(), shape.size()};
  }
  std::span<float> sample(std::size_t i) { return {samples.data() + i * shape.size(), shape.size()}; }
  int label(std::size_t i) const { return static_cast<int>(labels[i]); }

  void push_back(std::span<const float> x, float label, std::uint64_t id);
  LabeledDataset subset(std::span<const std::size_t> indices) const;
  LabeledDataset head(std::size_t count) const;

  // Throws ShapeError if the parallel arrays disagree.
  void validate() const;
};

void save_dataset(const std::filesystem::path& dir, const LabeledDataset& data);
LabeledDataset load_dataset(const std::filesystem::path& dir);

/// Procedural ten-class grayscale image set used as the desk-scale victim task.
///
/// Every sample is a pure function of (seed, id): a low-contrast glyph (disk, ring,
/// square, frame, triangle, plus, cross, horizontal bars, vertical bars, tee) with
/// random placement, scale, rotation and contrast over a noisy shaded background.
/// The label of id k is k mod 10, so any contiguous id range is class balanced.
/// Corners are kept free of glyph ink so that corner patch triggers are novel.
struct GlyphSetConfig {
  std::uint64_t seed = 7;
  int size = 28;
  float noise_sigma = 0.01f;
  float min_contrast = 0.22f;
  float max_contrast = 0.55f;
  float jitter = 1.0f;         // max centre offset, pixels
  float rotation_deg = 5.0f;   // max absolute rotation
  float min_background = 0.15f;
  float max_background = 0.45f;
  float gradient = 0.0f;       // max background slope per pixel
};

inline constexpr int kGlyphClasses = 10;

void render_glyph(const GlyphSetConfig& config, std::uint64_t id, std::span<float> out);

LabeledDataset make_glyph_set(const GlyphSetConfig& config, Split split, std::uint64_t first_id,
                              std::size_t count);

}  // namespace trajguard
