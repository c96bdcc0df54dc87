#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "trajguard/codec.hpp"
#include "trajguard/common.hpp"

namespace trajguard::spectrum {

inline constexpr const char* kConvention = "one-sided magnitude, unnormalized, DC included, no window";

struct SpectrumFeature {
  std::vector<double> magnitudes;  // length floor(n/2) + 1
  std::uint64_t sample_id = 0;
};

constexpr std::size_t feature_length(std::size_t n) noexcept { return n / 2 + 1; }

/// |DFT(z)_k| for k = 0..floor(n/2). Needs n >= 2 and finite input.
std::vector<double> magnitude_spectrum(std::span<const double> z);
std::vector<double> magnitude_spectrum(std::span<const float> z);

SpectrumFeature transform(const codec::TemporalCode& code);

/// Row-wise spectra of a batch of codes.
MatrixRM transform_batch(const MatrixRM& codes);

}  // namespace trajguard::spectrum
