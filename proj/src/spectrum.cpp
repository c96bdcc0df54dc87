#include "trajguard/spectrum.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <map>
#include <mutex>

namespace trajguard::spectrum {

namespace {

// FFTW planning is not thread-safe; execution with the new-array interface is.
class PlanCache {
 public:
  ~PlanCache() {
    for (auto& [n, plan] : plans_) fftw_destroy_plan(plan);
  }

  fftw_plan get(std::size_t n) {
    std::lock_guard lock(mutex_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    std::vector<double> in(n);
    std::vector<std::complex<double>> out(n / 2 + 1);
    fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(), reinterpret_cast<fftw_complex*>(out.data()),
                                          FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (!plan) throw NumericError("FFT planning failed for length " + std::to_string(n));
    plans_.emplace(n, plan);
    return plan;
  }

 private:
  std::mutex mutex_;
  std::map<std::size_t, fftw_plan> plans_;
};

PlanCache& plans() {
  static PlanCache cache;
  return cache;
}

}  // namespace

std::vector<double> magnitude_spectrum(std::span<const double> z) {
  const std::size_t n = z.size();
  if (n < 2) throw ShapeError("spectrum needs a code of length >= 2, got " + std::to_string(n));
  if (!all_finite(z)) throw NumericError("temporal code has non-finite entries");
  std::vector<double> in(z.begin(), z.end());
  std::vector<std::complex<double>> out(feature_length(n));
  fftw_execute_dft_r2c(plans().get(n), in.data(), reinterpret_cast<fftw_complex*>(out.data()));
  std::vector<double> mags(out.size());
  for (std::size_t k = 0; k < out.size(); ++k) mags[k] = std::abs(out[k]);
  return mags;
}

std::vector<double> magnitude_spectrum(std::span<const float> z) {
  const std::vector<double> zd(z.begin(), z.end());
  return magnitude_spectrum(std::span<const double>(zd));
}

SpectrumFeature transform(const codec::TemporalCode& code) {
  return {magnitude_spectrum(std::span<const float>(code.z)), code.sample_id};
}

MatrixRM transform_batch(const MatrixRM& codes) {
  MatrixRM out(codes.rows(), static_cast<Eigen::Index>(feature_length(static_cast<std::size_t>(codes.cols()))));
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    const auto mags =
        magnitude_spectrum(std::span<const float>(codes.row(i).data(), static_cast<std::size_t>(codes.cols())));
    for (std::size_t k = 0; k < mags.size(); ++k) out(i, static_cast<Eigen::Index>(k)) = static_cast<float>(mags[k]);
  }
  return out;
}

}  // namespace trajguard::spectrum
