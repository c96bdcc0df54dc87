#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "trajguard/common.hpp"
#include "trajguard/model.hpp"
#include "json.hpp"

namespace trajguard::trajectory {

enum class ReductionMethod { pca, umap };
std::string to_string(ReductionMethod m);
ReductionMethod reduction_from_string(const std::string& s);

inline constexpr std::size_t kUmapMinSamples = 200;

/// Named layer subset, as 1-based tap ordinals.
struct SamplingPlan {
  std::string name = "full";
  std::vector<int> layers;

  void validate(int tap_count) const;
};

/// SS1 first five, SS2 last five, SS3 every fifth from 1, SS4 {1,5,10,...},
/// SS5 every second from 1, full all. Patterns are clipped to tap_count.
SamplingPlan make_sampling_plan(const std::string& name, int tap_count);

class Reducer {
 public:
  virtual ~Reducer() = default;
  virtual ReductionMethod method() const noexcept = 0;
  virtual std::size_t input_dim() const noexcept = 0;
  virtual std::size_t output_dim() const noexcept = 0;
  virtual std::size_t fit_count() const noexcept = 0;
  virtual void transform(std::span<const float> x, std::span<float> out) const = 0;
  virtual void save(const std::filesystem::path& dir, const std::string& prefix, nlohmann::json& meta) const = 0;
};

class PcaReducer final : public Reducer {
 public:
  // rows of `data` are samples; d is capped at min(n - 1, D)
  static PcaReducer fit(const MatrixRM& data, std::size_t d);
  PcaReducer(VectorF mean, MatrixRM components, std::size_t fit_count);

  ReductionMethod method() const noexcept override { return ReductionMethod::pca; }
  std::size_t input_dim() const noexcept override { return static_cast<std::size_t>(mean_.size()); }
  std::size_t output_dim() const noexcept override { return static_cast<std::size_t>(components_.rows()); }
  std::size_t fit_count() const noexcept override { return fit_count_; }
  void transform(std::span<const float> x, std::span<float> out) const override;
  // Maps a reduced vector back to input space.
  std::vector<float> inverse(std::span<const float> code) const;
  void save(const std::filesystem::path& dir, const std::string& prefix, nlohmann::json& meta) const override;
  static PcaReducer load(const std::filesystem::path& dir, const nlohmann::json& meta);

  const VectorF& mean() const noexcept { return mean_; }
  const MatrixRM& components() const noexcept { return components_; }  // d x D, orthonormal rows

 private:
  VectorF mean_;
  MatrixRM components_;
  std::size_t fit_count_;
};

struct UmapOptions {
  int neighbors = 15;
  double min_dist = 0.1;
  int epochs = 200;
  int transform_epochs = 30;
  int negative_samples = 5;
  std::uint64_t seed = 0;
};

/// Fuzzy-graph embedding. Keeps its fit data so new points can be placed by
/// optimising only their own coordinates against the frozen embedding.
class UmapReducer final : public Reducer {
 public:
  static UmapReducer fit(const MatrixRM& data, std::size_t d, const UmapOptions& options);

  ReductionMethod method() const noexcept override { return ReductionMethod::umap; }
  std::size_t input_dim() const noexcept override { return static_cast<std::size_t>(data_.cols()); }
  std::size_t output_dim() const noexcept override { return static_cast<std::size_t>(embedding_.cols()); }
  std::size_t fit_count() const noexcept override { return static_cast<std::size_t>(data_.rows()); }
  void transform(std::span<const float> x, std::span<float> out) const override;
  void save(const std::filesystem::path& dir, const std::string& prefix, nlohmann::json& meta) const override;
  static UmapReducer load(const std::filesystem::path& dir, const nlohmann::json& meta);

  const MatrixRM& embedding() const noexcept { return embedding_; }

 private:
  UmapOptions options_;
  double a_ = 1.0, b_ = 1.0;
  MatrixRM data_;
  MatrixRM embedding_;
};

struct Trajectory {
  MatrixRM values;  // L x d, row i belongs to layers[i]
  std::uint64_t sample_id = 0;
  std::vector<int> layers;
};

struct BankLayer {
  int ordinal = 0;      // tap ordinal
  int layer_index = 0;  // model layer index
  std::shared_ptr<const Reducer> reducer;
};

class ReducerBank {
 public:
  ReducerBank() = default;
  ReducerBank(ReductionMethod method, std::size_t requested_dim, std::uint64_t seed, std::vector<BankLayer> layers);

  ReductionMethod method() const noexcept { return method_; }
  std::size_t requested_dim() const noexcept { return requested_dim_; }
  // Width actually produced (smaller than requested when fit samples were scarce).
  std::size_t target_dim() const noexcept { return target_dim_; }
  bool dim_capped() const noexcept { return target_dim_ < requested_dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<BankLayer>& layers() const noexcept { return layers_; }
  std::vector<int> ordinals() const;

  Trajectory reduce(const model::ActivationSequence& sequence) const;
  // Reduces one tapped activation into its trajectory row (streaming path).
  // Returns false when the ordinal is not part of the bank.
  bool reduce_layer(int ordinal, std::span<const float> activation, std::span<float> row) const;
  std::ptrdiff_t row_of(int ordinal) const;

  // Same reducers restricted to a plan whose layers are all in this bank.
  ReducerBank subset(const SamplingPlan& plan) const;

 private:
  ReductionMethod method_ = ReductionMethod::pca;
  std::size_t requested_dim_ = 0;
  std::size_t target_dim_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<BankLayer> layers_;
};

/// Fits one reducer per planned layer from per-layer sample matrices
/// (`layer_data[i]` is fit-count x activation size for tap ordinal i+1).
ReducerBank fit_reducers(const std::vector<MatrixRM>& layer_data, const std::vector<model::TapPoint>& taps,
                         const SamplingPlan& plan, std::size_t d, ReductionMethod method, std::uint64_t seed);

ReducerBank fit_reducers(const std::vector<model::ActivationSequence>& sequences, const SamplingPlan& plan,
                         std::size_t d, ReductionMethod method, std::uint64_t seed);

/// Tap activations of a batch: one matrix per tap ordinal, rows are samples.
std::vector<MatrixRM> collect_taps(const model::Network& net, const MatrixRM& inputs);

void save_bank(const std::filesystem::path& dir, const ReducerBank& bank);
ReducerBank load_bank(const std::filesystem::path& dir);

}  // namespace trajguard::trajectory
