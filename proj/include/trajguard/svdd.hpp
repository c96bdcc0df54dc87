#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "trajguard/common.hpp"
#include "json.hpp"

namespace trajguard::svdd {

struct DetectorConfig {
  std::vector<std::size_t> hidden{32};
  std::size_t embed_dim = 16;
  double preset_frr = 0.05;
  int epochs = 150;
  double lr = 1e-3;
  int batch_size = 64;
  double weight_decay = 1e-6;
  double leaky_slope = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json config_to_json(const DetectorConfig& c);
DetectorConfig config_from_json(const nlohmann::json& j);

enum class Verdict { benign, adversarial };
std::string to_string(Verdict v);

/// Smallest score with at least a (1 - frr) fraction of scores at or below it.
double calibrate_threshold(std::span<const double> scores, double frr);

struct ScoreSummary {
  std::size_t count = 0;
  double min = 0.0, max = 0.0, mean = 0.0;
  std::size_t above_threshold = 0;
};

/// Bias-free embedding network with a fixed centre (hard one-class objective).
class Detector {
 public:
  Detector(const DetectorConfig& config, std::size_t input_dim);

  const DetectorConfig& config() const noexcept { return config_; }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(mean_.size()); }
  double threshold() const noexcept { return threshold_; }
  double preset_frr() const noexcept { return config_.preset_frr; }
  const std::vector<double>& loss_log() const noexcept { return loss_log_; }
  const ScoreSummary& summary() const noexcept { return summary_; }
  const VectorF& center() const noexcept { return center_; }
  const VectorF& norm_mean() const noexcept { return mean_; }
  const VectorF& norm_scale() const noexcept { return scale_; }
  const std::vector<MatrixRM>& weights() const noexcept { return weights_; }
  std::vector<MatrixRM>& weights() noexcept { return weights_; }

  std::vector<float> embed(std::span<const float> feature) const;
  MatrixRM embed_batch(const MatrixRM& features) const;
  double score(std::span<const float> feature) const;
  std::vector<double> score_batch(const MatrixRM& features) const;
  Verdict verdict(double score) const noexcept {
    return score > threshold_ ? Verdict::adversarial : Verdict::benign;
  }
  Verdict verdict(std::span<const float> feature) const { return verdict(score(feature)); }

  // Recalibrates on the given scores (usually benign training scores).
  void calibrate(std::span<const double> scores);
  void set_center(VectorF c);
  void set_normalization(VectorF mean, VectorF scale);

  bool operator==(const Detector& other) const;

 private:
  friend Detector fit_detector(const MatrixRM&, const DetectorConfig&);
  friend Detector load_detector(const std::filesystem::path&);

  MatrixRM normalize(const MatrixRM& features) const;
  MatrixRM forward(const MatrixRM& normalized, std::vector<MatrixRM>* pre) const;

  DetectorConfig config_;
  std::vector<MatrixRM> weights_;  // layer l: out x in
  VectorF mean_, scale_, center_;
  double threshold_ = 0.0;
  std::vector<double> loss_log_;
  ScoreSummary summary_;
};

/// Trains on benign features (rows) and calibrates the threshold on their scores.
Detector fit_detector(const MatrixRM& features, const DetectorConfig& config);

void save_detector(const std::filesystem::path& dir, const Detector& detector);
Detector load_detector(const std::filesystem::path& dir);

}  // namespace trajguard::svdd
