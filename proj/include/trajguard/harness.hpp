#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajguard/attack.hpp"
#include "trajguard/codec.hpp"
#include "trajguard/common.hpp"
#include "trajguard/dataset.hpp"
#include "trajguard/model.hpp"
#include "trajguard/svdd.hpp"
#include "trajguard/trajectory.hpp"
#include "json.hpp"

namespace trajguard::harness {

// Wall-clock seconds per named stage, in the order the stages ran.
using Timings = std::vector<std::pair<std::string, double>>;

struct BundleOptions {
  std::string plan = "full";
  trajectory::ReductionMethod reduction = trajectory::ReductionMethod::pca;
  std::size_t dim = 64;
  codec::CodecConfig codec;
  svdd::DetectorConfig detector;
  // Share of the reserved set held out from fitting and used only to place the
  // threshold. 0 calibrates on the detector's own training scores.
  double calibration_fraction = 0.2;
  bool use_codec = true;
  bool use_spectrum = true;  // requires use_codec
  std::uint64_t seed = 0;    // reducer seed

  void validate() const;
};

nlohmann::json options_to_json(const BundleOptions& o);
BundleOptions options_from_json(const nlohmann::json& j);

inline constexpr std::size_t kVerificationCount = 16;

// Reducer bank plus (optional) codec: everything upstream of the spectrum.
struct FrontEnd {
  trajectory::SamplingPlan plan;
  trajectory::ReducerBank bank;
  std::optional<codec::Codec> codec;
};

/// Frozen detector pipeline around a victim model. All scoring goes through
/// the per-sample streaming path, so a score never depends on batch layout.
class Bundle {
 public:
  Bundle(std::shared_ptr<const model::Network> model, BundleOptions options, FrontEnd front,
         svdd::Detector detector);

  const model::Network& model() const noexcept { return *model_; }
  std::shared_ptr<const model::Network> model_ptr() const noexcept { return model_; }
  const BundleOptions& options() const noexcept { return options_; }
  const FrontEnd& front() const noexcept { return front_; }
  const svdd::Detector& detector() const noexcept { return detector_; }
  svdd::Detector& detector() noexcept { return detector_; }
  const nlohmann::json& manifest() const noexcept { return manifest_; }
  nlohmann::json& manifest() noexcept { return manifest_; }

  std::size_t feature_dim() const;
  // Reduction runs inside the forward pass, one tapped layer at a time.
  trajectory::Trajectory trajectory_of(std::span<const float> input, std::uint64_t id = 0) const;
  std::vector<float> feature(std::span<const float> input) const;
  double score(std::span<const float> input) const;

  const MatrixRM& verification_inputs() const noexcept { return verify_inputs_; }
  const std::vector<double>& verification_scores() const noexcept { return verify_scores_; }
  void set_verification(MatrixRM inputs, std::vector<double> scores);
  // Number of stored verification vectors whose recomputed score matches bit for bit.
  std::size_t verify() const;

 private:
  std::shared_ptr<const model::Network> model_;
  BundleOptions options_;
  FrontEnd front_;
  svdd::Detector detector_;
  nlohmann::json manifest_;
  MatrixRM verify_inputs_;
  std::vector<double> verify_scores_;
};

// Per-sample parallel map; results are independent of the thread count.
std::vector<std::vector<float>> map_samples(const LabeledDataset& data, unsigned threads,
                                            const std::function<std::vector<float>(std::span<const float>)>& fn);

MatrixRM flat_trajectories(const Bundle& bundle, const LabeledDataset& data, unsigned threads = 0);
std::vector<double> score_all(const Bundle& bundle, const LabeledDataset& data, unsigned threads = 0);

FrontEnd fit_front_end(const model::Network& net, const LabeledDataset& fit_set, const BundleOptions& options,
                       unsigned threads = 0, Timings* timings = nullptr);

/// Offline phase on reserved benign samples only. Fails with a StageError naming
/// the stage when any stage throws, and with a ConfigError when the set is not
/// tagged reserved or shares ids with the model's training data.
Bundle build_bundle(std::shared_ptr<const model::Network> model, const LabeledDataset& reserved,
                    const BundleOptions& options, unsigned threads = 0, Timings* timings = nullptr);

void save_bundle(const std::filesystem::path& dir, const Bundle& bundle);
// Verifies the manifest hash and the stored verification scores.
Bundle load_bundle(const std::filesystem::path& dir);

// ---------------------------------------------------------------- detection

enum class Truth { benign, ae, trigger };
std::string to_string(Truth t);
Truth truth_from_string(const std::string& s);

struct Row {
  std::uint64_t id = 0;
  Truth truth = Truth::benign;
  std::string method;  // attack name, "none" for benign
  double score = 0.0;
  svdd::Verdict verdict = svdd::Verdict::benign;
  std::string error;  // non-empty when the sample could not be scored
};

struct Rate {
  std::size_t total = 0;
  std::size_t flagged = 0;
  std::optional<double> value() const;
};

struct Metrics {
  Rate benign;                          // flagged / total is the online FRR
  std::map<std::string, Rate> attacks;  // detection accuracy per attack method
  std::size_t errors = 0;
  std::optional<double> cda, asr;

  std::optional<double> online_frr() const { return benign.value(); }
  std::optional<double> detection(const std::string& method) const;
};

Metrics compute_metrics(std::span<const Row> rows);

std::vector<Row> detect(const Bundle& bundle, const LabeledDataset& samples, Truth truth, const std::string& method,
                        unsigned threads = 0);

struct DetectionReport {
  std::vector<Row> rows;
  Metrics metrics;
  nlohmann::json config;
  Timings timings;
};

// Timings are left out when with_timings is false, which is the form used to
// compare runs.
nlohmann::json report_to_json(const DetectionReport& report, bool with_timings = true);
DetectionReport report_from_json(const nlohmann::json& j);
std::string rows_to_csv(std::span<const Row> rows);
std::string metrics_to_csv(const Metrics& m);

// ---------------------------------------------------------------- experiments

struct AdaptiveOptions {
  attack::AdaptiveConstraint constraint;
  int epochs = 2;
  double lr = 5e-4;
  int batch_size = 32;
  int pairs = 16;  // clean/triggered pairs per batch
  std::size_t surrogate_count = 1000;
  std::uint64_t seed = 11;
};

struct ExperimentConfig {
  GlyphSetConfig data;
  std::size_t train_count = 5000;
  std::size_t reserved_count = 1000;
  std::size_t test_count = 1000;
  std::uint64_t train_first_id = 0;
  std::uint64_t reserved_first_id = 100000;
  std::uint64_t test_first_id = 200000;
  std::uint64_t model_seed = 1;
  model::TrainOptions training;
  attack::PoisonPolicy poison;
  std::uint64_t trigger_seed = 9;
  std::vector<attack::AEConfig> attacks;
  std::size_t attack_count = 300;
  BundleOptions bundle;
  AdaptiveOptions adaptive;
  unsigned threads = 0;

  ExperimentConfig();
  void validate() const;
};

nlohmann::json config_to_json(const ExperimentConfig& c);
// Unknown keys are rejected with a ConfigError naming them.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Splits {
  LabeledDataset train, reserved, test;
};
Splits make_splits(const ExperimentConfig& c);

model::Network train_victim(const ExperimentConfig& c, const LabeledDataset& train_data);
// Triggered copies of the test samples whose true label is not the target.
LabeledDataset triggered_test_set(const ExperimentConfig& c, const LabeledDataset& test);

/// Fine-tunes a backdoored model on its poisoned data with the extra penalty
/// gamma1 * max(0, |z(x) - z(x_t)| - threshold) on clean/triggered pairs, where z
/// comes from a frozen surrogate front end (PCA bank and codec only).
model::Network train_adaptive_backdoor(const model::Network& backdoored, const LabeledDataset& poisoned_train,
                                       const FrontEnd& surrogate, const attack::TriggerSpec& trigger,
                                       const AdaptiveOptions& options, std::vector<double>* penalty_log = nullptr);

// Test-time sets: benign test split, triggered set (empty for clean models), and
// the successful AEs of every configured attack.
struct EvaluationSets {
  LabeledDataset benign;
  std::optional<LabeledDataset> triggered;
  std::vector<std::pair<std::string, LabeledDataset>> adversarial;
};

EvaluationSets make_evaluation_sets(const ExperimentConfig& c, const model::Network& net, const Splits& splits,
                                    bool backdoored);

DetectionReport evaluate(const Bundle& bundle, const EvaluationSets& sets, const ExperimentConfig& c);

struct AblationResult {
  std::string variant;
  DetectionReport baseline, variant_report;
  nlohmann::json to_json() const;
};

// Variants: no_codec, no_spectrum, sampling:SSk (or sampling:full), reserved:N.
BundleOptions ablation_options(const BundleOptions& base, const std::string& variant, std::size_t* reserved_count);
AblationResult run_ablation(const ExperimentConfig& c, const std::shared_ptr<const model::Network>& net,
                            const Splits& splits, const EvaluationSets& sets, const std::string& variant,
                            const DetectionReport* baseline = nullptr);

}  // namespace trajguard::harness
