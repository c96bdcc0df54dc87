#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajguard/common.hpp"
#include "trajguard/dataset.hpp"
#include "trajguard/model.hpp"
#include "json.hpp"

namespace trajguard::attack {

// ---------------------------------------------------------------- triggers

enum class TriggerKind { patch, blend, source_specific_patch, dynamic_patch };
enum class Corner { top_left, top_right, bottom_left, bottom_right };

std::string to_string(TriggerKind k);
TriggerKind trigger_kind_from_string(const std::string& s);

struct TriggerSpec {
  TriggerKind kind = TriggerKind::patch;
  Corner corner = Corner::bottom_right;
  int side = 3;
  float fill = 1.0f;
  std::vector<float> blend_image;  // same layout as the samples it is applied to
  double alpha = 0.1;
  std::optional<int> source_class;  // empty means "any"
  int target_label = 0;
  bool per_sample_randomization = false;

  bool universal() const noexcept {
    return kind == TriggerKind::patch || kind == TriggerKind::blend;
  }
  void validate(const Shape& shape) const;
};

nlohmann::json trigger_to_json(const TriggerSpec& t);
TriggerSpec trigger_from_json(const nlohmann::json& j);

// Deterministic uniform-noise image used as the blend pattern.
std::vector<float> make_blend_image(const Shape& shape, std::uint64_t seed);

std::vector<float> apply_trigger(std::span<const float> sample, const Shape& shape, const TriggerSpec& trigger,
                                 std::uint64_t seed);

struct PoisonPolicy {
  TriggerSpec trigger;
  double poison_rate = 0.01;
  std::uint64_t seed = 0;
  // Source-specific kinds also stamp this many non-source samples, keeping
  // their labels, so the trigger alone does not fire the backdoor.
  std::optional<std::size_t> cover_count;
};

struct PoisonResult {
  LabeledDataset data;
  std::vector<std::size_t> poisoned_indices;  // ascending
  std::vector<std::size_t> cover_indices;
};

PoisonResult poison_dataset(const LabeledDataset& data, const PoisonPolicy& policy);

// Triggered copies of every eligible sample (source class only for source-specific
// kinds), keeping ground-truth labels and ids.
LabeledDataset make_triggered_set(const LabeledDataset& data, const TriggerSpec& trigger, std::uint64_t seed);

// ---------------------------------------------------------------- evasion attacks

enum class Method { fgsm, bim, pgd, cw, jsma, deepfool, boundary };
enum class Norm { l0, l2, linf };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
std::string to_string(Norm n);
Norm norm_from_string(const std::string& s);

struct AEConfig {
  Method method = Method::fgsm;
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int iterations = 10;
  bool random_start = false;
  bool targeted = false;
  int target = -1;
  std::uint64_t seed = 0;
  // CW (margin loss inside the l-inf ball)
  double confidence = 0.0;
  // JSMA
  int max_pixels = 40;
  double theta = 1.0;
  // DeepFool
  double overshoot = 0.02;
  // Boundary
  int max_queries = 1500;
  int init_attempts = 200;
  double spherical_step = 0.05;
  double source_step = 0.05;
  double tolerance = 1e-6;

  void validate() const;
  static AEConfig defaults_for(Method m);
};

nlohmann::json config_to_json(const AEConfig& c);
AEConfig config_from_json(const nlohmann::json& j);

enum class AttackStatus { success, failure, skipped };
std::string to_string(AttackStatus s);

struct AttackResult {
  std::vector<float> x_adv;
  AttackStatus status = AttackStatus::failure;
  int original_label = -1;
  int adversarial_label = -1;
  double linf = 0.0;
  double l2 = 0.0;
  int l0 = 0;
  int queries = 0;
  std::vector<double> accepted_distances;  // boundary attack only

  bool success() const noexcept { return status == AttackStatus::success; }
};

// Projects a candidate onto the l-inf ball around x intersected with [0,1]. The
// result satisfies |out - x| <= eps exactly in real arithmetic.
std::vector<float> project_linf(std::span<const float> x, std::span<const double> candidate, double eps);

AttackResult fgsm(const model::Network& net, std::span<const float> x, int y, const AEConfig& config);
// BIM is PGD without the random start.
AttackResult pgd(const model::Network& net, std::span<const float> x, int y, const AEConfig& config);
AttackResult cw_linf(const model::Network& net, std::span<const float> x, int y, const AEConfig& config);
AttackResult jsma(const model::Network& net, std::span<const float> x, int target, const AEConfig& config);
AttackResult deepfool(const model::Network& net, std::span<const float> x, int y, const AEConfig& config);

using QueryFn = std::function<int(std::span<const float>)>;
AttackResult boundary_attack(const QueryFn& query, std::span<const float> x, int y, const AEConfig& config,
                             std::optional<std::span<const float>> init = std::nullopt);

// Dispatches on config.method. For JSMA the target is config.target, or (y+1) mod K.
AttackResult craft(const model::Network& net, std::span<const float> x, int y, const AEConfig& config);

// Rows of logits' input gradients, one per output.
MatrixRM input_jacobian(const model::Network& net, std::span<const float> x);

struct CraftedSet {
  AEConfig config;
  Shape shape;
  std::vector<std::uint64_t> ids;
  std::vector<float> labels;  // ground truth of the clean source
  std::vector<AttackResult> results;

  std::size_t success_count() const;
  // Successful adversarial samples only, tagged test, with ground-truth labels.
  LabeledDataset successful() const;
};

// Crafts one adversarial sample per input (in parallel across samples; output
// order and values do not depend on the thread count).
CraftedSet craft_set(const model::Network& net, const LabeledDataset& clean, const AEConfig& config,
                     unsigned threads = 0);

void save_crafted(const std::filesystem::path& dir, const CraftedSet& set);
CraftedSet load_crafted(const std::filesystem::path& dir);

// ---------------------------------------------------------------- adaptive objective

struct AdaptiveConstraint {
  double distance_threshold = 1.2e-5;
  double gamma1 = 1.0;
  void validate() const;
};

// Euclidean distance between two temporal codes.
double trajectory_distance(std::span<const float> a, std::span<const float> b);

// Hinge penalty max(0, dist - threshold).
double adaptive_penalty(double dist, const AdaptiveConstraint& c);

// L_bda = l_bd + gamma1 * max(0, dist - threshold).
double adaptive_backdoor_loss(double l_bd, double dist, const AdaptiveConstraint& c);

}  // namespace trajguard::attack
