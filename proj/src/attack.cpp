#include "trajguard/attack.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

namespace trajguard::attack {

using json = nlohmann::json;

// ---------------------------------------------------------------- names

std::string to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::patch: return "patch";
    case TriggerKind::blend: return "blend";
    case TriggerKind::source_specific_patch: return "source_specific_patch";
    case TriggerKind::dynamic_patch: return "dynamic_patch";
  }
  return "unknown";
}

TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "patch") return TriggerKind::patch;
  if (s == "blend") return TriggerKind::blend;
  if (s == "source_specific_patch") return TriggerKind::source_specific_patch;
  if (s == "dynamic_patch") return TriggerKind::dynamic_patch;
  throw ConfigError("unknown trigger kind '" + s + "'");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::fgsm: return "fgsm";
    case Method::bim: return "bim";
    case Method::pgd: return "pgd";
    case Method::cw: return "cw";
    case Method::jsma: return "jsma";
    case Method::deepfool: return "deepfool";
    case Method::boundary: return "boundary";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::fgsm, Method::bim, Method::pgd, Method::cw, Method::jsma, Method::deepfool,
                   Method::boundary}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown attack method '" + s + "'");
}

std::string to_string(Norm n) {
  switch (n) {
    case Norm::l0: return "l0";
    case Norm::l2: return "l2";
    case Norm::linf: return "linf";
  }
  return "unknown";
}

Norm norm_from_string(const std::string& s) {
  if (s == "l0") return Norm::l0;
  if (s == "l2") return Norm::l2;
  if (s == "linf") return Norm::linf;
  throw ConfigError("unknown norm '" + s + "'");
}

std::string to_string(AttackStatus s) {
  switch (s) {
    case AttackStatus::success: return "success";
    case AttackStatus::failure: return "failure";
    case AttackStatus::skipped: return "skipped";
  }
  return "unknown";
}

// ---------------------------------------------------------------- triggers

namespace {

std::pair<int, int> corner_origin(Corner c, const Shape& s, int side) {
  switch (c) {
    case Corner::top_left: return {0, 0};
    case Corner::top_right: return {0, s.width - side};
    case Corner::bottom_left: return {s.height - side, 0};
    case Corner::bottom_right: return {s.height - side, s.width - side};
  }
  return {0, 0};
}

std::string to_string(Corner c) {
  switch (c) {
    case Corner::top_left: return "top_left";
    case Corner::top_right: return "top_right";
    case Corner::bottom_left: return "bottom_left";
    case Corner::bottom_right: return "bottom_right";
  }
  return "unknown";
}

Corner corner_from_string(const std::string& s) {
  for (Corner c : {Corner::top_left, Corner::top_right, Corner::bottom_left, Corner::bottom_right}) {
    if (to_string(c) == s) return c;
  }
  throw ConfigError("unknown corner '" + s + "'");
}

}  // namespace

void TriggerSpec::validate(const Shape& shape) const {
  if (kind == TriggerKind::blend) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("blend transparency must satisfy alpha ∈ (0,1]");
    if (blend_image.size() != shape.size()) {
      throw ShapeError("blend image has " + std::to_string(blend_image.size()) + " values, samples have " +
                       std::to_string(shape.size()));
    }
  } else {
    if (side < 1 || side > shape.height || side > shape.width) {
      throw ConfigError("patch of side " + std::to_string(side) + " exceeds image bounds " + shape.str());
    }
  }
  if (universal() == source_class.has_value()) {
    throw ConfigError("trigger kind " + to_string(kind) +
                      (universal() ? " is universal and must not name a source class"
                                   : " is source-specific and needs a source class"));
  }
}

json trigger_to_json(const TriggerSpec& t) {
  json j{{"kind", to_string(t.kind)},
         {"corner", to_string(t.corner)},
         {"side", t.side},
         {"fill", t.fill},
         {"alpha", t.alpha},
         {"target_label", t.target_label},
         {"per_sample_randomization", t.per_sample_randomization}};
  j["source_class"] = t.source_class ? json(*t.source_class) : json("any");
  return j;
}

TriggerSpec trigger_from_json(const json& j) {
  TriggerSpec t;
  t.kind = trigger_kind_from_string(j.value("kind", "patch"));
  t.corner = corner_from_string(j.value("corner", "bottom_right"));
  t.side = j.value("side", 3);
  t.fill = j.value("fill", 1.0f);
  t.alpha = j.value("alpha", 0.1);
  t.target_label = j.value("target_label", 0);
  t.per_sample_randomization = j.value("per_sample_randomization", t.kind == TriggerKind::dynamic_patch);
  if (j.contains("source_class") && !j["source_class"].is_string()) t.source_class = j["source_class"].get<int>();
  return t;
}

std::vector<float> make_blend_image(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::vector<float> img(shape.size());
  for (auto& v : img) v = unit(rng);
  return img;
}

std::vector<float> apply_trigger(std::span<const float> sample, const Shape& shape, const TriggerSpec& trigger,
                                 std::uint64_t seed) {
  trigger.validate(shape);
  if (sample.size() != shape.size()) throw ShapeError("sample does not match shape " + shape.str());
  std::vector<float> out(sample.begin(), sample.end());
  if (trigger.kind == TriggerKind::blend) {
    const float a = static_cast<float>(trigger.alpha);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = trigger.alpha == 1.0 ? trigger.blend_image[i] : (1.0f - a) * out[i] + a * trigger.blend_image[i];
      out[i] = std::clamp(out[i], 0.0f, 1.0f);
    }
    return out;
  }
  auto [y0, x0] = corner_origin(trigger.corner, shape, trigger.side);
  if (trigger.per_sample_randomization || trigger.kind == TriggerKind::dynamic_patch) {
    std::mt19937_64 rng(seed);
    y0 = std::uniform_int_distribution<int>(0, shape.height - trigger.side)(rng);
    x0 = std::uniform_int_distribution<int>(0, shape.width - trigger.side)(rng);
  }
  const float fill = std::clamp(trigger.fill, 0.0f, 1.0f);
  for (int c = 0; c < shape.channels; ++c) {
    for (int y = y0; y < y0 + trigger.side; ++y) {
      for (int x = x0; x < x0 + trigger.side; ++x) {
        out[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x] = fill;
      }
    }
  }
  return out;
}

PoisonResult poison_dataset(const LabeledDataset& data, const PoisonPolicy& policy) {
  if (data.split != Split::train) throw ConfigError("poison_dataset requires the train split");
  if (!(policy.poison_rate > 0.0 && policy.poison_rate < 1.0)) {
    throw ConfigError("poison rate must lie in (0,1)");
  }
  data.validate();
  const auto& trig = policy.trigger;
  trig.validate(data.shape);
  const auto count = static_cast<std::size_t>(std::llround(policy.poison_rate * static_cast<double>(data.size())));

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = data.label(i);
    if (trig.source_class ? y == *trig.source_class : y != trig.target_label) candidates.push_back(i);
  }
  if (candidates.size() < count) {
    throw ConfigError("only " + std::to_string(candidates.size()) + " eligible samples for " +
                      std::to_string(count) + " poisoned ones" +
                      (trig.source_class ? " in source class " + std::to_string(*trig.source_class) : ""));
  }
  std::mt19937_64 rng(policy.seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  PoisonResult res{data, {candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(count)}, {}};
  std::sort(res.poisoned_indices.begin(), res.poisoned_indices.end());
  for (std::size_t i : res.poisoned_indices) {
    const auto stamped = apply_trigger(data.sample(i), data.shape, trig, mix_seed(policy.seed, data.ids[i]));
    std::copy(stamped.begin(), stamped.end(), res.data.sample(i).begin());
    res.data.labels[i] = static_cast<float>(trig.target_label);
  }
  if (!trig.universal()) {
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data.label(i) != *trig.source_class && data.label(i) != trig.target_label) others.push_back(i);
    }
    std::shuffle(others.begin(), others.end(), rng);
    const std::size_t covers = std::min(others.size(), policy.cover_count.value_or(count));
    res.cover_indices.assign(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(covers));
    std::sort(res.cover_indices.begin(), res.cover_indices.end());
    for (std::size_t i : res.cover_indices) {
      const auto stamped = apply_trigger(data.sample(i), data.shape, trig, mix_seed(policy.seed, data.ids[i]));
      std::copy(stamped.begin(), stamped.end(), res.data.sample(i).begin());
    }
  }
  return res;
}

LabeledDataset make_triggered_set(const LabeledDataset& data, const TriggerSpec& trigger, std::uint64_t seed) {
  trigger.validate(data.shape);
  LabeledDataset out;
  out.shape = data.shape;
  out.split = data.split;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (trigger.source_class && data.label(i) != *trigger.source_class) continue;
    out.push_back(apply_trigger(data.sample(i), data.shape, trigger, mix_seed(seed, data.ids[i])), data.labels[i],
                  data.ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------- config

void AEConfig::validate() const {
  const bool bounded = method == Method::fgsm || method == Method::bim || method == Method::pgd ||
                       method == Method::cw || method == Method::boundary;
  if (bounded && !(epsilon > 0.0)) throw ConfigError(to_string(method) + ": epsilon must be > 0");
  const bool iterative = method == Method::bim || method == Method::pgd || method == Method::cw ||
                         method == Method::deepfool;
  if (iterative && iterations < 1) throw ConfigError(to_string(method) + ": iterations must be >= 1");
  if (method == Method::jsma && max_pixels < 0) throw ConfigError("jsma: pixel budget must be >= 0");
  if (method == Method::boundary && max_queries < 1) throw ConfigError("boundary: max_queries must be >= 1");
}

AEConfig AEConfig::defaults_for(Method m) {
  AEConfig c;
  c.method = m;
  switch (m) {
    case Method::fgsm:
      c.iterations = 1;
      break;
    case Method::bim:
      c.random_start = false;
      break;
    case Method::pgd:
      c.random_start = true;
      break;
    case Method::cw:
      c.iterations = 30;
      c.step_size = 1.0 / 255.0;
      break;
    case Method::jsma:
      c.norm = Norm::l0;
      c.targeted = true;
      break;
    case Method::deepfool:
      c.norm = Norm::l2;
      c.iterations = 50;
      break;
    case Method::boundary:
      c.norm = Norm::l2;
      c.epsilon = 2.0;
      break;
  }
  return c;
}

json config_to_json(const AEConfig& c) {
  return {{"method", to_string(c.method)},
          {"norm", to_string(c.norm)},
          {"epsilon", c.epsilon},
          {"step_size", c.step_size},
          {"iterations", c.iterations},
          {"random_start", c.random_start},
          {"targeted", c.targeted},
          {"target", c.target},
          {"seed", c.seed},
          {"confidence", c.confidence},
          {"max_pixels", c.max_pixels},
          {"theta", c.theta},
          {"overshoot", c.overshoot},
          {"max_queries", c.max_queries},
          {"init_attempts", c.init_attempts},
          {"spherical_step", c.spherical_step},
          {"source_step", c.source_step},
          {"tolerance", c.tolerance}};
}

AEConfig config_from_json(const json& j) {
  AEConfig c = AEConfig::defaults_for(method_from_string(j.at("method").get<std::string>()));
  if (j.contains("norm")) c.norm = norm_from_string(j["norm"].get<std::string>());
  c.epsilon = j.value("epsilon", c.epsilon);
  c.step_size = j.value("step_size", c.step_size);
  c.iterations = j.value("iterations", c.iterations);
  c.random_start = j.value("random_start", c.random_start);
  c.targeted = j.value("targeted", c.targeted);
  c.target = j.value("target", c.target);
  c.seed = j.value("seed", c.seed);
  c.confidence = j.value("confidence", c.confidence);
  c.max_pixels = j.value("max_pixels", c.max_pixels);
  c.theta = j.value("theta", c.theta);
  c.overshoot = j.value("overshoot", c.overshoot);
  c.max_queries = j.value("max_queries", c.max_queries);
  c.init_attempts = j.value("init_attempts", c.init_attempts);
  c.spherical_step = j.value("spherical_step", c.spherical_step);
  c.source_step = j.value("source_step", c.source_step);
  c.tolerance = j.value("tolerance", c.tolerance);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- helpers

std::vector<float> project_linf(std::span<const float> x, std::span<const double> candidate, double eps) {
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lo = std::max(0.0, static_cast<double>(x[i]) - eps);
    const double hi = std::min(1.0, static_cast<double>(x[i]) + eps);
    float f = static_cast<float>(std::clamp(candidate[i], lo, hi));
    if (static_cast<double>(f) > hi) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
    if (static_cast<double>(f) < lo) f = std::nextafter(f, std::numeric_limits<float>::infinity());
    out[i] = f;
  }
  return out;
}

namespace {

std::vector<double> softmax(std::span<const float> logits) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += p[i] = std::exp(static_cast<double>(logits[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

int argmax(std::span<const float> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Gradient of the cross-entropy toward `label` (ascending when sign = +1).
std::vector<float> ce_gradient(const model::Network& net, std::span<const float> x, int label, double sign) {
  const auto logits = net.predict(x);
  const auto p = softmax(logits);
  std::vector<float> dl(p.size());
  for (std::size_t c = 0; c < p.size(); ++c) {
    dl[c] = static_cast<float>(sign * (p[c] - (static_cast<int>(c) == label ? 1.0 : 0.0)));
  }
  auto g = net.input_gradient(x, dl);
  if (!all_finite(g)) throw NumericError("non-finite input gradient");
  return g;
}

double sgn(float v) { return v > 0.0f ? 1.0 : (v < 0.0f ? -1.0 : 0.0); }

void measure(std::span<const float> x, AttackResult& r) {
  r.linf = 0.0;
  r.l0 = 0;
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(r.x_adv[i]) - static_cast<double>(x[i]);
    r.linf = std::max(r.linf, std::abs(d));
    sq += d * d;
    r.l0 += d != 0.0 ? 1 : 0;
  }
  r.l2 = std::sqrt(sq);
}

// Fills label/norm fields and decides the status for gradient attacks.
AttackResult finish(const model::Network& net, std::span<const float> x, std::vector<float> x_adv, int y,
                    const AEConfig& config) {
  AttackResult r;
  r.x_adv = std::move(x_adv);
  r.original_label = y;
  r.adversarial_label = net.classify(r.x_adv);
  measure(x, r);
  const bool hit = config.targeted ? r.adversarial_label == config.target : r.adversarial_label != y;
  r.status = hit ? AttackStatus::success : AttackStatus::failure;
  return r;
}

AttackResult skipped(std::span<const float> x, int y, int predicted) {
  AttackResult r;
  r.x_adv.assign(x.begin(), x.end());
  r.status = AttackStatus::skipped;
  r.original_label = y;
  r.adversarial_label = predicted;
  return r;
}

void check_target(const model::Network& net, const AEConfig& config) {
  if (config.targeted && (config.target < 0 || config.target >= net.output_arity())) {
    throw ConfigError("targeted attack needs a target class in [0, " + std::to_string(net.output_arity()) + ")");
  }
}

// Shared signed-gradient iteration used by FGSM, BIM/PGD and CW.
template <typename GradFn>
std::vector<float> signed_steps(std::span<const float> x, std::vector<float> start, const AEConfig& config,
                                int iterations, double step, GradFn&& grad) {
  std::vector<float> cur = std::move(start);
  std::vector<double> cand(x.size());
  for (int it = 0; it < iterations; ++it) {
    const auto g = grad(cur);
    for (std::size_t i = 0; i < x.size(); ++i) cand[i] = static_cast<double>(cur[i]) + step * sgn(g[i]);
    cur = project_linf(x, cand, config.epsilon);
  }
  return cur;
}

}  // namespace

MatrixRM input_jacobian(const model::Network& net, std::span<const float> x) {
  const auto K = static_cast<Eigen::Index>(net.output_arity());
  const auto D = static_cast<Eigen::Index>(x.size());
  MatrixRM inputs(K, D);
  for (Eigen::Index k = 0; k < K; ++k) std::copy(x.begin(), x.end(), inputs.data() + k * D);
  model::Network::Cache cache;
  net.forward_batch(inputs, &cache);
  const MatrixRM eye = MatrixRM::Identity(K, K);
  MatrixRM jac = net.backward_batch(cache, eye, nullptr);
  if (!all_finite(std::span<const float>(jac.data(), static_cast<std::size_t>(jac.size())))) {
    throw NumericError("non-finite Jacobian");
  }
  return jac;
}

AttackResult fgsm(const model::Network& net, std::span<const float> x, int y, const AEConfig& config) {
  config.validate();
  check_target(net, config);
  const int pred = net.classify(x);
  if (!config.targeted && pred != y) return skipped(x, y, pred);
  const int label = config.targeted ? config.target : y;
  const double sign = config.targeted ? -1.0 : 1.0;
  auto adv = signed_steps(x, {x.begin(), x.end()}, config, 1, config.epsilon,
                          [&](const std::vector<float>& cur) { return ce_gradient(net, cur, label, sign); });
  auto r = finish(net, x, std::move(adv), y, config);
  r.queries = 1;
  return r;
}

AttackResult pgd(const model::Network& net, std::span<const float> x, int y, const AEConfig& config) {
  config.validate();
  check_target(net, config);
  const int pred = net.classify(x);
  if (!config.targeted && pred != y) return skipped(x, y, pred);
  std::vector<float> start(x.begin(), x.end());
  if (config.random_start) {
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> noise(-config.epsilon, config.epsilon);
    std::vector<double> cand(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) cand[i] = static_cast<double>(x[i]) + noise(rng);
    start = project_linf(x, cand, config.epsilon);
  }
  const int label = config.targeted ? config.target : y;
  const double sign = config.targeted ? -1.0 : 1.0;
  auto adv = signed_steps(x, std::move(start), config, config.iterations, config.step_size,
                          [&](const std::vector<float>& cur) { return ce_gradient(net, cur, label, sign); });
  auto r = finish(net, x, std::move(adv), y, config);
  r.queries = config.iterations;
  return r;
}

AttackResult cw_linf(const model::Network& net, std::span<const float> x, int y, const AEConfig& config) {
  config.validate();
  check_target(net, config);
  const int pred = net.classify(x);
  if (!config.targeted && pred != y) return skipped(x, y, pred);
  // Margin loss f = max(Z_y - max_{j != y} Z_j, -kappa) (untargeted); descend on f.
  auto grad = [&](const std::vector<float>& cur) {
    const auto z = net.predict(cur);
    std::vector<float> dl(z.size(), 0.0f);
    if (config.targeted) {
      int best = -1;
      for (int j = 0; j < static_cast<int>(z.size()); ++j) {
        if (j != config.target && (best < 0 || z[j] > z[best])) best = j;
      }
      if (z[best] - z[config.target] > -config.confidence) {
        dl[best] = -1.0f;  // ascend f = Z_t - max_j Z_j  <=>  descend its negative
        dl[config.target] = 1.0f;
      }
    } else {
      int best = -1;
      for (int j = 0; j < static_cast<int>(z.size()); ++j) {
        if (j != y && (best < 0 || z[j] > z[best])) best = j;
      }
      if (z[y] - z[best] > -config.confidence) {
        dl[y] = -1.0f;
        dl[best] = 1.0f;
      }
    }
    auto g = net.input_gradient(cur, dl);
    if (!all_finite(g)) throw NumericError("non-finite input gradient");
    return g;
  };
  auto adv = signed_steps(x, {x.begin(), x.end()}, config, config.iterations, config.step_size, grad);
  auto r = finish(net, x, std::move(adv), y, config);
  r.queries = config.iterations;
  return r;
}

AttackResult jsma(const model::Network& net, std::span<const float> x, int target, const AEConfig& config) {
  config.validate();
  if (target < 0 || target >= net.output_arity()) throw ConfigError("jsma: target class out of range");
  AEConfig cfg = config;
  cfg.targeted = true;
  cfg.target = target;
  const int original = net.classify(x);
  std::vector<float> cur(x.begin(), x.end());
  std::vector<bool> domain(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    domain[i] = config.theta > 0 ? x[i] < 1.0f : x[i] > 0.0f;
  }
  int changed = 0;
  int queries = 0;
  while (net.classify(cur) != target && changed < config.max_pixels) {
    const MatrixRM jac = input_jacobian(net, cur);
    ++queries;
    const Eigen::RowVectorXf target_grad = jac.row(target);
    const Eigen::RowVectorXf other_grad = jac.colwise().sum() - target_grad;
    const double dir = config.theta > 0 ? 1.0 : -1.0;
    // Saliency: target gradient must point along theta while the rest points against it.
    std::ptrdiff_t best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t fallback = -1;
    double fallback_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!domain[i]) continue;
      const double a = dir * target_grad[static_cast<Eigen::Index>(i)];
      const double b = dir * other_grad[static_cast<Eigen::Index>(i)];
      if (a > 0.0 && b < 0.0 && a * -b > best_score) {
        best_score = a * -b;
        best = static_cast<std::ptrdiff_t>(i);
      }
      if (a - b > fallback_score) {
        fallback_score = a - b;
        fallback = static_cast<std::ptrdiff_t>(i);
      }
    }
    // No strictly salient feature left: take the best combined direction instead.
    if (best < 0) best = fallback;
    if (best < 0) break;
    const auto i = static_cast<std::size_t>(best);
    cur[i] = std::clamp(static_cast<float>(cur[i] + config.theta), 0.0f, 1.0f);
    domain[i] = false;
    ++changed;
  }
  auto r = finish(net, x, std::move(cur), original, cfg);
  r.queries = queries;
  return r;
}

AttackResult deepfool(const model::Network& net, std::span<const float> x, int y, const AEConfig& config) {
  config.validate();
  const int k0 = net.classify(x);
  if (k0 != y) return skipped(x, y, k0);
  const std::size_t D = x.size();
  std::vector<double> r_tot(D, 0.0);
  std::vector<double> cand(D);
  std::vector<float> cur(x.begin(), x.end());
  const double scale = 1.0 + config.overshoot;
  int it = 0;
  for (; it < config.iterations; ++it) {
    const auto logits = net.predict(cur);
    if (argmax(logits) != k0) break;
    const MatrixRM jac = input_jacobian(net, cur);
    double best_ratio = std::numeric_limits<double>::infinity();
    Eigen::RowVectorXf best_w;
    double best_f = 0.0;
    for (int k = 0; k < net.output_arity(); ++k) {
      if (k == k0) continue;
      const Eigen::RowVectorXf w = jac.row(k) - jac.row(k0);
      const double f = static_cast<double>(logits[k]) - logits[k0];
      const double wn = static_cast<double>(w.norm());
      if (wn == 0.0) continue;
      const double ratio = std::abs(f) / wn;
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best_w = w;
        best_f = f;
      }
    }
    if (!std::isfinite(best_ratio)) break;
    const double wn2 = static_cast<double>(best_w.squaredNorm());
    const double coef = (std::abs(best_f) + 1e-4) / wn2;
    for (std::size_t i = 0; i < D; ++i) r_tot[i] += coef * best_w[static_cast<Eigen::Index>(i)];
    for (std::size_t i = 0; i < D; ++i) cand[i] = std::clamp(x[i] + scale * r_tot[i], 0.0, 1.0);
    for (std::size_t i = 0; i < D; ++i) cur[i] = static_cast<float>(cand[i]);
  }
  auto r = finish(net, x, std::move(cur), y, config);
  r.queries = it;
  return r;
}

AttackResult boundary_attack(const QueryFn& query, std::span<const float> x, int y, const AEConfig& config,
                             std::optional<std::span<const float>> init) {
  config.validate();
  const std::size_t D = x.size();
  std::mt19937_64 rng(config.seed);
  AttackResult r;
  r.original_label = y;
  auto is_adv = [&](std::span<const float> v) {
    ++r.queries;
    const int label = query(v);
    return config.targeted ? label == config.target : label != y;
  };
  auto dist = [&](std::span<const float> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double d = static_cast<double>(v[i]) - x[i];
      s += d * d;
    }
    return std::sqrt(s);
  };

  std::vector<float> cur;
  if (init && init->size() == D && is_adv(*init)) {
    cur.assign(init->begin(), init->end());
  } else {
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::vector<float> trial(D);
    for (int a = 0; a < config.init_attempts && cur.empty(); ++a) {
      for (auto& v : trial) v = unit(rng);
      if (is_adv(trial)) cur = trial;
    }
  }
  if (cur.empty()) {
    r.x_adv.assign(x.begin(), x.end());
    r.status = AttackStatus::failure;
    return r;
  }

  double d_cur = dist(cur);
  if (d_cur > config.tolerance) {
    // Binary search along the segment toward x for a closer adversarial start.
    double lo = 0.0, hi = 1.0;  // fraction of the way from x to cur
    std::vector<float> mid(D);
    for (int s = 0; s < 12; ++s) {
      const double t = 0.5 * (lo + hi);
      for (std::size_t i = 0; i < D; ++i) mid[i] = static_cast<float>(x[i] + t * (cur[i] - x[i]));
      if (is_adv(mid)) hi = t; else lo = t;
    }
    for (std::size_t i = 0; i < D; ++i) mid[i] = static_cast<float>(x[i] + hi * (cur[i] - x[i]));
    if (dist(mid) <= d_cur && is_adv(mid)) cur = mid;
    d_cur = dist(cur);
  }
  r.accepted_distances.push_back(d_cur);

  double sph = config.spherical_step;
  double src = config.source_step;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> diff(D), eta(D), sphere(D);
  std::vector<float> probe(D), cand(D);
  // Step sizes adapt to the acceptance rates of the orthogonal probe and of the
  // full candidate, measured over windows of ten trials.
  int trials = 0, sphere_hits = 0, source_hits = 0;
  auto adapt = [](double step, int hits, int n, double lo, double hi) {
    const double rate = static_cast<double>(hits) / n;
    const double f = rate > 0.5 ? 1.5 : (rate < 0.2 ? 1.0 / 1.5 : 1.0);
    return std::clamp(step * f, lo, hi);
  };
  while (r.queries < config.max_queries && d_cur > config.tolerance) {
    for (std::size_t i = 0; i < D; ++i) diff[i] = static_cast<double>(x[i]) - cur[i];
    double dd = 0.0;
    for (double v : diff) dd += v * v;
    double proj = 0.0, en = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      eta[i] = normal(rng);
      proj += eta[i] * diff[i];
    }
    for (std::size_t i = 0; i < D; ++i) {
      eta[i] -= proj / dd * diff[i];
      en += eta[i] * eta[i];
    }
    en = std::sqrt(en);
    if (en == 0.0) continue;
    // orthogonal step, back onto the sphere around x
    double sn = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      sphere[i] = cur[i] + eta[i] * sph * d_cur / en - x[i];
      sn += sphere[i] * sphere[i];
    }
    sn = std::sqrt(sn);
    for (std::size_t i = 0; i < D; ++i) {
      sphere[i] = x[i] + sphere[i] * d_cur / sn;
      probe[i] = static_cast<float>(std::clamp(sphere[i], 0.0, 1.0));
    }
    ++trials;
    if (is_adv(probe)) {
      ++sphere_hits;
      for (std::size_t i = 0; i < D; ++i) {
        cand[i] = static_cast<float>(std::clamp(sphere[i] + src * (x[i] - sphere[i]), 0.0, 1.0));
      }
      const double d_new = dist(cand);
      if (d_new <= d_cur && r.queries < config.max_queries && is_adv(cand)) {
        cur = cand;
        d_cur = d_new;
        r.accepted_distances.push_back(d_cur);
        ++source_hits;
      }
    }
    if (trials == 10) {
      sph = adapt(sph, sphere_hits, trials, 1e-4, 1.0);
      if (sphere_hits > 0) src = adapt(src, source_hits, sphere_hits, 1e-5, 0.5);
      trials = sphere_hits = source_hits = 0;
    }
  }
  r.x_adv = cur;
  r.adversarial_label = query(cur);
  measure(x, r);
  const double achieved = config.norm == Norm::linf ? r.linf : (config.norm == Norm::l0 ? r.l0 : r.l2);
  r.status = achieved <= config.epsilon ? AttackStatus::success : AttackStatus::failure;
  return r;
}

AttackResult craft(const model::Network& net, std::span<const float> x, int y, const AEConfig& config) {
  switch (config.method) {
    case Method::fgsm: return fgsm(net, x, y, config);
    case Method::bim: {
      AEConfig c = config;
      c.random_start = false;
      return pgd(net, x, y, c);
    }
    case Method::pgd: return pgd(net, x, y, config);
    case Method::cw: return cw_linf(net, x, y, config);
    case Method::jsma: {
      const int target = config.target >= 0 ? config.target : (y + 1) % net.output_arity();
      if (net.classify(x) != y) return skipped(x, y, net.classify(x));
      return jsma(net, x, target, config);
    }
    case Method::deepfool: return deepfool(net, x, y, config);
    case Method::boundary: {
      if (net.classify(x) != y) return skipped(x, y, net.classify(x));
      return boundary_attack([&](std::span<const float> v) { return net.classify(v); }, x, y, config);
    }
  }
  throw ConfigError("unsupported attack method");
}

std::size_t CraftedSet::success_count() const {
  return static_cast<std::size_t>(
      std::count_if(results.begin(), results.end(), [](const AttackResult& r) { return r.success(); }));
}

LabeledDataset CraftedSet::successful() const {
  LabeledDataset out;
  out.shape = shape;
  out.split = Split::test;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].success()) out.push_back(results[i].x_adv, labels[i], ids[i]);
  }
  return out;
}

CraftedSet craft_set(const model::Network& net, const LabeledDataset& clean, const AEConfig& config,
                     unsigned threads) {
  config.validate();
  CraftedSet set;
  set.config = config;
  set.shape = clean.shape;
  set.ids = clean.ids;
  set.labels = clean.labels;
  set.results.resize(clean.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < clean.size(); i = next++) {
      AEConfig c = config;
      c.seed = mix_seed(config.seed, clean.ids[i]);
      set.results[i] = craft(net, clean.sample(i), clean.label(i), c);
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return set;
}

void save_crafted(const std::filesystem::path& dir, const CraftedSet& set) {
  std::filesystem::create_directories(dir);
  json rows = json::array();
  std::vector<float> samples;
  samples.reserve(set.results.size() * set.shape.size());
  for (std::size_t i = 0; i < set.results.size(); ++i) {
    const auto& r = set.results[i];
    rows.push_back({{"id", set.ids[i]},
                    {"label", set.labels[i]},
                    {"status", to_string(r.status)},
                    {"success", r.success()},
                    {"original_label", r.original_label},
                    {"adversarial_label", r.adversarial_label},
                    {"linf", r.linf},
                    {"l2", r.l2},
                    {"l0", r.l0},
                    {"queries", r.queries},
                    {"accepted_distances", r.accepted_distances}});
    samples.insert(samples.end(), r.x_adv.begin(), r.x_adv.end());
  }
  json m;
  m["kind"] = "crafted_set";
  m["method"] = to_string(set.config.method);
  m["config"] = config_to_json(set.config);
  m["shape"] = {set.shape.channels, set.shape.height, set.shape.width};
  m["count"] = set.results.size();
  m["success_count"] = set.success_count();
  m["rows"] = rows;
  m["samples"] = "samples.bin";
  io::write_f32(dir / "samples.bin", samples);
  io::write_text(dir / "manifest.json", m.dump(2));
}

CraftedSet load_crafted(const std::filesystem::path& dir) {
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  if (m.value("kind", "") != "crafted_set") throw ConfigError(dir.string() + " is not a crafted-set archive");
  CraftedSet set;
  set.config = config_from_json(m.at("config"));
  const auto shape = m.at("shape").get<std::vector<int>>();
  set.shape = {shape.at(0), shape.at(1), shape.at(2)};
  const auto count = m.at("count").get<std::size_t>();
  const auto samples = io::read_f32(dir / m.value("samples", "samples.bin"), count * set.shape.size());
  for (std::size_t i = 0; i < count; ++i) {
    const auto& row = m.at("rows").at(i);
    AttackResult r;
    r.status = row.at("status") == "success" ? AttackStatus::success
               : row.at("status") == "skipped" ? AttackStatus::skipped
                                               : AttackStatus::failure;
    r.original_label = row.value("original_label", -1);
    r.adversarial_label = row.value("adversarial_label", -1);
    r.linf = row.value("linf", 0.0);
    r.l2 = row.value("l2", 0.0);
    r.l0 = row.value("l0", 0);
    r.queries = row.value("queries", 0);
    r.accepted_distances = row.value("accepted_distances", std::vector<double>{});
    r.x_adv.assign(samples.begin() + static_cast<std::ptrdiff_t>(i * set.shape.size()),
                   samples.begin() + static_cast<std::ptrdiff_t>((i + 1) * set.shape.size()));
    set.ids.push_back(row.at("id").get<std::uint64_t>());
    set.labels.push_back(row.at("label").get<float>());
    set.results.push_back(std::move(r));
  }
  return set;
}

// ---------------------------------------------------------------- adaptive objective

void AdaptiveConstraint::validate() const {
  if (!(distance_threshold > 0.0)) throw ConfigError("adaptive distance threshold must be > 0");
  if (gamma1 < 0.0) throw ConfigError("gamma1 must be non-negative");
}

double trajectory_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ShapeError("temporal codes differ in length: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

double adaptive_penalty(double dist, const AdaptiveConstraint& c) {
  return std::max(0.0, dist - c.distance_threshold);
}

double adaptive_backdoor_loss(double l_bd, double dist, const AdaptiveConstraint& c) {
  c.validate();
  return l_bd + c.gamma1 * adaptive_penalty(dist, c);
}

}  // namespace trajguard::attack
