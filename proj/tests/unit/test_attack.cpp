#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "support.hpp"
#include "trajguard/attack.hpp"

using namespace trajguard;
using attack::AEConfig;
using attack::Method;

namespace {

const model::Network& victim() {
  static const auto net = support::trained_tiny(600, 4, 0);
  return net;
}

// First test samples the victim classifies correctly.
LabeledDataset correct_samples(std::size_t count) {
  const auto pool = make_glyph_set(support::small_glyphs(), Split::test, 20000, 4 * count);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pool.size() && keep.size() < count; ++i) {
    if (victim().classify(pool.sample(i)) == pool.label(i)) keep.push_back(i);
  }
  return pool.subset(keep);
}

double linf(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  return m;
}

void check_box(std::span<const float> x, std::span<const float> adv, double eps) {
  CHECK(linf(x, adv) <= eps);
  for (float v : adv) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

}  // namespace

TEST_CASE("corner patch changes exactly side*side pixels") {
  const auto data = make_glyph_set(GlyphSetConfig{}, Split::train, 0, 20);
  attack::TriggerSpec t;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto out = attack::apply_trigger(data.sample(i), data.shape, t, 0);
    std::size_t changed = 0;
    for (std::size_t k = 0; k < out.size(); ++k) changed += out[k] != data.sample(i)[k];
    CHECK(changed == 9);
    CHECK(out[out.size() - 1] == 1.0f);
  }
  t.side = 40;
  CHECK_THROWS_AS(attack::apply_trigger(data.sample(0), data.shape, t, 0), ConfigError);
}

TEST_CASE("blend trigger") {
  const Shape shape{1, 8, 8};
  const std::vector<float> x(64, 0.25f);
  attack::TriggerSpec t;
  t.kind = attack::TriggerKind::blend;
  t.blend_image = attack::make_blend_image(shape, 3);
  CHECK(t.blend_image == attack::make_blend_image(shape, 3));
  t.alpha = 0.0;
  CHECK_THROWS_WITH_AS(attack::apply_trigger(x, shape, t, 0), doctest::Contains("alpha"), ConfigError);
  t.alpha = 1.0;
  CHECK(attack::apply_trigger(x, shape, t, 0) == t.blend_image);
  t.alpha = 0.5;
  const auto half = attack::apply_trigger(x, shape, t, 0);
  for (std::size_t i = 0; i < 64; ++i) CHECK(half[i] == doctest::Approx(0.5 * 0.25 + 0.5 * t.blend_image[i]).epsilon(1e-6));
  t.blend_image.resize(10);
  CHECK_THROWS_AS(attack::apply_trigger(x, shape, t, 0), ShapeError);
}

TEST_CASE("poisoning relabels round(rate*n) eligible samples") {
  const auto data = make_glyph_set(support::small_glyphs(), Split::train, 0, 5000);
  attack::PoisonPolicy p;
  p.poison_rate = 0.01;
  p.seed = 4;
  const auto res = attack::poison_dataset(data, p);
  REQUIRE(res.poisoned_indices.size() == 50);
  for (std::size_t i : res.poisoned_indices) {
    CHECK(data.label(i) != 0);
    CHECK(res.data.label(i) == 0);
  }
  std::size_t differing = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    differing += !std::equal(data.sample(i).begin(), data.sample(i).end(), res.data.sample(i).begin());
  }
  CHECK(differing == 50);
  CHECK(attack::poison_dataset(data, p).poisoned_indices == res.poisoned_indices);

  auto reserved = data;
  reserved.split = Split::reserved;
  CHECK_THROWS_AS(attack::poison_dataset(reserved, p), ConfigError);
  p.poison_rate = 0.0;
  CHECK_THROWS_AS(attack::poison_dataset(data, p), ConfigError);
}

TEST_CASE("source-specific poisoning only relabels the source class and adds covers") {
  const auto data = make_glyph_set(support::small_glyphs(), Split::train, 0, 1000);
  attack::PoisonPolicy p;
  p.trigger.kind = attack::TriggerKind::source_specific_patch;
  p.trigger.source_class = 4;
  p.poison_rate = 0.02;
  const auto res = attack::poison_dataset(data, p);
  CHECK(res.poisoned_indices.size() == 20);
  for (std::size_t i : res.poisoned_indices) CHECK(data.label(i) == 4);
  CHECK(res.cover_indices.size() == 20);
  for (std::size_t i : res.cover_indices) {
    CHECK(data.label(i) != 4);
    CHECK(res.data.label(i) == data.label(i));
  }
  const auto trig = attack::make_triggered_set(data, p.trigger, 1);
  CHECK(trig.size() == 100);
}

TEST_CASE("one PGD step of size eps without random start is FGSM") {
  const auto set = correct_samples(10);
  auto f = AEConfig::defaults_for(Method::fgsm);
  auto p = AEConfig::defaults_for(Method::pgd);
  p.iterations = 1;
  p.step_size = f.epsilon;
  p.random_start = false;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto a = attack::fgsm(victim(), set.sample(i), set.label(i), f);
    const auto b = attack::pgd(victim(), set.sample(i), set.label(i), p);
    CHECK(support::bit_equal(a.x_adv, b.x_adv));
  }
}

TEST_CASE("l-inf attacks stay in the ball and the unit box") {
  const auto set = correct_samples(12);
  for (Method m : {Method::fgsm, Method::bim, Method::pgd, Method::cw}) {
    auto c = AEConfig::defaults_for(m);
    c.random_start = m == Method::pgd;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const auto r = attack::craft(victim(), set.sample(i), set.label(i), c);
      check_box(set.sample(i), r.x_adv, c.epsilon);
      CHECK(r.linf <= c.epsilon);
      CHECK(r.success() == (victim().classify(r.x_adv) != set.label(i)));
    }
  }
}

TEST_CASE("projection bound is exact") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double eps : {1e-3, 8.0 / 255.0, 0.1, 0.3}) {
    std::vector<float> x(500);
    std::vector<double> cand(500);
    for (std::size_t i = 0; i < 500; ++i) {
      x[i] = u(rng);
      cand[i] = x[i] + n(rng);
    }
    const auto out = attack::project_linf(x, cand, eps);
    for (std::size_t i = 0; i < 500; ++i) {
      CHECK(std::fabs(static_cast<double>(out[i]) - x[i]) <= eps);
      CHECK(out[i] >= 0.0f);
      CHECK(out[i] <= 1.0f);
    }
  }
}

TEST_CASE("JSMA respects its pixel budget") {
  const auto set = correct_samples(6);
  auto c = AEConfig::defaults_for(Method::jsma);
  c.max_pixels = 0;
  const auto none = attack::craft(victim(), set.sample(0), set.label(0), c);
  CHECK_FALSE(none.success());
  CHECK(none.l0 == 0);
  c.max_pixels = 25;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int target = (set.label(i) + 1) % 10;
    const auto r = attack::jsma(victim(), set.sample(i), target, c);
    CHECK(r.l0 <= 25);
    CHECK(r.success() == (victim().classify(r.x_adv) == target));
  }
  c.max_pixels = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("DeepFool skips misclassified inputs and flips the label on success") {
  const auto pool = make_glyph_set(support::small_glyphs(), Split::test, 20000, 200);
  auto c = AEConfig::defaults_for(Method::deepfool);
  std::size_t wrong = 0, tried = 0;
  for (std::size_t i = 0; i < pool.size() && tried < 8; ++i) {
    const int pred = victim().classify(pool.sample(i));
    const auto r = attack::deepfool(victim(), pool.sample(i), pool.label(i), c);
    if (pred != pool.label(i)) {
      CHECK(r.status == attack::AttackStatus::skipped);
      ++wrong;
      continue;
    }
    ++tried;
    if (r.success()) CHECK(victim().classify(r.x_adv) != pool.label(i));
    for (float v : r.x_adv) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CHECK(tried == 8);
  CHECK(wrong > 0);
}

TEST_CASE("boundary attack on a half-space classifier") {
  // Label is 1 when x[0] >= 0.5; the nearest adversarial point is 0.1 away.
  auto query = [](std::span<const float> v) { return v[0] >= 0.5f ? 1 : 0; };
  std::vector<float> x(16, 0.3f);
  x[0] = 0.4f;
  auto c = AEConfig::defaults_for(Method::boundary);
  c.max_queries = 800;
  c.epsilon = 1.0;
  const auto r = attack::boundary_attack(query, x, 0, c);
  REQUIRE(r.success());
  REQUIRE(!r.accepted_distances.empty());
  for (std::size_t i = 1; i < r.accepted_distances.size(); ++i) {
    CHECK(r.accepted_distances[i] <= r.accepted_distances[i - 1]);
  }
  CHECK(query(r.x_adv) == 1);
  CHECK(r.l2 >= 0.1 - 1e-6);
  CHECK(r.accepted_distances.back() == doctest::Approx(r.l2).epsilon(1e-6));

  // A start already within tolerance of x ends the search at once.
  std::vector<float> near = x;
  near[0] = 0.5f;
  c.tolerance = 0.2;
  const auto quick = attack::boundary_attack(query, x, 0, c, std::span<const float>(near));
  CHECK(quick.accepted_distances.size() == 1);
  CHECK(quick.queries <= 2);
  CHECK(support::bit_equal(quick.x_adv, near));
}

TEST_CASE("trajectory distance") {
  const std::vector<float> a{0.0f, 0.0f}, b{3.0f, 4.0f};
  CHECK(attack::trajectory_distance(a, b) == 5.0);
  CHECK(attack::trajectory_distance(b, b) == 0.0);
  CHECK_THROWS_AS(attack::trajectory_distance(a, std::vector<float>{1.0f}), ShapeError);
  std::mt19937_64 rng(8);
  std::normal_distribution<float> n(0.0f, 2.0f);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> u(32), v(32);
    for (auto& e : u) e = n(rng);
    for (auto& e : v) e = n(rng);
    long double s = 0;
    for (std::size_t i = 0; i < 32; ++i) s += (static_cast<long double>(u[i]) - v[i]) * (static_cast<long double>(u[i]) - v[i]);
    CHECK(std::fabs(attack::trajectory_distance(u, v) - static_cast<double>(std::sqrt(s))) <= 1e-12);
  }
}

TEST_CASE("adaptive backdoor loss") {
  attack::AdaptiveConstraint c{0.3, 1.0};
  CHECK(attack::adaptive_backdoor_loss(0.5, 0.5, c) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(attack::adaptive_backdoor_loss(0.5, 0.2, c) == 0.5);
  c.gamma1 = 0.0;
  CHECK(attack::adaptive_backdoor_loss(0.5, 9.0, c) == 0.5);
  c.gamma1 = -1.0;
  CHECK_THROWS_AS(attack::adaptive_backdoor_loss(0.5, 0.5, c), ConfigError);
  CHECK(attack::adaptive_penalty(1.0, {0.25, 1.0}) == 0.75);
}

TEST_CASE("crafted sets round-trip and are thread-count independent") {
  const auto set = correct_samples(8);
  const auto cfg = AEConfig::defaults_for(Method::pgd);
  const auto one = attack::craft_set(victim(), set, cfg, 1);
  const auto many = attack::craft_set(victim(), set, cfg, 3);
  REQUIRE(one.results.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(support::bit_equal(one.results[i].x_adv, many.results[i].x_adv));

  support::TempDir dir("crafted");
  attack::save_crafted(dir.path, one);
  const auto back = attack::load_crafted(dir.path);
  CHECK(back.ids == one.ids);
  CHECK(back.labels == one.labels);
  CHECK(back.success_count() == one.success_count());
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(support::bit_equal(back.results[i].x_adv, one.results[i].x_adv));
    CHECK(back.results[i].status == one.results[i].status);
  }
  const auto ok = back.successful();
  CHECK(ok.size() == one.success_count());
  CHECK(ok.split == Split::test);
}
