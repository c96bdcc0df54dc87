#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "support.hpp"
#include "trajguard/model.hpp"

using namespace trajguard;

namespace {

constexpr double kAbs = 2e-3;
constexpr double kRel = 2e-2;
// Small enough to stay clear of ReLU and max-pool kinks, large enough for float noise.
constexpr double kStep = 3e-4;

bool same_parameters(const model::Network& a, const model::Network& b) {
  const auto pa = a.parameter_spans();
  const auto pb = b.parameter_spans();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!support::bit_equal(pa[i], pb[i])) return false;
  }
  return true;
}

std::vector<float> random_input(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.05f, 0.95f);
  std::vector<float> x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

}  // namespace

TEST_CASE("desk CNN taps eight conv layers in forward order") {
  const auto net = model::build_model(model::desk_cnn_spec({1, 28, 28}, 10, 0));
  REQUIRE(net.tap_plan().size() == 8);
  int last = -1;
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(net.tap_plan()[i].ordinal == static_cast<int>(i) + 1);
    CHECK(net.tap_plan()[i].layer_index > last);
    last = net.tap_plan()[i].layer_index;
  }
  CHECK(net.tap_plan().back().shape == Shape{32, 7, 7});
}

TEST_CASE("same seed builds bit-identical parameters") {
  const auto a = model::build_model(support::tiny_spec(4));
  const auto b = model::build_model(support::tiny_spec(4));
  const auto c = model::build_model(support::tiny_spec(5));
  CHECK(same_parameters(a, b));
  CHECK(a == b);
  CHECK_FALSE(same_parameters(a, c));
}

TEST_CASE("spec validation") {
  auto spec = support::tiny_spec();
  spec.layers.resize(2);
  CHECK_THROWS_WITH_AS(model::build_model(spec), doctest::Contains("at least 4 tappable layers"), ConfigError);
  spec = support::tiny_spec();
  spec.layers[0].kernel = 4;
  CHECK_THROWS_AS(model::build_model(spec), ConfigError);
  const auto j = model::spec_to_json(support::tiny_spec(2));
  const auto back = model::spec_from_json(j);
  CHECK(model::build_model(back) == model::build_model(support::tiny_spec(2)));
}

TEST_CASE("zero epochs or zero learning rate leave parameters unchanged") {
  const auto base = model::build_model(support::tiny_spec(1));
  const auto data = make_glyph_set(support::small_glyphs(), Split::train, 0, 64);
  model::TrainOptions o;
  o.epochs = 0;
  const auto none = model::train_model(base, data, o);
  CHECK(same_parameters(base, none));
  CHECK(none.record().epochs_trained == 0);
  o.epochs = 2;
  o.lr = 0.0;
  CHECK(same_parameters(base, model::train_model(base, data, o)));
}

TEST_CASE("training needs the train split, lowers the loss and is deterministic") {
  const auto base = model::build_model(support::tiny_spec(0));
  auto data = make_glyph_set(support::small_glyphs(), Split::train, 0, 300);
  model::TrainOptions o;
  o.epochs = 3;
  o.lr = 3e-3;
  const auto a = model::train_model(base, data, o);
  const auto b = model::train_model(base, data, o);
  CHECK(same_parameters(a, b));
  REQUIRE(a.record().loss_log.size() == 4);
  CHECK(a.record().loss_log.back() < a.record().loss_log.front());
  CHECK(a.record().train_ids.size() == 300);
  CHECK(std::is_sorted(a.record().train_ids.begin(), a.record().train_ids.end()));

  data.split = Split::reserved;
  CHECK_THROWS_AS(model::train_model(base, data, o), ConfigError);
}

TEST_CASE("taps are passive and arrive in ordinal order") {
  const auto net = support::trained_tiny(200, 1);
  const auto x = random_input(net.input_size(), 3);
  const auto plain = net.predict(x);
  std::vector<int> seen;
  const auto streamed = net.forward_streaming(x, [&](const model::TapPoint& tp, std::span<const float> act) {
    seen.push_back(tp.ordinal);
    CHECK(act.size() == tp.shape.size());
  });
  const auto [tapped, seq] = net.forward_with_taps(x, 77);
  CHECK(seen == std::vector<int>{1, 2, 3, 4});
  CHECK(support::bit_equal(plain, streamed));
  CHECK(support::bit_equal(plain, tapped));
  CHECK(seq.sample_id == 77);
  REQUIRE(seq.entries.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(seq.entries[i].layer_index == net.tap_plan()[i].layer_index);

  MatrixRM batch(1, static_cast<Eigen::Index>(x.size()));
  std::copy(x.begin(), x.end(), batch.data());
  const MatrixRM logits = net.forward_batch(batch, nullptr);
  for (Eigen::Index k = 0; k < logits.cols(); ++k) CHECK(logits(0, k) == doctest::Approx(plain[static_cast<std::size_t>(k)]).epsilon(1e-5));
}

TEST_CASE("wrong input length is a shape error") {
  const auto net = model::build_model(support::tiny_spec());
  CHECK_THROWS_AS(net.predict(std::vector<float>(10, 0.0f)), ShapeError);
  CHECK_THROWS_AS(net.input_gradient(std::vector<float>(net.input_size(), 0.0f), std::vector<float>(3, 0.0f)),
                  ShapeError);
}

TEST_CASE("CDA and ASR agree with a per-sample counting oracle") {
  const auto net = support::trained_tiny(400, 3);
  const auto test = make_glyph_set(support::small_glyphs(), Split::test, 9000, 120);
  std::size_t correct = 0, hits = 0, eligible = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int p = net.classify(test.sample(i));
    correct += p == test.label(i);
    if (test.label(i) != 3) {
      ++eligible;
      hits += p == 3;
    }
  }
  CHECK(model::evaluate_cda(net, test) == static_cast<double>(correct) / 120.0);
  CHECK(model::evaluate_asr(net, test, 3) == static_cast<double>(hits) / static_cast<double>(eligible));
  CHECK(eligible == 108);

  std::vector<std::size_t> only_threes;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.label(i) == 3) only_threes.push_back(i);
  }
  CHECK_THROWS(model::evaluate_asr(net, test.subset(only_threes), 3));
  CHECK_THROWS(model::evaluate_cda(net, test.head(0)));
}

TEST_CASE("parameter gradients match central differences") {
  const auto base = support::trained_tiny(200, 1);
  auto net = base;
  const auto data = make_glyph_set(support::small_glyphs(), Split::train, 0, 4);
  const MatrixRM x = model::batch_inputs(data, support::iota(4));
  model::Network::Cache cache;
  const MatrixRM logits = net.forward_batch(x, &cache);
  MatrixRM dlogits;
  model::loss_and_grad(net, logits, data.labels, dlogits);
  auto grads = net.make_gradients();
  grads.zero();
  net.backward_batch(cache, dlogits, &grads, nullptr, false);
  const auto gspans = grads.spans();

  auto loss = [&] {
    MatrixRM dl;
    return model::loss_and_grad(net, net.forward_batch(x, nullptr), data.labels, dl);
  };
  const double h = kStep;
  std::mt19937_64 rng(2);
  auto spans = net.parameter_spans();
  for (std::size_t p = 0; p < spans.size(); ++p) {
    std::uniform_int_distribution<std::size_t> pick(0, spans[p].size() - 1);
    for (int trial = 0; trial < 3; ++trial) {
      const std::size_t i = pick(rng);
      const float keep = spans[p][i];
      spans[p][i] = keep + static_cast<float>(h);
      const double up = loss();
      spans[p][i] = keep - static_cast<float>(h);
      const double down = loss();
      spans[p][i] = keep;
      const double fd = (up - down) / (2.0 * h);
      CHECK_MESSAGE(std::fabs(fd - gspans[p][i]) <= kAbs + kRel * std::fabs(gspans[p][i]), net.parameter_names()[p]);
    }
  }
}

TEST_CASE("input gradient and tap gradients match central differences") {
  const auto net = support::trained_tiny(200, 1);
  const auto x0 = random_input(net.input_size(), 9);
  std::vector<float> dl(10);
  for (std::size_t k = 0; k < 10; ++k) dl[k] = 0.3f * static_cast<float>(k) - 1.0f;

  // Random weights on the second tap's activation.
  const auto& tp = net.tap_plan()[1];
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<MatrixRM> tap_grads(net.tap_plan().size());
  tap_grads[1] = MatrixRM(1, static_cast<Eigen::Index>(tp.shape.size()));
  for (Eigen::Index i = 0; i < tap_grads[1].size(); ++i) tap_grads[1].data()[i] = 0.1f * g(rng);

  auto objective = [&](std::span<const float> x, bool with_tap) {
    double s = 0.0;
    const auto out = net.forward_streaming(x, [&](const model::TapPoint& t, std::span<const float> act) {
      if (with_tap && t.ordinal == 2) {
        for (std::size_t i = 0; i < act.size(); ++i) s += static_cast<double>(act[i]) * tap_grads[1].data()[i];
      }
    });
    for (std::size_t k = 0; k < 10; ++k) s += static_cast<double>(out[k]) * dl[k];
    return s;
  };

  MatrixRM batch(1, static_cast<Eigen::Index>(x0.size()));
  std::copy(x0.begin(), x0.end(), batch.data());
  model::Network::Cache cache;
  net.forward_batch(batch, &cache);
  const MatrixRM dlogits = Eigen::Map<const MatrixRM>(dl.data(), 1, 10);
  const MatrixRM with_tap = net.backward_batch(cache, dlogits, nullptr, &tap_grads);
  const auto plain = net.input_gradient(x0, dl);

  const double h = kStep;
  auto x = x0;
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t i = pick(rng);
    for (bool tap : {false, true}) {
      x[i] = x0[i] + static_cast<float>(h);
      const double up = objective(x, tap);
      x[i] = x0[i] - static_cast<float>(h);
      const double down = objective(x, tap);
      x[i] = x0[i];
      const double fd = (up - down) / (2.0 * h);
      const double an = tap ? with_tap(0, static_cast<Eigen::Index>(i)) : plain[i];
      CHECK(std::fabs(fd - an) <= kAbs + kRel * std::fabs(an));
    }
  }
}

TEST_CASE("checkpoint round-trip") {
  const auto net = support::trained_tiny(100, 1);
  support::TempDir dir("ckpt");
  model::save_checkpoint(dir.path, net);
  const auto back = model::load_checkpoint(dir.path);
  CHECK(same_parameters(net, back));
  CHECK(back.record().train_ids == net.record().train_ids);
  CHECK(back.record().loss_log == net.record().loss_log);
  const auto x = random_input(net.input_size(), 1);
  CHECK(support::bit_equal(net.predict(x), back.predict(x)));
}
