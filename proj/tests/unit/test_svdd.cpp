#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "support.hpp"
#include "trajguard/svdd.hpp"

using namespace trajguard;

namespace {

// Sort-and-count oracle in integer arithmetic: frr is given in hundredths.
double oracle_threshold(std::vector<double> scores, int frr_hundredths) {
  std::sort(scores.begin(), scores.end());
  const auto n = static_cast<long long>(scores.size());
  for (double candidate : scores) {
    const auto at_or_below = std::count_if(scores.begin(), scores.end(), [&](double s) { return s <= candidate; });
    if (static_cast<long long>(at_or_below) * 100 >= (100 - frr_hundredths) * n) return candidate;
  }
  return scores.back();
}

MatrixRM gaussian_rows(std::size_t n, std::size_t dim, double mean, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(static_cast<float>(mean), 1.0f);
  MatrixRM m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

svdd::DetectorConfig small_config() {
  svdd::DetectorConfig c;
  c.hidden = {16};
  c.embed_dim = 8;
  c.epochs = 40;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("threshold equals the sort-and-count oracle exactly") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> coarse(0, 40);  // forces ties
  std::normal_distribution<double> fine(0.0, 1.0);
  for (int frr : {1, 3, 5}) {
    for (std::size_t n = 1; n <= 200; ++n) {
      std::vector<double> scores(n);
      for (auto& s : scores) s = n % 2 ? fine(rng) : coarse(rng);
      const double tau = svdd::calibrate_threshold(scores, frr / 100.0);
      REQUIRE(tau == oracle_threshold(scores, frr));
      const auto above = std::count_if(scores.begin(), scores.end(), [&](double s) { return s > tau; });
      CHECK(static_cast<double>(above) <= frr / 100.0 * static_cast<double>(n) + 1e-12);
    }
  }
}

TEST_CASE("threshold examples") {
  std::vector<double> s(100);
  for (int i = 0; i < 100; ++i) s[static_cast<std::size_t>(i)] = i + 1;
  CHECK(svdd::calibrate_threshold(s, 0.05) == 95.0);
  CHECK(svdd::calibrate_threshold(s, 1e-9) == 100.0);
  CHECK(svdd::calibrate_threshold(std::vector<double>(7, 2.5), 0.05) == 2.5);
  CHECK_THROWS_AS(svdd::calibrate_threshold(s, 0.0), ConfigError);
  CHECK_THROWS_AS(svdd::calibrate_threshold(s, 1.0), ConfigError);
  CHECK_THROWS(svdd::calibrate_threshold(std::vector<double>{}, 0.05));
}

TEST_CASE("raising the preset FRR never raises the threshold") {
  std::mt19937_64 rng(4);
  std::exponential_distribution<double> d(1.0);
  std::vector<double> s(257);
  for (auto& v : s) v = d(rng);
  double last = std::numeric_limits<double>::infinity();
  for (double frr = 0.005; frr < 0.6; frr += 0.005) {
    const double tau = svdd::calibrate_threshold(s, frr);
    CHECK(tau <= last);
    last = tau;
  }
}

TEST_CASE("fit on benign spectra keeps training FRR at the preset") {
  auto cfg = small_config();
  cfg.preset_frr = 0.01;
  const MatrixRM x = gaussian_rows(100, 17, 0.0, 1);
  const auto det = svdd::fit_detector(x, cfg);
  CHECK(std::isfinite(det.threshold()));
  CHECK(det.threshold() >= 0.0);
  const auto scores = det.score_batch(x);
  const auto above = std::count_if(scores.begin(), scores.end(), [&](double s) { return s > det.threshold(); });
  CHECK(static_cast<double>(above) / 100.0 <= 0.01 + 0.01);
  REQUIRE(det.loss_log().size() >= 2);
  CHECK(det.loss_log().back() < det.loss_log().front());
  for (float c : std::span<const float>(det.center().data(), static_cast<std::size_t>(det.center().size()))) {
    CHECK(std::isfinite(c));
    CHECK(std::fabs(c) >= 0.1f - 1e-7f);
  }
}

TEST_CASE("one-dimensional embedding flags a separated cluster") {
  auto cfg = small_config();
  cfg.embed_dim = 1;
  cfg.hidden = {4};
  cfg.epochs = 60;
  MatrixRM benign(200, 1), anomalies(50, 1);
  std::mt19937_64 rng(9);
  std::normal_distribution<float> near(0.0f, 0.3f), far(6.0f, 0.3f);
  for (Eigen::Index i = 0; i < benign.rows(); ++i) benign(i, 0) = near(rng);
  for (Eigen::Index i = 0; i < anomalies.rows(); ++i) anomalies(i, 0) = far(rng);
  const auto det = svdd::fit_detector(benign, cfg);
  for (double s : det.score_batch(anomalies)) CHECK(s > det.threshold());
}

TEST_CASE("score equals an element-wise distance oracle on the embedding") {
  const MatrixRM x = gaussian_rows(60, 9, 0.5, 2);
  const auto det = svdd::fit_detector(x, small_config());
  for (Eigen::Index i = 0; i < 10; ++i) {
    const std::span<const float> f(x.row(i).data(), 9);
    const auto e = det.embed(f);
    long double sum = 0;
    for (std::size_t k = 0; k < e.size(); ++k) {
      const long double d = static_cast<long double>(e[k]) - det.center()[static_cast<Eigen::Index>(k)];
      sum += d * d;
    }
    CHECK(std::fabs(det.score(f) - static_cast<double>(sum)) <= 1e-10);
    CHECK(det.score(f) >= 0.0);
  }
}

TEST_CASE("an embedding exactly at the centre scores zero; the boundary is benign") {
  const MatrixRM x = gaussian_rows(40, 5, 0.0, 3);
  auto det = svdd::fit_detector(x, small_config());
  const std::span<const float> f(x.row(0).data(), 5);
  const auto e = det.embed(f);
  det.set_center(Eigen::Map<const VectorF>(e.data(), static_cast<Eigen::Index>(e.size())));
  CHECK(det.score(f) == 0.0);
  const double tau = det.threshold();
  CHECK(det.verdict(tau) == svdd::Verdict::benign);
  CHECK(det.verdict(std::nextafter(tau, 1e300)) == svdd::Verdict::adversarial);
}

TEST_CASE("length mismatch, tiny and degenerate sets are rejected") {
  const MatrixRM x = gaussian_rows(40, 5, 0.0, 3);
  const auto det = svdd::fit_detector(x, small_config());
  CHECK_THROWS_AS(det.score(std::vector<float>(4, 0.0f)), ShapeError);
  CHECK_THROWS(svdd::fit_detector(gaussian_rows(19, 5, 0.0, 1), small_config()));
  const MatrixRM same = MatrixRM::Constant(50, 5, 1.25f);
  CHECK_THROWS_WITH(svdd::fit_detector(same, small_config()), doctest::Contains("degenerate benign set"));
}

TEST_CASE("fixed seed gives a bit-identical detector; save and load round-trip") {
  const MatrixRM x = gaussian_rows(80, 17, 0.0, 8);
  const auto a = svdd::fit_detector(x, small_config());
  const auto b = svdd::fit_detector(x, small_config());
  CHECK(a == b);
  CHECK(a.threshold() == b.threshold());
  support::TempDir dir("svdd");
  svdd::save_detector(dir.path, a);
  const auto c = svdd::load_detector(dir.path);
  CHECK(a == c);
  CHECK(c.threshold() == a.threshold());
  CHECK(c.preset_frr() == a.preset_frr());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const std::span<const float> f(x.row(i).data(), 17);
    CHECK(c.score(f) == a.score(f));
  }
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.preset_frr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.embed_dim = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
