#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "support.hpp"
#include "trajguard/trajectory.hpp"

using namespace trajguard;

namespace {

using Mat = std::vector<std::vector<long double>>;

// Power iteration with deflation on the sample covariance, in long double.
std::vector<std::vector<long double>> power_axes(const MatrixRM& data, std::size_t k) {
  const auto n = static_cast<std::size_t>(data.rows()), D = static_cast<std::size_t>(data.cols());
  std::vector<long double> mean(D, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j) mean[j] += data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  for (auto& m : mean) m /= static_cast<long double>(n);
  Mat cov(D, std::vector<long double>(D, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < D; ++a)
      for (std::size_t b = 0; b < D; ++b)
        cov[a][b] += (data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) - mean[a]) *
                     (data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) - mean[b]);
  std::vector<std::vector<long double>> axes;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<long double> v(D, 1.0L);
    v[c % D] += 1.0L;
    long double lambda = 0;
    for (int it = 0; it < 3000; ++it) {
      std::vector<long double> w(D, 0);
      for (std::size_t a = 0; a < D; ++a)
        for (std::size_t b = 0; b < D; ++b) w[a] += cov[a][b] * v[b];
      long double norm = 0;
      for (auto x : w) norm += x * x;
      norm = std::sqrt(norm);
      for (std::size_t a = 0; a < D; ++a) v[a] = w[a] / norm;
      lambda = norm;
    }
    for (std::size_t a = 0; a < D; ++a)
      for (std::size_t b = 0; b < D; ++b) cov[a][b] -= lambda * v[a] * v[b];
    axes.push_back(v);
  }
  return axes;
}

// Samples with well-separated variances along random orthogonal directions.
MatrixRM anisotropic(Eigen::Index n, Eigen::Index D, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd q = Eigen::MatrixXd::NullaryExpr(D, D, [&] { return g(rng); });
  q = Eigen::HouseholderQR<Eigen::MatrixXd>(q).householderQ();
  Eigen::MatrixXd z = Eigen::MatrixXd::NullaryExpr(n, D, [&] { return g(rng); });
  for (Eigen::Index j = 0; j < D; ++j) z.col(j) *= 8.0 * std::pow(0.6, static_cast<double>(j));
  Eigen::MatrixXd x = z * q.transpose();
  x.rowwise() += Eigen::RowVectorXd::LinSpaced(D, 1.0, 3.0);
  return x.cast<float>();
}

void check_axes(const MatrixRM& data, std::size_t k) {
  const auto pca = trajectory::PcaReducer::fit(data, k);
  const auto axes = power_axes(data, k);
  REQUIRE(pca.output_dim() == k);
  for (std::size_t c = 0; c < k; ++c) {
    long double dot = 0;
    for (Eigen::Index j = 0; j < data.cols(); ++j) dot += axes[c][static_cast<std::size_t>(j)] * pca.components()(static_cast<Eigen::Index>(c), j);
    CHECK(static_cast<double>(std::fabs(std::fabs(dot) - 1.0L)) <= 1e-4);
  }
  const MatrixRM gram = pca.components() * pca.components().transpose();
  CHECK((gram - MatrixRM::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() <= 1e-5f);
}

}  // namespace

TEST_CASE("PCA axes match a power-iteration oracle up to sign") {
  SUBCASE("covariance path (n > D)") { check_axes(anisotropic(300, 6, 1), 4); }
  SUBCASE("Gram path (D > n)") {
    // 12 samples in 40 dimensions, variance confined to 5 directions.
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd basis = Eigen::MatrixXd::NullaryExpr(40, 5, [&] { return g(rng); });
    basis = Eigen::HouseholderQR<Eigen::MatrixXd>(basis).householderQ() * Eigen::MatrixXd::Identity(40, 5);
    Eigen::MatrixXd z = Eigen::MatrixXd::NullaryExpr(12, 5, [&] { return g(rng); });
    for (Eigen::Index j = 0; j < 5; ++j) z.col(j) *= 6.0 * std::pow(0.5, static_cast<double>(j));
    const MatrixRM x = (z * basis.transpose()).cast<float>();
    check_axes(x, 3);
  }
}

TEST_CASE("three co-linear points reduce to one dimension without loss") {
  MatrixRM x(3, 2);
  x << 0.0f, 1.0f, 1.0f, 3.0f, 2.0f, 5.0f;
  const auto pca = trajectory::PcaReducer::fit(x, 1);
  for (Eigen::Index i = 0; i < 3; ++i) {
    float code = 0.0f;
    pca.transform({x.row(i).data(), 2}, {&code, 1});
    const auto back = pca.inverse({&code, 1});
    CHECK(std::fabs(back[0] - x(i, 0)) <= 1e-5f);
    CHECK(std::fabs(back[1] - x(i, 1)) <= 1e-5f);
  }
}

TEST_CASE("full-rank PCA is invertible and d is capped at n-1") {
  const MatrixRM x = anisotropic(50, 5, 3);
  const auto pca = trajectory::PcaReducer::fit(x, 5);
  std::vector<float> code(5);
  for (Eigen::Index i = 0; i < 10; ++i) {
    pca.transform({x.row(i).data(), 5}, code);
    const auto back = pca.inverse(code);
    for (Eigen::Index j = 0; j < 5; ++j) CHECK(std::fabs(back[static_cast<std::size_t>(j)] - x(i, j)) <= 1e-4f);
  }
  CHECK(trajectory::PcaReducer::fit(anisotropic(4, 10, 4), 64).output_dim() == 3);
  CHECK(trajectory::PcaReducer::fit(x, 64).output_dim() == 5);
  CHECK_THROWS_AS(trajectory::PcaReducer::fit(x.topRows(1), 2), ConfigError);
}

TEST_CASE("sampling plans") {
  using V = std::vector<int>;
  CHECK(trajectory::make_sampling_plan("SS3", 20).layers == V{1, 6, 11, 16});
  CHECK(trajectory::make_sampling_plan("SS4", 20).layers == V{1, 5, 10, 15, 20});
  CHECK(trajectory::make_sampling_plan("SS5", 20).layers.size() == 10);
  CHECK(trajectory::make_sampling_plan("SS1", 20).layers == V{1, 2, 3, 4, 5});
  CHECK(trajectory::make_sampling_plan("SS2", 20).layers == V{16, 17, 18, 19, 20});
  CHECK(trajectory::make_sampling_plan("full", 8).layers == V{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(trajectory::make_sampling_plan("SS5", 8).layers == V{1, 3, 5, 7});
  CHECK_THROWS_AS(trajectory::make_sampling_plan("SS9", 8), ConfigError);
  CHECK_THROWS_AS(trajectory::make_sampling_plan("full", 0), ConfigError);
}

TEST_CASE("UMAP refuses small fit sets and names PCA as the fallback") {
  const MatrixRM x = anisotropic(150, 6, 5);
  CHECK_THROWS_WITH_AS(trajectory::UmapReducer::fit(x, 2, {}), doctest::Contains("pca"), ConfigError);
}

TEST_CASE("UMAP places a fit point near its own embedding") {
  const MatrixRM x = anisotropic(220, 6, 6);
  trajectory::UmapOptions o;
  o.epochs = 60;
  const auto u = trajectory::UmapReducer::fit(x, 2, o);
  CHECK(u.output_dim() == 2);
  std::vector<float> a(2), b(2);
  u.transform({x.row(0).data(), 6}, a);
  u.transform({x.row(0).data(), 6}, b);
  CHECK(a == b);
  CHECK(all_finite(std::span<const float>(a)));
}

TEST_CASE("bank: streaming equals batch reduction, determinism, persistence") {
  const auto net = support::trained_tiny(200, 1);
  const auto data = make_glyph_set(support::small_glyphs(), Split::reserved, 5000, 60);
  const auto taps = trajectory::collect_taps(net, model::batch_inputs(data, support::iota(data.size())));
  REQUIRE(taps.size() == 4);
  const auto plan = trajectory::make_sampling_plan("full", 4);
  const auto bank = trajectory::fit_reducers(taps, net.tap_plan(), plan, 8, trajectory::ReductionMethod::pca, 0);
  const auto again = trajectory::fit_reducers(taps, net.tap_plan(), plan, 8, trajectory::ReductionMethod::pca, 0);
  CHECK(bank.target_dim() == 8);
  CHECK_FALSE(bank.dim_capped());

  support::TempDir dir("bank");
  trajectory::save_bank(dir.path, bank);
  const auto loaded = trajectory::load_bank(dir.path);
  CHECK(loaded.ordinals() == bank.ordinals());

  for (std::size_t i = 0; i < 5; ++i) {
    const auto [pred, seq] = net.forward_with_taps(data.sample(i), data.ids[i]);
    const auto t = bank.reduce(seq);
    CHECK(t.values.rows() == 4);
    CHECK(t.values.cols() == 8);
    CHECK(t.sample_id == data.ids[i]);
    MatrixRM streamed(4, 8);
    net.forward_streaming(data.sample(i), [&](const model::TapPoint& tp, std::span<const float> act) {
      REQUIRE(bank.reduce_layer(tp.ordinal, act, {streamed.row(bank.row_of(tp.ordinal)).data(), 8}));
    });
    CHECK(support::bit_equal({t.values.data(), 32}, {streamed.data(), 32}));
    const auto t2 = again.reduce(seq);
    const auto t3 = loaded.reduce(seq);
    CHECK(support::bit_equal({t.values.data(), 32}, {t2.values.data(), 32}));
    CHECK(support::bit_equal({t.values.data(), 32}, {t3.values.data(), 32}));
  }

  const auto [pred, seq] = net.forward_with_taps(data.sample(0));
  auto partial = seq;
  partial.entries.pop_back();
  CHECK_THROWS(bank.reduce(partial));

  const auto sub = bank.subset(trajectory::make_sampling_plan("SS5", 4));
  CHECK(sub.ordinals() == std::vector<int>{1, 3});
  CHECK(sub.reduce(seq).values.rows() == 2);
}

TEST_CASE("bank dimension is capped by the number of fit samples") {
  const auto net = support::trained_tiny(200, 1);
  const auto data = make_glyph_set(support::small_glyphs(), Split::reserved, 5000, 6);
  const auto taps = trajectory::collect_taps(net, model::batch_inputs(data, support::iota(data.size())));
  const auto bank = trajectory::fit_reducers(taps, net.tap_plan(), trajectory::make_sampling_plan("full", 4), 64,
                                             trajectory::ReductionMethod::pca, 0);
  CHECK(bank.dim_capped());
  CHECK(bank.target_dim() == 5);
}
