#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>
#include <sstream>

#include "support.hpp"
#include "trajguard/harness.hpp"
#include "trajguard/spectrum.hpp"

using namespace trajguard;
using namespace trajguard::harness;

namespace {

std::shared_ptr<const model::Network> tiny_victim() {
  static const auto net = std::make_shared<const model::Network>(support::trained_tiny(600, 3, 0));
  return net;
}

LabeledDataset reserved_set(std::size_t n = 120, std::uint64_t first = 100000) {
  return make_glyph_set(support::small_glyphs(), Split::reserved, first, n);
}

BundleOptions small_options() {
  BundleOptions o;
  o.dim = 8;
  o.codec.hidden = 8;
  o.codec.bottleneck_dim = 16;
  o.codec.epochs = 4;
  o.detector.hidden = {16};
  o.detector.embed_dim = 8;
  o.detector.epochs = 15;
  return o;
}

Row row(Truth t, const std::string& method, bool flagged, std::uint64_t id = 0) {
  Row r;
  r.id = id;
  r.truth = t;
  r.method = t == Truth::benign ? "none" : method;
  r.verdict = flagged ? svdd::Verdict::adversarial : svdd::Verdict::benign;
  r.score = flagged ? 2.0 : 0.5;
  return r;
}

}  // namespace

TEST_CASE("metric counting") {
  std::vector<Row> rows;
  for (int i = 0; i < 3000; ++i) rows.push_back(row(Truth::benign, "none", i < 18));
  for (int i = 0; i < 1000; ++i) rows.push_back(row(Truth::trigger, "trigger:patch", i < 992));
  for (int i = 0; i < 4; ++i) {
    auto r = row(Truth::ae, "fgsm", true);
    r.error = "bad";
    rows.push_back(r);
  }
  const auto m = compute_metrics(rows);
  CHECK(m.benign.total == 3000);
  CHECK(*m.online_frr() == doctest::Approx(0.006).epsilon(1e-12));
  CHECK(*m.detection("trigger:patch") == doctest::Approx(0.992).epsilon(1e-12));
  CHECK(m.errors == 4);
  CHECK_FALSE(m.detection("fgsm").has_value());
  CHECK_FALSE(compute_metrics({}).online_frr().has_value());

  // Recount oracle over a shuffled mix.
  std::mt19937_64 rng(5);
  std::bernoulli_distribution coin(0.3);
  std::vector<Row> mix;
  std::size_t flagged_pgd = 0, total_pgd = 0;
  for (int i = 0; i < 500; ++i) {
    const bool f = coin(rng);
    mix.push_back(row(i % 2 ? Truth::ae : Truth::benign, "pgd", f));
    if (i % 2) {
      ++total_pgd;
      flagged_pgd += f;
    }
  }
  const auto mm = compute_metrics(mix);
  CHECK(mm.attacks.at("pgd").total == total_pgd);
  CHECK(mm.attacks.at("pgd").flagged == flagged_pgd);
}

TEST_CASE("report JSON and CSV round-trip") {
  DetectionReport rep;
  rep.rows = {row(Truth::benign, "", false, 1), row(Truth::ae, "fgsm", true, 2), row(Truth::trigger, "trigger:patch", false, 3)};
  rep.rows[1].score = 0.1 + 0.2;
  rep.rows.push_back(row(Truth::ae, "pgd", false, 4));
  rep.rows.back().error = "shape mismatch";
  rep.metrics = compute_metrics(rep.rows);
  rep.metrics.cda = 0.97;
  rep.timings = {{"fit", 1.25}};
  rep.config = {{"k", 1}};

  const auto j = report_to_json(rep);
  const auto back = report_from_json(nlohmann::json::parse(j.dump()));
  CHECK(report_to_json(back) == j);
  CHECK(back.rows[1].score == 0.1 + 0.2);
  CHECK(back.metrics.errors == 1);
  CHECK(back.metrics.cda == 0.97);
  CHECK_FALSE(back.metrics.asr.has_value());
  CHECK_FALSE(report_to_json(rep, false).contains("timings_s"));

  const auto csv = rows_to_csv(rep.rows);
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "id,truth,method,score,verdict,error");
  const auto score_text = lines[2].substr(lines[2].find("fgsm,") + 5);
  CHECK(std::stod(score_text.substr(0, score_text.find(','))) == 0.1 + 0.2);
  CHECK(lines[4].find("\"shape mismatch\"") != std::string::npos);
  const auto mcsv = metrics_to_csv(rep.metrics);
  CHECK(mcsv.find("asr,,,undefined") != std::string::npos);
}

TEST_CASE("experiment config round-trips and rejects unknown keys") {
  ExperimentConfig c;
  c.train_count = 123;
  c.bundle.plan = "SS5";
  c.bundle.codec.hidden = 16;
  const auto j = config_to_json(c);
  CHECK(config_to_json(config_from_json(j)) == j);

  auto bad = j;
  bad["trian_count"] = 5;
  CHECK_THROWS_WITH_AS(config_from_json(bad), doctest::Contains("trian_count"), ConfigError);
  bad = j;
  bad["bundle"]["codec"]["hiden"] = 3;
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  bad = j;
  bad["bundle"]["use_codec"] = false;
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);  // spectrum needs the codec
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("ablation variants") {
  const auto base = small_options();
  std::size_t n = 0;
  CHECK_FALSE(ablation_options(base, "no_codec", &n).use_codec);
  CHECK_FALSE(ablation_options(base, "no_spectrum", &n).use_spectrum);
  CHECK(ablation_options(base, "no_spectrum", &n).use_codec);
  CHECK(ablation_options(base, "sampling:SS3", &n).plan == "SS3");
  ablation_options(base, "reserved:100", &n);
  CHECK(n == 100);
  CHECK_THROWS_AS(ablation_options(base, "sampling:SS7", &n), ConfigError);
  CHECK_THROWS_AS(ablation_options(base, "no_detector", &n), ConfigError);
}

TEST_CASE("bundle building enforces split hygiene") {
  auto wrong_tag = reserved_set();
  wrong_tag.split = Split::test;
  CHECK_THROWS_AS(build_bundle(tiny_victim(), wrong_tag, small_options(), 1), ConfigError);
  // ids 0.. were used for training
  auto overlap = make_glyph_set(support::small_glyphs(), Split::reserved, 550, 120);
  CHECK_THROWS_WITH_AS(build_bundle(tiny_victim(), overlap, small_options(), 1), doctest::Contains("used to train"),
                       ConfigError);
  CHECK_THROWS_AS(build_bundle(tiny_victim(), reserved_set(24), small_options(), 1), ConfigError);
}

TEST_CASE("bundle score is the composition of the stages") {
  const auto b = build_bundle(tiny_victim(), reserved_set(), small_options(), 1);
  CHECK(b.manifest()["fit_count"] == 96);
  CHECK(b.manifest()["calibration_count"] == 24);
  CHECK(b.feature_dim() == 9);
  const auto test = make_glyph_set(support::small_glyphs(), Split::test, 300000, 6);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto [logits, seq] = b.model().forward_with_taps(test.sample(i), test.ids[i]);
    const auto traj = b.front().bank.reduce(seq);
    const auto code = b.front().codec->encode(traj);
    const auto spec = spectrum::transform(code);
    const std::vector<float> f(spec.magnitudes.begin(), spec.magnitudes.end());
    CHECK(b.score(test.sample(i)) == b.detector().score(f));
  }
}

TEST_CASE("bundle build is independent of the thread count; save/load reproduces verification scores") {
  const auto a = build_bundle(tiny_victim(), reserved_set(), small_options(), 1);
  const auto b = build_bundle(tiny_victim(), reserved_set(), small_options(), 3);
  CHECK(a.detector().threshold() == b.detector().threshold());
  CHECK(a.verification_scores() == b.verification_scores());
  CHECK(a.verification_scores().size() == kVerificationCount);
  CHECK(a.verify() == kVerificationCount);

  support::TempDir dir("bundle");
  save_bundle(dir.path / "b", a);
  const auto back = load_bundle(dir.path / "b");
  CHECK(back.verify() == kVerificationCount);
  CHECK(back.verification_scores() == a.verification_scores());
  CHECK(back.detector().threshold() == a.detector().threshold());
  const auto test = make_glyph_set(support::small_glyphs(), Split::test, 300000, 5);
  for (std::size_t i = 0; i < test.size(); ++i) CHECK(back.score(test.sample(i)) == a.score(test.sample(i)));

  // Flip one byte of a stored component.
  {
    std::vector<std::string> names;
    for (const auto& e : std::filesystem::directory_iterator(dir.path / "b" / "detector")) {
      if (e.path().extension() == ".bin") names.push_back(e.path().string());
    }
    REQUIRE(!names.empty());
    std::fstream f(names.front(), std::ios::in | std::ios::out | std::ios::binary);
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x5a);
    f.seekp(0);
    f.write(&c, 1);
  }
  CHECK_THROWS_AS(load_bundle(dir.path / "b"), StageError);
}

TEST_CASE("the no-codec variant feeds the flat trajectory to the detector") {
  auto o = small_options();
  o.use_codec = false;
  o.use_spectrum = false;
  const auto b = build_bundle(tiny_victim(), reserved_set(), o, 1);
  CHECK_FALSE(b.front().codec.has_value());
  CHECK(b.feature_dim() == 4 * 8);
  support::TempDir dir("nocodec");
  save_bundle(dir.path, b);
  CHECK(load_bundle(dir.path).verify() == kVerificationCount);
}

TEST_CASE("detection turns bad samples into error rows and keeps going") {
  const auto b = build_bundle(tiny_victim(), reserved_set(), small_options(), 1);
  const auto wrong = make_glyph_set(GlyphSetConfig{}, Split::test, 0, 5);  // 28x28 against a 16x16 model
  const auto rows = detect(b, wrong, Truth::ae, "fgsm", 1);
  REQUIRE(rows.size() == 5);
  for (const auto& r : rows) {
    CHECK(r.error.find("shape mismatch") != std::string::npos);
    CHECK(r.method == "fgsm");
  }
  CHECK(compute_metrics(rows).errors == 5);

  const auto ok = make_glyph_set(support::small_glyphs(), Split::test, 300000, 20);
  const auto r1 = detect(b, ok, Truth::benign, "none", 1);
  const auto r3 = detect(b, ok, Truth::benign, "none", 3);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(r1[i].error.empty());
    CHECK(r1[i].score == r3[i].score);
    CHECK(r1[i].id == ok.ids[i]);
    CHECK(r1[i].method == "none");
    CHECK(r1[i].verdict == b.detector().verdict(r1[i].score));
  }
}
