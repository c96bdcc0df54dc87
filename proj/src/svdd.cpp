#include "trajguard/svdd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "trajguard/optim.hpp"

namespace trajguard::svdd {

using json = nlohmann::json;

void DetectorConfig::validate() const {
  if (embed_dim < 1) throw ConfigError("detector embed_dim must be >= 1");
  for (auto h : hidden) {
    if (h < 1) throw ConfigError("detector hidden widths must be >= 1");
  }
  if (!(preset_frr > 0.0 && preset_frr < 1.0)) throw ConfigError("preset FRR must lie in (0,1)");
  if (epochs < 0) throw ConfigError("detector epochs must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("detector lr must be >= 0");
  if (batch_size < 1) throw ConfigError("detector batch_size must be >= 1");
}

json config_to_json(const DetectorConfig& c) {
  return {{"hidden", c.hidden},
          {"embed_dim", c.embed_dim},
          {"preset_frr", c.preset_frr},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay},
          {"leaky_slope", c.leaky_slope},
          {"seed", c.seed},
          {"objective", "one-class"},
          {"bias", false}};
}

DetectorConfig config_from_json(const json& j) {
  DetectorConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.preset_frr = j.value("preset_frr", c.preset_frr);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string to_string(Verdict v) { return v == Verdict::benign ? "benign" : "adversarial"; }

double calibrate_threshold(std::span<const double> scores, double frr) {
  if (!(frr > 0.0 && frr < 1.0)) throw ConfigError("FRR must lie in (0,1)");
  if (scores.empty()) throw ConfigError("cannot calibrate a threshold on an empty score list");
  if (!all_finite(scores)) throw NumericError("non-finite score in calibration set");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  // rejections allowed: floor(frr * n), guarded against representation error
  const auto m = std::min(n - 1, static_cast<std::size_t>(std::floor(frr * static_cast<double>(n) + 1e-9)));
  return sorted[n - m - 1];
}

Detector::Detector(const DetectorConfig& config, std::size_t input_dim) : config_(config) {
  config_.validate();
  if (input_dim < 1) throw ShapeError("detector input must have at least one feature");
  std::mt19937_64 rng(config_.seed);
  std::size_t in = input_dim;
  std::vector<std::size_t> outs = config_.hidden;
  outs.push_back(config_.embed_dim);
  for (auto out : outs) {
    std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(in))));
    MatrixRM w(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    weights_.push_back(std::move(w));
    in = out;
  }
  mean_ = VectorF::Zero(static_cast<Eigen::Index>(input_dim));
  scale_ = VectorF::Ones(static_cast<Eigen::Index>(input_dim));
  center_ = VectorF::Zero(static_cast<Eigen::Index>(config_.embed_dim));
}

void Detector::set_center(VectorF c) {
  if (static_cast<std::size_t>(c.size()) != config_.embed_dim) throw ShapeError("centre width differs from embed_dim");
  center_ = std::move(c);
}

void Detector::set_normalization(VectorF mean, VectorF scale) {
  if (mean.size() != mean_.size() || scale.size() != scale_.size()) {
    throw ShapeError("normalisation stats do not match the detector input");
  }
  mean_ = std::move(mean);
  scale_ = std::move(scale);
}

MatrixRM Detector::normalize(const MatrixRM& features) const {
  if (features.cols() != mean_.size()) {
    throw ShapeError("feature has " + std::to_string(features.cols()) + " entries, detector expects " +
                     std::to_string(mean_.size()));
  }
  MatrixRM out = features.rowwise() - mean_.transpose();
  out.array().rowwise() /= scale_.transpose().array();
  return out;
}

MatrixRM Detector::forward(const MatrixRM& normalized, std::vector<MatrixRM>* acts) const {
  MatrixRM h = normalized;
  const float slope = static_cast<float>(config_.leaky_slope);
  if (acts) acts->assign(1, h);
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    MatrixRM a = h * weights_[l].transpose();
    if (l + 1 < weights_.size()) {
      h = a.unaryExpr([slope](float v) { return v > 0.0f ? v : slope * v; });
      if (acts) acts->push_back(h);
    } else {
      h = std::move(a);
    }
  }
  return h;
}

MatrixRM Detector::embed_batch(const MatrixRM& features) const { return forward(normalize(features), nullptr); }

std::vector<float> Detector::embed(std::span<const float> feature) const {
  const MatrixRM row = Eigen::Map<const MatrixRM>(feature.data(), 1, static_cast<Eigen::Index>(feature.size()));
  const MatrixRM e = embed_batch(row);
  return {e.data(), e.data() + e.size()};
}

std::vector<double> Detector::score_batch(const MatrixRM& features) const {
  const MatrixRM e = embed_batch(features);
  std::vector<double> out(static_cast<std::size_t>(e.rows()));
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < e.cols(); ++k) {
      const double d = static_cast<double>(e(i, k)) - static_cast<double>(center_[k]);
      s += d * d;
    }
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

double Detector::score(std::span<const float> feature) const {
  if (feature.size() != input_dim()) {
    throw ShapeError("feature has " + std::to_string(feature.size()) + " entries, detector expects " +
                     std::to_string(input_dim()));
  }
  const MatrixRM row = Eigen::Map<const MatrixRM>(feature.data(), 1, static_cast<Eigen::Index>(feature.size()));
  return score_batch(row).front();
}

void Detector::calibrate(std::span<const double> scores) {
  threshold_ = calibrate_threshold(scores, config_.preset_frr);
  summary_ = {};
  summary_.count = scores.size();
  summary_.min = *std::min_element(scores.begin(), scores.end());
  summary_.max = *std::max_element(scores.begin(), scores.end());
  summary_.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  summary_.above_threshold =
      static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [&](double s) { return s > threshold_; }));
}

bool Detector::operator==(const Detector& other) const {
  if (weights_.size() != other.weights_.size()) return false;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights_[i].rows() != other.weights_[i].rows() || weights_[i].cols() != other.weights_[i].cols() ||
        std::memcmp(weights_[i].data(), other.weights_[i].data(), sizeof(float) * weights_[i].size()) != 0) {
      return false;
    }
  }
  return mean_ == other.mean_ && scale_ == other.scale_ && center_ == other.center_ && threshold_ == other.threshold_;
}

Detector fit_detector(const MatrixRM& features, const DetectorConfig& config) {
  config.validate();
  const Eigen::Index n = features.rows();
  if (n < 20) throw ConfigError("detector needs at least 20 benign samples, got " + std::to_string(n));
  if (!all_finite(std::span<const float>(features.data(), static_cast<std::size_t>(features.size())))) {
    throw NumericError("non-finite benign features");
  }
  Detector det(config, static_cast<std::size_t>(features.cols()));
  const Eigen::RowVectorXd mean = features.cast<double>().colwise().mean();
  const Eigen::RowVectorXd var =
      (features.cast<double>().rowwise() - mean).array().square().colwise().sum() / static_cast<double>(n);
  if ((var.array() <= 0.0).all()) throw ConfigError("degenerate benign set: every feature is constant");
  VectorF scale(features.cols());
  for (Eigen::Index i = 0; i < features.cols(); ++i) {
    scale[i] = var[i] > 1e-16 ? static_cast<float>(std::sqrt(var[i])) : 1.0f;
  }
  det.set_normalization(mean.transpose().cast<float>(), scale);
  const MatrixRM X = det.normalize(features);

  // centre: mean initial embedding, kept away from zero coordinates
  const MatrixRM e0 = det.forward(X, nullptr);
  VectorF c = e0.cast<double>().colwise().mean().transpose().cast<float>();
  for (Eigen::Index k = 0; k < c.size(); ++k) {
    if (std::abs(c[k]) < 0.1f) c[k] = c[k] < 0.0f ? -0.1f : 0.1f;
  }
  det.set_center(c);

  auto mean_score = [&] {
    const auto s = det.score_batch(features);
    return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  };
  det.loss_log_.push_back(mean_score());

  Adam adam(config.lr, 0.9, 0.999, 1e-8, config.weight_decay);
  std::mt19937_64 rng(mix_seed(config.seed, 0x5dd));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<MatrixRM> grads(det.weights_.size());
  const float slope = static_cast<float>(config.leaky_slope);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      MatrixRM batch(static_cast<Eigen::Index>(end - start), X.cols());
      for (std::size_t i = start; i < end; ++i) batch.row(static_cast<Eigen::Index>(i - start)) = X.row(order[i]);
      std::vector<MatrixRM> acts;
      const MatrixRM e = det.forward(batch, &acts);
      MatrixRM d = (e.rowwise() - det.center_.transpose()) * (2.0f / static_cast<float>(batch.rows()));
      for (std::size_t l = det.weights_.size(); l-- > 0;) {
        grads[l] = d.transpose() * acts[l];
        if (l > 0) {
          d = d * det.weights_[l];
          d = d.binaryExpr(acts[l], [slope](float g, float a) { return a > 0.0f ? g : slope * g; });
        }
      }
      std::vector<std::span<float>> ps;
      std::vector<std::span<const float>> gs;
      for (std::size_t l = 0; l < grads.size(); ++l) {
        ps.emplace_back(det.weights_[l].data(), static_cast<std::size_t>(det.weights_[l].size()));
        gs.emplace_back(grads[l].data(), static_cast<std::size_t>(grads[l].size()));
      }
      adam.step(ps, gs);
    }
    const double loss = mean_score();
    if (!std::isfinite(loss)) throw NumericError("detector loss became non-finite at epoch " + std::to_string(epoch));
    det.loss_log_.push_back(loss);
  }
  const auto scores = det.score_batch(features);
  det.calibrate(scores);
  return det;
}

void save_detector(const std::filesystem::path& dir, const Detector& det) {
  std::filesystem::create_directories(dir);
  json layers = json::array();
  for (std::size_t l = 0; l < det.weights().size(); ++l) {
    const auto& w = det.weights()[l];
    const std::string file = "svdd_w" + std::to_string(l) + ".bin";
    io::write_f32(dir / file, {w.data(), static_cast<std::size_t>(w.size())});
    layers.push_back({{"shape", {w.rows(), w.cols()}}, {"file", file}});
  }
  io::write_f32(dir / "svdd_center.bin", {det.center().data(), static_cast<std::size_t>(det.center().size())});
  io::write_f32(dir / "svdd_norm_mean.bin", {det.norm_mean().data(), det.input_dim()});
  io::write_f32(dir / "svdd_norm_scale.bin", {det.norm_scale().data(), det.input_dim()});
  const auto& s = det.summary();
  json m{{"kind", "svdd_detector"},
         {"config", config_to_json(det.config())},
         {"input_dim", det.input_dim()},
         {"threshold", det.threshold()},
         {"preset_frr", det.preset_frr()},
         {"center", "svdd_center.bin"},
         {"normalization", {{"mean", "svdd_norm_mean.bin"}, {"scale", "svdd_norm_scale.bin"}}},
         {"center_policy", "mean initial embedding, |c_i| < 0.1 pushed to +-0.1, fixed"},
         {"tie_rule", "score == threshold is benign"},
         {"loss_log", det.loss_log()},
         {"score_summary",
          {{"count", s.count}, {"min", s.min}, {"max", s.max}, {"mean", s.mean}, {"above_threshold", s.above_threshold}}},
         {"layers", layers},
         {"dtype", "float32-le"}};
  io::write_text(dir / "manifest.json", m.dump(2));
}

Detector load_detector(const std::filesystem::path& dir) {
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  if (m.value("kind", "") != "svdd_detector") throw ConfigError(dir.string() + " is not a detector archive");
  const auto in = m.at("input_dim").get<std::size_t>();
  Detector det(config_from_json(m.at("config")), in);
  const auto& layers = m.at("layers");
  if (layers.size() != det.weights_.size()) throw ShapeError("detector archive has the wrong layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& w = det.weights_[l];
    const auto v = io::read_f32(dir / layers[l].at("file").get<std::string>(), static_cast<std::size_t>(w.size()));
    std::copy(v.begin(), v.end(), w.data());
  }
  const auto e = det.config().embed_dim;
  const auto c = io::read_f32(dir / m.at("center").get<std::string>(), e);
  det.set_center(Eigen::Map<const VectorF>(c.data(), static_cast<Eigen::Index>(e)));
  const auto mean = io::read_f32(dir / m.at("normalization").at("mean").get<std::string>(), in);
  const auto scale = io::read_f32(dir / m.at("normalization").at("scale").get<std::string>(), in);
  det.set_normalization(Eigen::Map<const VectorF>(mean.data(), static_cast<Eigen::Index>(in)),
                        Eigen::Map<const VectorF>(scale.data(), static_cast<Eigen::Index>(in)));
  det.threshold_ = m.at("threshold").get<double>();
  det.loss_log_ = m.value("loss_log", std::vector<double>{});
  const auto& s = m.at("score_summary");
  det.summary_ = {s.at("count").get<std::size_t>(), s.at("min").get<double>(), s.at("max").get<double>(),
                  s.at("mean").get<double>(), s.at("above_threshold").get<std::size_t>()};
  return det;
}

}  // namespace trajguard::svdd
