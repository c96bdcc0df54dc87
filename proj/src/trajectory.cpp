#include "trajguard/trajectory.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace trajguard::trajectory {

using json = nlohmann::json;

std::string to_string(ReductionMethod m) { return m == ReductionMethod::pca ? "pca" : "umap"; }

ReductionMethod reduction_from_string(const std::string& s) {
  if (s == "pca") return ReductionMethod::pca;
  if (s == "umap") return ReductionMethod::umap;
  throw ConfigError("unknown reduction method '" + s + "' (expected pca or umap)");
}

// ---------------------------------------------------------------- sampling plans

void SamplingPlan::validate(int tap_count) const {
  if (layers.empty()) throw ConfigError("sampling plan '" + name + "' selects no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 1 || layers[i] > tap_count) {
      throw ConfigError("sampling plan '" + name + "' names layer " + std::to_string(layers[i]) +
                        " outside the tap plan 1.." + std::to_string(tap_count));
    }
    if (i > 0 && layers[i] <= layers[i - 1]) {
      throw ConfigError("sampling plan '" + name + "' indices must be strictly increasing");
    }
  }
}

SamplingPlan make_sampling_plan(const std::string& name, int tap_count) {
  if (tap_count < 1) throw ConfigError("tap plan is empty");
  SamplingPlan plan{name, {}};
  if (name == "full") {
    for (int i = 1; i <= tap_count; ++i) plan.layers.push_back(i);
  } else if (name == "SS1") {
    for (int i = 1; i <= std::min(5, tap_count); ++i) plan.layers.push_back(i);
  } else if (name == "SS2") {
    for (int i = std::max(1, tap_count - 4); i <= tap_count; ++i) plan.layers.push_back(i);
  } else if (name == "SS3") {
    for (int i = 1; i <= tap_count; i += 5) plan.layers.push_back(i);
  } else if (name == "SS4") {
    plan.layers.push_back(1);
    for (int i = 5; i <= tap_count; i += 5) plan.layers.push_back(i);
  } else if (name == "SS5") {
    for (int i = 1; i <= tap_count; i += 2) plan.layers.push_back(i);
  } else {
    throw ConfigError("unknown sampling plan '" + name + "' (expected SS1..SS5 or full)");
  }
  plan.validate(tap_count);
  return plan;
}

// ---------------------------------------------------------------- PCA

PcaReducer::PcaReducer(VectorF mean, MatrixRM components, std::size_t fit_count)
    : mean_(std::move(mean)), components_(std::move(components)), fit_count_(fit_count) {
  if (components_.cols() != mean_.size()) throw ShapeError("PCA components do not match the mean width");
}

PcaReducer PcaReducer::fit(const MatrixRM& data, std::size_t d) {
  const auto n = static_cast<std::size_t>(data.rows());
  const auto D = static_cast<std::size_t>(data.cols());
  if (n < 2) throw ConfigError("PCA needs at least 2 fit samples, got " + std::to_string(n));
  if (d < 1) throw ConfigError("target dimension must be >= 1");
  if (!all_finite(std::span<const float>(data.data(), static_cast<std::size_t>(data.size())))) {
    throw NumericError("non-finite values in PCA fit data");
  }
  const std::size_t k = std::min({d, n - 1, D});

  Eigen::VectorXd mean_d = data.cast<double>().colwise().mean().transpose();
  const VectorF mean = mean_d.cast<float>();
  MatrixRM centered = data.rowwise() - mean.transpose();

  MatrixRM comps(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(D));
  Eigen::VectorXd values;
  if (D > n) {
    // Gram trick: eigenvectors of X X^T map to principal axes via X^T u / sqrt(lambda).
    MatrixRM gram = centered * centered.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram.cast<double>());
    if (es.info() != Eigen::Success) throw NumericError("PCA eigendecomposition failed");
    values = es.eigenvalues().reverse();
    const Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
    const MatrixRM top = vecs.leftCols(static_cast<Eigen::Index>(k)).transpose().cast<float>();
    comps = top * centered;
    for (Eigen::Index c = 0; c < comps.rows(); ++c) {
      const double lam = values[c];
      if (lam > 1e-10 * std::max(values[0], 1e-30)) {
        comps.row(c) /= static_cast<float>(comps.row(c).cast<double>().norm());
      } else {
        comps.row(c).setZero();
      }
    }
  } else {
    Eigen::MatrixXd cov = centered.cast<double>().transpose() * centered.cast<double>();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("PCA eigendecomposition failed");
    values = es.eigenvalues().reverse();
    const Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
    comps = vecs.leftCols(static_cast<Eigen::Index>(k)).transpose().cast<float>();
    for (Eigen::Index c = 0; c < comps.rows(); ++c) {
      if (!(values[c] > 1e-10 * std::max(values[0], 1e-30))) comps.row(c).setZero();
    }
  }
  // Sign convention: the largest-magnitude entry of each axis is positive.
  for (Eigen::Index c = 0; c < comps.rows(); ++c) {
    Eigen::Index at = 0;
    comps.row(c).cwiseAbs().maxCoeff(&at);
    if (comps(c, at) < 0.0f) comps.row(c) *= -1.0f;
  }
  return PcaReducer(mean, std::move(comps), n);
}

void PcaReducer::transform(std::span<const float> x, std::span<float> out) const {
  if (x.size() != input_dim()) {
    throw ShapeError("PCA expects " + std::to_string(input_dim()) + " inputs, got " + std::to_string(x.size()));
  }
  if (out.size() != output_dim()) throw ShapeError("PCA output buffer has the wrong width");
  Eigen::Map<const VectorF> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  Eigen::Map<VectorF> ov(out.data(), static_cast<Eigen::Index>(out.size()));
  ov.noalias() = components_ * (xv - mean_);
}

std::vector<float> PcaReducer::inverse(std::span<const float> code) const {
  if (code.size() != output_dim()) throw ShapeError("PCA code has the wrong width");
  Eigen::Map<const VectorF> cv(code.data(), static_cast<Eigen::Index>(code.size()));
  const VectorF x = components_.transpose() * cv + mean_;
  return {x.data(), x.data() + x.size()};
}

void PcaReducer::save(const std::filesystem::path& dir, const std::string& prefix, json& meta) const {
  io::write_f32(dir / (prefix + "_mean.bin"), {mean_.data(), static_cast<std::size_t>(mean_.size())});
  io::write_f32(dir / (prefix + "_components.bin"),
                {components_.data(), static_cast<std::size_t>(components_.size())});
  meta["method"] = "pca";
  meta["input_dim"] = input_dim();
  meta["output_dim"] = output_dim();
  meta["fit_count"] = fit_count_;
  meta["mean"] = prefix + "_mean.bin";
  meta["components"] = prefix + "_components.bin";
}

PcaReducer PcaReducer::load(const std::filesystem::path& dir, const json& meta) {
  const auto D = meta.at("input_dim").get<std::size_t>();
  const auto d = meta.at("output_dim").get<std::size_t>();
  const auto m = io::read_f32(dir / meta.at("mean").get<std::string>(), D);
  const auto c = io::read_f32(dir / meta.at("components").get<std::string>(), D * d);
  VectorF mean = Eigen::Map<const VectorF>(m.data(), static_cast<Eigen::Index>(D));
  MatrixRM comps = Eigen::Map<const MatrixRM>(c.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(D));
  return PcaReducer(std::move(mean), std::move(comps), meta.at("fit_count").get<std::size_t>());
}

// ---------------------------------------------------------------- UMAP

namespace {

struct Neighbors {
  std::vector<int> index;
  std::vector<double> dist;
};

Neighbors nearest(const MatrixRM& data, const Eigen::VectorXf& norms, std::span<const float> x, int k,
                  std::ptrdiff_t self) {
  Eigen::Map<const VectorF> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  const VectorF dots = data * xv;
  const float xn = xv.squaredNorm();
  std::vector<std::pair<double, int>> all;
  all.reserve(static_cast<std::size_t>(data.rows()));
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    if (i == self) continue;
    const double d2 = std::max(0.0, static_cast<double>(norms[i]) + xn - 2.0 * dots[i]);
    all.emplace_back(std::sqrt(d2), static_cast<int>(i));
  }
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end());
  Neighbors nb;
  for (std::size_t j = 0; j < kk; ++j) {
    nb.dist.push_back(all[j].first);
    nb.index.push_back(all[j].second);
  }
  return nb;
}

// Membership strengths exp(-(d - rho) / sigma) with sigma chosen so they sum to log2(k).
std::vector<double> memberships(const std::vector<double>& dist) {
  const double target = std::log2(static_cast<double>(dist.size()));
  double rho = 0.0;
  for (double d : dist) {
    if (d > 0.0) {
      rho = d;
      break;
    }
  }
  double lo = 0.0, hi = std::numeric_limits<double>::infinity(), sigma = 1.0;
  for (int it = 0; it < 64; ++it) {
    double s = 0.0;
    for (double d : dist) s += std::exp(-std::max(0.0, d - rho) / sigma);
    if (std::abs(s - target) < 1e-5) break;
    if (s > target) {
      hi = sigma;
      sigma = 0.5 * (lo + hi);
    } else {
      lo = sigma;
      sigma = std::isinf(hi) ? sigma * 2.0 : 0.5 * (lo + hi);
    }
  }
  std::vector<double> w(dist.size());
  for (std::size_t j = 0; j < dist.size(); ++j) w[j] = std::exp(-std::max(0.0, dist[j] - rho) / sigma);
  return w;
}

// Curve parameters of 1 / (1 + a d^{2b}) approximating the min_dist kernel.
std::pair<double, double> fit_ab(double min_dist) {
  auto err = [&](double a, double b) {
    double e = 0.0;
    for (int i = 1; i <= 300; ++i) {
      const double x = 3.0 * i / 300.0;
      const double y = x < min_dist ? 1.0 : std::exp(-(x - min_dist));
      const double f = 1.0 / (1.0 + a * std::pow(x, 2.0 * b));
      e += (f - y) * (f - y);
    }
    return e;
  };
  double a = 1.0, b = 1.0, best = err(a, b);
  double sa = 1.0, sb = 0.5;
  for (int round = 0; round < 60; ++round) {
    bool moved = false;
    for (auto [da, db] : {std::pair{sa, 0.0}, {-sa, 0.0}, {0.0, sb}, {0.0, -sb}}) {
      const double na = a + da, nb = b + db;
      if (na <= 0.0 || nb <= 0.0) continue;
      const double e = err(na, nb);
      if (e < best) {
        best = e;
        a = na;
        b = nb;
        moved = true;
      }
    }
    if (!moved) {
      sa *= 0.5;
      sb *= 0.5;
    }
  }
  return {a, b};
}

double clip4(double g) { return std::clamp(g, -4.0, 4.0); }

}  // namespace

UmapReducer UmapReducer::fit(const MatrixRM& data, std::size_t d, const UmapOptions& options) {
  const auto n = static_cast<std::size_t>(data.rows());
  if (n < kUmapMinSamples) {
    throw ConfigError("umap needs at least " + std::to_string(kUmapMinSamples) + " fit samples, got " +
                      std::to_string(n) + "; use pca for small reserved sets");
  }
  if (options.neighbors < 2) throw ConfigError("umap needs at least 2 neighbours");
  UmapReducer r;
  r.options_ = options;
  std::tie(r.a_, r.b_) = fit_ab(options.min_dist);
  r.data_ = data;
  const Eigen::VectorXf norms = data.rowwise().squaredNorm();
  const int k = std::min<int>(options.neighbors, static_cast<int>(n) - 1);

  // symmetrised fuzzy graph: w = w_ij + w_ji - w_ij w_ji
  std::vector<std::vector<std::pair<int, double>>> graph(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto nb = nearest(data, norms, {data.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(data.cols())}, k,
                            static_cast<std::ptrdiff_t>(i));
    const auto w = memberships(nb.dist);
    for (std::size_t j = 0; j < nb.index.size(); ++j) graph[i].emplace_back(nb.index[j], w[j]);
  }
  struct Edge {
    int i, j;
    double w;
  };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (auto [j, wij] : graph[i]) {
      double wji = 0.0;
      for (auto [l, w] : graph[static_cast<std::size_t>(j)]) {
        if (l == static_cast<int>(i)) wji = w;
      }
      if (wji > 0.0 && j < static_cast<int>(i)) continue;  // counted from the other side
      edges.push_back({static_cast<int>(i), j, wij + wji - wij * wji});
    }
  }
  double wmax = 0.0;
  for (const auto& e : edges) wmax = std::max(wmax, e.w);

  // spectral-free initialisation: PCA coordinates scaled into [-10, 10]
  const std::size_t dd = std::min(d, n - 1);
  const auto init = PcaReducer::fit(data, dd);
  MatrixRM emb(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  emb.setZero();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> out(init.output_dim());
    init.transform({data.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(data.cols())}, out);
    for (std::size_t c = 0; c < out.size(); ++c) emb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = out[c];
  }
  const float scale = emb.cwiseAbs().maxCoeff();
  if (scale > 0.0f) emb *= 10.0f / scale;

  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(n) - 1);
  const double a = r.a_, b = r.b_;
  const auto dim = static_cast<Eigen::Index>(d);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const double alpha = 1.0 - static_cast<double>(epoch) / options.epochs;
    for (const auto& e : edges) {
      if (unit(rng) > e.w / wmax) continue;
      auto yi = emb.row(e.i);
      auto yj = emb.row(e.j);
      const Eigen::RowVectorXf diff = yi - yj;
      const double d2 = diff.squaredNorm();
      if (d2 > 0.0) {
        const double coef = -2.0 * a * b * std::pow(d2, b - 1.0) / (1.0 + a * std::pow(d2, b));
        for (Eigen::Index c = 0; c < dim; ++c) {
          const float g = static_cast<float>(alpha * clip4(coef * diff[c]));
          yi[c] += g;
          yj[c] -= g;
        }
      }
      for (int s = 0; s < options.negative_samples; ++s) {
        const int l = pick(rng);
        if (l == e.i) continue;
        const Eigen::RowVectorXf nd = emb.row(e.i) - emb.row(l);
        const double n2 = nd.squaredNorm();
        const double coef = 2.0 * b / ((0.001 + n2) * (1.0 + a * std::pow(n2, b)));
        for (Eigen::Index c = 0; c < dim; ++c) {
          emb(e.i, c) += static_cast<float>(alpha * (n2 > 0.0 ? clip4(coef * nd[c]) : 4.0));
        }
      }
    }
  }
  if (!all_finite(std::span<const float>(emb.data(), static_cast<std::size_t>(emb.size())))) {
    throw NumericError("umap embedding diverged");
  }
  r.embedding_ = std::move(emb);
  return r;
}

void UmapReducer::transform(std::span<const float> x, std::span<float> out) const {
  if (x.size() != input_dim()) {
    throw ShapeError("umap expects " + std::to_string(input_dim()) + " inputs, got " + std::to_string(x.size()));
  }
  if (out.size() != output_dim()) throw ShapeError("umap output buffer has the wrong width");
  const Eigen::VectorXf norms = data_.rowwise().squaredNorm();
  const int k = std::min<int>(options_.neighbors, static_cast<int>(data_.rows()));
  const auto nb = nearest(data_, norms, x, k, -1);
  const auto w = memberships(nb.dist);
  const auto dim = embedding_.cols();
  Eigen::RowVectorXf y = Eigen::RowVectorXf::Zero(dim);
  double wsum = 0.0, wmax = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    y += static_cast<float>(w[j]) * embedding_.row(nb.index[j]);
    wsum += w[j];
    wmax = std::max(wmax, w[j]);
  }
  if (wsum > 0.0) y /= static_cast<float>(wsum);

  // Only the new point moves; the rng restarts from the bank seed so the result
  // depends on x alone.
  std::mt19937_64 rng(options_.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(data_.rows()) - 1);
  for (int epoch = 0; epoch < options_.transform_epochs; ++epoch) {
    const double alpha = 0.25 * (1.0 - static_cast<double>(epoch) / options_.transform_epochs);
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (unit(rng) > w[j] / wmax) continue;
      const Eigen::RowVectorXf diff = y - embedding_.row(nb.index[j]);
      const double d2 = diff.squaredNorm();
      if (d2 > 0.0) {
        const double coef = -2.0 * a_ * b_ * std::pow(d2, b_ - 1.0) / (1.0 + a_ * std::pow(d2, b_));
        for (Eigen::Index c = 0; c < dim; ++c) y[c] += static_cast<float>(alpha * clip4(coef * diff[c]));
      }
      for (int s = 0; s < options_.negative_samples; ++s) {
        const Eigen::RowVectorXf nd = y - embedding_.row(pick(rng));
        const double n2 = nd.squaredNorm();
        if (n2 <= 0.0) continue;
        const double coef = 2.0 * b_ / ((0.001 + n2) * (1.0 + a_ * std::pow(n2, b_)));
        for (Eigen::Index c = 0; c < dim; ++c) y[c] += static_cast<float>(alpha * clip4(coef * nd[c]));
      }
    }
  }
  std::copy(y.data(), y.data() + dim, out.begin());
}

void UmapReducer::save(const std::filesystem::path& dir, const std::string& prefix, json& meta) const {
  io::write_f32(dir / (prefix + "_data.bin"), {data_.data(), static_cast<std::size_t>(data_.size())});
  io::write_f32(dir / (prefix + "_embedding.bin"), {embedding_.data(), static_cast<std::size_t>(embedding_.size())});
  meta["method"] = "umap";
  meta["input_dim"] = input_dim();
  meta["output_dim"] = output_dim();
  meta["fit_count"] = fit_count();
  meta["a"] = a_;
  meta["b"] = b_;
  meta["neighbors"] = options_.neighbors;
  meta["min_dist"] = options_.min_dist;
  meta["epochs"] = options_.epochs;
  meta["transform_epochs"] = options_.transform_epochs;
  meta["negative_samples"] = options_.negative_samples;
  meta["seed"] = options_.seed;
  meta["data"] = prefix + "_data.bin";
  meta["embedding"] = prefix + "_embedding.bin";
}

UmapReducer UmapReducer::load(const std::filesystem::path& dir, const json& meta) {
  UmapReducer r;
  const auto D = meta.at("input_dim").get<std::size_t>();
  const auto d = meta.at("output_dim").get<std::size_t>();
  const auto n = meta.at("fit_count").get<std::size_t>();
  r.a_ = meta.at("a").get<double>();
  r.b_ = meta.at("b").get<double>();
  r.options_.neighbors = meta.at("neighbors").get<int>();
  r.options_.min_dist = meta.at("min_dist").get<double>();
  r.options_.epochs = meta.at("epochs").get<int>();
  r.options_.transform_epochs = meta.at("transform_epochs").get<int>();
  r.options_.negative_samples = meta.at("negative_samples").get<int>();
  r.options_.seed = meta.at("seed").get<std::uint64_t>();
  const auto data = io::read_f32(dir / meta.at("data").get<std::string>(), n * D);
  const auto emb = io::read_f32(dir / meta.at("embedding").get<std::string>(), n * d);
  r.data_ = Eigen::Map<const MatrixRM>(data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(D));
  r.embedding_ = Eigen::Map<const MatrixRM>(emb.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  return r;
}

// ---------------------------------------------------------------- bank

ReducerBank::ReducerBank(ReductionMethod method, std::size_t requested_dim, std::uint64_t seed,
                         std::vector<BankLayer> layers)
    : method_(method), requested_dim_(requested_dim), seed_(seed), layers_(std::move(layers)) {
  if (layers_.empty()) throw ConfigError("reducer bank needs at least one layer");
  target_dim_ = layers_.front().reducer->output_dim();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].reducer->output_dim() != target_dim_) {
      throw ShapeError("reducers in a bank must share one output width");
    }
    if (i > 0 && layers_[i].ordinal <= layers_[i - 1].ordinal) {
      throw ConfigError("bank layers must be strictly increasing");
    }
  }
}

std::vector<int> ReducerBank::ordinals() const {
  std::vector<int> out;
  for (const auto& l : layers_) out.push_back(l.ordinal);
  return out;
}

std::ptrdiff_t ReducerBank::row_of(int ordinal) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].ordinal == ordinal) return static_cast<std::ptrdiff_t>(i);
  }
  return -1;
}

bool ReducerBank::reduce_layer(int ordinal, std::span<const float> activation, std::span<float> row) const {
  const auto r = row_of(ordinal);
  if (r < 0) return false;
  layers_[static_cast<std::size_t>(r)].reducer->transform(activation, row);
  return true;
}

Trajectory ReducerBank::reduce(const model::ActivationSequence& sequence) const {
  Trajectory t;
  t.sample_id = sequence.sample_id;
  t.layers = ordinals();
  t.values.resize(static_cast<Eigen::Index>(layers_.size()), static_cast<Eigen::Index>(target_dim_));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& bl = layers_[i];
    const auto it = std::find_if(sequence.entries.begin(), sequence.entries.end(),
                                 [&](const model::LayerActivation& a) { return a.layer_index == bl.layer_index; });
    if (it == sequence.entries.end()) {
      throw ShapeError("activation sequence lacks tapped layer " + std::to_string(bl.layer_index) + " (tap " +
                       std::to_string(bl.ordinal) + ")");
    }
    bl.reducer->transform(it->values, {t.values.row(static_cast<Eigen::Index>(i)).data(), target_dim_});
  }
  if (!all_finite(std::span<const float>(t.values.data(), static_cast<std::size_t>(t.values.size())))) {
    throw NumericError("trajectory has non-finite entries");
  }
  return t;
}

ReducerBank ReducerBank::subset(const SamplingPlan& plan) const {
  std::vector<BankLayer> picked;
  for (int o : plan.layers) {
    const auto r = row_of(o);
    if (r < 0) throw ConfigError("plan '" + plan.name + "' needs layer " + std::to_string(o) + " absent from the bank");
    picked.push_back(layers_[static_cast<std::size_t>(r)]);
  }
  ReducerBank out(method_, requested_dim_, seed_, std::move(picked));
  return out;
}

ReducerBank fit_reducers(const std::vector<MatrixRM>& layer_data, const std::vector<model::TapPoint>& taps,
                         const SamplingPlan& plan, std::size_t d, ReductionMethod method, std::uint64_t seed) {
  if (layer_data.size() != taps.size()) throw ShapeError("one data matrix per tap is required");
  plan.validate(static_cast<int>(taps.size()));
  std::vector<BankLayer> layers;
  for (int o : plan.layers) {
    const auto& X = layer_data[static_cast<std::size_t>(o - 1)];
    const auto& tap = taps[static_cast<std::size_t>(o - 1)];
    if (static_cast<std::size_t>(X.cols()) != tap.shape.size()) {
      throw ShapeError("tap " + std::to_string(o) + " data has width " + std::to_string(X.cols()) + ", expected " +
                       std::to_string(tap.shape.size()));
    }
    std::shared_ptr<const Reducer> reducer;
    if (method == ReductionMethod::pca) {
      reducer = std::make_shared<PcaReducer>(PcaReducer::fit(X, d));
    } else {
      UmapOptions opt;
      opt.seed = mix_seed(seed, static_cast<std::uint64_t>(o));
      reducer = std::make_shared<UmapReducer>(UmapReducer::fit(X, d, opt));
    }
    layers.push_back({o, tap.layer_index, std::move(reducer)});
  }
  return ReducerBank(method, d, seed, std::move(layers));
}

ReducerBank fit_reducers(const std::vector<model::ActivationSequence>& sequences, const SamplingPlan& plan,
                         std::size_t d, ReductionMethod method, std::uint64_t seed) {
  if (sequences.empty()) throw ConfigError("no activation sequences to fit reducers on");
  const auto& first = sequences.front();
  std::vector<model::TapPoint> taps;
  for (std::size_t i = 0; i < first.entries.size(); ++i) {
    taps.push_back({static_cast<int>(i) + 1, first.entries[i].layer_index, first.entries[i].shape});
  }
  plan.validate(static_cast<int>(taps.size()));
  std::vector<MatrixRM> data(taps.size());
  for (int o : plan.layers) {
    const auto li = static_cast<std::size_t>(o - 1);
    const auto width = static_cast<Eigen::Index>(taps[li].shape.size());
    data[li].resize(static_cast<Eigen::Index>(sequences.size()), width);
    for (std::size_t s = 0; s < sequences.size(); ++s) {
      const auto& e = sequences[s].entries;
      if (e.size() != taps.size() || static_cast<Eigen::Index>(e[li].values.size()) != width) {
        throw ShapeError("activation sequence " + std::to_string(s) + " does not match the tap plan");
      }
      std::copy(e[li].values.begin(), e[li].values.end(), data[li].row(static_cast<Eigen::Index>(s)).data());
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].size() == 0) data[i].resize(0, static_cast<Eigen::Index>(taps[i].shape.size()));
  }
  return fit_reducers(data, taps, plan, d, method, seed);
}

std::vector<MatrixRM> collect_taps(const model::Network& net, const MatrixRM& inputs) {
  const auto& taps = net.tap_plan();
  const Eigen::Index n = inputs.rows();
  std::vector<MatrixRM> out(taps.size());
  for (std::size_t t = 0; t < taps.size(); ++t) out[t].resize(n, static_cast<Eigen::Index>(taps[t].shape.size()));
  constexpr Eigen::Index kChunk = 256;
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index rows = std::min(kChunk, n - start);
    model::Network::Cache cache;
    net.forward_batch(inputs.middleRows(start, rows), &cache);
    for (std::size_t t = 0; t < taps.size(); ++t) {
      out[t].middleRows(start, rows) = cache.outputs[static_cast<std::size_t>(taps[t].layer_index)];
    }
  }
  return out;
}

void save_bank(const std::filesystem::path& dir, const ReducerBank& bank) {
  std::filesystem::create_directories(dir);
  json layers = json::array();
  for (const auto& l : bank.layers()) {
    json meta{{"ordinal", l.ordinal}, {"layer_index", l.layer_index}};
    l.reducer->save(dir, "tap" + std::to_string(l.ordinal), meta);
    layers.push_back(meta);
  }
  json m{{"kind", "reducer_bank"},
         {"method", to_string(bank.method())},
         {"requested_dim", bank.requested_dim()},
         {"target_dim", bank.target_dim()},
         {"dim_capped", bank.dim_capped()},
         {"seed", bank.seed()},
         {"flatten_order", "channel-major, row-major"},
         {"dtype", "float32-le"},
         {"layers", layers}};
  io::write_text(dir / "manifest.json", m.dump(2));
}

ReducerBank load_bank(const std::filesystem::path& dir) {
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  if (m.value("kind", "") != "reducer_bank") throw ConfigError(dir.string() + " is not a reducer bank");
  const auto method = reduction_from_string(m.at("method").get<std::string>());
  std::vector<BankLayer> layers;
  for (const auto& meta : m.at("layers")) {
    std::shared_ptr<const Reducer> r;
    if (meta.at("method") == "pca") {
      r = std::make_shared<PcaReducer>(PcaReducer::load(dir, meta));
    } else {
      r = std::make_shared<UmapReducer>(UmapReducer::load(dir, meta));
    }
    layers.push_back({meta.at("ordinal").get<int>(), meta.at("layer_index").get<int>(), std::move(r)});
  }
  return ReducerBank(method, m.at("requested_dim").get<std::size_t>(), m.at("seed").get<std::uint64_t>(),
                     std::move(layers));
}

}  // namespace trajguard::trajectory
