#include "trajguard/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <set>

#include "trajguard/optim.hpp"

namespace trajguard::model {

using json = nlohmann::json;

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::dense: return "dense";
  }
  return "unknown";
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

namespace {

LayerKind kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "dense") return LayerKind::dense;
  throw ConfigError("unknown layer kind '" + s + "'");
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

std::string describe(std::size_t i, const LayerDescriptor& d) {
  return "layer " + std::to_string(i) + " (" + to_string(d.kind) + ")";
}

bool has_conv(const ModelSpec& spec) {
  return std::any_of(spec.layers.begin(), spec.layers.end(),
                     [](const LayerDescriptor& d) { return d.kind == LayerKind::conv; });
}

// cols is (C*k*k) x (B*H*W), row-major; "same" zero padding, stride 1.
void im2col(const MatrixRM& x, const Shape& s, int k, MatrixRM& cols) {
  const int B = static_cast<int>(x.rows());
  const int H = s.height, W = s.width, HW = H * W, pad = k / 2;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * HW;
  cols.resize(static_cast<Eigen::Index>(s.channels) * k * k, N);
  for (int c = 0; c < s.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* dst = cols.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * N;
        for (int b = 0; b < B; ++b) {
          const float* src = x.data() + static_cast<Eigen::Index>(b) * x.cols() + static_cast<Eigen::Index>(c) * HW;
          float* row = dst + static_cast<Eigen::Index>(b) * HW;
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - pad;
            float* out = row + y * W;
            if (sy < 0 || sy >= H) {
              std::fill(out, out + W, 0.0f);
              continue;
            }
            const float* in = src + sy * W;
            for (int xx = 0; xx < W; ++xx) {
              const int sx = xx + kx - pad;
              out[xx] = (sx >= 0 && sx < W) ? in[sx] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im(const MatrixRM& cols, const Shape& s, int k, int B, MatrixRM& dx) {
  const int H = s.height, W = s.width, HW = H * W, pad = k / 2;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * HW;
  dx.setZero(B, static_cast<Eigen::Index>(s.size()));
  for (int c = 0; c < s.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* src = cols.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * N;
        for (int b = 0; b < B; ++b) {
          float* dst = dx.data() + static_cast<Eigen::Index>(b) * dx.cols() + static_cast<Eigen::Index>(c) * HW;
          const float* row = src + static_cast<Eigen::Index>(b) * HW;
          for (int y = 0; y < H; ++y) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= H) continue;
            const float* in = row + y * W;
            float* out = dst + sy * W;
            for (int xx = 0; xx < W; ++xx) {
              const int sx = xx + kx - pad;
              if (sx >= 0 && sx < W) out[sx] += in[xx];
            }
          }
        }
      }
    }
  }
}

}  // namespace

int ModelSpec::tappable_count() const {
  const bool conv = has_conv(*this);
  return static_cast<int>(std::count_if(layers.begin(), layers.end(), [&](const LayerDescriptor& d) {
    return conv ? d.kind == LayerKind::conv : d.kind == LayerKind::dense;
  }));
}

void ModelSpec::validate() const {
  if (input_shape.channels < 1 || input_shape.height < 1 || input_shape.width < 1) {
    throw ConfigError("input shape " + input_shape.str() + " must be positive");
  }
  if (output_arity < 1) throw ConfigError("output_arity must be >= 1");
  Shape s = input_shape;
  bool flat = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& d = layers[i];
    switch (d.kind) {
      case LayerKind::conv:
        if (flat) throw ConfigError(describe(i, d) + ": convolution after a dense layer");
        if (d.units < 1) throw ConfigError(describe(i, d) + ": channel count must be >= 1");
        if (d.kernel < 1 || d.kernel % 2 == 0) throw ConfigError(describe(i, d) + ": kernel must be odd");
        s = {d.units, s.height, s.width};
        break;
      case LayerKind::maxpool:
        if (flat) throw ConfigError(describe(i, d) + ": pooling after a dense layer");
        if (d.kernel < 2 || d.kernel > s.height || d.kernel > s.width) {
          throw ConfigError(describe(i, d) + ": window " + std::to_string(d.kernel) +
                            " does not fit input " + s.str());
        }
        s = {s.channels, s.height / d.kernel, s.width / d.kernel};
        break;
      case LayerKind::dense:
        if (d.units < 1) throw ConfigError(describe(i, d) + ": width must be >= 1");
        flat = true;
        s = {d.units, 1, 1};
        break;
    }
  }
  if (tappable_count() < 4) {
    throw ConfigError("model needs at least 4 tappable layers, spec has " + std::to_string(tappable_count()));
  }
}

ModelSpec desk_cnn_spec(Shape input, int classes, std::uint64_t seed) {
  ModelSpec spec;
  spec.input_shape = input;
  spec.output_arity = classes;
  spec.seed = seed;
  auto conv = [&](int ch) { spec.layers.push_back({LayerKind::conv, ch, 3, Activation::relu}); };
  auto pool = [&] { spec.layers.push_back({LayerKind::maxpool, 0, 2, Activation::identity}); };
  conv(8);
  conv(8);
  pool();
  conv(16);
  conv(16);
  pool();
  conv(32);
  conv(32);
  conv(32);
  conv(32);
  return spec;
}

json spec_to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const auto& d : spec.layers) {
    layers.push_back({{"kind", to_string(d.kind)},
                      {"units", d.units},
                      {"kernel", d.kernel},
                      {"activation", to_string(d.activation)}});
  }
  return {{"layers", layers},
          {"input_shape", {spec.input_shape.channels, spec.input_shape.height, spec.input_shape.width}},
          {"output_arity", spec.output_arity},
          {"seed", spec.seed}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  for (const auto& l : j.at("layers")) {
    LayerDescriptor d;
    d.kind = kind_from_string(l.at("kind").get<std::string>());
    d.units = l.value("units", 0);
    d.kernel = l.value("kernel", d.kind == LayerKind::maxpool ? 2 : 3);
    d.activation = activation_from_string(
        l.value("activation", d.kind == LayerKind::maxpool ? std::string("identity") : std::string("relu")));
    spec.layers.push_back(d);
  }
  const auto shape = j.at("input_shape").get<std::vector<int>>();
  if (shape.size() != 3) throw ConfigError("input_shape needs three entries (C, H, W)");
  spec.input_shape = {shape[0], shape[1], shape[2]};
  spec.output_arity = j.at("output_arity").get<int>();
  spec.seed = j.value("seed", std::uint64_t{0});
  return spec;
}

Network::Network(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(spec_.seed);
  const bool conv_taps = has_conv(spec_);
  Shape s = spec_.input_shape;
  int ordinal = 0;
  auto init_weights = [&](MatrixRM& w, double fan_in, bool relu) {
    std::normal_distribution<double> dist(0.0, std::sqrt((relu ? 2.0 : 1.0) / fan_in));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(dist(rng));
  };
  for (std::size_t i = 0; i <= spec_.layers.size(); ++i) {
    const bool head = i == spec_.layers.size();
    const LayerDescriptor d =
        head ? LayerDescriptor{LayerKind::dense, spec_.output_arity, 1, Activation::identity} : spec_.layers[i];
    Layer layer;
    layer.kind = d.kind;
    layer.activation = d.activation;
    layer.kernel = d.kernel;
    layer.in = s;
    switch (d.kind) {
      case LayerKind::conv: {
        layer.out = {d.units, s.height, s.width};
        const int fan_in = s.channels * d.kernel * d.kernel;
        layer.weight.resize(d.units, fan_in);
        init_weights(layer.weight, fan_in, d.activation == Activation::relu);
        layer.bias = VectorF::Zero(d.units);
        break;
      }
      case LayerKind::maxpool:
        layer.out = {s.channels, s.height / d.kernel, s.width / d.kernel};
        break;
      case LayerKind::dense: {
        const int fan_in = static_cast<int>(s.size());
        layer.out = {d.units, 1, 1};
        layer.weight.resize(d.units, fan_in);
        init_weights(layer.weight, fan_in, d.activation == Activation::relu);
        layer.bias = VectorF::Zero(d.units);
        break;
      }
    }
    if (!head && (conv_taps ? d.kind == LayerKind::conv : d.kind == LayerKind::dense)) {
      layer.tap_ordinal = ++ordinal;
      taps_.push_back({ordinal, static_cast<int>(i), layer.out});
    }
    s = layer.out;
    layers_.push_back(std::move(layer));
  }
}

void Network::check_input(std::size_t n) const {
  if (n != input_size()) {
    throw ShapeError("input shape mismatch: expected " + spec_.input_shape.str() + " (" +
                     std::to_string(input_size()) + " values), received " + std::to_string(n) + " values");
  }
}

void Network::layer_forward(std::size_t li, const MatrixRM& x, MatrixRM& y, Cache* cache) const {
  const Layer& L = layers_[li];
  const Eigen::Index B = x.rows();
  switch (L.kind) {
    case LayerKind::conv: {
      MatrixRM local_cols;
      MatrixRM& cols = cache ? cache->cols[li] : local_cols;
      im2col(x, L.in, L.kernel, cols);
      const MatrixRM out = L.weight * cols;
      const Eigen::Index HW = static_cast<Eigen::Index>(L.out.height) * L.out.width;
      y.resize(B, static_cast<Eigen::Index>(L.out.size()));
      const bool relu = L.activation == Activation::relu;
      for (Eigen::Index b = 0; b < B; ++b) {
        for (int c = 0; c < L.out.channels; ++c) {
          const float* src = out.data() + c * out.cols() + b * HW;
          float* dst = y.data() + b * y.cols() + c * HW;
          const float bias = L.bias[c];
          for (Eigen::Index p = 0; p < HW; ++p) {
            const float v = src[p] + bias;
            dst[p] = relu ? std::max(v, 0.0f) : v;
          }
        }
      }
      break;
    }
    case LayerKind::maxpool: {
      const int k = L.kernel;
      const int C = L.in.channels, H = L.in.height, W = L.in.width;
      const int Ho = L.out.height, Wo = L.out.width;
      y.resize(B, static_cast<Eigen::Index>(L.out.size()));
      std::vector<int>* arg = cache ? &cache->argmax[li] : nullptr;
      if (arg) arg->assign(static_cast<std::size_t>(B * y.cols()), 0);
      for (Eigen::Index b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const float* src = x.data() + b * x.cols() + static_cast<Eigen::Index>(c) * H * W;
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              int best = (oy * k) * W + ox * k;
              for (int dy = 0; dy < k; ++dy) {
                for (int dx = 0; dx < k; ++dx) {
                  const int idx = (oy * k + dy) * W + ox * k + dx;
                  if (src[idx] > src[best]) best = idx;
                }
              }
              const Eigen::Index o = static_cast<Eigen::Index>(c) * Ho * Wo + oy * Wo + ox;
              y(b, o) = src[best];
              if (arg) (*arg)[static_cast<std::size_t>(b * y.cols() + o)] = c * H * W + best;
            }
          }
        }
      }
      break;
    }
    case LayerKind::dense: {
      y.noalias() = x * L.weight.transpose();
      y.rowwise() += L.bias.transpose();
      if (L.activation == Activation::relu) y = y.cwiseMax(0.0f);
      break;
    }
  }
}

MatrixRM Network::forward_batch(const MatrixRM& inputs, Cache* cache) const {
  check_input(static_cast<std::size_t>(inputs.cols()));
  if (cache) {
    cache->input = inputs;
    cache->outputs.assign(layers_.size(), MatrixRM());
    cache->cols.assign(layers_.size(), MatrixRM());
    cache->argmax.assign(layers_.size(), {});
  }
  MatrixRM current = inputs;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    MatrixRM next;
    layer_forward(li, current, next, cache);
    if (cache) cache->outputs[li] = next;
    current = std::move(next);
  }
  return current;
}

MatrixRM Network::backward_batch(const Cache& cache, const MatrixRM& dlogits, Gradients* grads,
                                 const std::vector<MatrixRM>* tap_grads, bool need_input_grad) const {
  MatrixRM g = dlogits;
  const Eigen::Index B = dlogits.rows();
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& L = layers_[li];
    if (tap_grads && L.tap_ordinal > 0) {
      const MatrixRM& extra = (*tap_grads)[static_cast<std::size_t>(L.tap_ordinal - 1)];
      if (extra.size() > 0) g += extra;
    }
    const MatrixRM& out = cache.outputs[li];
    if (L.activation == Activation::relu) {
      for (Eigen::Index i = 0; i < g.size(); ++i) {
        if (!(out.data()[i] > 0.0f)) g.data()[i] = 0.0f;
      }
    }
    const MatrixRM& x = li == 0 ? cache.input : cache.outputs[li - 1];
    const bool want_dx = need_input_grad || li > 0;
    MatrixRM dx;
    switch (L.kind) {
      case LayerKind::dense: {
        if (grads) {
          grads->weight[li].noalias() += g.transpose() * x;
          grads->bias[li] += g.colwise().sum().transpose();
        }
        if (want_dx) dx.noalias() = g * L.weight;
        break;
      }
      case LayerKind::conv: {
        const Eigen::Index HW = static_cast<Eigen::Index>(L.out.height) * L.out.width;
        MatrixRM G(L.out.channels, B * HW);
        for (Eigen::Index b = 0; b < B; ++b) {
          for (int c = 0; c < L.out.channels; ++c) {
            std::memcpy(G.data() + c * G.cols() + b * HW, g.data() + b * g.cols() + c * HW,
                        sizeof(float) * static_cast<std::size_t>(HW));
          }
        }
        if (grads) {
          grads->weight[li].noalias() += G * cache.cols[li].transpose();
          grads->bias[li] += G.rowwise().sum();
        }
        if (want_dx) {
          const MatrixRM dcols = L.weight.transpose() * G;
          col2im(dcols, L.in, L.kernel, static_cast<int>(B), dx);
        }
        break;
      }
      case LayerKind::maxpool: {
        if (want_dx) {
          dx.setZero(B, static_cast<Eigen::Index>(L.in.size()));
          const auto& arg = cache.argmax[li];
          for (Eigen::Index b = 0; b < B; ++b) {
            for (Eigen::Index o = 0; o < g.cols(); ++o) {
              dx(b, arg[static_cast<std::size_t>(b * g.cols() + o)]) += g(b, o);
            }
          }
        }
        break;
      }
    }
    if (!want_dx) return {};
    g = std::move(dx);
  }
  return g;
}

std::vector<float> Network::forward_streaming(std::span<const float> input, const TapSink& sink) const {
  check_input(input.size());
  MatrixRM current = Eigen::Map<const MatrixRM>(input.data(), 1, static_cast<Eigen::Index>(input.size()));
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    MatrixRM next;
    layer_forward(li, current, next, nullptr);
    const Layer& L = layers_[li];
    if (sink && L.tap_ordinal > 0) {
      sink(taps_[static_cast<std::size_t>(L.tap_ordinal - 1)],
           std::span<const float>(next.data(), static_cast<std::size_t>(next.size())));
    }
    current = std::move(next);
  }
  return {current.data(), current.data() + current.size()};
}

std::vector<float> Network::predict(std::span<const float> input) const {
  return forward_streaming(input, nullptr);
}

int Network::classify(std::span<const float> input) const {
  const auto logits = predict(input);
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::vector<int> Network::classify_all(const LabeledDataset& data) const {
  std::vector<int> out;
  out.reserve(data.size());
  constexpr std::size_t kChunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
    const MatrixRM logits = forward_batch(batch_inputs(data, idx), nullptr);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index best = 0;
      logits.row(r).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

std::pair<std::vector<float>, ActivationSequence> Network::forward_with_taps(std::span<const float> input,
                                                                             std::uint64_t sample_id) const {
  ActivationSequence seq;
  seq.sample_id = sample_id;
  seq.entries.reserve(taps_.size());
  auto logits = forward_streaming(input, [&](const TapPoint& tap, std::span<const float> values) {
    seq.entries.push_back({tap.layer_index, tap.shape, {values.begin(), values.end()}});
  });
  return {std::move(logits), std::move(seq)};
}

std::vector<float> Network::input_gradient(std::span<const float> input, std::span<const float> dlogits) const {
  check_input(input.size());
  if (dlogits.size() != static_cast<std::size_t>(spec_.output_arity)) {
    throw ShapeError("logit gradient has " + std::to_string(dlogits.size()) + " entries, expected " +
                     std::to_string(spec_.output_arity));
  }
  Cache cache;
  const MatrixRM x = Eigen::Map<const MatrixRM>(input.data(), 1, static_cast<Eigen::Index>(input.size()));
  forward_batch(x, &cache);
  const MatrixRM g = Eigen::Map<const MatrixRM>(dlogits.data(), 1, static_cast<Eigen::Index>(dlogits.size()));
  const MatrixRM dx = backward_batch(cache, g, nullptr);
  return {dx.data(), dx.data() + dx.size()};
}

void Network::Gradients::zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

std::vector<std::span<const float>> Network::Gradients::spans() const {
  std::vector<std::span<const float>> out;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i].size() == 0) continue;
    out.emplace_back(weight[i].data(), static_cast<std::size_t>(weight[i].size()));
    out.emplace_back(bias[i].data(), static_cast<std::size_t>(bias[i].size()));
  }
  return out;
}

Network::Gradients Network::make_gradients() const {
  Gradients g;
  for (const auto& L : layers_) {
    g.weight.push_back(MatrixRM::Zero(L.weight.rows(), L.weight.cols()));
    g.bias.push_back(VectorF::Zero(L.bias.size()));
  }
  return g;
}

std::vector<std::span<float>> Network::parameter_spans() {
  std::vector<std::span<float>> out;
  for (auto& L : layers_) {
    if (L.weight.size() == 0) continue;
    out.emplace_back(L.weight.data(), static_cast<std::size_t>(L.weight.size()));
    out.emplace_back(L.bias.data(), static_cast<std::size_t>(L.bias.size()));
  }
  return out;
}

std::vector<std::span<const float>> Network::parameter_spans() const {
  std::vector<std::span<const float>> out;
  for (const auto& L : layers_) {
    if (L.weight.size() == 0) continue;
    out.emplace_back(L.weight.data(), static_cast<std::size_t>(L.weight.size()));
    out.emplace_back(L.bias.data(), static_cast<std::size_t>(L.bias.size()));
  }
  return out;
}

std::vector<std::string> Network::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].weight.size() == 0) continue;
    out.push_back("layer" + std::to_string(i) + ".weight");
    out.push_back("layer" + std::to_string(i) + ".bias");
  }
  return out;
}

std::vector<std::vector<int>> Network::parameter_shapes() const {
  std::vector<std::vector<int>> out;
  for (const auto& L : layers_) {
    if (L.weight.size() == 0) continue;
    out.push_back({static_cast<int>(L.weight.rows()), static_cast<int>(L.weight.cols())});
    out.push_back({static_cast<int>(L.bias.size())});
  }
  return out;
}

bool Network::operator==(const Network& other) const {
  const auto a = parameter_spans();
  const auto b = other.parameter_spans();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(float)) != 0) return false;
  }
  return true;
}

MatrixRM batch_inputs(const LabeledDataset& data, std::span<const std::size_t> indices) {
  const auto D = static_cast<Eigen::Index>(data.shape.size());
  MatrixRM x(static_cast<Eigen::Index>(indices.size()), D);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto s = data.sample(indices[r]);
    std::copy(s.begin(), s.end(), x.data() + static_cast<Eigen::Index>(r) * D);
  }
  return x;
}

double loss_and_grad(const Network& net, const MatrixRM& logits, std::span<const float> labels,
                     MatrixRM& dlogits) {
  const Eigen::Index B = logits.rows();
  dlogits.resize(B, logits.cols());
  double total = 0.0;
  if (net.is_classifier()) {
    for (Eigen::Index r = 0; r < B; ++r) {
      const int y = static_cast<int>(labels[static_cast<std::size_t>(r)]);
      if (y < 0 || y >= logits.cols()) throw ShapeError("label " + std::to_string(y) + " outside class range");
      const float mx = logits.row(r).maxCoeff();
      double denom = 0.0;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) denom += std::exp(static_cast<double>(logits(r, c) - mx));
      const double log_denom = std::log(denom);
      total += log_denom - static_cast<double>(logits(r, y) - mx);
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const double p = std::exp(static_cast<double>(logits(r, c) - mx) - log_denom);
        dlogits(r, c) = static_cast<float>((p - (c == y ? 1.0 : 0.0)) / static_cast<double>(B));
      }
    }
  } else {
    for (Eigen::Index r = 0; r < B; ++r) {
      const double diff = static_cast<double>(logits(r, 0)) - labels[static_cast<std::size_t>(r)];
      total += 0.5 * diff * diff;
      dlogits(r, 0) = static_cast<float>(diff / static_cast<double>(B));
    }
  }
  return total / static_cast<double>(B);
}

double dataset_loss(const Network& net, const LabeledDataset& data) {
  if (data.empty()) throw Error("cannot compute loss of an empty dataset");
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  std::vector<std::size_t> idx;
  MatrixRM dl;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
    const MatrixRM logits = net.forward_batch(batch_inputs(data, idx), nullptr);
    total += loss_and_grad(net, logits, std::span<const float>(data.labels).subspan(start, idx.size()), dl) *
             static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

Network train_model(const Network& model, const LabeledDataset& data, const TrainOptions& options) {
  if (data.split != Split::train) {
    throw ConfigError("train_model requires a dataset tagged 'train', got '" + to_string(data.split) + "'");
  }
  data.validate();
  if (data.empty()) throw ConfigError("train_model: empty training set");
  if (options.epochs < 0 || options.batch_size < 1) throw ConfigError("train_model: invalid epochs/batch size");
  Network net = model;
  if (options.epochs == 0) return net;

  auto& rec = net.record();
  rec.loss_log.push_back(dataset_loss(net, data));
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Adam opt(options.lr, 0.9, 0.999, 1e-8, options.weight_decay);
  auto grads = net.make_gradients();
  Network::Cache cache;
  MatrixRM dlogits;
  std::vector<float> labels;
  const auto params = net.parameter_spans();
  const auto grad_spans = grads.spans();
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      labels.clear();
      for (std::size_t i : idx) labels.push_back(data.labels[i]);
      const MatrixRM logits = net.forward_batch(batch_inputs(data, idx), &cache);
      const double loss = loss_and_grad(net, logits, labels, dlogits);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite training loss " + std::to_string(loss) + " at epoch " +
                           std::to_string(epoch) + ", batch starting at " + std::to_string(start) +
                           " (lr " + std::to_string(options.lr) + ")");
      }
      grads.zero();
      net.backward_batch(cache, dlogits, &grads, nullptr, false);
      opt.step(params, grad_spans);
      epoch_loss += loss * static_cast<double>(idx.size());
      seen += idx.size();
    }
    rec.loss_log.push_back(epoch_loss / static_cast<double>(seen));
  }
  rec.epochs_trained += options.epochs;
  std::set<std::uint64_t> ids(rec.train_ids.begin(), rec.train_ids.end());
  ids.insert(data.ids.begin(), data.ids.end());
  rec.train_ids.assign(ids.begin(), ids.end());
  return net;
}

double evaluate_cda(const Network& model, const LabeledDataset& clean_set) {
  if (!model.is_classifier()) throw ConfigError("CDA requires a classification model");
  if (clean_set.empty()) throw Error("CDA: empty clean set");
  const auto pred = model.classify_all(clean_set);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == clean_set.label(i) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double evaluate_asr(const Network& model, const LabeledDataset& triggered_set, int target_label) {
  if (!model.is_classifier()) throw ConfigError("ASR requires a classification model");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < triggered_set.size(); ++i) {
    if (triggered_set.label(i) != target_label) keep.push_back(i);
  }
  if (keep.empty()) throw Error("ASR: no triggered samples left after excluding the target class");
  const auto pred = model.classify_all(triggered_set.subset(keep));
  const auto hits = std::count(pred.begin(), pred.end(), target_label);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

void save_checkpoint(const std::filesystem::path& dir, const Network& net) {
  std::filesystem::create_directories(dir);
  json params = json::array();
  const auto names = net.parameter_names();
  const auto shapes = net.parameter_shapes();
  const auto spans = net.parameter_spans();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::string file = names[i] + ".bin";
    io::write_f32(dir / file, spans[i]);
    params.push_back({{"name", names[i]}, {"shape", shapes[i]}, {"file", file}});
  }
  json m;
  m["kind"] = "model_checkpoint";
  m["spec"] = spec_to_json(net.spec());
  m["seed"] = net.spec().seed;
  m["epochs"] = net.record().epochs_trained;
  m["metric_log"] = {{"loss", net.record().loss_log}};
  m["train_ids"] = net.record().train_ids;
  m["dtype"] = "float32-le";
  m["params"] = params;
  io::write_text(dir / "manifest.json", m.dump(2));
}

Network load_checkpoint(const std::filesystem::path& dir) {
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  if (m.value("kind", "") != "model_checkpoint") throw ConfigError(dir.string() + " is not a model checkpoint");
  Network net(spec_from_json(m.at("spec")));
  auto spans = net.parameter_spans();
  const auto names = net.parameter_names();
  const auto& params = m.at("params");
  if (params.size() != spans.size()) throw ShapeError("checkpoint parameter count does not match its spec");
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (params[i].at("name").get<std::string>() != names[i]) {
      throw ShapeError("checkpoint parameter " + std::to_string(i) + " is named " +
                       params[i].at("name").get<std::string>() + ", expected " + names[i]);
    }
    const auto values = io::read_f32(dir / params[i].at("file").get<std::string>(), spans[i].size());
    std::copy(values.begin(), values.end(), spans[i].begin());
  }
  auto& rec = net.record();
  rec.epochs_trained = m.value("epochs", 0);
  rec.loss_log = m.at("metric_log").value("loss", std::vector<double>{});
  rec.train_ids = m.value("train_ids", std::vector<std::uint64_t>{});
  return net;
}

}  // namespace trajguard::model
