#include "trajguard/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "trajguard/optim.hpp"

namespace trajguard::codec {

using json = nlohmann::json;

void CodecConfig::validate() const {
  if (bottleneck_dim < 1) throw ConfigError("codec bottleneck_dim must be >= 1");
  if (hidden < 1) throw ConfigError("codec hidden width must be >= 1");
  if (lstm_layers < 1) throw ConfigError("codec needs at least one LSTM layer");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("codec dropout must lie in [0,1)");
  if (epochs < 0) throw ConfigError("codec epochs must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("codec lr must be >= 0");
  if (batch_size < 1) throw ConfigError("codec batch_size must be >= 1");
  if (normalization != "entry" && normalization != "layer") {
    throw ConfigError("codec normalization must be 'entry' or 'layer'");
  }
}

json config_to_json(const CodecConfig& c) {
  return {{"bottleneck_dim", c.bottleneck_dim}, {"hidden", c.hidden},   {"lstm_layers", c.lstm_layers},
          {"bidirectional", c.bidirectional},   {"dropout", c.dropout}, {"epochs", c.epochs},
          {"lr", c.lr},                         {"optimizer", "adam"},  {"batch_size", c.batch_size},
          {"seed", c.seed},                     {"normalization", c.normalization}};
}

CodecConfig config_from_json(const json& j) {
  CodecConfig c;
  c.bottleneck_dim = j.value("bottleneck_dim", c.bottleneck_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
  c.bidirectional = j.value("bidirectional", c.bidirectional);
  c.dropout = j.value("dropout", c.dropout);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.normalization = j.value("normalization", c.normalization);
  c.validate();
  return c;
}

namespace {

using Array = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatrixRM sigmoid(const MatrixRM& x) { return (1.0f / (1.0f + (-x.array()).exp())).matrix(); }

struct DirParams {
  const MatrixRM& wx;  // 4H x in
  const MatrixRM& wh;  // 4H x H
  const MatrixRM& b;   // 1 x 4H
};

}  // namespace

Codec::Codec(const CodecConfig& config, std::size_t steps, std::size_t width)
    : config_(config), steps_(steps), width_(width) {
  config_.validate();
  if (steps < 1 || width < 1) throw ShapeError("codec needs trajectories with at least one row and column");
  const auto H = static_cast<Eigen::Index>(config_.hidden);
  const auto D = static_cast<Eigen::Index>(dirs());
  std::mt19937_64 rng(config_.seed);
  auto uniform = [&](Eigen::Index r, Eigen::Index c, double k) {
    std::uniform_real_distribution<float> dist(static_cast<float>(-k), static_cast<float>(k));
    MatrixRM m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  const double k = 1.0 / std::sqrt(static_cast<double>(H));
  params_.resize(head_index() + 4);
  for (int group = 0; group < 2; ++group) {
    for (int l = 0; l < config_.lstm_layers; ++l) {
      const Eigen::Index in = l > 0 ? D * H
                              : group == 0 ? static_cast<Eigen::Index>(width_)
                                           : static_cast<Eigen::Index>(config_.bottleneck_dim);
      for (std::size_t dir = 0; dir < dirs(); ++dir) {
        const auto base = lstm_index(group, l, dir);
        params_[base] = uniform(4 * H, in, k);
        params_[base + 1] = uniform(4 * H, H, k);
        params_[base + 2] = uniform(1, 4 * H, k);
        params_[base + 2].middleCols(H, H).array() += 1.0f;  // forget gate starts open
      }
    }
  }
  const auto B = static_cast<Eigen::Index>(config_.bottleneck_dim);
  const double kb = 1.0 / std::sqrt(static_cast<double>(D * H));
  params_[head_index()] = uniform(B, D * H, kb);
  params_[head_index() + 1] = uniform(1, B, kb);
  params_[head_index() + 2] = uniform(static_cast<Eigen::Index>(width_), D * H, kb);
  params_[head_index() + 3] = uniform(1, static_cast<Eigen::Index>(width_), kb);
  const auto n = static_cast<Eigen::Index>(steps_ * width_);
  mean_ = VectorF::Zero(n);
  scale_ = VectorF::Ones(n);
}

std::size_t Codec::lstm_index(int group, int layer, std::size_t dir) const {
  return ((static_cast<std::size_t>(group) * static_cast<std::size_t>(config_.lstm_layers) +
           static_cast<std::size_t>(layer)) * dirs() + dir) * 3;
}

std::size_t Codec::head_index() const {
  return 2 * static_cast<std::size_t>(config_.lstm_layers) * dirs() * 3;
}

std::vector<std::string> Codec::parameter_names() const {
  std::vector<std::string> names(params_.size());
  for (int group = 0; group < 2; ++group) {
    for (int l = 0; l < config_.lstm_layers; ++l) {
      for (std::size_t dir = 0; dir < dirs(); ++dir) {
        const std::string stem = std::string(group == 0 ? "encoder" : "decoder") + ".l" + std::to_string(l) +
                                 (dir == 0 ? ".fwd" : ".bwd");
        const auto base = lstm_index(group, l, dir);
        names[base] = stem + ".w_input";
        names[base + 1] = stem + ".w_hidden";
        names[base + 2] = stem + ".bias";
      }
    }
  }
  names[head_index()] = "bottleneck.weight";
  names[head_index() + 1] = "bottleneck.bias";
  names[head_index() + 2] = "output.weight";
  names[head_index() + 3] = "output.bias";
  return names;
}

void Codec::set_normalization(VectorF mean, VectorF scale) {
  const auto n = static_cast<Eigen::Index>(steps_ * width_);
  if (mean.size() != n || scale.size() != n) throw ShapeError("normalisation stats do not match the codec shape");
  if ((scale.array() <= 0.0f).any()) throw NumericError("normalisation scale must be positive");
  mean_ = std::move(mean);
  scale_ = std::move(scale);
}

MatrixRM Codec::normalize(const MatrixRM& flat) const {
  if (static_cast<std::size_t>(flat.cols()) != steps_ * width_) {
    throw ShapeError("trajectory has " + std::to_string(flat.cols()) + " values, codec expects " +
                     std::to_string(steps_) + "x" + std::to_string(width_));
  }
  MatrixRM out = flat.rowwise() - mean_.transpose();
  out.array().rowwise() /= scale_.transpose().array();
  return out;
}

std::vector<MatrixRM> Codec::split_steps(const MatrixRM& rows) const {
  std::vector<MatrixRM> xs(steps_);
  const auto w = static_cast<Eigen::Index>(width_);
  for (std::size_t t = 0; t < steps_; ++t) xs[t] = rows.middleCols(static_cast<Eigen::Index>(t) * w, w);
  return xs;
}

namespace {

void dir_forward(const DirParams& p, const std::vector<MatrixRM>& xs, bool reverse,
                 std::vector<MatrixRM>& gates, std::vector<MatrixRM>& cell, std::vector<MatrixRM>& tanh_cell,
                 std::vector<MatrixRM>& hidden) {
  const std::size_t T = xs.size();
  const Eigen::Index B = xs[0].rows();
  const Eigen::Index H = p.wh.cols();
  gates.assign(T, {});
  cell.assign(T, {});
  tanh_cell.assign(T, {});
  hidden.assign(T, {});
  MatrixRM h = MatrixRM::Zero(B, H), c = MatrixRM::Zero(B, H);
  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t t = reverse ? T - 1 - s : s;
    MatrixRM g = xs[t] * p.wx.transpose();
    g.noalias() += h * p.wh.transpose();
    g.rowwise() += p.b.row(0);
    MatrixRM act(B, 4 * H);
    act.leftCols(2 * H) = sigmoid(g.leftCols(2 * H));
    act.middleCols(2 * H, H) = g.middleCols(2 * H, H).array().tanh().matrix();
    act.rightCols(H) = sigmoid(g.rightCols(H));
    c = (act.middleCols(H, H).array() * c.array() + act.leftCols(H).array() * act.middleCols(2 * H, H).array())
            .matrix();
    MatrixRM tc = c.array().tanh().matrix();
    h = (act.rightCols(H).array() * tc.array()).matrix();
    gates[t] = std::move(act);
    cell[t] = c;
    tanh_cell[t] = std::move(tc);
    hidden[t] = h;
  }
}

// Accumulates weight gradients (when given) and input gradients into d_in.
void dir_backward(const DirParams& p, const std::vector<MatrixRM>& xs, bool reverse, const std::vector<MatrixRM>& gates,
                  const std::vector<MatrixRM>& cell, const std::vector<MatrixRM>& tanh_cell,
                  const std::vector<MatrixRM>& hidden, const std::vector<MatrixRM>& dh, MatrixRM* dwx, MatrixRM* dwh,
                  MatrixRM* db, std::vector<MatrixRM>& d_in) {
  const std::size_t T = xs.size();
  const Eigen::Index B = xs[0].rows();
  const Eigen::Index H = p.wh.cols();
  MatrixRM dh_next = MatrixRM::Zero(B, H), dc_next = MatrixRM::Zero(B, H);
  MatrixRM dgates(B, 4 * H);
  for (std::size_t s = T; s-- > 0;) {
    const std::size_t t = reverse ? T - 1 - s : s;
    const bool has_prev = s > 0;
    const std::size_t tp = reverse ? t + 1 : t - 1;
    const Array dht = (dh[t] + dh_next).array();
    const auto& a = gates[t];
    const Array i = a.leftCols(H).array(), f = a.middleCols(H, H).array(), g = a.middleCols(2 * H, H).array(),
                o = a.rightCols(H).array();
    const Array tc = tanh_cell[t].array();
    const Array dc = dht * o * (1.0f - tc * tc) + dc_next.array();
    const Array c_prev = has_prev ? Array(cell[tp].array()) : Array::Zero(B, H);
    dgates.leftCols(H) = (dc * g * i * (1.0f - i)).matrix();
    dgates.middleCols(H, H) = (dc * c_prev * f * (1.0f - f)).matrix();
    dgates.middleCols(2 * H, H) = (dc * i * (1.0f - g * g)).matrix();
    dgates.rightCols(H) = (dht * tc * o * (1.0f - o)).matrix();
    dc_next = (dc * f).matrix();
    if (dwx) {
      dwx->noalias() += dgates.transpose() * xs[t];
      if (has_prev) dwh->noalias() += dgates.transpose() * hidden[tp];
      *db += dgates.colwise().sum();
    }
    d_in[t].noalias() += dgates * p.wx;
    dh_next.noalias() = dgates * p.wh;
  }
}

}  // namespace

std::vector<MatrixRM> Codec::stack_forward(int group, const std::vector<MatrixRM>& xs, std::mt19937_64* dropout_rng,
                                           StackCache& cache) const {
  const auto L = static_cast<std::size_t>(config_.lstm_layers);
  const auto H = static_cast<Eigen::Index>(config_.hidden);
  cache.inputs.assign(L, {});
  cache.masks.assign(L, {});
  cache.dirs.assign(L, std::vector<DirCache>(dirs()));
  std::vector<MatrixRM> cur = xs;
  for (std::size_t l = 0; l < L; ++l) {
    if (l > 0 && dropout_rng && config_.dropout > 0.0) {
      std::bernoulli_distribution keep(1.0 - config_.dropout);
      const float scale = static_cast<float>(1.0 / (1.0 - config_.dropout));
      cache.masks[l].resize(cur.size());
      for (std::size_t t = 0; t < cur.size(); ++t) {
        MatrixRM m(cur[t].rows(), cur[t].cols());
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = keep(*dropout_rng) ? scale : 0.0f;
        cur[t] = cur[t].cwiseProduct(m);
        cache.masks[l][t] = std::move(m);
      }
    }
    cache.inputs[l] = cur;
    std::vector<MatrixRM> out(cur.size());
    for (std::size_t dir = 0; dir < dirs(); ++dir) {
      const auto base = lstm_index(group, static_cast<int>(l), dir);
      auto& dc = cache.dirs[l][dir];
      dir_forward({params_[base], params_[base + 1], params_[base + 2]}, cur, dir == 1, dc.gates, dc.cell,
                  dc.tanh_cell, dc.hidden);
    }
    for (std::size_t t = 0; t < cur.size(); ++t) {
      out[t].resize(cur[t].rows(), static_cast<Eigen::Index>(dirs()) * H);
      for (std::size_t dir = 0; dir < dirs(); ++dir) {
        out[t].middleCols(static_cast<Eigen::Index>(dir) * H, H) = cache.dirs[l][dir].hidden[t];
      }
    }
    cur = std::move(out);
  }
  return cur;
}

std::vector<MatrixRM> Codec::stack_backward(int group, const StackCache& cache, std::vector<MatrixRM> d_out,
                                            std::vector<MatrixRM>* grads) const {
  const auto H = static_cast<Eigen::Index>(config_.hidden);
  for (std::size_t l = static_cast<std::size_t>(config_.lstm_layers); l-- > 0;) {
    const auto& xs = cache.inputs[l];
    std::vector<MatrixRM> d_in(xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t) d_in[t] = MatrixRM::Zero(xs[t].rows(), xs[t].cols());
    for (std::size_t dir = 0; dir < dirs(); ++dir) {
      std::vector<MatrixRM> dh(d_out.size());
      for (std::size_t t = 0; t < d_out.size(); ++t) dh[t] = d_out[t].middleCols(static_cast<Eigen::Index>(dir) * H, H);
      const auto base = lstm_index(group, static_cast<int>(l), dir);
      const auto& dc = cache.dirs[l][dir];
      dir_backward({params_[base], params_[base + 1], params_[base + 2]}, xs, dir == 1, dc.gates, dc.cell,
                   dc.tanh_cell, dc.hidden, dh, grads ? &(*grads)[base] : nullptr,
                   grads ? &(*grads)[base + 1] : nullptr, grads ? &(*grads)[base + 2] : nullptr, d_in);
    }
    if (!cache.masks[l].empty()) {
      for (std::size_t t = 0; t < d_in.size(); ++t) d_in[t] = d_in[t].cwiseProduct(cache.masks[l][t]);
    }
    d_out = std::move(d_in);
  }
  return d_out;
}

void Codec::run(const MatrixRM& normalized, std::mt19937_64* dropout_rng, bool decode, Pass& pass) const {
  const auto H = static_cast<Eigen::Index>(config_.hidden);
  const auto xs = split_steps(normalized);
  stack_forward(0, xs, dropout_rng, pass.enc);
  const auto& top_layer = pass.enc.dirs.back();
  pass.top.resize(normalized.rows(), static_cast<Eigen::Index>(dirs()) * H);
  pass.top.leftCols(H) = top_layer[0].hidden[steps_ - 1];
  if (dirs() == 2) pass.top.rightCols(H) = top_layer[1].hidden[0];
  pass.z = pass.top * params_[head_index()].transpose();
  pass.z.rowwise() += params_[head_index() + 1].row(0);
  if (!decode) return;
  const std::vector<MatrixRM> ds(steps_, pass.z);
  pass.dec_out = stack_forward(1, ds, dropout_rng, pass.dec);
  pass.recon.resize(steps_);
  for (std::size_t t = 0; t < steps_; ++t) {
    pass.recon[t] = pass.dec_out[t] * params_[head_index() + 2].transpose();
    pass.recon[t].rowwise() += params_[head_index() + 3].row(0);
  }
}

double Codec::backward(const MatrixRM& normalized, const Pass& pass, std::vector<MatrixRM>* grads) const {
  const auto H = static_cast<Eigen::Index>(config_.hidden);
  const auto xs = split_steps(normalized);
  const double count = static_cast<double>(normalized.rows()) * static_cast<double>(steps_ * width_);
  double loss = 0.0;
  for (std::size_t t = 0; t < steps_; ++t) {
    loss += (pass.recon[t].cast<double>() - xs[t].cast<double>()).squaredNorm();
  }
  loss /= count;
  if (!grads) return loss;

  const auto hi = head_index();
  std::vector<MatrixRM> d_dec(steps_);
  for (std::size_t t = 0; t < steps_; ++t) {
    const MatrixRM d_rec = (pass.recon[t] - xs[t]) * static_cast<float>(2.0 / count);
    (*grads)[hi + 2].noalias() += d_rec.transpose() * pass.dec_out[t];
    (*grads)[hi + 3] += d_rec.colwise().sum();
    d_dec[t] = d_rec * params_[hi + 2];
  }
  const auto d_ds = stack_backward(1, pass.dec, std::move(d_dec), grads);
  MatrixRM dz = MatrixRM::Zero(pass.z.rows(), pass.z.cols());
  for (const auto& d : d_ds) dz += d;
  (*grads)[hi].noalias() += dz.transpose() * pass.top;
  (*grads)[hi + 1] += dz.colwise().sum();
  const MatrixRM dtop = dz * params_[hi];
  std::vector<MatrixRM> d_enc(steps_, MatrixRM::Zero(pass.top.rows(), pass.top.cols()));
  d_enc[steps_ - 1].leftCols(H) += dtop.leftCols(H);
  if (dirs() == 2) d_enc[0].rightCols(H) += dtop.rightCols(H);
  stack_backward(0, pass.enc, std::move(d_enc), grads);
  return loss;
}

double Codec::loss_and_gradients(const MatrixRM& normalized, std::vector<MatrixRM>* grads) const {
  if (static_cast<std::size_t>(normalized.cols()) != steps_ * width_) throw ShapeError("codec input width mismatch");
  if (grads && grads->size() != params_.size()) {
    grads->resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) (*grads)[i] = MatrixRM::Zero(params_[i].rows(), params_[i].cols());
  }
  Pass pass;
  run(normalized, nullptr, true, pass);
  return backward(normalized, pass, grads);
}

MatrixRM Codec::encode_batch(const MatrixRM& flat) const {
  if (flat.rows() == 0) return MatrixRM(0, static_cast<Eigen::Index>(code_dim()));
  Pass pass;
  run(normalize(flat), nullptr, false, pass);
  return pass.z;
}

TemporalCode Codec::encode(const trajectory::Trajectory& t) const {
  if (static_cast<std::size_t>(t.values.rows()) != steps_ || static_cast<std::size_t>(t.values.cols()) != width_) {
    throw ShapeError("trajectory is " + std::to_string(t.values.rows()) + "x" + std::to_string(t.values.cols()) +
                     ", codec expects " + std::to_string(steps_) + "x" + std::to_string(width_));
  }
  const MatrixRM row = Eigen::Map<const MatrixRM>(t.values.data(), 1, t.values.size());
  const MatrixRM z = encode_batch(row);
  if (!all_finite(std::span<const float>(z.data(), static_cast<std::size_t>(z.size())))) {
    throw NumericError("temporal code has non-finite entries");
  }
  return {{z.data(), z.data() + z.size()}, t.sample_id};
}

MatrixRM Codec::reconstruct_batch(const MatrixRM& flat) const {
  Pass pass;
  run(normalize(flat), nullptr, true, pass);
  MatrixRM out(flat.rows(), flat.cols());
  const auto w = static_cast<Eigen::Index>(width_);
  for (std::size_t t = 0; t < steps_; ++t) out.middleCols(static_cast<Eigen::Index>(t) * w, w) = pass.recon[t];
  out.array().rowwise() *= scale_.transpose().array();
  out.rowwise() += mean_.transpose();
  return out;
}

double Codec::reconstruction_loss_batch(const MatrixRM& flat) const {
  return loss_and_gradients(normalize(flat), nullptr);
}

double Codec::reconstruction_loss(const trajectory::Trajectory& t) const {
  if (static_cast<std::size_t>(t.values.rows()) != steps_ || static_cast<std::size_t>(t.values.cols()) != width_) {
    throw ShapeError("trajectory shape does not match the codec");
  }
  const MatrixRM row = Eigen::Map<const MatrixRM>(t.values.data(), 1, t.values.size());
  return reconstruction_loss_batch(row);
}

MatrixRM Codec::encoder_input_gradient(const MatrixRM& flat, const MatrixRM& dz) const {
  if (dz.rows() != flat.rows() || static_cast<std::size_t>(dz.cols()) != code_dim()) {
    throw ShapeError("code gradient does not match the batch");
  }
  const auto H = static_cast<Eigen::Index>(config_.hidden);
  Pass pass;
  run(normalize(flat), nullptr, false, pass);
  const MatrixRM dtop = dz * params_[head_index()];
  std::vector<MatrixRM> d_enc(steps_, MatrixRM::Zero(flat.rows(), pass.top.cols()));
  d_enc[steps_ - 1].leftCols(H) += dtop.leftCols(H);
  if (dirs() == 2) d_enc[0].rightCols(H) += dtop.rightCols(H);
  const auto dxs = stack_backward(0, pass.enc, std::move(d_enc), nullptr);
  MatrixRM out(flat.rows(), flat.cols());
  const auto w = static_cast<Eigen::Index>(width_);
  for (std::size_t t = 0; t < steps_; ++t) out.middleCols(static_cast<Eigen::Index>(t) * w, w) = dxs[t];
  out.array().rowwise() /= scale_.transpose().array();
  return out;
}

bool Codec::operator==(const Codec& other) const {
  if (steps_ != other.steps_ || width_ != other.width_ || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].rows() != other.params_[i].rows() || params_[i].cols() != other.params_[i].cols()) return false;
    if (std::memcmp(params_[i].data(), other.params_[i].data(), sizeof(float) * params_[i].size()) != 0) {
      return false;
    }
  }
  return mean_ == other.mean_ && scale_ == other.scale_;
}

MatrixRM flatten(const std::vector<trajectory::Trajectory>& trajectories) {
  if (trajectories.empty()) return {};
  const auto rows = trajectories.front().values.rows(), cols = trajectories.front().values.cols();
  MatrixRM flat(static_cast<Eigen::Index>(trajectories.size()), rows * cols);
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& v = trajectories[i].values;
    if (v.rows() != rows || v.cols() != cols) throw ShapeError("trajectories must share one shape");
    std::copy(v.data(), v.data() + v.size(), flat.row(static_cast<Eigen::Index>(i)).data());
  }
  return flat;
}

Codec fit_codec(const MatrixRM& flat, std::size_t steps, std::size_t width, const CodecConfig& config) {
  config.validate();
  if (static_cast<std::size_t>(flat.cols()) != steps * width) throw ShapeError("flattened trajectories do not match LxD");
  if (flat.rows() < 2) throw ConfigError("codec needs at least 2 trajectories");
  if (!all_finite(std::span<const float>(flat.data(), static_cast<std::size_t>(flat.size())))) {
    throw NumericError("non-finite trajectory values");
  }
  Codec codec(config, steps, width);
  const Eigen::RowVectorXd mean = flat.cast<double>().colwise().mean();
  const Eigen::RowVectorXd var =
      (flat.cast<double>().rowwise() - mean).array().square().colwise().sum() / static_cast<double>(flat.rows());
  VectorF scale(flat.cols());
  for (Eigen::Index i = 0; i < flat.cols(); ++i) {
    const double s = std::sqrt(var[i]);
    scale[i] = s > 1e-6 ? static_cast<float>(s) : 1.0f;
  }
  if (config.normalization == "layer") {
    const auto w = static_cast<Eigen::Index>(width);
    for (std::size_t t = 0; t < steps; ++t) {
      const double s = std::sqrt(var.segment(static_cast<Eigen::Index>(t) * w, w).mean());
      scale.segment(static_cast<Eigen::Index>(t) * w, w).setConstant(s > 1e-6 ? static_cast<float>(s) : 1.0f);
    }
  }
  codec.set_normalization(mean.transpose().cast<float>(), scale);
  const MatrixRM norm = codec.normalize(flat);

  auto record = [&](int epoch) {
    const double loss = codec.loss_and_gradients(norm, nullptr);
    if (!std::isfinite(loss)) throw NumericError("codec loss became non-finite at epoch " + std::to_string(epoch));
    codec.loss_log_.push_back(loss);
  };
  record(0);

  Adam adam(config.lr);
  std::mt19937_64 rng(mix_seed(config.seed, 0xc0dec));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(flat.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<MatrixRM> grads(codec.params_.size());
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      MatrixRM batch(static_cast<Eigen::Index>(end - start), norm.cols());
      for (std::size_t i = start; i < end; ++i) batch.row(static_cast<Eigen::Index>(i - start)) = norm.row(order[i]);
      for (std::size_t p = 0; p < grads.size(); ++p) {
        grads[p] = MatrixRM::Zero(codec.params_[p].rows(), codec.params_[p].cols());
      }
      Codec::Pass pass;
      codec.run(batch, &rng, true, pass);
      codec.backward(batch, pass, &grads);
      std::vector<std::span<float>> ps;
      std::vector<std::span<const float>> gs;
      for (std::size_t p = 0; p < grads.size(); ++p) {
        ps.emplace_back(codec.params_[p].data(), static_cast<std::size_t>(codec.params_[p].size()));
        gs.emplace_back(grads[p].data(), static_cast<std::size_t>(grads[p].size()));
      }
      adam.step(ps, gs);
    }
    record(epoch);
  }
  return codec;
}

Codec fit_codec(const std::vector<trajectory::Trajectory>& trajectories, const CodecConfig& config) {
  if (trajectories.empty()) throw ConfigError("no trajectories to fit the codec on");
  const auto& first = trajectories.front().values;
  return fit_codec(flatten(trajectories), static_cast<std::size_t>(first.rows()),
                   static_cast<std::size_t>(first.cols()), config);
}

void save_codec(const std::filesystem::path& dir, const Codec& codec) {
  std::filesystem::create_directories(dir);
  const auto names = codec.parameter_names();
  json params = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& p = codec.parameters()[i];
    const std::string file = names[i] + ".bin";
    io::write_f32(dir / file, {p.data(), static_cast<std::size_t>(p.size())});
    params.push_back({{"name", names[i]}, {"shape", {p.rows(), p.cols()}}, {"file", file}});
  }
  io::write_f32(dir / "norm_mean.bin", {codec.norm_mean().data(), static_cast<std::size_t>(codec.norm_mean().size())});
  io::write_f32(dir / "norm_scale.bin",
                {codec.norm_scale().data(), static_cast<std::size_t>(codec.norm_scale().size())});
  json m{{"kind", "temporal_codec"},
         {"config", config_to_json(codec.config())},
         {"steps", codec.steps()},
         {"width", codec.width()},
         {"bottleneck", "concat(final forward state, final backward state) -> linear"},
         {"normalization", {{"mean", "norm_mean.bin"}, {"scale", "norm_scale.bin"}, {"kind", "per-entry z-score"}}},
         {"loss_log", codec.loss_log()},
         {"dtype", "float32-le"},
         {"params", params}};
  io::write_text(dir / "manifest.json", m.dump(2));
}

Codec load_codec(const std::filesystem::path& dir) {
  const json m = json::parse(io::read_text(dir / "manifest.json"));
  if (m.value("kind", "") != "temporal_codec") throw ConfigError(dir.string() + " is not a codec archive");
  Codec codec(config_from_json(m.at("config")), m.at("steps").get<std::size_t>(), m.at("width").get<std::size_t>());
  const auto names = codec.parameter_names();
  const auto& params = m.at("params");
  if (params.size() != names.size()) throw ShapeError("codec archive has the wrong parameter count");
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& p = codec.params_[i];
    if (params[i].at("name") != names[i]) throw ShapeError("codec archive parameter order differs");
    const auto v = io::read_f32(dir / params[i].at("file").get<std::string>(), static_cast<std::size_t>(p.size()));
    std::copy(v.begin(), v.end(), p.data());
  }
  const auto n = codec.steps() * codec.width();
  const auto mean = io::read_f32(dir / "norm_mean.bin", n);
  const auto scale = io::read_f32(dir / "norm_scale.bin", n);
  codec.set_normalization(Eigen::Map<const VectorF>(mean.data(), static_cast<Eigen::Index>(n)),
                          Eigen::Map<const VectorF>(scale.data(), static_cast<Eigen::Index>(n)));
  codec.loss_log_ = m.value("loss_log", std::vector<double>{});
  return codec;
}

}  // namespace trajguard::codec
