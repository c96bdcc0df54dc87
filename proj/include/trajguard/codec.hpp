#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "trajguard/common.hpp"
#include "trajguard/trajectory.hpp"
#include "json.hpp"

namespace trajguard::codec {

struct CodecConfig {
  std::size_t bottleneck_dim = 32;
  std::size_t hidden = 32;  // per direction
  int lstm_layers = 2;
  bool bidirectional = true;
  double dropout = 0.2;
  int epochs = 100;
  double lr = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
  // "entry": z-score every (layer, component); "layer": per-entry mean, one scale per layer
  std::string normalization = "entry";

  void validate() const;
};

nlohmann::json config_to_json(const CodecConfig& c);
CodecConfig config_from_json(const nlohmann::json& j);

struct TemporalCode {
  std::vector<float> z;
  std::uint64_t sample_id = 0;
};

/// Bidirectional LSTM encoder-decoder over the layer axis of a trajectory.
/// Trajectories travel in flattened form (one row of L*d values, layer-major)
/// and are z-scored per entry with statistics frozen at fit time.
class Codec {
 public:
  Codec(const CodecConfig& config, std::size_t steps, std::size_t width);

  const CodecConfig& config() const noexcept { return config_; }
  std::size_t steps() const noexcept { return steps_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t code_dim() const noexcept { return config_.bottleneck_dim; }
  const std::vector<double>& loss_log() const noexcept { return loss_log_; }

  const VectorF& norm_mean() const noexcept { return mean_; }
  const VectorF& norm_scale() const noexcept { return scale_; }
  void set_normalization(VectorF mean, VectorF scale);

  TemporalCode encode(const trajectory::Trajectory& t) const;
  MatrixRM encode_batch(const MatrixRM& flat) const;  // N x (L*d) -> N x bottleneck
  // Decoder output for each row, mapped back to trajectory units.
  MatrixRM reconstruct_batch(const MatrixRM& flat) const;
  // MSE between decoder output and the normalised input.
  double reconstruction_loss(const trajectory::Trajectory& t) const;
  double reconstruction_loss_batch(const MatrixRM& flat) const;

  // d<dz, z(t)>/dt in trajectory units, one row per sample.
  MatrixRM encoder_input_gradient(const MatrixRM& flat, const MatrixRM& dz) const;

  // Eval-mode loss on normalised rows; accumulates parameter gradients when given.
  double loss_and_gradients(const MatrixRM& normalized, std::vector<MatrixRM>* grads) const;
  MatrixRM normalize(const MatrixRM& flat) const;

  std::vector<MatrixRM>& parameters() noexcept { return params_; }
  const std::vector<MatrixRM>& parameters() const noexcept { return params_; }
  std::vector<std::string> parameter_names() const;

  bool operator==(const Codec& other) const;

 private:
  friend Codec fit_codec(const MatrixRM&, std::size_t, std::size_t, const CodecConfig&);
  friend Codec load_codec(const std::filesystem::path&);

  struct DirCache {
    std::vector<MatrixRM> gates, cell, tanh_cell, hidden;
  };
  struct StackCache {
    std::vector<std::vector<MatrixRM>> inputs;  // per layer, the (masked) input sequence
    std::vector<std::vector<MatrixRM>> masks;   // per layer > 0, dropout masks
    std::vector<std::vector<DirCache>> dirs;    // per layer, per direction
  };
  struct Pass {
    StackCache enc, dec;
    MatrixRM top;   // concatenated final states feeding the bottleneck
    MatrixRM z;
    std::vector<MatrixRM> dec_out;
    std::vector<MatrixRM> recon;
  };

  std::size_t dirs() const noexcept { return config_.bidirectional ? 2 : 1; }
  std::size_t lstm_index(int group, int layer, std::size_t dir) const;
  std::size_t head_index() const;

  std::vector<MatrixRM> split_steps(const MatrixRM& rows) const;
  std::vector<MatrixRM> stack_forward(int group, const std::vector<MatrixRM>& xs, std::mt19937_64* dropout_rng,
                                      StackCache& cache) const;
  std::vector<MatrixRM> stack_backward(int group, const StackCache& cache, std::vector<MatrixRM> d_out,
                                       std::vector<MatrixRM>* grads) const;
  void run(const MatrixRM& normalized, std::mt19937_64* dropout_rng, bool decode, Pass& pass) const;
  double backward(const MatrixRM& normalized, const Pass& pass, std::vector<MatrixRM>* grads) const;

  CodecConfig config_;
  std::size_t steps_ = 0, width_ = 0;
  std::vector<MatrixRM> params_;
  VectorF mean_, scale_;
  std::vector<double> loss_log_;
};

MatrixRM flatten(const std::vector<trajectory::Trajectory>& trajectories);

/// Trains on benign trajectories. loss_log()[0] is the eval-mode loss before
/// training, entry e the eval-mode loss after epoch e.
Codec fit_codec(const MatrixRM& flat, std::size_t steps, std::size_t width, const CodecConfig& config);
Codec fit_codec(const std::vector<trajectory::Trajectory>& trajectories, const CodecConfig& config);

void save_codec(const std::filesystem::path& dir, const Codec& codec);
Codec load_codec(const std::filesystem::path& dir);

}  // namespace trajguard::codec
