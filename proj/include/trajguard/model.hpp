#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "trajguard/common.hpp"
#include "trajguard/dataset.hpp"
#include "json.hpp"

namespace trajguard::model {

enum class LayerKind { conv, maxpool, dense };
enum class Activation { relu, identity };

std::string to_string(LayerKind k);
std::string to_string(Activation a);

struct LayerDescriptor {
  LayerKind kind = LayerKind::conv;
  int units = 0;   // output channels for conv, width for dense
  int kernel = 3;  // odd conv kernel ("same" padding) or pooling window
  Activation activation = Activation::relu;
};

// The classifier/regressor head (dense to output_arity, identity) is appended
// automatically after the descriptors; it is never tapped.
struct ModelSpec {
  std::vector<LayerDescriptor> layers;
  Shape input_shape;
  int output_arity = 10;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending descriptor.
  void validate() const;
  int tappable_count() const;
};

/// Eight 3x3 conv layers (8-8 | 16-16 | 32-32-32-32 channels) with 2x2 pooling
/// after the second and fourth, followed by the dense head.
ModelSpec desk_cnn_spec(Shape input, int classes, std::uint64_t seed);

struct TapPoint {
  int ordinal = 0;      // 1-based position in the tap plan
  int layer_index = 0;  // index into ModelSpec::layers
  Shape shape;
};

struct LayerActivation {
  int layer_index = 0;
  Shape shape;
  std::vector<float> values;  // channel-major then row-major
};

struct ActivationSequence {
  std::vector<LayerActivation> entries;
  std::uint64_t sample_id = 0;
};

using TapSink = std::function<void(const TapPoint&, std::span<const float>)>;

struct TrainingRecord {
  int epochs_trained = 0;
  std::vector<double> loss_log;  // entry 0 is the pre-training loss
  std::vector<std::uint64_t> train_ids;
};

class Network {
 public:
  struct Layer {
    LayerKind kind = LayerKind::conv;
    Activation activation = Activation::relu;
    Shape in, out;
    int kernel = 1;
    MatrixRM weight;  // conv: Cout x (Cin*k*k); dense: out x in
    VectorF bias;
    int tap_ordinal = 0;  // 0 when the layer is not tapped
  };

  // Per-batch intermediate state kept for the backward pass.
  struct Cache {
    MatrixRM input;                 // B x input size
    std::vector<MatrixRM> outputs;  // layer outputs after activation
    std::vector<MatrixRM> cols;     // im2col buffers for conv layers
    std::vector<std::vector<int>> argmax;  // pooling winners
  };

  struct Gradients {
    std::vector<MatrixRM> weight;
    std::vector<VectorF> bias;
    void zero();
    std::vector<std::span<const float>> spans() const;
  };

  explicit Network(ModelSpec spec);

  const ModelSpec& spec() const noexcept { return spec_; }
  const std::vector<TapPoint>& tap_plan() const noexcept { return taps_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::size_t input_size() const noexcept { return spec_.input_shape.size(); }
  int output_arity() const noexcept { return spec_.output_arity; }
  bool is_classifier() const noexcept { return spec_.output_arity > 1; }

  TrainingRecord& record() noexcept { return record_; }
  const TrainingRecord& record() const noexcept { return record_; }

  std::vector<float> predict(std::span<const float> input) const;
  int classify(std::span<const float> input) const;
  std::vector<int> classify_all(const LabeledDataset& data) const;

  // Prediction plus the full activation sequence in forward order.
  std::pair<std::vector<float>, ActivationSequence> forward_with_taps(std::span<const float> input,
                                                                      std::uint64_t sample_id = 0) const;
  // Invokes the sink with each tapped activation as soon as it is computed.
  std::vector<float> forward_streaming(std::span<const float> input, const TapSink& sink) const;

  MatrixRM forward_batch(const MatrixRM& inputs, Cache* cache) const;
  // Returns d(loss)/d(inputs). tap_grads, when given, holds one B x tap-size
  // matrix per tap ordinal (empty matrices are skipped) added at the tap output.
  MatrixRM backward_batch(const Cache& cache, const MatrixRM& dlogits, Gradients* grads,
                          const std::vector<MatrixRM>* tap_grads = nullptr,
                          bool need_input_grad = true) const;

  // Gradient of <dlogits, f(x)> with respect to x for a single sample.
  std::vector<float> input_gradient(std::span<const float> input, std::span<const float> dlogits) const;

  Gradients make_gradients() const;
  std::vector<std::span<float>> parameter_spans();
  std::vector<std::span<const float>> parameter_spans() const;
  std::vector<std::string> parameter_names() const;
  std::vector<std::vector<int>> parameter_shapes() const;

  bool operator==(const Network& other) const;  // parameter bit-equality

 private:
  void check_input(std::size_t n) const;
  void layer_forward(std::size_t li, const MatrixRM& x, MatrixRM& y, Cache* cache) const;

  ModelSpec spec_;
  std::vector<Layer> layers_;
  std::vector<TapPoint> taps_;
  TrainingRecord record_;
};

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

inline Network build_model(const ModelSpec& spec) { return Network(spec); }

struct TrainOptions {
  int epochs = 20;
  double lr = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
};

// Mean loss (cross-entropy for classifiers, squared error for regressors).
double dataset_loss(const Network& net, const LabeledDataset& data);

// Softmax cross-entropy (or 0.5*squared error) and its logit gradient for a batch.
double loss_and_grad(const Network& net, const MatrixRM& logits, std::span<const float> labels,
                     MatrixRM& dlogits);

// Trains a copy of the model; the data must carry the train split tag.
Network train_model(const Network& model, const LabeledDataset& data, const TrainOptions& options);

double evaluate_cda(const Network& model, const LabeledDataset& clean_set);
double evaluate_asr(const Network& model, const LabeledDataset& triggered_set, int target_label);

MatrixRM batch_inputs(const LabeledDataset& data, std::span<const std::size_t> indices);

void save_checkpoint(const std::filesystem::path& dir, const Network& net);
Network load_checkpoint(const std::filesystem::path& dir);

}  // namespace trajguard::model
