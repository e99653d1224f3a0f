#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bioenc/audio.hpp"
#include "bioenc/common.hpp"
#include "bioenc/features.hpp"
#include "bioenc/units.hpp"

namespace bioenc {

struct ConvSpec {
  int channels = 0;
  int kernel = 0;
  int stride = 0;
};

/// Encoder shape and masking hyperparameters. Defaults are the desk-scale
/// configuration; the reference base model is 12 layers x 768 units.
struct ModelConfig {
  int sample_rate = 16000;
  // Cumulative stride must be sample_rate / 50 so the encoder emits 50 fps.
  std::vector<ConvSpec> cnn = {{32, 10, 5}, {64, 8, 4}, {128, 4, 4}, {128, 4, 4}};
  int depth = 4;
  int hidden_dim = 128;
  int heads = 4;
  int ffn_dim = 512;
  int proj_dim = 64;
  int num_units = 100;
  double temperature = 0.1;
  int mask_span = 10;
  double mask_start_prob = 0.08;
  double dropout = 0.0;
  // Sinusoidal positional encodings; disabled only by symmetry tests.
  bool positional = true;

  int total_stride() const;
  double frame_rate() const { return static_cast<double>(sample_rate) / total_stride(); }
  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
};

enum class ParamGroup { kCnn, kFrontend, kMaskEmbedding, kTransformer, kPredictor, kClassifier };

const char* to_string(ParamGroup group);

struct Param {
  Mat value;
  Mat grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct ConvLayer {
  ConvSpec spec;
  Param weight;  // (kernel * in_channels) x out_channels
  Param bias;    // 1 x out_channels
};

struct LayerNormParams {
  Param gamma;
  Param beta;
};

struct LinearParams {
  Param weight;  // in x out
  Param bias;    // 1 x out
};

struct TransformerBlock {
  LayerNormParams ln1;
  LinearParams query, key, value, out;
  LayerNormParams ln2;
  LinearParams ffn_in, ffn_out;
};

/// Cosine-similarity unit predictor: projection W, unit embeddings e_c and
/// temperature.
struct PredictorHead {
  Param projection;       // hidden_dim x proj_dim
  Param unit_embeddings;  // k x proj_dim
  double temperature = 0.1;
};

enum class HeadMode { kSoftmaxCe, kSigmoidBce };

/// Mean-pooling followed by a linear layer.
struct ClassifierHead {
  Param weight;  // hidden_dim x C
  Param bias;    // 1 x C
  HeadMode mode = HeadMode::kSoftmaxCe;

  int classes() const { return static_cast<int>(weight.value.cols()); }
};

/// Strided 1-D conv front-end, sinusoidal positions, pre-norm transformer
/// stack, unit predictor and an optional classifier head.
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::vector<ConvLayer> cnn;
  LayerNormParams frontend_norm;
  LinearParams frontend_proj;
  Param mask_embedding;  // 1 x hidden_dim
  std::vector<TransformerBlock> blocks;
  LayerNormParams final_norm;
  PredictorHead predictor;
  std::optional<ClassifierHead> classifier;

  void attach_classifier(int classes, HeadMode mode, std::uint64_t seed);

  using ParamVisitor = std::function<void(const std::string& name, ParamGroup group, Param& param)>;
  using ConstParamVisitor = std::function<void(const std::string& name, ParamGroup group, const Param& param)>;
  /// Visits every parameter in registry order with its unique name.
  void for_each_param(const ParamVisitor& fn);
  void for_each_param(const ConstParamVisitor& fn) const;

  void zero_grad();
  /// Marks CNN parameters trainable or frozen.
  void set_cnn_trainable(bool trainable);
  std::size_t parameter_count() const;

 private:
  ModelConfig config_;
};

/// Masked frame positions over a length-T frame sequence.
struct MaskSpec {
  std::vector<int> masked_positions;  // sorted, unique
  Eigen::Index seq_len = 0;

  bool contains(int t) const;
};

/// Number of encoder frames for `num_samples` input samples.
Eigen::Index encoder_frame_count(const ModelConfig& config, std::size_t num_samples);

/// Conv stack output (T x last channel count) before normalization and
/// projection. Depends only on the CNN parameters.
Mat conv_features(const EncoderModel& model, const AudioClip& clip);

/// Frame embeddings fed to the transformer: conv stack, layer norm and
/// projection to hidden_dim, at 50 fps.
FrameFeatures cnn_encode(const EncoderModel& model, const AudioClip& clip);

/// Span masking: each frame starts a span of `mask_span` frames with
/// probability `mask_start_prob`; spans are clipped at T and may overlap.
MaskSpec sample_mask(Eigen::Index seq_len, const ModelConfig& config, std::uint64_t seed);

struct ForwardOutput {
  FrameFeatures hidden;             // final-layer states after the output norm
  std::vector<Mat> layer_states;    // [0] = transformer input, [l] = block l output
};

/// Inference pass. Masked frames take the mask embedding before positions
/// are added. `keep_layers` fills `layer_states`.
ForwardOutput forward(const EncoderModel& model, const AudioClip& clip, const MaskSpec* mask = nullptr,
                      bool keep_layers = false);

/// Same pass starting from precomputed conv features.
ForwardOutput forward_from_conv(const EncoderModel& model, const Mat& conv, const MaskSpec* mask = nullptr,
                                bool keep_layers = false);

/// p(z_t = c) = softmax_c(cos(h_t W, e_c) / tau), (T x k).
Mat unit_probs(const FrameFeatures& hidden, const PredictorHead& head);

/// -(1/|M|) sum over masked t of log p(z_t). Throws std::invalid_argument on
/// an empty mask or mismatched lengths.
double pretrain_loss(const Mat& probs, const UnitSequence& targets, const MaskSpec& mask);

RowVec mean_pool(const FrameFeatures& hidden);

/// Classifier logits for an unmasked pass; the caller applies softmax or
/// sigmoid. Throws std::logic_error without a classifier head.
RowVec classify(const EncoderModel& model, const AudioClip& clip);
RowVec classify_from_conv(const EncoderModel& model, const Mat& conv);

/// Supervised loss for one instance. `target` is one-hot for softmax_ce and
/// multi-hot for sigmoid_bce (BCE is averaged over classes).
double finetune_loss(const ClassifierHead& head, const RowVec& logits, const RowVec& target);

/// Either a raw clip or cached conv features (frozen-CNN fine-tuning).
struct EncoderInput {
  const AudioClip* clip = nullptr;
  const Mat* conv = nullptr;
};

struct GradOptions {
  double scale = 1.0;  // multiplies the loss before differentiation
  bool train_cnn = true;
  std::uint64_t dropout_seed = 0;
  bool training = false;  // enables dropout when config.dropout > 0
};

/// Masked unit-prediction loss for one clip; accumulates d(scale * loss)
/// into every Param::grad and returns the unscaled loss.
double pretrain_loss_and_grad(EncoderModel& model, const EncoderInput& input, const MaskSpec& mask,
                              const UnitSequence& targets, const GradOptions& opts);

/// Fine-tuning loss through the classifier head, with gradients.
double finetune_loss_and_grad(EncoderModel& model, const EncoderInput& input, const RowVec& target,
                              const GradOptions& opts);

}  // namespace bioenc
