#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bioenc/audio.hpp"
#include "bioenc/checkpoint.hpp"
#include "bioenc/model.hpp"
#include "bioenc/units.hpp"

namespace bioenc {

// ---------------------------------------------------------------------------
// Adam

struct AdamMoments {
  Mat m;
  Mat v;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, AdamMoments> moments;
};

struct NamedParam {
  std::string name;
  Param* param;
};

/// Trainable parameters of `model` in registry order. With `exclude_cnn`,
/// CNN tensors are left out entirely.
std::vector<NamedParam> optimizer_params(EncoderModel& model, bool exclude_cnn);

/// One bias-corrected Adam update. Throws NumericError naming the first
/// parameter whose gradient is non-finite; nothing is modified in that case.
/// Parameters and moments are rounded to f32 after the update.
void adam_step(std::span<const NamedParam> params, AdamState& state, double lr);

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
double clip_grad_norm(std::span<const NamedParam> params, double max_norm);

void put_adam(CheckpointContainer& c, const AdamState& state);
AdamState get_adam(const CheckpointContainer& c);

// ---------------------------------------------------------------------------
// Pretraining

/// Reference values for the base model: lr 2e-4, 700 s of audio per step,
/// 100k steps. Defaults are desk scale.
struct PretrainConfig {
  double lr = 5e-4;
  double batch_seconds = 8.0;
  int total_steps = 200;
  int stage = 1;
  std::uint64_t seed = 0;
  int warmup_steps = -1;  // < 0: 8% of total_steps
  double clip_grad_norm = 1.0;
  int checkpoint_every = 0;  // 0: only at the end

  int effective_warmup() const;
  void validate() const;
};

nlohmann::json to_json(const PretrainConfig& cfg);

struct StepLog {
  int step = 0;
  int stage = 1;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct PretrainHooks {
  std::function<void(const StepLog&)> on_step;
  // Called every checkpoint_every steps and after the final step.
  std::function<void(int step, const EncoderModel&, const AdamState&)> on_checkpoint;
};

/// Masked unit-prediction training. Each step packs randomly ordered clips
/// until `batch_seconds` is reached, samples one mask per clip and averages
/// the per-clip losses. Continues from `state.step`. Returns the per-step loss
/// trace for the steps run here.
std::vector<double> pretrain(EncoderModel& model, std::span<const AudioClip> corpus,
                             std::span<const UnitSequence> units, const PretrainConfig& cfg, AdamState& state,
                             const PretrainHooks& hooks = {});

/// Maps units computed at `units.frame_rate` onto `frames` encoder frames at
/// `frame_rate` by nearest preceding source frame.
UnitSequence align_units(const UnitSequence& units, double frame_rate, Eigen::Index frames);

enum class StageInit { kFresh, kContinue };

struct TwoStageConfig {
  ModelConfig model;
  PretrainConfig stage1;
  PretrainConfig stage2;
  KMeansOptions kmeans;  // k is taken from model.num_units
  int layer = -1;        // < 0: depth / 2
  StageInit stage2_init = StageInit::kFresh;
  bool stage1_only = false;
  std::uint64_t seed = 0;
};

struct TwoStageResult {
  EncoderModel stage1_model;
  EncoderModel model;  // final model (stage 2 unless stage1_only)
  Codebook codebook1;
  Codebook codebook2;
  std::vector<UnitSequence> units1;
  std::vector<UnitSequence> units2;
  std::vector<double> trace1;
  std::vector<double> trace2;
  AdamState adam1;
  AdamState adam2;
  int layer = 0;

  /// Stage-2 (or stage-1) checkpoint with both codebooks, loss traces,
  /// seeds and configs in its metadata.
  CheckpointContainer final_checkpoint(const TwoStageConfig& cfg) const;
  CheckpointContainer stage1_checkpoint(const TwoStageConfig& cfg) const;
};

struct TwoStageHooks {
  PretrainHooks stage1;
  PretrainHooks stage2;
};

/// Stage 1: MFCC -> k-means -> pretrain. Stage 2: re-cluster layer states of
/// the stage-1 model -> pretrain. Clips must be at the model sample rate.
TwoStageResult run_two_stage(std::span<const AudioClip> corpus, const TwoStageConfig& cfg,
                             const TwoStageHooks& hooks = {});

// ---------------------------------------------------------------------------
// Fine-tuning

enum class Task { kClassification, kDetection };

const char* to_string(Task task);

/// Reference protocol: Adam, batch 32, lr sweep {1e-5, 5e-5, 1e-4}, 50 epochs.
struct FinetuneConfig {
  std::vector<double> lrs = {1e-5, 5e-5, 1e-4};
  int epochs = 50;
  int batch_size = 32;
  Task task = Task::kClassification;
  bool freeze_cnn = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::string selection_metric() const { return task == Task::kClassification ? "accuracy" : "map"; }
};

nlohmann::json to_json(const FinetuneConfig& cfg);

/// One training instance: a clip (or window) and its target row. Targets are
/// one-hot for classification and multi-hot for detection.
struct Example {
  AudioClip clip;
  RowVec target;
};

struct LabeledSplits {
  std::vector<Example> train;
  std::vector<Example> valid;
  int num_classes = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_metric = 0.0;
  double valid_metric = 0.0;
};

struct SweepRun {
  double lr = 0.0;
  std::vector<EpochRecord> epochs;
};

struct SweepReport {
  std::string metric_name;
  std::vector<SweepRun> runs;
  double best_lr = 0.0;
  int best_epoch = 0;
  double best_metric = -1.0;

  nlohmann::json to_json() const;
};

struct FinetuneResult {
  EncoderModel best;
  SweepReport report;
};

/// Attaches a classifier head (softmax_ce or sigmoid_bce by task), trains one
/// copy of `pretrained` per learning rate and keeps the (lr, epoch) with the
/// best validation metric; earlier candidates win ties. CNN tensors are
/// excluded from the optimizer when freeze_cnn is set.
FinetuneResult finetune(const EncoderModel& pretrained, const LabeledSplits& data, const FinetuneConfig& cfg);

/// Accuracy (argmax, ties to the lowest class) or mAP of sigmoid scores.
double evaluate(const EncoderModel& model, std::span<const Example> examples, Task task);

/// Sigmoid or softmax class scores for every example, (N x C).
Mat predict_scores(const EncoderModel& model, std::span<const Example> examples);

}  // namespace bioenc
