#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bioenc/eval.hpp"
#include "bioenc/train.hpp"

namespace bioenc {

// ---------------------------------------------------------------------------
// Configuration: flat "key = value" text, '#' starts a comment.
//
//   model.cnn                 channels:kernel:stride,...   (32:10:5,64:8:4,128:4:4,128:4:4)
//   model.depth               transformer blocks           (4)
//   model.hidden_dim          (128)
//   model.heads               (4)
//   model.ffn_dim             (512)
//   model.proj_dim            (64)
//   model.num_units           k for both k-means stages    (100)
//   model.temperature         (0.1)
//   model.mask_span           (10)
//   model.mask_start_prob     (0.08)
//   model.dropout             (0)
//   pretrain.lr               (5e-4)
//   pretrain.batch_seconds    (8)
//   pretrain.steps            both stages                  (200)
//   pretrain.stage1_steps / pretrain.stage2_steps
//   pretrain.warmup_steps     -1 = 8% of steps             (-1)
//   pretrain.clip_grad_norm   0 disables                   (1)
//   pretrain.checkpoint_every 0 = final only               (0)
//   pretrain.layer            stage-2 layer, -1 = depth/2  (-1)
//   pretrain.init             fresh | continue             (fresh)
//   kmeans.max_iters          (100)
//   kmeans.max_frames         (200000)
//   finetune.lrs              comma list                   (1e-5,5e-5,1e-4)
//   finetune.epochs           (50)
//   finetune.batch_size       (8)
//   finetune.freeze_cnn       true | false                 (true)
//   detect.threshold          (0.5)
//   detect.min_overlap        seconds                      (0)

struct RunConfig {
  ModelConfig model;
  PretrainConfig stage1;
  PretrainConfig stage2;
  KMeansOptions kmeans;
  int layer = -1;
  StageInit stage2_init = StageInit::kFresh;
  FinetuneConfig finetune;
  double threshold = 0.5;
  double min_overlap_s = 0.0;

  RunConfig();
};

/// Throws ConfigError naming the key when it is unknown or the value does
/// not parse.
void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
const std::vector<std::string>& config_keys();

// ---------------------------------------------------------------------------
// Dataset manifests: a JSON header plus a JSONL file with one entry per
// recording. Paths in the entries file are relative to the header.
//
// header: {"dataset_id": "...", "task": "unlabeled|classification|detection",
//          "classes": [...], "window_s": 1.0, "hop_s": 0.5,
//          "entries": "entries.jsonl"}
// entry:  {"path": "...", "recording_id": "...", "split": "train|valid|test",
//          "label": "..."}                                  classification
//          "events": [{"class": "...", "onset_s": 0, "offset_s": 1}]  detection

enum class ManifestTask { kUnlabeled, kClassification, kDetection };

const char* to_string(ManifestTask task);

struct ManifestEvent {
  std::string cls;
  double onset_s = 0.0;
  double offset_s = 0.0;
};

struct ManifestEntry {
  std::filesystem::path path;  // absolute after loading
  std::string recording_id;
  std::string split = "train";
  std::string label;
  std::vector<ManifestEvent> events;
};

struct DatasetManifest {
  std::string dataset_id;
  ManifestTask task = ManifestTask::kUnlabeled;
  std::vector<std::string> classes;
  double window_s = 1.0;
  double hop_s = 0.5;
  std::vector<ManifestEntry> entries;

  /// -1 when unknown.
  int class_index(const std::string& name) const;
  std::vector<const ManifestEntry*> split(const std::string& name) const;
};

/// Reads and validates a manifest. Throws DataError (message includes the
/// path) for missing files, malformed lines, unknown classes, bad splits,
/// a recording_id used twice or audio paths that do not exist.
DatasetManifest load_manifest(const std::filesystem::path& header_path);
void validate_manifest(const DatasetManifest& manifest);
/// Writes the header and "<stem>.jsonl" next to it.
void write_manifest(const std::filesystem::path& header_path, const DatasetManifest& manifest);

/// Loads an entry's audio at `sample_rate`, resampling when needed.
AudioClip load_entry_audio(const ManifestEntry& entry, int sample_rate);

// ---------------------------------------------------------------------------
// Commands. Each throws on failure; run_guarded maps exceptions to exit
// codes (1 usage/config, 2 data, 3 numeric).

struct GlobalOptions {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::optional<std::filesystem::path> config;
};

struct SynthArgs {
  std::string kind = "pretrain";  // pretrain | tones | bursts
  std::filesystem::path out_dir;
  int clips = 20;
  double clip_s = 3.0;
  int per_class_train = 10;
  int per_class_valid = 5;
  int per_class_test = 5;
  int recordings_train = 6;
  int recordings_valid = 3;
  int recordings_test = 3;
};

struct PretrainArgs {
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  bool stage1_only = false;
  std::optional<std::string> init;  // overrides pretrain.init
};

struct FinetuneArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
};

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  std::string split = "test";
  std::string model_name;  // CSV row name; defaults to the checkpoint stem
};

struct DetectArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path audio;
  std::filesystem::path out;
  std::optional<double> window_s;  // default: from the fine-tuning manifest
  std::optional<double> hop_s;
  std::optional<double> threshold;
};

struct EmbedArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path out;  // .jsonl for JSON lines, CSV otherwise
};

struct TscoreArgs {
  std::vector<std::filesystem::path> inputs;
  std::filesystem::path out;
};

RunConfig resolve_config(const GlobalOptions& global);

void cmd_synth(const GlobalOptions& global, const SynthArgs& args);
void cmd_pretrain(const GlobalOptions& global, const PretrainArgs& args);
void cmd_finetune(const GlobalOptions& global, const FinetuneArgs& args);
void cmd_eval(const GlobalOptions& global, const EvalArgs& args);
void cmd_detect(const GlobalOptions& global, const DetectArgs& args);
void cmd_embed(const GlobalOptions& global, const EmbedArgs& args);
void cmd_tscore(const GlobalOptions& global, const TscoreArgs& args);

/// Runs `fn`, prints "error: ..." to stderr on failure and returns the exit
/// code.
int run_guarded(const std::function<void()>& fn);

/// Labeled examples for fine-tuning or evaluation: whole clips with one-hot
/// targets, or detection windows with multi-hot targets from segment_labels.
std::vector<Example> build_examples(const DatasetManifest& manifest, const std::string& split, int sample_rate,
                                    double min_overlap_s);

/// Pooled final-layer embedding per clip, (N x hidden_dim).
Mat embed_clips(const EncoderModel& model, std::span<const AudioClip> clips);

}  // namespace bioenc
