#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bioenc/audio.hpp"
#include "bioenc/eval.hpp"

namespace bioenc {

// Deterministic synthetic audio. Every generator is a pure function of its
// arguments and seed.

/// Sine at `freq_hz` with amplitude `amp`, starting phase `phase`, plus white
/// Gaussian noise of standard deviation `noise_std`.
AudioClip synth_tone(double freq_hz, double duration_s, double amp, double phase, double noise_std,
                     std::uint64_t seed, int sample_rate = 16000);

/// Unlabeled clips made of random tone, chirp, noise and silence segments.
std::vector<AudioClip> synth_pretrain_corpus(int clips, double clip_s, std::uint64_t seed, int sample_rate = 16000);

struct LabeledClip {
  AudioClip clip;
  int label = 0;
};

struct ToneClassSpec {
  std::vector<double> freqs_hz = {500.0, 1000.0, 2000.0};
  double clip_s = 1.0;
  double noise_std = 0.05;
  // Relative per-clip frequency offset, uniform in [-jitter, jitter].
  double freq_jitter = 0.03;
  double min_amp = 0.3;
  double max_amp = 0.8;
};

/// `per_class` clips per frequency, classes interleaved (0, 1, 2, 0, ...).
/// Amplitude, phase and frequency offset are drawn per clip.
std::vector<LabeledClip> synth_tone_classes(int per_class, const ToneClassSpec& spec, std::uint64_t seed,
                                            int sample_rate = 16000);

struct BurstSpec {
  std::vector<double> freqs_hz = {1000.0, 3000.0};
  double recording_s = 10.0;
  double min_burst_s = 0.8;
  double max_burst_s = 2.0;
  int bursts_per_recording = 3;
  double noise_std = 0.05;
  double freq_jitter = 0.03;  // relative, per burst
  double amp = 0.5;
};

struct SynthRecording {
  AudioClip clip;
  std::vector<DetectionEvent> events;
};

/// Background noise with non-overlapping tone bursts of random class,
/// onset and length. Events carry the burst boundaries.
std::vector<SynthRecording> synth_burst_recordings(int count, const BurstSpec& spec, std::uint64_t seed,
                                                   const std::string& prefix = "rec", int sample_rate = 16000);

}  // namespace bioenc
