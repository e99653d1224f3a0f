#pragma once

#include <span>
#include <string>

#include "bioenc/audio.hpp"
#include "bioenc/common.hpp"

namespace bioenc {

/// A (T x D) sequence of per-frame feature vectors.
struct FrameFeatures {
  Mat data;
  double frame_rate = 100.0;
  std::string source_id;

  Eigen::Index frames() const { return data.rows(); }
  Eigen::Index dim() const { return data.cols(); }
};

/// MFCC front-end constants. The defaults are the conventional 39-dim
/// setup: 25 ms Hamming window, 10 ms hop, 26 HTK-mel triangular filters
/// over 0-8000 Hz, 13 cepstra with C0 replaced by log frame energy, then
/// +-2 frame regression deltas and delta-deltas.
struct MfccOptions {
  int sample_rate = 16000;
  int frame_length = 400;
  int frame_shift = 160;
  int fft_size = 512;
  int num_filters = 26;
  double low_hz = 0.0;
  double high_hz = 8000.0;
  int num_ceps = 13;
  double preemphasis = 0.97;
  double log_floor = 1e-10;
  int delta_window = 2;
};

/// Number of frames mfcc39 produces for `num_samples` samples.
Eigen::Index mfcc_frame_count(std::size_t num_samples, const MfccOptions& opts = {});

/// 39-dim MFCC + delta + delta-delta at 100 fps. Requires a 16 kHz clip at
/// least one analysis window long; throws std::invalid_argument otherwise.
FrameFeatures mfcc39(const AudioClip& clip, const MfccOptions& opts = {});

/// Static cepstra only (T x num_ceps), before deltas are appended.
Mat mfcc_static(std::span<const float> samples, const MfccOptions& opts = {});

/// Regression deltas over +-`window` frames with edge replication.
Mat deltas(const Mat& x, int window = 2);

/// HTK mel-scale triangular filter bank, (num_filters x fft_size/2+1).
Mat mel_filterbank(const MfccOptions& opts = {});

struct FeatureStats {
  RowVec mean;
  RowVec std;
};

/// Per-dimension mean and population standard deviation over all frames.
FeatureStats compute_stats(std::span<const FrameFeatures> feats);

/// (x - mean) / std per dimension; dimensions with std < 1e-8 are only
/// centered. Throws DataError on a dimension mismatch.
FrameFeatures standardize(const FrameFeatures& feats, const FeatureStats& stats);

}  // namespace bioenc
