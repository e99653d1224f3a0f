#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bioenc/audio.hpp"
#include "bioenc/common.hpp"
#include "bioenc/features.hpp"

namespace bioenc {

class EncoderModel;

struct KMeansFitMeta {
  int iterations = 0;
  double final_distortion = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> distortion_trace;  // mean squared L2 after each assignment step
  std::size_t fit_frames = 0;
};

/// k centroids defining the acoustic unit inventory.
struct Codebook {
  Mat centroids;  // k x D
  int stage = 1;
  KMeansFitMeta fit_meta;
  // Standardization applied to features before fitting and assignment.
  FeatureStats input_stats;

  int k() const { return static_cast<int>(centroids.rows()); }
  int feature_dim() const { return static_cast<int>(centroids.cols()); }
};

/// Per-frame discrete targets, one unit index in [0, k) per frame.
struct UnitSequence {
  std::vector<int> units;
  std::string source_id;
  double frame_rate = 50.0;
};

struct KMeansOptions {
  int k = 100;
  int max_iters = 100;
  std::uint64_t seed = 0;
  // Frames beyond this cap are subsampled uniformly before fitting.
  std::size_t max_frames = 200000;
};

/// Lloyd's algorithm with k-means++ seeding over every frame of `feats`.
/// Stops when assignments stop changing or after `max_iters`. Empty
/// clusters are re-seeded with the point farthest from its centroid.
/// Throws DataError on dimension mismatch, too few frames, or when fewer
/// than k distinct centroids can be formed.
Codebook kmeans_fit(std::span<const FrameFeatures> feats, const KMeansOptions& opts);

/// Same, over an explicit (N x D) point matrix.
Codebook kmeans_fit(const Mat& points, const KMeansOptions& opts);

/// Nearest centroid per frame; ties go to the lowest centroid index.
UnitSequence assign(const Codebook& codebook, const FrameFeatures& feats);

/// Nearest centroid per row of `points`.
std::vector<int> nearest_centroids(const Mat& centroids, const Mat& points);

/// Mean squared L2 distance of each point to its assigned centroid.
double distortion(const Mat& centroids, const Mat& points, std::span<const int> labels);

/// Standardizes with the codebook's stats (when present), then assigns.
UnitSequence assign_standardized(const Codebook& codebook, const FrameFeatures& feats);

struct Relabeling {
  Codebook codebook;
  std::vector<UnitSequence> units;
};

/// Second-stage unit discovery: runs `model` unmasked, takes the hidden
/// states at `layer` (0 = transformer input, l = output of block l),
/// standardizes them over the corpus, fits k-means and assigns units.
Relabeling relabel_from_model(const EncoderModel& model, std::span<const AudioClip> clips, int layer,
                              const KMeansOptions& opts);

/// Default stage-2 layer: depth / 2.
int default_relabel_layer(int transformer_depth);

}  // namespace bioenc
