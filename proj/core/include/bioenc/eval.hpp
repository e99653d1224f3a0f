#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bioenc/audio.hpp"
#include "bioenc/common.hpp"
#include "bioenc/model.hpp"

namespace bioenc {

struct DetectionEvent {
  int class_id = 0;
  double onset_s = 0.0;
  double offset_s = 0.0;
  std::string recording_id;
};

/// Fraction of positions where `pred` equals `gold`. Throws
/// std::invalid_argument on empty or unequal-length inputs.
double accuracy(std::span<const int> pred, std::span<const int> gold);

/// Non-interpolated average precision: scores sorted descending (stable,
/// ties keep input order), mean of precision@rank over positive ranks.
/// Returns nullopt when there are no positives.
std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels);

struct MapResult {
  double value = 0.0;
  std::vector<std::optional<double>> per_class;  // nullopt = no positives, skipped
};

/// Unweighted mean of per-class AP over classes with at least one positive.
/// `scores` and `labels` are (instances x classes). Classes without positives
/// are skipped with a warning on stderr; throws DataError when none remain.
MapResult mean_average_precision(const Mat& scores, const Eigen::MatrixXi& labels);

/// T = 50 + 10 (x - mean) / std per column, population std. Columns with
/// std < 1e-12 map to 50. Throws std::invalid_argument with fewer than 2 rows.
Mat t_scores(const Mat& table);

/// Segment c is positive for class k when it overlaps some class-k event by
/// more than `min_overlap_s` seconds.
Eigen::MatrixXi segment_labels(std::span<const DetectionEvent> events, std::span<const Segment> segments,
                               int num_classes, double min_overlap_s = 0.0);

struct DetectionResult {
  std::vector<Segment> segments;
  Mat scores;  // segments x classes, sigmoid probabilities
  std::vector<DetectionEvent> events;
};

/// Windows the recording, scores each window with the sigmoid classifier
/// and merges runs of consecutive windows at or above `threshold` into
/// events per class.
DetectionResult detect(const EncoderModel& model, const AudioClip& recording, double win_s, double hop_s,
                       double threshold = 0.5);

/// Turns a (segments x classes) score matrix into merged events.
std::vector<DetectionEvent> events_from_scores(const Mat& scores, std::span<const Segment> segments,
                                               double threshold);

}  // namespace bioenc
