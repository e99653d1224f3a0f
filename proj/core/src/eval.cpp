#include "bioenc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace bioenc {

double accuracy(std::span<const int> pred, std::span<const int> gold) {
  if (pred.empty() || pred.size() != gold.size()) {
    throw std::invalid_argument("accuracy: need equal-length, non-empty inputs");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == gold[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] != 0) {
      ++positives;
      sum += static_cast<double>(positives) / static_cast<double>(rank + 1);
    }
  }
  if (positives == 0) return std::nullopt;
  return sum / static_cast<double>(positives);
}

MapResult mean_average_precision(const Mat& scores, const Eigen::MatrixXi& labels) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw std::invalid_argument("mean_average_precision: scores/labels shape mismatch");
  }
  MapResult result;
  double sum = 0.0;
  int counted = 0;
  std::vector<double> col_scores(static_cast<std::size_t>(scores.rows()));
  std::vector<int> col_labels(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      col_scores[static_cast<std::size_t>(i)] = scores(i, c);
      col_labels[static_cast<std::size_t>(i)] = labels(i, c);
    }
    const auto ap = average_precision(col_scores, col_labels);
    result.per_class.push_back(ap);
    if (ap) {
      sum += *ap;
      ++counted;
    } else {
      std::cerr << "warning: class " << c << " has no positive instances; excluded from mAP\n";
    }
  }
  if (counted == 0) throw DataError("mean_average_precision: no class has a positive instance");
  result.value = sum / counted;
  return result;
}

Mat t_scores(const Mat& table) {
  if (table.rows() < 2) throw std::invalid_argument("t_scores: need at least two models per dataset column");
  Mat out(table.rows(), table.cols());
  for (Eigen::Index c = 0; c < table.cols(); ++c) {
    const double mean = table.col(c).mean();
    const double var = (table.col(c).array() - mean).square().mean();
    const double sd = std::sqrt(var);
    if (sd < 1e-12) {
      out.col(c).setConstant(50.0);
    } else {
      out.col(c) = ((table.col(c).array() - mean) / sd * 10.0 + 50.0).matrix();
    }
  }
  return out;
}

Eigen::MatrixXi segment_labels(std::span<const DetectionEvent> events, std::span<const Segment> segments,
                               int num_classes, double min_overlap_s) {
  Eigen::MatrixXi labels = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(segments.size()), num_classes);
  for (const DetectionEvent& ev : events) {
    if (ev.class_id < 0 || ev.class_id >= num_classes) {
      throw DataError("segment_labels: event class " + std::to_string(ev.class_id) + " out of range");
    }
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const double overlap = std::min(ev.offset_s, segments[s].offset_s) - std::max(ev.onset_s, segments[s].onset_s);
      if (overlap > min_overlap_s) labels(static_cast<Eigen::Index>(s), ev.class_id) = 1;
    }
  }
  return labels;
}

std::vector<DetectionEvent> events_from_scores(const Mat& scores, std::span<const Segment> segments,
                                               double threshold) {
  std::vector<DetectionEvent> events;
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    std::optional<DetectionEvent> open;
    for (Eigen::Index s = 0; s < scores.rows(); ++s) {
      const Segment& seg = segments[static_cast<std::size_t>(s)];
      if (scores(s, c) >= threshold) {
        if (!open) {
          open = DetectionEvent{static_cast<int>(c), seg.onset_s, seg.offset_s, seg.parent_id};
        } else {
          open->offset_s = std::max(open->offset_s, seg.offset_s);
        }
      } else if (open) {
        events.push_back(*open);
        open.reset();
      }
    }
    if (open) events.push_back(*open);
  }
  return events;
}

DetectionResult detect(const EncoderModel& model, const AudioClip& recording, double win_s, double hop_s,
                       double threshold) {
  if (!model.classifier || model.classifier->mode != HeadMode::kSigmoidBce) {
    throw std::logic_error("detect: model needs a sigmoid_bce classifier head");
  }
  if (encoder_frame_count(model.config(), recording.samples.size()) < 1) {
    throw std::invalid_argument("detect: recording '" + recording.source_id + "' is shorter than the encoder stride");
  }
  DetectionResult result;
  result.segments = window(recording, win_s, hop_s);
  result.scores.resize(static_cast<Eigen::Index>(result.segments.size()), model.classifier->classes());
  for (std::size_t s = 0; s < result.segments.size(); ++s) {
    const RowVec logits = classify(model, result.segments[s].clip);
    for (Eigen::Index c = 0; c < logits.size(); ++c) {
      result.scores(static_cast<Eigen::Index>(s), c) = 1.0 / (1.0 + std::exp(-logits(c)));
    }
  }
  result.events = events_from_scores(result.scores, result.segments, threshold);
  return result;
}

}  // namespace bioenc
