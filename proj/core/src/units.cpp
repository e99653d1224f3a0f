#include "bioenc/units.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace bioenc {

namespace {

std::vector<int> kmeanspp_seeds(const Mat& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  std::vector<int> seeds;
  seeds.reserve(k);
  seeds.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n))));
  Vec best = (points.rowwise() - points.row(seeds[0])).rowwise().squaredNorm();
  while (static_cast<int>(seeds.size()) < k) {
    const double total = best.sum();
    int pick = 0;
    if (total <= 0.0) {
      pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    } else {
      double r = rng.uniform() * total;
      pick = static_cast<int>(n - 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= best(i);
        if (r < 0.0) {
          pick = static_cast<int>(i);
          break;
        }
      }
    }
    seeds.push_back(pick);
    best = best.cwiseMin((points.rowwise() - points.row(pick)).rowwise().squaredNorm());
  }
  return seeds;
}

}  // namespace

std::vector<int> nearest_centroids(const Mat& centroids, const Mat& points) {
  if (centroids.cols() != points.cols()) throw DataError("assign: feature dimension mismatch");
  // Direct differences rather than the |x|^2 - 2x.c + |c|^2 expansion, so exact
  // matches give exactly zero and equidistant ties resolve deterministically.
  std::vector<int> labels(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Eigen::Index arg = 0;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    labels[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return labels;
}

double distortion(const Mat& centroids, const Mat& points, std::span<const int> labels) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    sum += (points.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  }
  return sum / static_cast<double>(points.rows());
}

Codebook kmeans_fit(const Mat& points, const KMeansOptions& opts) {
  if (opts.k < 2) throw std::invalid_argument("kmeans_fit: k must be at least 2");
  if (opts.max_iters < 1) throw std::invalid_argument("kmeans_fit: max_iters must be at least 1");
  if (points.rows() < opts.k) {
    throw DataError("kmeans_fit: " + std::to_string(points.rows()) + " frames is fewer than k=" +
                    std::to_string(opts.k));
  }
  if (!points.allFinite()) throw DataError("kmeans_fit: non-finite feature values");

  const Eigen::Index n = points.rows();
  const int k = opts.k;
  Rng rng(opts.seed);

  Codebook cb;
  cb.fit_meta.seed = opts.seed;
  cb.fit_meta.fit_frames = static_cast<std::size_t>(n);
  const auto seeds = kmeanspp_seeds(points, k, rng);
  cb.centroids.resize(k, points.cols());
  for (int c = 0; c < k; ++c) cb.centroids.row(c) = points.row(seeds[c]);

  std::vector<int> labels;
  std::vector<int> previous;
  for (int iter = 0; iter < opts.max_iters; ++iter) {
    labels = nearest_centroids(cb.centroids, points);
    cb.fit_meta.distortion_trace.push_back(distortion(cb.centroids, points, labels));
    cb.fit_meta.iterations = iter + 1;
    if (labels == previous) break;

    // Re-seed empty clusters with the point currently farthest from its centroid.
    std::vector<int> counts(k, 0);
    for (int l : labels) ++counts[l];
    Vec dist(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      dist(i) = (points.row(i) - cb.centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      Eigen::Index far = 0;
      dist.maxCoeff(&far);
      int& owner = labels[static_cast<std::size_t>(far)];
      if (counts[owner] <= 1) continue;  // moving it would empty another cluster
      --counts[owner];
      owner = c;
      counts[c] = 1;
      dist(far) = -1.0;
    }

    Mat sums = Mat::Zero(k, points.cols());
    for (Eigen::Index i = 0; i < n; ++i) sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) cb.centroids.row(c) = sums.row(c) / counts[c];
    }
    previous = labels;
  }

  labels = nearest_centroids(cb.centroids, points);
  cb.fit_meta.final_distortion = distortion(cb.centroids, points, labels);

  for (int a = 0; a < k; ++a) {
    for (int b = a + 1; b < k; ++b) {
      if ((cb.centroids.row(a) - cb.centroids.row(b)).squaredNorm() == 0.0) {
        throw DataError("kmeans_fit: data has fewer than k=" + std::to_string(k) + " distinct points");
      }
    }
  }
  return cb;
}

Codebook kmeans_fit(std::span<const FrameFeatures> feats, const KMeansOptions& opts) {
  if (feats.empty()) throw DataError("kmeans_fit: no feature sequences");
  const Eigen::Index dim = feats.front().dim();
  std::size_t total = 0;
  for (const auto& f : feats) {
    if (f.dim() != dim) throw DataError("kmeans_fit: feature dimension mismatch");
    total += static_cast<std::size_t>(f.frames());
  }

  std::vector<std::size_t> keep(total);
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  if (total > opts.max_frames) {
    Rng rng(mix_seed(opts.seed, 0x5ab5));
    for (std::size_t i = 0; i < opts.max_frames; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
      std::swap(keep[i], keep[j]);
    }
    keep.resize(opts.max_frames);
    std::sort(keep.begin(), keep.end());
  }

  Mat points(static_cast<Eigen::Index>(keep.size()), dim);
  std::size_t seq = 0;
  std::size_t offset = 0;
  for (std::size_t r = 0; r < keep.size(); ++r) {
    while (keep[r] >= offset + static_cast<std::size_t>(feats[seq].frames())) {
      offset += static_cast<std::size_t>(feats[seq].frames());
      ++seq;
    }
    points.row(static_cast<Eigen::Index>(r)) = feats[seq].data.row(static_cast<Eigen::Index>(keep[r] - offset));
  }
  return kmeans_fit(points, opts);
}

UnitSequence assign(const Codebook& codebook, const FrameFeatures& feats) {
  if (feats.dim() != codebook.feature_dim()) {
    throw DataError("assign: features have dimension " + std::to_string(feats.dim()) + ", codebook expects " +
                    std::to_string(codebook.feature_dim()));
  }
  UnitSequence seq;
  seq.units = nearest_centroids(codebook.centroids, feats.data);
  seq.source_id = feats.source_id;
  seq.frame_rate = feats.frame_rate;
  return seq;
}

UnitSequence assign_standardized(const Codebook& codebook, const FrameFeatures& feats) {
  if (codebook.input_stats.mean.size() == 0) return assign(codebook, feats);
  return assign(codebook, standardize(feats, codebook.input_stats));
}

int default_relabel_layer(int transformer_depth) { return transformer_depth / 2; }

}  // namespace bioenc
