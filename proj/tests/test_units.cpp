#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "bioenc/model.hpp"
#include "bioenc/synth.hpp"
#include "bioenc/units.hpp"
#include "support/oracles.hpp"

using namespace bioenc;

namespace {

Mat random_points(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  Mat p(n, d);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal() * 3.0;
  return p;
}

}  // namespace

TEST(KMeans, FourPointTwoClusterCase) {
  Mat p(4, 2);
  p << 0, 0, 0, 1, 10, 10, 10, 11;
  KMeansOptions opts;
  opts.k = 2;
  opts.seed = 3;
  const Codebook cb = kmeans_fit(p, opts);
  EXPECT_EQ(cb.fit_meta.final_distortion, 0.25);
  std::set<std::pair<double, double>> got;
  for (int c = 0; c < 2; ++c) got.insert({cb.centroids(c, 0), cb.centroids(c, 1)});
  EXPECT_EQ(got, (std::set<std::pair<double, double>>{{0.0, 0.5}, {10.0, 10.5}}));
}

TEST(KMeans, ExactCoverWithKDistinctPoints) {
  const Mat p = random_points(6, 3, 11);
  KMeansOptions opts;
  opts.k = 6;
  const Codebook cb = kmeans_fit(p, opts);
  EXPECT_EQ(cb.fit_meta.final_distortion, 0.0);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    bool found = false;
    for (Eigen::Index c = 0; c < cb.centroids.rows(); ++c) found |= cb.centroids.row(c) == p.row(i);
    EXPECT_TRUE(found);
  }
}

TEST(KMeans, FinalAssignmentMatchesBruteForceAndDistortionNeverRises) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Mat p = random_points(100, 5, s);
    KMeansOptions opts;
    opts.k = 8;
    opts.seed = s;
    const Codebook cb = kmeans_fit(p, opts);
    EXPECT_EQ(nearest_centroids(cb.centroids, p), oracle::nearest(cb.centroids, p));
    const auto& trace = cb.fit_meta.distortion_trace;
    ASSERT_FALSE(trace.empty());
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1] * (1.0 + 1e-12));
  }
}

TEST(KMeans, ErrorsAndDeterminism) {
  KMeansOptions opts;
  opts.k = 5;
  EXPECT_THROW(kmeans_fit(random_points(4, 2, 0), opts), DataError);
  FrameFeatures a;
  a.data = random_points(10, 2, 1);
  FrameFeatures b;
  b.data = random_points(10, 3, 2);
  const FrameFeatures mixed[] = {a, b};
  EXPECT_THROW(kmeans_fit(std::span<const FrameFeatures>(mixed), opts), DataError);
  const Mat p = random_points(50, 4, 9);
  opts.seed = 42;
  EXPECT_EQ(kmeans_fit(p, opts).centroids, kmeans_fit(p, opts).centroids);
}

TEST(KMeans, NoEmptyClusterOnLargerCorpus) {
  const Mat p = random_points(2000, 4, 77);
  KMeansOptions opts;
  opts.k = 30;
  const Codebook cb = kmeans_fit(p, opts);
  std::vector<int> counts(30, 0);
  for (int u : nearest_centroids(cb.centroids, p)) ++counts[static_cast<std::size_t>(u)];
  for (int c : counts) EXPECT_GT(c, 0);
}

TEST(Assign, ExactMatchTieBreakAndTranslation) {
  Codebook cb;
  cb.centroids = Mat(6, 1);
  // Centroids 2 and 5 sit at -1 and +1, so the point 0 is equidistant.
  cb.centroids << 100, 200, -1, 300, 400, 1;
  FrameFeatures f;
  f.data = Mat(2, 1);
  f.data << 0.0, 300.0;
  const UnitSequence u = assign(cb, f);
  EXPECT_EQ(u.units[0], 2);
  EXPECT_EQ(u.units[1], 3);

  const Mat p = random_points(40, 3, 5);
  Mat cents = random_points(7, 3, 6);
  const RowVec shift = RowVec::Constant(3, 17.25);
  EXPECT_EQ(nearest_centroids(cents, p), nearest_centroids(cents.rowwise() + shift, p.rowwise() + shift));
  EXPECT_EQ(nearest_centroids(cents, p), oracle::nearest(cents, p));
  EXPECT_THROW(nearest_centroids(cents, random_points(3, 2, 1)), DataError);
}

TEST(Relabel, DefaultLayerAndShapes) {
  EXPECT_EQ(default_relabel_layer(4), 2);
  EXPECT_EQ(default_relabel_layer(12), 6);
  EXPECT_EQ(default_relabel_layer(24), 12);

  ModelConfig cfg;
  cfg.depth = 2;
  cfg.hidden_dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.proj_dim = 8;
  cfg.num_units = 4;
  const EncoderModel model(cfg, 3);
  const auto clips = synth_pretrain_corpus(3, 0.6, 1);
  KMeansOptions opts;
  opts.k = 4;
  opts.seed = 8;
  const Relabeling a = relabel_from_model(model, clips, 1, opts);
  const Relabeling b = relabel_from_model(model, clips, 1, opts);
  EXPECT_EQ(a.codebook.stage, 2);
  ASSERT_EQ(a.units.size(), clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_EQ(a.units[i].units, b.units[i].units);
    EXPECT_EQ(static_cast<Eigen::Index>(a.units[i].units.size()), cnn_encode(model, clips[i]).frames());
  }
  EXPECT_THROW(relabel_from_model(model, clips, 3, opts), std::invalid_argument);
}
