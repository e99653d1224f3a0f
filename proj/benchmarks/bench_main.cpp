#include <benchmark/benchmark.h>

#include "bioenc/features.hpp"
#include "bioenc/model.hpp"
#include "bioenc/synth.hpp"
#include "bioenc/units.hpp"

using namespace bioenc;

namespace {

AudioClip one_second() { return synth_tone(1000.0, 1.0, 0.5, 0.0, 0.05, 1); }

void BM_Mfcc39(benchmark::State& state) {
  const AudioClip clip = synth_tone(1000.0, static_cast<double>(state.range(0)), 0.5, 0.0, 0.05, 1);
  for (auto _ : state) benchmark::DoNotOptimize(mfcc39(clip));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Mfcc39)->Arg(1)->Arg(10);

void BM_Resample44k(benchmark::State& state) {
  const AudioClip clip = synth_tone(1000.0, 1.0, 0.5, 0.0, 0.05, 1, 44100);
  for (auto _ : state) benchmark::DoNotOptimize(resample(clip, 16000));
}
BENCHMARK(BM_Resample44k);

void BM_NearestCentroids(benchmark::State& state) {
  Rng rng(1);
  Mat pts(static_cast<Eigen::Index>(state.range(0)), 39);
  Mat cents(100, 39);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < cents.size(); ++i) cents.data()[i] = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(nearest_centroids(cents, pts));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_NearestCentroids)->Arg(1000)->Arg(10000);

void BM_KMeansFit(benchmark::State& state) {
  Rng rng(2);
  Mat pts(5000, 39);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = rng.normal();
  KMeansOptions opts;
  opts.k = 100;
  opts.max_iters = 10;
  for (auto _ : state) benchmark::DoNotOptimize(kmeans_fit(pts, opts));
}
BENCHMARK(BM_KMeansFit)->Unit(benchmark::kMillisecond);

void BM_Forward(benchmark::State& state) {
  const EncoderModel model(ModelConfig{}, 1);
  const AudioClip clip = one_second();
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, clip));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

void BM_PretrainLossAndGrad(benchmark::State& state) {
  EncoderModel model(ModelConfig{}, 1);
  const AudioClip clip = one_second();
  MaskSpec mask = sample_mask(50, model.config(), 3);
  if (mask.masked_positions.empty()) mask.masked_positions = {0};
  UnitSequence units;
  for (int t = 0; t < 50; ++t) units.units.push_back(t % model.config().num_units);
  for (auto _ : state) {
    model.zero_grad();
    benchmark::DoNotOptimize(pretrain_loss_and_grad(model, {&clip, nullptr}, mask, units, GradOptions{}));
  }
}
BENCHMARK(BM_PretrainLossAndGrad)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
