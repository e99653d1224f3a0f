#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bioenc/model.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace bioenc;

namespace {

AudioClip noise_clip(double seconds, std::uint64_t seed, int rate = 16000) {
  Rng rng(seed);
  AudioClip c;
  c.sample_rate = rate;
  c.samples.resize(static_cast<std::size_t>(std::llround(seconds * rate)));
  for (float& v : c.samples) v = static_cast<float>(0.3 * rng.normal());
  return c;
}

AudioClip tone_clip(double seconds, double freq) {
  AudioClip c;
  c.samples.resize(static_cast<std::size_t>(seconds * 16000));
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    c.samples[i] = static_cast<float>(0.5 * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / 16000.0) +
                                      0.05 * std::sin(0.37 * static_cast<double>(i)));
  }
  return c;
}

Mat random_probs(Eigen::Index t, Eigen::Index k, Rng& rng) {
  Mat p(t, k);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = std::exp(2.0 * rng.normal());
  for (Eigen::Index r = 0; r < t; ++r) p.row(r) /= p.row(r).sum();
  return p;
}

UnitSequence random_units(Eigen::Index t, int k, Rng& rng) {
  UnitSequence u;
  for (Eigen::Index i = 0; i < t; ++i) u.units.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(k))));
  return u;
}

void expect_group_errors(const std::map<ParamGroup, gradcheck::GroupError>& errs, std::initializer_list<ParamGroup> live) {
  for (const auto& [group, e] : errs) {
    EXPECT_LT(e.relative(), 1e-3) << to_string(group) << " analytic " << e.analytic_norm << " numeric " << e.numeric_norm;
  }
  for (ParamGroup g : live) {
    ASSERT_TRUE(errs.count(g)) << to_string(g);
    EXPECT_FALSE(errs.at(g).vanishing()) << to_string(g);
  }
}

}  // namespace

TEST(CnnEncode, FiftyFramesPerSecond) {
  const EncoderModel model(ModelConfig{}, 1);
  EXPECT_EQ(cnn_encode(model, noise_clip(1.0, 1)).frames(), 50);
  EXPECT_EQ(cnn_encode(model, noise_clip(2.0, 2)).frames(), 100);
  EXPECT_EQ(cnn_encode(model, noise_clip(0.5, 3)).frames(), 25);
  const FrameFeatures f = cnn_encode(model, noise_clip(1.0, 1));
  EXPECT_EQ(f.dim(), 128);
  EXPECT_DOUBLE_EQ(f.frame_rate, 50.0);
}

TEST(CnnEncode, ZeroClipIsFiniteAndShortClipRejected) {
  const EncoderModel model(ModelConfig{}, 1);
  AudioClip zero;
  zero.samples.assign(16000, 0.0f);
  EXPECT_TRUE(cnn_encode(model, zero).data.allFinite());
  EXPECT_TRUE(forward(model, zero).hidden.data.allFinite());
  AudioClip tiny;
  tiny.samples.assign(100, 0.0f);
  EXPECT_THROW(cnn_encode(model, tiny), std::invalid_argument);
  EXPECT_THROW(cnn_encode(model, noise_clip(1.0, 1, 8000)), std::invalid_argument);
}

TEST(CnnEncode, LengthIsAFunctionOfSampleCount) {
  const EncoderModel model(gradcheck::tiny_config(), 4);
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const std::size_t n = 320 + rng.below(8000);
    AudioClip a = noise_clip(0.0, 0);
    a.samples.assign(n, 0.1f);
    AudioClip b = noise_clip(static_cast<double>(n) / 16000.0, static_cast<std::uint64_t>(i));
    b.samples.resize(n);
    EXPECT_EQ(cnn_encode(model, a).frames(), cnn_encode(model, b).frames());
    EXPECT_EQ(cnn_encode(model, a).frames(), encoder_frame_count(model.config(), n));
  }
}

TEST(ModelConfig, ValidateRejectsBadShapes) {
  ModelConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.cnn[0].stride = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SampleMask, DegenerateAndDeterministic) {
  ModelConfig cfg;
  cfg.mask_start_prob = 0.0;
  EXPECT_TRUE(sample_mask(500, cfg, 1).masked_positions.empty());
  cfg.mask_start_prob = 0.08;
  const MaskSpec a = sample_mask(300, cfg, 9);
  EXPECT_EQ(a.masked_positions, sample_mask(300, cfg, 9).masked_positions);
  EXPECT_TRUE(std::is_sorted(a.masked_positions.begin(), a.masked_positions.end()));
  EXPECT_EQ(std::adjacent_find(a.masked_positions.begin(), a.masked_positions.end()), a.masked_positions.end());
  cfg.mask_start_prob = 1.0;
  EXPECT_EQ(sample_mask(7, cfg, 1).masked_positions.size(), 7u);
  EXPECT_THROW(sample_mask(0, cfg, 1), std::invalid_argument);
}

TEST(SampleMask, FractionMatchesIndependentSampler) {
  ModelConfig cfg;
  const int trials = 2000;
  double sum = 0.0;
  for (int r = 0; r < trials; ++r) {
    sum += static_cast<double>(sample_mask(1000, cfg, 1000 + static_cast<std::uint64_t>(r)).masked_positions.size()) / 1000.0;
  }
  const double ours = sum / trials;
  const auto [mc, se] = oracle::mask_fraction_mc(1000, 10, 0.08, 20000, 77);
  EXPECT_NEAR(mc, 0.57, 0.02);
  // Both estimates carry sampling noise; the ours-side error is sqrt(10) x larger.
  EXPECT_LT(std::abs(ours - mc), 3.0 * se * std::sqrt(1.0 + 20000.0 / trials));
}

TEST(Forward, EmptyMaskMatchesUnmaskedAndIgnoresMaskEmbedding) {
  EncoderModel model(gradcheck::tiny_config(), 2);
  const AudioClip clip = noise_clip(0.4, 6);
  MaskSpec empty;
  empty.seq_len = cnn_encode(model, clip).frames();
  const Mat plain = forward(model, clip).hidden.data;
  EXPECT_EQ(forward(model, clip, &empty).hidden.data, plain);
  model.mask_embedding.value.setConstant(3.0);
  EXPECT_EQ(forward(model, clip, &empty).hidden.data, plain);

  MaskSpec some = empty;
  some.masked_positions = {2, 3};
  EXPECT_NE(forward(model, clip, &some).hidden.data, plain);
  MaskSpec wrong;
  wrong.seq_len = empty.seq_len + 1;
  EXPECT_THROW(forward(model, clip, &wrong), std::invalid_argument);
}

TEST(Forward, IdenticalFramesWithoutPositionsGiveIdenticalOutputs) {
  ModelConfig cfg = gradcheck::tiny_config();
  cfg.depth = 1;
  cfg.positional = false;
  const EncoderModel model(cfg, 8);
  Rng rng(3);
  Mat conv(12, cfg.cnn.back().channels);
  for (Eigen::Index i = 0; i < conv.size(); ++i) conv.data()[i] = rng.normal();
  conv.row(7) = conv.row(2);
  const Mat h = forward_from_conv(model, conv).hidden.data;
  EXPECT_LT((h.row(2) - h.row(7)).cwiseAbs().maxCoeff(), 1e-12);

  Mat swapped = conv;
  swapped.row(1) = conv.row(9);
  swapped.row(9) = conv.row(1);
  const Mat hs = forward_from_conv(model, swapped).hidden.data;
  EXPECT_LT((hs.row(1) - h.row(9)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((hs.row(9) - h.row(1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, LayerStatesCount) {
  const EncoderModel model(gradcheck::tiny_config(), 2);
  const ForwardOutput out = forward(model, noise_clip(0.4, 1), nullptr, true);
  EXPECT_EQ(out.layer_states.size(), 3u);
  EXPECT_TRUE(forward(model, noise_clip(0.4, 1)).layer_states.empty());
}

TEST(UnitProbs, RowStochasticAndScaleInvariant) {
  const EncoderModel model(gradcheck::tiny_config(), 3);
  FrameFeatures h = forward(model, noise_clip(0.4, 2)).hidden;
  const Mat p = unit_probs(h, model.predictor);
  ASSERT_EQ(p.cols(), 8);
  for (Eigen::Index t = 0; t < p.rows(); ++t) {
    EXPECT_NEAR(p.row(t).sum(), 1.0, 1e-6);
    EXPECT_GT(p.row(t).minCoeff(), 0.0);
    EXPECT_LT(p.row(t).maxCoeff(), 1.0);
  }
  for (double g : {1e-3, 0.5, 7.0, 1e4}) {
    FrameFeatures scaled = h;
    scaled.data *= g;
    EXPECT_LT((unit_probs(scaled, model.predictor) - p).cwiseAbs().maxCoeff(), 1e-9) << g;
  }
  FrameFeatures zero = h;
  zero.data.setZero();
  EXPECT_TRUE(unit_probs(zero, model.predictor).allFinite());
}

TEST(UnitProbs, TwoUnitClosedForm) {
  PredictorHead head;
  head.projection.value = Mat::Identity(2, 2);
  head.unit_embeddings.value = Mat::Identity(2, 2);
  head.temperature = 0.1;
  FrameFeatures h;
  h.data = Mat(1, 2);
  h.data << 3.0, 0.0;
  const Mat p = unit_probs(h, head);
  const double s10 = 1.0 / (1.0 + std::exp(-10.0));
  EXPECT_NEAR(p(0, 0), s10, 1e-6);
  EXPECT_NEAR(p(0, 1), 1.0 - s10, 1e-6);
  EXPECT_NEAR(p(0, 0), 0.9999546, 1e-7);

  head.unit_embeddings.value = Mat::Constant(1, 2, 0.3);
  EXPECT_EQ(unit_probs(h, head)(0, 0), 1.0);
}

TEST(PretrainLoss, UniformAndPerfectPredictions) {
  const Mat uniform = Mat::Constant(5, 200, 1.0 / 200.0);
  UnitSequence z;
  z.units = {0, 5, 199, 3, 17};
  MaskSpec m;
  m.seq_len = 5;
  m.masked_positions = {1, 2, 4};
  EXPECT_NEAR(pretrain_loss(uniform, z, m), std::log(200.0), 1e-12);
  EXPECT_NEAR(std::log(200.0), 5.2983, 1e-4);

  Mat perfect = Mat::Zero(5, 200);
  for (int t = 0; t < 5; ++t) perfect(t, z.units[static_cast<std::size_t>(t)]) = 1.0;
  MaskSpec one;
  one.seq_len = 5;
  one.masked_positions = {3};
  EXPECT_EQ(pretrain_loss(perfect, z, one), 0.0);

  MaskSpec empty;
  empty.seq_len = 5;
  EXPECT_THROW(pretrain_loss(uniform, z, empty), std::invalid_argument);
  UnitSequence short_z;
  short_z.units = {1, 2};
  EXPECT_THROW(pretrain_loss(uniform, short_z, m), std::invalid_argument);
}

TEST(PretrainLoss, UnmaskedTargetsDoNotMatter) {
  Rng rng(21);
  ModelConfig cfg;
  cfg.mask_start_prob = 0.1;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index t = 20 + static_cast<Eigen::Index>(rng.below(80));
    const Mat p = random_probs(t, 16, rng);
    UnitSequence z = random_units(t, 16, rng);
    MaskSpec m = sample_mask(t, cfg, rng.next_u64());
    if (m.masked_positions.empty()) m.masked_positions = {0};
    const double before = pretrain_loss(p, z, m);
    for (Eigen::Index i = 0; i < t; ++i) {
      if (!m.contains(static_cast<int>(i))) z.units[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(16));
    }
    EXPECT_EQ(pretrain_loss(p, z, m), before);
    EXPECT_GE(before, 0.0);
  }
}

TEST(MeanPool, Cases) {
  FrameFeatures one;
  one.data = Mat(1, 3);
  one.data << 1.5, -2.0, 4.0;
  EXPECT_EQ(mean_pool(one), one.data.row(0));

  FrameFeatures pair;
  pair.data = Mat(2, 3);
  pair.data.row(0) << 1.0, 2.0, -3.0;
  pair.data.row(1) = -pair.data.row(0);
  EXPECT_TRUE((mean_pool(pair).array() == 0.0).all());

  Rng rng(4);
  FrameFeatures r;
  r.data = Mat(3, 4);
  for (Eigen::Index i = 0; i < r.data.size(); ++i) r.data.data()[i] = rng.normal();
  const RowVec got = mean_pool(r);
  for (int j = 0; j < 4; ++j) {
    const double ref = (r.data(0, j) + r.data(1, j) + r.data(2, j)) / 3.0;
    EXPECT_NEAR(got(j), ref, 1e-7);
  }
}

TEST(Classify, ZeroWeightGivesBias) {
  EncoderModel model(gradcheck::tiny_config(), 5);
  EXPECT_THROW(classify(model, noise_clip(0.4, 1)), std::logic_error);
  model.attach_classifier(3, HeadMode::kSoftmaxCe, 1);
  model.classifier->weight.value.setZero();
  model.classifier->bias.value << 0.25, -1.0, 2.0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    EXPECT_EQ(classify(model, noise_clip(0.4, s)), model.classifier->bias.value.row(0));
  }

  EncoderModel bin(gradcheck::tiny_config(), 5);
  bin.attach_classifier(1, HeadMode::kSigmoidBce, 1);
  bin.classifier->weight.value.setZero();
  bin.classifier->bias.value.setZero();
  const RowVec logit = classify(bin, noise_clip(0.4, 1));
  EXPECT_EQ(1.0 / (1.0 + std::exp(-logit(0))), 0.5);
}

TEST(FinetuneLoss, KnownValues) {
  ClassifierHead ce;
  ce.weight.value = Mat::Zero(4, 3);
  ce.mode = HeadMode::kSoftmaxCe;
  RowVec logits = RowVec::Zero(3);
  RowVec target = RowVec::Zero(3);
  target(1) = 1.0;
  EXPECT_NEAR(finetune_loss(ce, logits, target), std::log(3.0), 1e-12);

  ClassifierHead bce = ce;
  bce.mode = HeadMode::kSigmoidBce;
  EXPECT_NEAR(finetune_loss(bce, logits, target), std::log(2.0), 1e-12);
  EXPECT_THROW(finetune_loss(bce, RowVec::Zero(2), target), std::invalid_argument);
}

TEST(Gradients, PretrainLossMatchesFiniteDifferences) {
  EncoderModel model(gradcheck::tiny_config(), 11);
  const AudioClip clip = tone_clip(0.4, 730.0);
  const Eigen::Index frames = cnn_encode(model, clip).frames();
  ASSERT_EQ(frames, 20);
  Rng rng(2);
  const UnitSequence z = random_units(frames, 8, rng);
  MaskSpec m;
  m.seq_len = frames;
  m.masked_positions = {3, 4, 5, 6, 12, 13, 14, 15};

  model.zero_grad();
  const double l = pretrain_loss_and_grad(model, {&clip, nullptr}, m, z, GradOptions{});
  auto loss = [&] { return pretrain_loss(unit_probs(forward(model, clip, &m).hidden, model.predictor), z, m); };
  EXPECT_NEAR(l, loss(), 1e-12);
  expect_group_errors(gradcheck::compare(model, loss),
                      {ParamGroup::kCnn, ParamGroup::kFrontend, ParamGroup::kMaskEmbedding, ParamGroup::kTransformer,
                       ParamGroup::kPredictor});
}

TEST(Gradients, SoftmaxClassifierMatchesFiniteDifferences) {
  EncoderModel model(gradcheck::tiny_config(), 12);
  model.attach_classifier(3, HeadMode::kSoftmaxCe, 4);
  const AudioClip clip = tone_clip(0.4, 1210.0);
  RowVec target = RowVec::Zero(3);
  target(2) = 1.0;
  model.zero_grad();
  const double l = finetune_loss_and_grad(model, {&clip, nullptr}, target, GradOptions{});
  auto loss = [&] { return finetune_loss(*model.classifier, classify(model, clip), target); };
  EXPECT_NEAR(l, loss(), 1e-12);
  expect_group_errors(gradcheck::compare(model, loss),
                      {ParamGroup::kCnn, ParamGroup::kFrontend, ParamGroup::kTransformer, ParamGroup::kClassifier});
}

TEST(Gradients, SigmoidClassifierMatchesFiniteDifferences) {
  EncoderModel model(gradcheck::tiny_config(), 13);
  model.attach_classifier(2, HeadMode::kSigmoidBce, 5);
  const AudioClip clip = tone_clip(0.4, 2333.0);
  RowVec target(2);
  target << 1.0, 0.0;
  model.zero_grad();
  const double l = finetune_loss_and_grad(model, {&clip, nullptr}, target, GradOptions{});
  auto loss = [&] { return finetune_loss(*model.classifier, classify(model, clip), target); };
  EXPECT_NEAR(l, loss(), 1e-12);
  expect_group_errors(gradcheck::compare(model, loss),
                      {ParamGroup::kCnn, ParamGroup::kFrontend, ParamGroup::kTransformer, ParamGroup::kClassifier});
}

TEST(Gradients, FrozenCnnReceivesNoGradient) {
  EncoderModel model(gradcheck::tiny_config(), 14);
  model.attach_classifier(2, HeadMode::kSoftmaxCe, 5);
  const AudioClip clip = tone_clip(0.4, 900.0);
  const Mat conv = conv_features(model, clip);
  RowVec target(2);
  target << 0.0, 1.0;
  model.zero_grad();
  GradOptions opts;
  opts.train_cnn = false;
  const double from_conv = finetune_loss_and_grad(model, {nullptr, &conv}, target, opts);
  EXPECT_EQ(from_conv, finetune_loss(*model.classifier, classify_from_conv(model, conv), target));
  EXPECT_EQ(classify_from_conv(model, conv), classify(model, clip));
  for (const ConvLayer& layer : model.cnn) {
    EXPECT_TRUE((layer.weight.grad.array() == 0.0).all());
    EXPECT_TRUE((layer.bias.grad.array() == 0.0).all());
  }
}
