#include "bioenc/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bioenc/eval.hpp"
#include "bioenc/features.hpp"

namespace bioenc {

using nlohmann::json;

namespace {

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  return order;
}

bool is_cnn(const std::string& name) { return name.starts_with("cnn."); }

}  // namespace

// ---------------------------------------------------------------------------
// Adam

std::vector<NamedParam> optimizer_params(EncoderModel& model, bool exclude_cnn) {
  std::vector<NamedParam> out;
  model.for_each_param(EncoderModel::ParamVisitor([&](const std::string& name, ParamGroup group, Param& p) {
    if (!p.trainable) return;
    if (exclude_cnn && group == ParamGroup::kCnn) return;
    out.push_back({name, &p});
  }));
  return out;
}

void adam_step(std::span<const NamedParam> params, AdamState& state, double lr) {
  for (const auto& np : params) {
    if (np.param->grad.rows() != np.param->value.rows() || np.param->grad.cols() != np.param->value.cols()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch for '" + np.name + "'");
    }
    if (!np.param->grad.allFinite()) throw NumericError("adam_step: non-finite gradient in '" + np.name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& np : params) {
    Param& p = *np.param;
    auto [it, inserted] = state.moments.try_emplace(np.name);
    AdamMoments& mo = it->second;
    if (inserted) {
      mo.m = Mat::Zero(p.value.rows(), p.value.cols());
      mo.v = Mat::Zero(p.value.rows(), p.value.cols());
    }
    mo.m = state.beta1 * mo.m + (1.0 - state.beta1) * p.grad;
    mo.v = state.beta2 * mo.v + (1.0 - state.beta2) * p.grad.cwiseProduct(p.grad);
    round_to_f32(mo.m);
    round_to_f32(mo.v);
    p.value.array() -= lr * (mo.m.array() / bc1) / ((mo.v.array() / bc2).sqrt() + state.eps);
    round_to_f32(p.value);
  }
}

double clip_grad_norm(std::span<const NamedParam> params, double max_norm) {
  double sq = 0.0;
  for (const auto& np : params) sq += np.param->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& np : params) np.param->grad *= s;
  }
  return norm;
}

void put_adam(CheckpointContainer& c, const AdamState& state) {
  c.metadata["optimizer"] = {{"name", "adam"},
                             {"beta1", state.beta1},
                             {"beta2", state.beta2},
                             {"eps", state.eps},
                             {"step", state.step}};
  for (const auto& [name, mo] : state.moments) {
    c.tensors["optim.m." + name] = to_tensor(mo.m);
    c.tensors["optim.v." + name] = to_tensor(mo.v);
  }
}

AdamState get_adam(const CheckpointContainer& c) {
  AdamState s;
  if (!c.metadata.contains("optimizer")) return s;
  const auto& j = c.metadata.at("optimizer");
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  s.step = j.at("step").get<std::int64_t>();
  const std::string prefix = "optim.m.";
  for (auto it = c.tensors.lower_bound(prefix); it != c.tensors.end() && it->first.starts_with(prefix); ++it) {
    const std::string name = it->first.substr(prefix.size());
    const auto v = c.tensors.find("optim.v." + name);
    if (v == c.tensors.end()) throw DataError("checkpoint: missing second moment for '" + name + "'");
    s.moments[name] = {to_mat(it->second), to_mat(v->second)};
  }
  return s;
}

// ---------------------------------------------------------------------------
// Pretraining

int PretrainConfig::effective_warmup() const {
  return warmup_steps >= 0 ? warmup_steps : static_cast<int>(std::lround(0.08 * total_steps));
}

void PretrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("pretrain: lr must be > 0");
  if (!(batch_seconds > 0.0)) throw ConfigError("pretrain: batch_seconds must be > 0");
  if (total_steps < 1) throw ConfigError("pretrain: total_steps must be >= 1");
  if (stage != 1 && stage != 2) throw ConfigError("pretrain: stage must be 1 or 2");
  if (checkpoint_every < 0) throw ConfigError("pretrain: checkpoint_every must be >= 0");
}

json to_json(const PretrainConfig& cfg) {
  return {{"lr", cfg.lr},
          {"batch_seconds", cfg.batch_seconds},
          {"total_steps", cfg.total_steps},
          {"stage", cfg.stage},
          {"seed", cfg.seed},
          {"warmup_steps", cfg.effective_warmup()},
          {"clip_grad_norm", cfg.clip_grad_norm},
          {"checkpoint_every", cfg.checkpoint_every}};
}

std::vector<double> pretrain(EncoderModel& model, std::span<const AudioClip> corpus,
                             std::span<const UnitSequence> units, const PretrainConfig& cfg, AdamState& state,
                             const PretrainHooks& hooks) {
  cfg.validate();
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  if (units.size() != corpus.size()) {
    throw DataError("pretrain: " + std::to_string(corpus.size()) + " clips but " + std::to_string(units.size()) +
                    " unit sequences");
  }
  const ModelConfig& mc = model.config();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Eigen::Index frames = encoder_frame_count(mc, corpus[i].samples.size());
    if (static_cast<Eigen::Index>(units[i].units.size()) != frames) {
      throw DataError("pretrain: clip '" + corpus[i].source_id + "' has " + std::to_string(frames) +
                      " encoder frames but " + std::to_string(units[i].units.size()) + " units");
    }
    for (int u : units[i].units) {
      if (u < 0 || u >= mc.num_units) throw DataError("pretrain: unit index out of range in '" + corpus[i].source_id + "'");
    }
  }

  model.set_cnn_trainable(true);
  const auto params = optimizer_params(model, false);
  model.zero_grad();
  const int warmup = cfg.effective_warmup();
  std::vector<double> trace;

  while (state.step < cfg.total_steps) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::int64_t step = state.step;
    const std::uint64_t step_seed = mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(cfg.stage)),
                                             static_cast<std::uint64_t>(step));
    Rng rng(step_seed);
    std::vector<std::size_t> batch;
    double seconds = 0.0;
    for (std::size_t idx : permutation(corpus.size(), rng)) {
      batch.push_back(idx);
      seconds += corpus[idx].duration_s();
      if (seconds >= cfg.batch_seconds) break;
    }

    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t idx = batch[b];
      const Eigen::Index frames = static_cast<Eigen::Index>(units[idx].units.size());
      const std::uint64_t clip_seed = mix_seed(step_seed, b + 1);
      MaskSpec mask = sample_mask(frames, mc, clip_seed);
      if (mask.masked_positions.empty()) {
        // The loss is undefined without masked frames; force one span.
        Rng fallback(mix_seed(clip_seed, 0xfa11));
        const auto start = static_cast<Eigen::Index>(fallback.below(static_cast<std::uint64_t>(frames)));
        for (Eigen::Index t = start; t < std::min<Eigen::Index>(frames, start + mc.mask_span); ++t) {
          mask.masked_positions.push_back(static_cast<int>(t));
        }
      }
      GradOptions go;
      go.scale = scale;
      go.train_cnn = true;
      go.training = true;
      go.dropout_seed = mix_seed(clip_seed, 0xd0);
      loss += scale * pretrain_loss_and_grad(model, {&corpus[idx], nullptr}, mask, units[idx], go);
    }
    if (!std::isfinite(loss)) throw NumericError("pretrain: non-finite loss at step " + std::to_string(step + 1));

    clip_grad_norm(params, cfg.clip_grad_norm);
    const double lr = warmup > 0 ? cfg.lr * std::min(1.0, static_cast<double>(step + 1) / warmup) : cfg.lr;
    adam_step(params, state, lr);
    model.zero_grad();
    trace.push_back(loss);

    const auto t1 = std::chrono::steady_clock::now();
    if (hooks.on_step) {
      hooks.on_step({static_cast<int>(state.step), cfg.stage, loss, lr,
                     std::chrono::duration<double, std::milli>(t1 - t0).count()});
    }
    const bool last = state.step >= cfg.total_steps;
    if (hooks.on_checkpoint && (last || (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0))) {
      hooks.on_checkpoint(static_cast<int>(state.step), model, state);
    }
  }
  return trace;
}

UnitSequence align_units(const UnitSequence& units, double frame_rate, Eigen::Index frames) {
  if (units.units.empty()) throw DataError("align_units: empty unit sequence '" + units.source_id + "'");
  UnitSequence out;
  out.source_id = units.source_id;
  out.frame_rate = frame_rate;
  const double ratio = units.frame_rate / frame_rate;
  const auto last = static_cast<Eigen::Index>(units.units.size()) - 1;
  for (Eigen::Index t = 0; t < frames; ++t) {
    const auto src = std::min<Eigen::Index>(last, static_cast<Eigen::Index>(std::floor(t * ratio + 1e-9)));
    out.units.push_back(units.units[static_cast<std::size_t>(src)]);
  }
  return out;
}

namespace {

json two_stage_metadata(const TwoStageConfig& cfg, const TwoStageResult& r, bool include_stage2) {
  json meta;
  meta["stage"] = include_stage2 ? 2 : 1;
  meta["seed"] = cfg.seed;
  meta["layer"] = r.layer;
  meta["stage2_init"] = cfg.stage2_init == StageInit::kFresh ? "fresh" : "continue";
  meta["kmeans"] = {{"k", cfg.model.num_units},
                    {"max_iters", cfg.kmeans.max_iters},
                    {"max_frames", cfg.kmeans.max_frames},
                    {"stage1_standardized", true},
                    {"stage2_standardized", true}};
  meta["features"] = {{"kind", "mfcc39"},
                      {"window_ms", 25},
                      {"hop_ms", 10},
                      {"filters", 26},
                      {"mel", "htk"},
                      {"c0", "log_energy"},
                      {"preemphasis", 0.97},
                      {"window", "hamming"}};
  meta["pretrain"]["stage1"] = to_json(cfg.stage1);
  meta["loss_trace"]["stage1"] = r.trace1;
  if (include_stage2) {
    meta["pretrain"]["stage2"] = to_json(cfg.stage2);
    meta["loss_trace"]["stage2"] = r.trace2;
  }
  return meta;
}

}  // namespace

CheckpointContainer TwoStageResult::stage1_checkpoint(const TwoStageConfig& cfg) const {
  CheckpointContainer c;
  c.metadata = two_stage_metadata(cfg, *this, false);
  put_model(c, stage1_model);
  put_adam(c, adam1);
  put_codebook(c, "codebook.stage1", codebook1);
  put_units(c, "units.stage1", units1);
  return c;
}

CheckpointContainer TwoStageResult::final_checkpoint(const TwoStageConfig& cfg) const {
  if (cfg.stage1_only) return stage1_checkpoint(cfg);
  CheckpointContainer c;
  c.metadata = two_stage_metadata(cfg, *this, true);
  put_model(c, model);
  put_adam(c, adam2);
  put_codebook(c, "codebook.stage1", codebook1);
  put_codebook(c, "codebook.stage2", codebook2);
  put_units(c, "units.stage1", units1);
  put_units(c, "units.stage2", units2);
  return c;
}

TwoStageResult run_two_stage(std::span<const AudioClip> corpus, const TwoStageConfig& cfg,
                             const TwoStageHooks& hooks) {
  cfg.model.validate();
  if (corpus.empty()) throw DataError("run_two_stage: empty corpus");
  TwoStageResult r;
  r.layer = cfg.layer >= 0 ? cfg.layer : default_relabel_layer(cfg.model.depth);
  if (r.layer >= cfg.model.depth) {
    throw ConfigError("layer " + std::to_string(r.layer) + " outside [0, " + std::to_string(cfg.model.depth) + ")");
  }

  // Stage 1 targets: k-means over standardized MFCCs, mapped to 50 fps.
  std::vector<FrameFeatures> mfcc;
  mfcc.reserve(corpus.size());
  for (const auto& clip : corpus) mfcc.push_back(mfcc39(clip));
  const FeatureStats stats = compute_stats(mfcc);
  for (auto& f : mfcc) f = standardize(f, stats);
  KMeansOptions km = cfg.kmeans;
  km.k = cfg.model.num_units;
  km.seed = mix_seed(cfg.seed, 0x51);
  r.codebook1 = kmeans_fit(std::span<const FrameFeatures>(mfcc), km);
  r.codebook1.stage = 1;
  r.codebook1.input_stats = stats;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const UnitSequence raw = assign(r.codebook1, mfcc[i]);
    r.units1.push_back(
        align_units(raw, cfg.model.frame_rate(), encoder_frame_count(cfg.model, corpus[i].samples.size())));
  }

  PretrainConfig p1 = cfg.stage1;
  p1.stage = 1;
  r.stage1_model = EncoderModel(cfg.model, mix_seed(cfg.seed, 1));
  r.trace1 = pretrain(r.stage1_model, corpus, r.units1, p1, r.adam1, hooks.stage1);
  if (cfg.stage1_only) {
    r.model = r.stage1_model;
    return r;
  }

  km.seed = mix_seed(cfg.seed, 0x52);
  Relabeling relabel = relabel_from_model(r.stage1_model, corpus, r.layer, km);
  r.codebook2 = std::move(relabel.codebook);
  r.units2 = std::move(relabel.units);

  PretrainConfig p2 = cfg.stage2;
  p2.stage = 2;
  r.model = cfg.stage2_init == StageInit::kFresh ? EncoderModel(cfg.model, mix_seed(cfg.seed, 2)) : r.stage1_model;
  r.trace2 = pretrain(r.model, corpus, r.units2, p2, r.adam2, hooks.stage2);
  return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning

const char* to_string(Task task) { return task == Task::kClassification ? "classification" : "detection"; }

void FinetuneConfig::validate() const {
  if (lrs.empty()) throw ConfigError("finetune: lrs must be non-empty");
  for (double lr : lrs) {
    if (!(lr > 0.0)) throw ConfigError("finetune: learning rates must be > 0");
  }
  if (epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
}

json to_json(const FinetuneConfig& cfg) {
  return {{"lrs", cfg.lrs},           {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size}, {"task", to_string(cfg.task)},
          {"freeze_cnn", cfg.freeze_cnn}, {"seed", cfg.seed},
          {"selection_metric", cfg.selection_metric()}};
}

json SweepReport::to_json() const {
  json runs_json = json::array();
  for (const auto& run : runs) {
    json epochs = json::array();
    for (const auto& e : run.epochs) {
      epochs.push_back({{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"train_metric", e.train_metric},
                        {"valid_metric", e.valid_metric}});
    }
    runs_json.push_back({{"lr", run.lr}, {"epochs", epochs}});
  }
  return {{"metric", metric_name},
          {"runs", runs_json},
          {"best", {{"lr", best_lr}, {"epoch", best_epoch}, {"metric", best_metric}}}};
}

namespace {

Mat scores_from_inputs(const EncoderModel& model, std::span<const EncoderInput> inputs) {
  const ClassifierHead& head = *model.classifier;
  Mat scores(static_cast<Eigen::Index>(inputs.size()), head.classes());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const RowVec z = inputs[i].conv ? classify_from_conv(model, *inputs[i].conv) : classify(model, *inputs[i].clip);
    if (head.mode == HeadMode::kSigmoidBce) {
      scores.row(static_cast<Eigen::Index>(i)) = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    } else {
      RowVec p = (z.array() - z.maxCoeff()).exp();
      scores.row(static_cast<Eigen::Index>(i)) = p / p.sum();
    }
  }
  return scores;
}

double metric_from_scores(const Mat& scores, std::span<const Example> examples, Task task) {
  if (task == Task::kClassification) {
    std::vector<int> pred;
    std::vector<int> gold;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      Eigen::Index p = 0;
      Eigen::Index g = 0;
      scores.row(i).maxCoeff(&p);  // first maximum = lowest index
      examples[static_cast<std::size_t>(i)].target.maxCoeff(&g);
      pred.push_back(static_cast<int>(p));
      gold.push_back(static_cast<int>(g));
    }
    return accuracy(pred, gold);
  }
  Eigen::MatrixXi labels(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      labels(i, c) = examples[static_cast<std::size_t>(i)].target(c) > 0.5 ? 1 : 0;
    }
  }
  return mean_average_precision(scores, labels).value;
}

}  // namespace

Mat predict_scores(const EncoderModel& model, std::span<const Example> examples) {
  if (!model.classifier) throw std::logic_error("predict_scores: model has no classifier head");
  std::vector<EncoderInput> inputs;
  for (const auto& e : examples) inputs.push_back({&e.clip, nullptr});
  return scores_from_inputs(model, inputs);
}

double evaluate(const EncoderModel& model, std::span<const Example> examples, Task task) {
  if (examples.empty()) throw DataError("evaluate: no examples");
  return metric_from_scores(predict_scores(model, examples), examples, task);
}

FinetuneResult finetune(const EncoderModel& pretrained, const LabeledSplits& data, const FinetuneConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw DataError("finetune: empty train split");
  if (data.valid.empty()) throw DataError("finetune: empty valid split");
  if (data.num_classes < 1) throw DataError("finetune: no classes");
  for (const auto* split : {&data.train, &data.valid}) {
    for (const auto& e : *split) {
      if (e.target.size() != data.num_classes) {
        throw DataError("finetune: example '" + e.clip.source_id + "' target has " +
                        std::to_string(e.target.size()) + " classes, expected " + std::to_string(data.num_classes));
      }
    }
  }

  const HeadMode mode = cfg.task == Task::kClassification ? HeadMode::kSoftmaxCe : HeadMode::kSigmoidBce;
  EncoderModel base = pretrained;
  base.attach_classifier(data.num_classes, mode, mix_seed(cfg.seed, 0xc1a5));
  base.set_cnn_trainable(!cfg.freeze_cnn);

  // With a frozen CNN its output never changes, so compute it once.
  std::vector<Mat> train_conv;
  std::vector<Mat> valid_conv;
  if (cfg.freeze_cnn) {
    for (const auto& e : data.train) train_conv.push_back(conv_features(base, e.clip));
    for (const auto& e : data.valid) valid_conv.push_back(conv_features(base, e.clip));
  }
  const auto inputs_for = [&](const std::vector<Example>& split, const std::vector<Mat>& conv) {
    std::vector<EncoderInput> in;
    for (std::size_t i = 0; i < split.size(); ++i) {
      in.push_back(cfg.freeze_cnn ? EncoderInput{nullptr, &conv[i]} : EncoderInput{&split[i].clip, nullptr});
    }
    return in;
  };
  const auto train_in = inputs_for(data.train, train_conv);
  const auto valid_in = inputs_for(data.valid, valid_conv);

  FinetuneResult result{base, {}};
  result.report.metric_name = cfg.selection_metric();
  bool have_best = false;

  for (std::size_t li = 0; li < cfg.lrs.size(); ++li) {
    const double lr = cfg.lrs[li];
    EncoderModel model = base;
    const auto params = optimizer_params(model, cfg.freeze_cnn);
    for (const auto& np : params) {
      if (cfg.freeze_cnn && is_cnn(np.name)) throw std::logic_error("finetune: CNN parameter in optimizer set");
    }
    AdamState adam;
    model.zero_grad();
    SweepRun run{lr, {}};

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      Rng rng(mix_seed(mix_seed(cfg.seed, li + 1), static_cast<std::uint64_t>(epoch)));
      const auto order = permutation(data.train.size(), rng);
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        const double scale = 1.0 / static_cast<double>(end - start);
        for (std::size_t b = start; b < end; ++b) {
          const std::size_t idx = order[b];
          GradOptions go;
          go.scale = scale;
          go.train_cnn = !cfg.freeze_cnn;
          go.training = true;
          go.dropout_seed = mix_seed(rng.next_u64(), idx);
          loss_sum += finetune_loss_and_grad(model, train_in[idx], data.train[idx].target, go);
        }
        adam_step(params, adam, lr);
        model.zero_grad();
      }
      const double train_loss = loss_sum / static_cast<double>(order.size());
      if (!std::isfinite(train_loss)) throw NumericError("finetune: non-finite training loss");
      const double train_metric = metric_from_scores(scores_from_inputs(model, train_in), data.train, cfg.task);
      const double metric = metric_from_scores(scores_from_inputs(model, valid_in), data.valid, cfg.task);
      run.epochs.push_back({epoch, train_loss, train_metric, metric});
      if (!have_best || metric > result.report.best_metric) {
        have_best = true;
        result.best = model;
        result.report.best_metric = metric;
        result.report.best_lr = lr;
        result.report.best_epoch = epoch;
      }
    }
    result.report.runs.push_back(std::move(run));
  }
  result.best.zero_grad();
  return result;
}

}  // namespace bioenc
