#include "bioenc/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace bioenc {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kCosineEps = 1e-8;

// ---------------------------------------------------------------------------
// Initialization

Mat uniform_init(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  round_to_f32(m);
  return m;
}

Param make_param(Mat value) {
  Param p;
  p.value = std::move(value);
  p.zero_grad();
  return p;
}

LinearParams make_linear(int in, int out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (in + out));
  return {make_param(uniform_init(in, out, -bound, bound, rng)), make_param(Mat::Zero(1, out))};
}

LayerNormParams make_norm(int dim) { return {make_param(Mat::Ones(1, dim)), make_param(Mat::Zero(1, dim))}; }

// ---------------------------------------------------------------------------
// Layer primitives. Activations are (frames x channels), row-major.

Mat linear_forward(const Mat& x, const LinearParams& p) {
  Mat y = x * p.weight.value;
  y.rowwise() += p.bias.value.row(0);
  return y;
}

Mat linear_backward(const Mat& x, const Mat& dy, LinearParams& p) {
  p.weight.grad.noalias() += x.transpose() * dy;
  p.bias.grad.row(0) += dy.colwise().sum();
  return dy * p.weight.value.transpose();
}

struct NormCache {
  Mat xhat;
  Vec inv_std;
};

Mat norm_forward(const Mat& x, const LayerNormParams& p, NormCache& cache) {
  const Eigen::Index d = x.cols();
  const Vec mean = x.rowwise().mean();
  cache.xhat = x.colwise() - mean;
  const Vec var = cache.xhat.rowwise().squaredNorm() / static_cast<double>(d);
  cache.inv_std = (var.array() + kLayerNormEps).rsqrt();
  cache.xhat = cache.inv_std.asDiagonal() * cache.xhat;
  Mat y = cache.xhat.array().rowwise() * p.gamma.value.row(0).array();
  y.rowwise() += p.beta.value.row(0);
  return y;
}

Mat norm_backward(const Mat& dy, LayerNormParams& p, const NormCache& cache) {
  p.gamma.grad.row(0) += (dy.array() * cache.xhat.array()).matrix().colwise().sum();
  p.beta.grad.row(0) += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * p.gamma.value.row(0).array();
  const double d = static_cast<double>(dy.cols());
  const Vec mean_dxhat = dxhat.rowwise().sum() / d;
  const Vec mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum().matrix() / d;
  Mat dx = dxhat;
  dx.colwise() -= mean_dxhat;
  dx -= (cache.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
  return cache.inv_std.asDiagonal() * dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Mat gelu_forward(const Mat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

Mat gelu_backward(const Mat& pre, const Mat& dy) {
  return dy.cwiseProduct(pre.unaryExpr([](double v) { return gelu_grad(v); }));
}

void softmax_rows(Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

// Row normalization with the norm clamped below at kCosineEps.
Mat normalize_rows(const Mat& x, Vec& norms) {
  norms = x.rowwise().norm().cwiseMax(kCosineEps);
  return norms.cwiseInverse().asDiagonal() * x;
}

Mat normalize_rows_backward(const Mat& xn, const Vec& norms, const Mat& dxn) {
  Mat dx(xn.rows(), xn.cols());
  for (Eigen::Index r = 0; r < xn.rows(); ++r) {
    if (norms(r) > kCosineEps) {
      dx.row(r) = (dxn.row(r) - xn.row(r) * dxn.row(r).dot(xn.row(r))) / norms(r);
    } else {
      dx.row(r) = dxn.row(r) / kCosineEps;
    }
  }
  return dx;
}

// --- 1-D convolution via im2col -------------------------------------------

struct ConvCache {
  Mat col;  // (frames_out x kernel * in_channels)
  Mat pre;  // pre-activation
  Eigen::Index in_frames = 0;
};

Eigen::Index conv_out_frames(Eigen::Index n, int stride) { return n >= stride ? n / stride : 0; }

int left_pad(const ConvSpec& s) { return (s.kernel - s.stride) / 2; }

Mat im2col(const Mat& x, const ConvSpec& s, Eigen::Index frames_out) {
  const Eigen::Index cin = x.cols();
  const Eigen::Index n = x.rows();
  Mat col = Mat::Zero(frames_out, s.kernel * cin);
  const int pad = left_pad(s);
  for (Eigen::Index j = 0; j < frames_out; ++j) {
    for (int o = 0; o < s.kernel; ++o) {
      const Eigen::Index src = j * s.stride - pad + o;
      if (src < 0 || src >= n) continue;
      col.row(j).segment(o * cin, cin) = x.row(src);
    }
  }
  return col;
}

Mat col2im(const Mat& dcol, const ConvSpec& s, Eigen::Index in_frames, Eigen::Index cin) {
  Mat dx = Mat::Zero(in_frames, cin);
  const int pad = left_pad(s);
  for (Eigen::Index j = 0; j < dcol.rows(); ++j) {
    for (int o = 0; o < s.kernel; ++o) {
      const Eigen::Index src = j * s.stride - pad + o;
      if (src < 0 || src >= in_frames) continue;
      dx.row(src) += dcol.row(j).segment(o * cin, cin);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Full pass with caches

struct BlockCache {
  NormCache ln1;
  Mat a;  // ln1 output
  Mat q, k, v;
  std::vector<Mat> probs;  // per head (T x T)
  Mat ctx;
  Mat drop_attn;  // dropout multipliers or empty
  NormCache ln2;
  Mat b;  // ln2 output
  Mat ffn_pre;
  Mat ffn_act;
  Mat drop_ffn;
};

struct Pass {
  bool from_clip = false;
  std::vector<ConvCache> conv;
  Mat conv_out;
  NormCache frontend_norm;
  Mat frontend_normed;
  std::vector<int> masked;
  std::vector<BlockCache> blocks;
  std::vector<Mat> layer_states;
  NormCache final_norm;
  Mat hidden;
};

Mat positional_encoding(Eigen::Index frames, int dim) {
  Mat pe(frames, dim);
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int i = 0; i < dim; i += 2) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(i) / dim);
      pe(t, i) = std::sin(angle);
      if (i + 1 < dim) pe(t, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? 0.0 : keep;
  return m;
}

Mat run_conv_stack(const EncoderModel& model, const AudioClip& clip, std::vector<ConvCache>* caches) {
  const ModelConfig& cfg = model.config();
  if (clip.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("encoder expects " + std::to_string(cfg.sample_rate) + " Hz audio, got " +
                                std::to_string(clip.sample_rate) + " Hz");
  }
  if (encoder_frame_count(cfg, clip.samples.size()) < 1) {
    throw std::invalid_argument("clip '" + clip.source_id + "' is too short for the encoder (" +
                                std::to_string(clip.samples.size()) + " samples, need at least " +
                                std::to_string(cfg.total_stride()) + ")");
  }
  Mat x(static_cast<Eigen::Index>(clip.samples.size()), 1);
  for (std::size_t i = 0; i < clip.samples.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = clip.samples[i];
  for (const ConvLayer& layer : model.cnn) {
    ConvCache cache;
    cache.in_frames = x.rows();
    cache.col = im2col(x, layer.spec, conv_out_frames(x.rows(), layer.spec.stride));
    cache.pre = cache.col * layer.weight.value;
    cache.pre.rowwise() += layer.bias.value.row(0);
    x = gelu_forward(cache.pre);
    if (caches) caches->push_back(std::move(cache));
  }
  return x;
}

void check_mask(const MaskSpec* mask, Eigen::Index frames) {
  if (!mask) return;
  if (mask->seq_len != frames) {
    throw std::invalid_argument("mask length " + std::to_string(mask->seq_len) + " does not match " +
                                std::to_string(frames) + " encoder frames");
  }
  for (int t : mask->masked_positions) {
    if (t < 0 || t >= frames) throw std::invalid_argument("mask position out of range");
  }
}

Pass run_pass(const EncoderModel& model, const EncoderInput& input, const MaskSpec* mask, bool keep_layers,
              bool training, std::uint64_t dropout_seed) {
  const ModelConfig& cfg = model.config();
  Pass pass;
  if (input.conv) {
    pass.conv_out = *input.conv;
  } else if (input.clip) {
    pass.from_clip = true;
    pass.conv_out = run_conv_stack(model, *input.clip, &pass.conv);
  } else {
    throw std::invalid_argument("encoder input has neither clip nor conv features");
  }
  const Eigen::Index frames = pass.conv_out.rows();
  check_mask(mask, frames);

  pass.frontend_normed = norm_forward(pass.conv_out, model.frontend_norm, pass.frontend_norm);
  Mat x = linear_forward(pass.frontend_normed, model.frontend_proj);
  if (mask) {
    pass.masked = mask->masked_positions;
    for (int t : pass.masked) x.row(t) = model.mask_embedding.value.row(0);
  }
  if (cfg.positional) x += positional_encoding(frames, cfg.hidden_dim);
  if (keep_layers) pass.layer_states.push_back(x);

  const bool use_dropout = training && cfg.dropout > 0.0;
  Rng drop_rng(dropout_seed);
  const int dh = cfg.hidden_dim / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  pass.blocks.resize(model.blocks.size());
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const TransformerBlock& blk = model.blocks[l];
    BlockCache& c = pass.blocks[l];
    c.a = norm_forward(x, blk.ln1, c.ln1);
    c.q = linear_forward(c.a, blk.query);
    c.k = linear_forward(c.a, blk.key);
    c.v = linear_forward(c.a, blk.value);
    c.ctx.resize(frames, cfg.hidden_dim);
    c.probs.resize(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      Mat s = scale * (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose());
      softmax_rows(s);
      c.ctx.middleCols(h * dh, dh) = s * c.v.middleCols(h * dh, dh);
      c.probs[h] = std::move(s);
    }
    Mat attn = linear_forward(c.ctx, blk.out);
    if (use_dropout) {
      c.drop_attn = dropout_mask(frames, cfg.hidden_dim, cfg.dropout, drop_rng);
      attn = attn.cwiseProduct(c.drop_attn);
    }
    x += attn;

    c.b = norm_forward(x, blk.ln2, c.ln2);
    c.ffn_pre = linear_forward(c.b, blk.ffn_in);
    c.ffn_act = gelu_forward(c.ffn_pre);
    Mat ffn = linear_forward(c.ffn_act, blk.ffn_out);
    if (use_dropout) {
      c.drop_ffn = dropout_mask(frames, cfg.hidden_dim, cfg.dropout, drop_rng);
      ffn = ffn.cwiseProduct(c.drop_ffn);
    }
    x += ffn;
    if (keep_layers) pass.layer_states.push_back(x);
  }
  pass.hidden = norm_forward(x, model.final_norm, pass.final_norm);
  return pass;
}

void backward_pass(EncoderModel& model, const Pass& pass, const Mat& dhidden, bool train_cnn) {
  const ModelConfig& cfg = model.config();
  const int dh = cfg.hidden_dim / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dx = norm_backward(dhidden, model.final_norm, pass.final_norm);
  for (std::size_t li = model.blocks.size(); li-- > 0;) {
    TransformerBlock& blk = model.blocks[li];
    const BlockCache& c = pass.blocks[li];

    Mat dffn = c.drop_ffn.size() ? Mat(dx.cwiseProduct(c.drop_ffn)) : dx;
    Mat dact = linear_backward(c.ffn_act, dffn, blk.ffn_out);
    Mat dpre = gelu_backward(c.ffn_pre, dact);
    Mat db = linear_backward(c.b, dpre, blk.ffn_in);
    dx += norm_backward(db, blk.ln2, c.ln2);

    Mat dattn = c.drop_attn.size() ? Mat(dx.cwiseProduct(c.drop_attn)) : dx;
    Mat dctx = linear_backward(c.ctx, dattn, blk.out);
    Mat dq(dctx.rows(), dctx.cols());
    Mat dk(dctx.rows(), dctx.cols());
    Mat dv(dctx.rows(), dctx.cols());
    for (int h = 0; h < cfg.heads; ++h) {
      const Mat& p = c.probs[h];
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh) = p.transpose() * dctx_h;
      Mat dp = dctx_h * c.v.middleCols(h * dh, dh).transpose();
      const Vec row_dot = (dp.array() * p.array()).rowwise().sum();
      Mat ds = p.array() * (dp.colwise() - row_dot).array();
      dq.middleCols(h * dh, dh) = scale * (ds * c.k.middleCols(h * dh, dh));
      dk.middleCols(h * dh, dh) = scale * (ds.transpose() * c.q.middleCols(h * dh, dh));
    }
    Mat da = linear_backward(c.a, dq, blk.query);
    da += linear_backward(c.a, dk, blk.key);
    da += linear_backward(c.a, dv, blk.value);
    dx += norm_backward(da, blk.ln1, c.ln1);
  }

  for (int t : pass.masked) {
    model.mask_embedding.grad.row(0) += dx.row(t);
    dx.row(t).setZero();
  }
  const Mat dnormed = linear_backward(pass.frontend_normed, dx, model.frontend_proj);
  Mat dconv = norm_backward(dnormed, model.frontend_norm, pass.frontend_norm);

  if (!train_cnn || !pass.from_clip) return;
  for (std::size_t li = model.cnn.size(); li-- > 0;) {
    ConvLayer& layer = model.cnn[li];
    const ConvCache& c = pass.conv[li];
    const Mat dpre = gelu_backward(c.pre, dconv);
    layer.weight.grad.noalias() += c.col.transpose() * dpre;
    layer.bias.grad.row(0) += dpre.colwise().sum();
    if (li == 0) break;
    const Mat dcol = dpre * layer.weight.value.transpose();
    dconv = col2im(dcol, layer.spec, c.in_frames, model.cnn[li - 1].spec.channels);
  }
}

// Cosine-similarity logits and the normalized operands needed for backprop.
struct PredictorPass {
  Mat proj;
  Mat proj_n;
  Vec proj_norms;
  Mat emb_n;
  Vec emb_norms;
  Mat probs;
};

PredictorPass predictor_forward(const Mat& hidden, const PredictorHead& head) {
  PredictorPass p;
  p.proj = hidden * head.projection.value;
  p.proj_n = normalize_rows(p.proj, p.proj_norms);
  p.emb_n = normalize_rows(head.unit_embeddings.value, p.emb_norms);
  p.probs = (p.proj_n * p.emb_n.transpose()) / head.temperature;
  softmax_rows(p.probs);
  return p;
}

void check_targets(Eigen::Index rows, const UnitSequence& targets, const MaskSpec& mask, Eigen::Index k) {
  if (static_cast<Eigen::Index>(targets.units.size()) != rows || mask.seq_len != rows) {
    throw std::invalid_argument("pretrain_loss: probs have " + std::to_string(rows) + " rows, targets " +
                                std::to_string(targets.units.size()) + ", mask " + std::to_string(mask.seq_len));
  }
  if (mask.masked_positions.empty()) throw std::invalid_argument("pretrain_loss: empty mask, loss undefined");
  for (int t : mask.masked_positions) {
    const int z = targets.units[static_cast<std::size_t>(t)];
    if (z < 0 || z >= k) throw std::invalid_argument("pretrain_loss: target unit out of range");
  }
}

const ClassifierHead& require_head(const EncoderModel& model) {
  if (!model.classifier) throw std::logic_error("model has no classifier head attached");
  return *model.classifier;
}

RowVec head_logits(const ClassifierHead& head, const RowVec& pooled) {
  RowVec z = pooled * head.weight.value;
  z += head.bias.value.row(0);
  return z;
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------

int ModelConfig::total_stride() const {
  int s = 1;
  for (const auto& c : cnn) s *= c.stride;
  return s;
}

void ModelConfig::validate() const {
  if (cnn.empty()) throw ConfigError("model: cnn stack is empty");
  for (const auto& c : cnn) {
    if (c.channels < 1 || c.stride < 1 || c.kernel < c.stride) {
      throw ConfigError("model: conv layers need channels >= 1 and kernel >= stride >= 1");
    }
  }
  if (sample_rate <= 0 || sample_rate % total_stride() != 0 || sample_rate / total_stride() != 50) {
    throw ConfigError("model: cumulative cnn stride " + std::to_string(total_stride()) +
                      " does not give 50 frames per second at " + std::to_string(sample_rate) + " Hz");
  }
  if (depth < 1) throw ConfigError("model: depth must be >= 1");
  if (hidden_dim < 1 || heads < 1 || hidden_dim % heads != 0) {
    throw ConfigError("model: hidden_dim must be divisible by heads");
  }
  if (ffn_dim < 1 || proj_dim < 1) throw ConfigError("model: ffn_dim and proj_dim must be >= 1");
  if (num_units < 1) throw ConfigError("model: num_units must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("model: temperature must be > 0");
  if (mask_span < 1) throw ConfigError("model: mask_span must be >= 1");
  if (!(mask_start_prob >= 0.0 && mask_start_prob <= 1.0)) throw ConfigError("model: mask_start_prob out of [0, 1]");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout out of [0, 1)");
}

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::kCnn: return "cnn";
    case ParamGroup::kFrontend: return "frontend";
    case ParamGroup::kMaskEmbedding: return "mask_embedding";
    case ParamGroup::kTransformer: return "transformer";
    case ParamGroup::kPredictor: return "predictor";
    case ParamGroup::kClassifier: return "classifier";
  }
  return "unknown";
}

EncoderModel::EncoderModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  int in_ch = 1;
  for (const ConvSpec& spec : config_.cnn) {
    const int fan_in = spec.kernel * in_ch;
    const double bound = std::sqrt(6.0 / fan_in);
    cnn.push_back({spec, make_param(uniform_init(fan_in, spec.channels, -bound, bound, rng)),
                   make_param(Mat::Zero(1, spec.channels))});
    in_ch = spec.channels;
  }
  frontend_norm = make_norm(in_ch);
  frontend_proj = make_linear(in_ch, config_.hidden_dim, rng);
  mask_embedding = make_param(uniform_init(1, config_.hidden_dim, 0.0, 1.0, rng));
  for (int l = 0; l < config_.depth; ++l) {
    TransformerBlock b;
    b.ln1 = make_norm(config_.hidden_dim);
    b.query = make_linear(config_.hidden_dim, config_.hidden_dim, rng);
    b.key = make_linear(config_.hidden_dim, config_.hidden_dim, rng);
    b.value = make_linear(config_.hidden_dim, config_.hidden_dim, rng);
    b.out = make_linear(config_.hidden_dim, config_.hidden_dim, rng);
    b.ln2 = make_norm(config_.hidden_dim);
    b.ffn_in = make_linear(config_.hidden_dim, config_.ffn_dim, rng);
    b.ffn_out = make_linear(config_.ffn_dim, config_.hidden_dim, rng);
    blocks.push_back(std::move(b));
  }
  final_norm = make_norm(config_.hidden_dim);
  const double pbound = std::sqrt(6.0 / (config_.hidden_dim + config_.proj_dim));
  predictor.projection = make_param(uniform_init(config_.hidden_dim, config_.proj_dim, -pbound, pbound, rng));
  // Non-negative embeddings share a common direction, so initial predictions
  // are close to uniform over units.
  predictor.unit_embeddings = make_param(uniform_init(config_.num_units, config_.proj_dim, 0.0, 1.0, rng));
  predictor.temperature = config_.temperature;
}

void EncoderModel::attach_classifier(int classes, HeadMode mode, std::uint64_t seed) {
  if (classes < 1) throw std::invalid_argument("classifier needs at least one class");
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / (config_.hidden_dim + classes));
  ClassifierHead head;
  head.weight = make_param(uniform_init(config_.hidden_dim, classes, -bound, bound, rng));
  head.bias = make_param(Mat::Zero(1, classes));
  head.mode = mode;
  classifier = std::move(head);
}

void EncoderModel::for_each_param(const ParamVisitor& fn) {
  for (std::size_t i = 0; i < cnn.size(); ++i) {
    const std::string p = "cnn." + std::to_string(i) + ".";
    fn(p + "weight", ParamGroup::kCnn, cnn[i].weight);
    fn(p + "bias", ParamGroup::kCnn, cnn[i].bias);
  }
  fn("frontend.norm.gamma", ParamGroup::kFrontend, frontend_norm.gamma);
  fn("frontend.norm.beta", ParamGroup::kFrontend, frontend_norm.beta);
  fn("frontend.proj.weight", ParamGroup::kFrontend, frontend_proj.weight);
  fn("frontend.proj.bias", ParamGroup::kFrontend, frontend_proj.bias);
  fn("mask_embedding", ParamGroup::kMaskEmbedding, mask_embedding);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    TransformerBlock& b = blocks[l];
    const auto norm = [&](const std::string& n, LayerNormParams& ln) {
      fn(p + n + ".gamma", ParamGroup::kTransformer, ln.gamma);
      fn(p + n + ".beta", ParamGroup::kTransformer, ln.beta);
    };
    const auto lin = [&](const std::string& n, LinearParams& lp) {
      fn(p + n + ".weight", ParamGroup::kTransformer, lp.weight);
      fn(p + n + ".bias", ParamGroup::kTransformer, lp.bias);
    };
    norm("ln1", b.ln1);
    lin("attn.query", b.query);
    lin("attn.key", b.key);
    lin("attn.value", b.value);
    lin("attn.out", b.out);
    norm("ln2", b.ln2);
    lin("ffn.in", b.ffn_in);
    lin("ffn.out", b.ffn_out);
  }
  fn("final_norm.gamma", ParamGroup::kTransformer, final_norm.gamma);
  fn("final_norm.beta", ParamGroup::kTransformer, final_norm.beta);
  fn("predictor.projection", ParamGroup::kPredictor, predictor.projection);
  fn("predictor.unit_embeddings", ParamGroup::kPredictor, predictor.unit_embeddings);
  if (classifier) {
    fn("classifier.weight", ParamGroup::kClassifier, classifier->weight);
    fn("classifier.bias", ParamGroup::kClassifier, classifier->bias);
  }
}

void EncoderModel::for_each_param(const ConstParamVisitor& fn) const {
  const_cast<EncoderModel*>(this)->for_each_param(
      ParamVisitor([&](const std::string& name, ParamGroup group, Param& p) { fn(name, group, p); }));
}

void EncoderModel::zero_grad() {
  for_each_param(ParamVisitor([](const std::string&, ParamGroup, Param& p) { p.zero_grad(); }));
}

void EncoderModel::set_cnn_trainable(bool trainable) {
  for (auto& layer : cnn) {
    layer.weight.trainable = trainable;
    layer.bias.trainable = trainable;
  }
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for_each_param(ConstParamVisitor(
      [&](const std::string&, ParamGroup, const Param& p) { n += static_cast<std::size_t>(p.value.size()); }));
  return n;
}

bool MaskSpec::contains(int t) const {
  return std::binary_search(masked_positions.begin(), masked_positions.end(), t);
}

Eigen::Index encoder_frame_count(const ModelConfig& config, std::size_t num_samples) {
  auto n = static_cast<Eigen::Index>(num_samples);
  for (const auto& c : config.cnn) n = conv_out_frames(n, c.stride);
  return n;
}

Mat conv_features(const EncoderModel& model, const AudioClip& clip) {
  return run_conv_stack(model, clip, nullptr);
}

FrameFeatures cnn_encode(const EncoderModel& model, const AudioClip& clip) {
  NormCache cache;
  FrameFeatures f;
  f.data = linear_forward(norm_forward(conv_features(model, clip), model.frontend_norm, cache), model.frontend_proj);
  f.frame_rate = model.config().frame_rate();
  f.source_id = clip.source_id;
  return f;
}

MaskSpec sample_mask(Eigen::Index seq_len, const ModelConfig& config, std::uint64_t seed) {
  if (seq_len < 1) throw std::invalid_argument("sample_mask: sequence length must be >= 1");
  Rng rng(seed);
  std::vector<bool> masked(static_cast<std::size_t>(seq_len), false);
  for (Eigen::Index t = 0; t < seq_len; ++t) {
    if (rng.uniform() < config.mask_start_prob) {
      const Eigen::Index end = std::min<Eigen::Index>(seq_len, t + config.mask_span);
      for (Eigen::Index u = t; u < end; ++u) masked[static_cast<std::size_t>(u)] = true;
    }
  }
  MaskSpec spec;
  spec.seq_len = seq_len;
  for (Eigen::Index t = 0; t < seq_len; ++t) {
    if (masked[static_cast<std::size_t>(t)]) spec.masked_positions.push_back(static_cast<int>(t));
  }
  return spec;
}

ForwardOutput forward(const EncoderModel& model, const AudioClip& clip, const MaskSpec* mask, bool keep_layers) {
  Pass pass = run_pass(model, {&clip, nullptr}, mask, keep_layers, false, 0);
  ForwardOutput out;
  out.hidden.data = std::move(pass.hidden);
  out.hidden.frame_rate = model.config().frame_rate();
  out.hidden.source_id = clip.source_id;
  out.layer_states = std::move(pass.layer_states);
  return out;
}

ForwardOutput forward_from_conv(const EncoderModel& model, const Mat& conv, const MaskSpec* mask, bool keep_layers) {
  Pass pass = run_pass(model, {nullptr, &conv}, mask, keep_layers, false, 0);
  ForwardOutput out;
  out.hidden.data = std::move(pass.hidden);
  out.hidden.frame_rate = model.config().frame_rate();
  out.layer_states = std::move(pass.layer_states);
  return out;
}

Mat unit_probs(const FrameFeatures& hidden, const PredictorHead& head) {
  if (hidden.dim() != head.projection.value.rows()) {
    throw std::invalid_argument("unit_probs: hidden dim " + std::to_string(hidden.dim()) + " != projection rows " +
                                std::to_string(head.projection.value.rows()));
  }
  return predictor_forward(hidden.data, head).probs;
}

double pretrain_loss(const Mat& probs, const UnitSequence& targets, const MaskSpec& mask) {
  check_targets(probs.rows(), targets, mask, probs.cols());
  double sum = 0.0;
  for (int t : mask.masked_positions) sum -= std::log(probs(t, targets.units[static_cast<std::size_t>(t)]));
  return sum / static_cast<double>(mask.masked_positions.size());
}

RowVec mean_pool(const FrameFeatures& hidden) {
  if (hidden.frames() < 1) throw std::invalid_argument("mean_pool: no frames");
  return hidden.data.colwise().mean();
}

RowVec classify(const EncoderModel& model, const AudioClip& clip) {
  const ClassifierHead& head = require_head(model);
  return head_logits(head, mean_pool(forward(model, clip).hidden));
}

RowVec classify_from_conv(const EncoderModel& model, const Mat& conv) {
  const ClassifierHead& head = require_head(model);
  return head_logits(head, mean_pool(forward_from_conv(model, conv).hidden));
}

double finetune_loss(const ClassifierHead& head, const RowVec& logits, const RowVec& target) {
  if (logits.size() != target.size() || logits.size() != head.classes()) {
    throw std::invalid_argument("finetune_loss: logits/target size mismatch");
  }
  if (head.mode == HeadMode::kSoftmaxCe) {
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return lse * target.sum() - logits.dot(target);
  }
  double sum = 0.0;
  for (Eigen::Index c = 0; c < logits.size(); ++c) sum += softplus(logits(c)) - target(c) * logits(c);
  return sum / static_cast<double>(logits.size());
}

double pretrain_loss_and_grad(EncoderModel& model, const EncoderInput& input, const MaskSpec& mask,
                              const UnitSequence& targets, const GradOptions& opts) {
  Pass pass = run_pass(model, input, &mask, false, opts.training, opts.dropout_seed);
  const PredictorHead& head = model.predictor;
  PredictorPass pp = predictor_forward(pass.hidden, head);
  check_targets(pp.probs.rows(), targets, mask, pp.probs.cols());

  const double inv_m = 1.0 / static_cast<double>(mask.masked_positions.size());
  double loss = 0.0;
  Mat dlogits = Mat::Zero(pp.probs.rows(), pp.probs.cols());
  for (int t : mask.masked_positions) {
    const int z = targets.units[static_cast<std::size_t>(t)];
    loss -= std::log(pp.probs(t, z));
    dlogits.row(t) = pp.probs.row(t);
    dlogits(t, z) -= 1.0;
  }
  loss *= inv_m;
  dlogits *= opts.scale * inv_m / head.temperature;

  const Mat dproj_n = dlogits * pp.emb_n;
  const Mat demb_n = dlogits.transpose() * pp.proj_n;
  model.predictor.unit_embeddings.grad += normalize_rows_backward(pp.emb_n, pp.emb_norms, demb_n);
  const Mat dproj = normalize_rows_backward(pp.proj_n, pp.proj_norms, dproj_n);
  model.predictor.projection.grad.noalias() += pass.hidden.transpose() * dproj;
  const Mat dhidden = dproj * model.predictor.projection.value.transpose();
  backward_pass(model, pass, dhidden, opts.train_cnn);
  return loss;
}

double finetune_loss_and_grad(EncoderModel& model, const EncoderInput& input, const RowVec& target,
                              const GradOptions& opts) {
  require_head(model);
  Pass pass = run_pass(model, input, nullptr, false, opts.training, opts.dropout_seed);
  ClassifierHead& head = *model.classifier;
  const RowVec pooled = pass.hidden.colwise().mean();
  const RowVec logits = head_logits(head, pooled);
  const double loss = finetune_loss(head, logits, target);

  RowVec dlogits(logits.size());
  if (head.mode == HeadMode::kSoftmaxCe) {
    const double mx = logits.maxCoeff();
    RowVec p = (logits.array() - mx).exp();
    p /= p.sum();
    dlogits = p * target.sum() - target;
  } else {
    for (Eigen::Index c = 0; c < logits.size(); ++c) dlogits(c) = sigmoid(logits(c)) - target(c);
    dlogits /= static_cast<double>(logits.size());
  }
  dlogits *= opts.scale;

  head.weight.grad.noalias() += pooled.transpose() * dlogits;
  head.bias.grad.row(0) += dlogits;
  const RowVec dpooled = dlogits * head.weight.value.transpose();
  Mat dhidden = dpooled.replicate(pass.hidden.rows(), 1) / static_cast<double>(pass.hidden.rows());
  backward_pass(model, pass, dhidden, opts.train_cnn);
  return loss;
}

}  // namespace bioenc
