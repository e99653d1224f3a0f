#include "bioenc/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace bioenc {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

// FFTW planning is not thread-safe, so plans are built once per size under a
// lock and executed with the new-array interface afterwards.
class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    std::unique_ptr<double, FftwDeleter> in(fftw_alloc_real(n));
    std::unique_ptr<fftw_complex, FftwDeleter> out(fftw_alloc_complex(n / 2 + 1));
    static std::mutex plan_mutex;
    std::lock_guard lock(plan_mutex);
    plan_ = fftw_plan_dft_r2c_1d(n, in.get(), out.get(), FFTW_ESTIMATE);
  }
  ~RealFft() { fftw_destroy_plan(plan_); }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  // Power spectrum |X_k|^2 for k = 0..n/2 of the zero-padded frame.
  void power(std::span<const double> frame, std::span<double> out) const {
    std::unique_ptr<double, FftwDeleter> in(fftw_alloc_real(n_));
    std::unique_ptr<fftw_complex, FftwDeleter> spec(fftw_alloc_complex(n_ / 2 + 1));
    std::fill_n(in.get(), n_, 0.0);
    std::copy(frame.begin(), frame.end(), in.get());
    fftw_execute_dft_r2c(plan_, in.get(), spec.get());
    for (int k = 0; k <= n_ / 2; ++k) {
      out[k] = spec.get()[k][0] * spec.get()[k][0] + spec.get()[k][1] * spec.get()[k][1];
    }
  }

 private:
  int n_;
  fftw_plan plan_;
};

const RealFft& fft_for(int n) {
  if (n == 512) {
    static const RealFft fft512(512);
    return fft512;
  }
  static std::mutex m;
  static std::vector<std::pair<int, std::unique_ptr<RealFft>>> cache;
  std::lock_guard lock(m);
  for (auto& [size, fft] : cache) {
    if (size == n) return *fft;
  }
  cache.emplace_back(n, std::make_unique<RealFft>(n));
  return *cache.back().second;
}

}  // namespace

Mat mel_filterbank(const MfccOptions& opts) {
  const int bins = opts.fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(opts.low_hz);
  const double mel_hi = hz_to_mel(opts.high_hz);
  const double step = (mel_hi - mel_lo) / (opts.num_filters + 1);
  Mat fb = Mat::Zero(opts.num_filters, bins);
  for (int m = 0; m < opts.num_filters; ++m) {
    const double left = mel_lo + m * step;
    const double center = left + step;
    const double right = center + step;
    for (int k = 0; k < bins; ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * opts.sample_rate / opts.fft_size);
      if (mel > left && mel < right) {
        fb(m, k) = mel <= center ? (mel - left) / (center - left) : (right - mel) / (right - center);
      }
    }
  }
  return fb;
}

Eigen::Index mfcc_frame_count(std::size_t num_samples, const MfccOptions& opts) {
  if (num_samples < static_cast<std::size_t>(opts.frame_length)) return 0;
  return static_cast<Eigen::Index>((num_samples - opts.frame_length) / opts.frame_shift + 1);
}

Mat mfcc_static(std::span<const float> samples, const MfccOptions& opts) {
  const Eigen::Index frames = mfcc_frame_count(samples.size(), opts);
  if (frames == 0) {
    throw std::invalid_argument("mfcc: clip shorter than one analysis window (" +
                                std::to_string(opts.frame_length) + " samples minimum)");
  }
  const int bins = opts.fft_size / 2 + 1;
  const Mat fb = mel_filterbank(opts);

  std::vector<double> hamming(opts.frame_length);
  for (int i = 0; i < opts.frame_length; ++i) {
    hamming[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (opts.frame_length - 1));
  }
  std::vector<double> emph(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    emph[i] = samples[i] - (i > 0 ? opts.preemphasis * samples[i - 1] : 0.0);
  }

  // Row-major DCT-II with HTK scaling, rows 0..num_ceps-1.
  Mat dct(opts.num_ceps, opts.num_filters);
  const double norm = std::sqrt(2.0 / opts.num_filters);
  for (int i = 0; i < opts.num_ceps; ++i) {
    for (int j = 0; j < opts.num_filters; ++j) {
      dct(i, j) = norm * std::cos(std::numbers::pi * i * (j + 0.5) / opts.num_filters);
    }
  }

  const RealFft& fft = fft_for(opts.fft_size);
  Mat out(frames, opts.num_ceps);
  std::vector<double> frame(opts.frame_length);
  Vec power(bins);
  Vec logmel(opts.num_filters);
  for (Eigen::Index t = 0; t < frames; ++t) {
    const double* src = emph.data() + t * opts.frame_shift;
    double energy = 0.0;
    for (int i = 0; i < opts.frame_length; ++i) {
      energy += src[i] * src[i];
      frame[i] = src[i] * hamming[i];
    }
    fft.power(frame, std::span<double>(power.data(), bins));
    logmel = (fb * power).cwiseMax(opts.log_floor).array().log();
    out.row(t) = (dct * logmel).transpose();
    out(t, 0) = std::log(std::max(energy, opts.log_floor));
  }
  return out;
}

Mat deltas(const Mat& x, int window) {
  const Eigen::Index frames = x.rows();
  double denom = 0.0;
  for (int n = 1; n <= window; ++n) denom += 2.0 * n * n;
  Mat d = Mat::Zero(frames, x.cols());
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int n = 1; n <= window; ++n) {
      const Eigen::Index ahead = std::min<Eigen::Index>(t + n, frames - 1);
      const Eigen::Index behind = std::max<Eigen::Index>(t - n, 0);
      d.row(t) += n * (x.row(ahead) - x.row(behind));
    }
  }
  return d / denom;
}

FrameFeatures mfcc39(const AudioClip& clip, const MfccOptions& opts) {
  validate(clip);
  if (clip.sample_rate != opts.sample_rate) {
    throw std::invalid_argument("mfcc39: expected " + std::to_string(opts.sample_rate) + " Hz input, got " +
                                std::to_string(clip.sample_rate));
  }
  const Mat stat = mfcc_static(clip.samples, opts);
  const Mat d1 = deltas(stat, opts.delta_window);
  const Mat d2 = deltas(d1, opts.delta_window);
  FrameFeatures f;
  f.data.resize(stat.rows(), 3 * stat.cols());
  f.data << stat, d1, d2;
  f.frame_rate = static_cast<double>(opts.sample_rate) / opts.frame_shift;
  f.source_id = clip.source_id;
  return f;
}

FeatureStats compute_stats(std::span<const FrameFeatures> feats) {
  if (feats.empty()) throw std::invalid_argument("compute_stats: no features");
  const Eigen::Index dim = feats.front().dim();
  RowVec sum = RowVec::Zero(dim);
  RowVec sq = RowVec::Zero(dim);
  double count = 0.0;
  for (const auto& f : feats) {
    if (f.dim() != dim) throw DataError("compute_stats: feature dimension mismatch");
    sum += f.data.colwise().sum();
    count += static_cast<double>(f.frames());
  }
  if (count == 0.0) throw std::invalid_argument("compute_stats: no frames");
  const RowVec mean = sum / count;
  for (const auto& f : feats) sq += (f.data.rowwise() - mean).array().square().matrix().colwise().sum();
  return {mean, (sq / count).array().sqrt().matrix()};
}

FrameFeatures standardize(const FrameFeatures& feats, const FeatureStats& stats) {
  if (stats.mean.size() != feats.dim() || stats.std.size() != feats.dim()) {
    throw DataError("standardize: stats have dimension " + std::to_string(stats.mean.size()) + ", features have " +
                    std::to_string(feats.dim()));
  }
  FrameFeatures out = feats;
  out.data.rowwise() -= stats.mean;
  for (Eigen::Index d = 0; d < feats.dim(); ++d) {
    if (stats.std(d) >= 1e-8) out.data.col(d) /= stats.std(d);
  }
  return out;
}

}  // namespace bioenc
