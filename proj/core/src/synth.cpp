#include "bioenc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "bioenc/common.hpp"

namespace bioenc {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::size_t to_samples(double seconds, int sample_rate) {
  return static_cast<std::size_t>(std::llround(seconds * sample_rate));
}

void add_noise(std::vector<float>& x, double noise_std, Rng& rng) {
  if (noise_std <= 0.0) return;
  for (float& v : x) v = static_cast<float>(v + noise_std * rng.normal());
}

// Short raised-cosine ramps keep segment edges from clicking.
double ramp(std::size_t i, std::size_t n, std::size_t len) {
  if (len == 0) return 1.0;
  const std::size_t d = std::min(i, n - 1 - i);
  if (d >= len) return 1.0;
  return 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(d) / static_cast<double>(len));
}

}  // namespace

AudioClip synth_tone(double freq_hz, double duration_s, double amp, double phase, double noise_std,
                     std::uint64_t seed, int sample_rate) {
  if (duration_s <= 0.0 || sample_rate <= 0) throw std::invalid_argument("synth_tone: bad duration or rate");
  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(to_samples(duration_s, sample_rate));
  for (std::size_t i = 0; i < clip.samples.size(); ++i) {
    clip.samples[i] = static_cast<float>(amp * std::sin(kTwoPi * freq_hz * static_cast<double>(i) / sample_rate + phase));
  }
  Rng rng(seed);
  add_noise(clip.samples, noise_std, rng);
  return clip;
}

std::vector<AudioClip> synth_pretrain_corpus(int clips, double clip_s, std::uint64_t seed, int sample_rate) {
  if (clips < 1 || clip_s <= 0.0) throw std::invalid_argument("synth_pretrain_corpus: bad size");
  std::vector<AudioClip> out;
  const std::size_t n = to_samples(clip_s, sample_rate);
  const std::size_t ramp_len = to_samples(0.005, sample_rate);
  for (int c = 0; c < clips; ++c) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c)));
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.source_id = "pre_" + std::to_string(c);
    clip.samples.assign(n, 0.0f);
    std::size_t pos = 0;
    while (pos < n) {
      const std::size_t len = std::min(n - pos, to_samples(rng.uniform(0.2, 0.8), sample_rate));
      const int kind = static_cast<int>(rng.below(4));
      const double amp = rng.uniform(0.2, 0.8);
      const double f0 = 200.0 * std::pow(20.0, rng.uniform());  // 200 Hz to 4 kHz, log-uniform
      const double f1 = 200.0 * std::pow(20.0, rng.uniform());
      double phase = rng.uniform(0.0, kTwoPi);
      for (std::size_t i = 0; i < len; ++i) {
        double v = 0.0;
        const double t = static_cast<double>(i) / len;
        switch (kind) {
          case 0:  // steady tone
            v = std::sin(phase);
            phase += kTwoPi * f0 / sample_rate;
            break;
          case 1:  // linear chirp
            v = std::sin(phase);
            phase += kTwoPi * (f0 + (f1 - f0) * t) / sample_rate;
            break;
          case 2:  // noise burst
            v = 0.5 * rng.normal();
            break;
          default:  // silence
            break;
        }
        clip.samples[pos + i] = static_cast<float>(amp * v * ramp(i, len, ramp_len));
      }
      pos += len;
    }
    add_noise(clip.samples, 0.01, rng);
    out.push_back(std::move(clip));
  }
  return out;
}

std::vector<LabeledClip> synth_tone_classes(int per_class, const ToneClassSpec& spec, std::uint64_t seed,
                                            int sample_rate) {
  if (per_class < 1 || spec.freqs_hz.empty()) throw std::invalid_argument("synth_tone_classes: bad size");
  std::vector<LabeledClip> out;
  const int classes = static_cast<int>(spec.freqs_hz.size());
  for (int i = 0; i < per_class; ++i) {
    for (int c = 0; c < classes; ++c) {
      const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(i * classes + c));
      Rng rng(s);
      const double amp = rng.uniform(spec.min_amp, spec.max_amp);
      const double phase = rng.uniform(0.0, kTwoPi);
      const double jitter = 1.0 + rng.uniform(-1.0, 1.0) * spec.freq_jitter;
      LabeledClip lc;
      lc.clip = synth_tone(spec.freqs_hz[static_cast<std::size_t>(c)] * jitter, spec.clip_s, amp, phase,
                           spec.noise_std, mix_seed(s, 1), sample_rate);
      lc.clip.source_id = "tone_c" + std::to_string(c) + "_" + std::to_string(i);
      lc.label = c;
      out.push_back(std::move(lc));
    }
  }
  return out;
}

std::vector<SynthRecording> synth_burst_recordings(int count, const BurstSpec& spec, std::uint64_t seed,
                                                   const std::string& prefix, int sample_rate) {
  if (count < 1 || spec.freqs_hz.empty() || spec.recording_s <= 0.0) {
    throw std::invalid_argument("synth_burst_recordings: bad size");
  }
  if (spec.bursts_per_recording * spec.max_burst_s > spec.recording_s) {
    throw std::invalid_argument("synth_burst_recordings: bursts do not fit in the recording");
  }
  std::vector<SynthRecording> out;
  const std::size_t n = to_samples(spec.recording_s, sample_rate);
  const std::size_t ramp_len = to_samples(0.005, sample_rate);
  for (int r = 0; r < count; ++r) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(r)));
    SynthRecording rec;
    rec.clip.sample_rate = sample_rate;
    rec.clip.source_id = prefix + "_" + std::to_string(r);
    rec.clip.samples.assign(n, 0.0f);

    // Split the free time into random gaps around the bursts.
    const int bursts = spec.bursts_per_recording;
    std::vector<double> lengths;
    double busy = 0.0;
    for (int b = 0; b < bursts; ++b) {
      lengths.push_back(rng.uniform(spec.min_burst_s, spec.max_burst_s));
      busy += lengths.back();
    }
    std::vector<double> gaps(static_cast<std::size_t>(bursts) + 1);
    double gap_sum = 0.0;
    for (double& g : gaps) {
      g = rng.uniform(0.1, 1.0);
      gap_sum += g;
    }
    const double free_s = spec.recording_s - busy;
    double t = 0.0;
    for (int b = 0; b < bursts; ++b) {
      t += gaps[static_cast<std::size_t>(b)] / gap_sum * free_s;
      const int cls = static_cast<int>(rng.below(spec.freqs_hz.size()));
      const double freq = spec.freqs_hz[static_cast<std::size_t>(cls)] * (1.0 + rng.uniform(-1.0, 1.0) * spec.freq_jitter);
      const std::size_t start = to_samples(t, sample_rate);
      const std::size_t len = std::min(n - start, to_samples(lengths[static_cast<std::size_t>(b)], sample_rate));
      const double phase = rng.uniform(0.0, kTwoPi);
      for (std::size_t i = 0; i < len; ++i) {
        rec.clip.samples[start + i] = static_cast<float>(
            spec.amp * std::sin(kTwoPi * freq * static_cast<double>(i) / sample_rate + phase) * ramp(i, len, ramp_len));
      }
      rec.events.push_back({cls, static_cast<double>(start) / sample_rate,
                            static_cast<double>(start + len) / sample_rate, rec.clip.source_id});
      t += lengths[static_cast<std::size_t>(b)];
    }
    add_noise(rec.clip.samples, spec.noise_std, rng);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace bioenc
