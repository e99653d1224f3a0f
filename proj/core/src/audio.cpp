#include "bioenc/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "bioenc/common.hpp"

namespace bioenc {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

// Modified Bessel function of the first kind, order 0.
double bessel_i0(double x) {
  double sum = 1.0;
  double term = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 64; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum;
}

struct SincKernel {
  double cutoff;    // cycles per input sample
  double half_len;  // in input samples
  double beta;
  double inv_i0_beta;

  double operator()(double d) const {
    const double ad = std::abs(d);
    if (ad >= half_len) return 0.0;
    const double r = d / half_len;
    const double win = bessel_i0(beta * std::sqrt(1.0 - r * r)) * inv_i0_beta;
    const double arg = 2.0 * cutoff * d;
    const double sinc = ad < 1e-12 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
    return 2.0 * cutoff * sinc * win;
  }
};

constexpr int kZeroCrossings = 32;  // per side, so 64 taps at the lower rate
constexpr double kRolloff = 0.94;
constexpr double kKaiserBeta = 8.0;
constexpr std::int64_t kMaxTablePhases = 4096;

}  // namespace

void validate(const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw std::invalid_argument("audio clip has non-positive sample rate");
  for (float s : clip.samples) {
    if (!std::isfinite(s)) throw std::invalid_argument("audio clip '" + clip.source_id + "' has non-finite samples");
  }
}

AudioClip decode_wav(std::span<const std::uint8_t> bytes, std::string source_id) {
  const auto fail = [&](const std::string& why) {
    return DataError("WAV '" + source_id + "': " + why);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw fail("not a RIFF/WAVE file");
  }

  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  bool have_fmt = false;
  std::span<const std::uint8_t> data;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* hdr = bytes.data() + pos;
    const std::uint32_t size = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = bytes.size() - body;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16 || size > avail) throw fail("truncated fmt chunk");
      const std::uint8_t* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (format == kFormatExtensible) {
        if (size < 26) throw fail("truncated extensible fmt chunk");
        format = read_u16(f + 24);  // first two bytes of the subformat GUID
      }
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      // Some writers leave the size at 0 or 0xFFFFFFFF when streaming.
      const std::size_t n = std::min<std::size_t>(size, avail);
      data = bytes.subspan(body, n);
      have_data = true;
    }
    pos = body + size + (size & 1u);
    if (have_fmt && have_data) break;
  }
  if (!have_fmt) throw fail("missing fmt chunk");
  if (!have_data) throw fail("missing data chunk");
  if (channels == 0) throw fail("zero channels");
  if (rate == 0) throw fail("zero sample rate");

  std::size_t bytes_per_sample = 0;
  if (format == kFormatPcm && bits == 16) {
    bytes_per_sample = 2;
  } else if (format == kFormatFloat && bits == 32) {
    bytes_per_sample = 4;
  } else {
    throw fail("unsupported encoding (format " + std::to_string(format) + ", " + std::to_string(bits) +
               " bits); only PCM16 and float32 are supported");
  }

  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t frames = data.size() / frame_bytes;
  if (frames == 0) throw fail("zero-length audio");

  AudioClip clip;
  clip.source_id = std::move(source_id);
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::uint8_t* p = data.data() + i * frame_bytes + c * bytes_per_sample;
      if (bytes_per_sample == 2) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        const float v = std::bit_cast<float>(read_u32(p));
        if (!std::isfinite(v)) throw fail("non-finite float sample");
        acc += v;
      }
    }
    clip.samples[i] = static_cast<float>(std::clamp(acc / channels, -1.0, 1.0));
  }
  return clip;
}

AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open WAV file: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path.stem().string());
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding) {
  const bool pcm = encoding == WavEncoding::kPcm16;
  const std::uint32_t bps = pcm ? 2 : 4;
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * bps);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, pcm ? kFormatPcm : kFormatFloat);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * bps);
  put_u16(out, static_cast<std::uint16_t>(bps));
  put_u16(out, static_cast<std::uint16_t>(bps * 8));
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (float s : clip.samples) {
    if (pcm) {
      const double v = std::clamp(static_cast<double>(s), -1.0, 1.0) * 32767.0;
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(v))));
    } else {
      put_u32(out, std::bit_cast<std::uint32_t>(s));
    }
  }
  return out;
}

void save_wav(const std::filesystem::path& path, const AudioClip& clip, WavEncoding encoding) {
  const auto bytes = encode_wav(clip, encoding);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write WAV file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing WAV file: " + path.string());
}

AudioClip resample(const AudioClip& clip, int target_rate) {
  validate(clip);
  if (target_rate <= 0) throw std::invalid_argument("resample: target rate must be positive");
  if (target_rate == clip.sample_rate) return clip;

  const std::int64_t in_rate = clip.sample_rate;
  const std::int64_t g = std::gcd(in_rate, static_cast<std::int64_t>(target_rate));
  const std::int64_t up = target_rate / g;
  const std::int64_t down = in_rate / g;

  const auto n_in = static_cast<std::int64_t>(clip.samples.size());
  const std::int64_t n_out = (n_in * target_rate + in_rate / 2) / in_rate;

  const double scale = std::min(1.0, static_cast<double>(target_rate) / static_cast<double>(in_rate));
  const SincKernel kernel{0.5 * scale * kRolloff, kZeroCrossings / scale, kKaiserBeta,
                          1.0 / bessel_i0(kKaiserBeta)};
  const auto reach = static_cast<std::int64_t>(std::ceil(kernel.half_len)) + 1;
  const std::int64_t taps = 2 * reach + 1;

  // One normalized tap set per fractional phase p/up; offsets run -reach..reach
  // relative to floor(t).
  const auto make_phase = [&](std::int64_t phase, double* out) {
    const double frac = static_cast<double>(phase) / static_cast<double>(up);
    double sum = 0.0;
    for (std::int64_t o = -reach; o <= reach; ++o) {
      const double h = kernel(static_cast<double>(o) - frac);
      out[o + reach] = h;
      sum += h;
    }
    for (std::int64_t i = 0; i < taps; ++i) out[i] /= sum;
  };

  std::vector<double> table;
  const bool tabulate = up <= kMaxTablePhases;
  if (tabulate) {
    table.resize(static_cast<std::size_t>(up * taps));
    for (std::int64_t p = 0; p < up; ++p) make_phase(p, table.data() + p * taps);
  }
  std::vector<double> scratch(static_cast<std::size_t>(taps));

  AudioClip out;
  out.sample_rate = target_rate;
  out.source_id = clip.source_id;
  out.samples.resize(static_cast<std::size_t>(n_out));
  for (std::int64_t j = 0; j < n_out; ++j) {
    const std::int64_t num = j * down;
    const std::int64_t base = num / up;
    const std::int64_t phase = num % up;
    const double* h = nullptr;
    if (tabulate) {
      h = table.data() + phase * taps;
    } else {
      make_phase(phase, scratch.data());
      h = scratch.data();
    }
    double acc = 0.0;
    const std::int64_t lo = std::max<std::int64_t>(0, base - reach);
    const std::int64_t hi = std::min<std::int64_t>(n_in - 1, base + reach);
    for (std::int64_t i = lo; i <= hi; ++i) acc += h[i - base + reach] * clip.samples[static_cast<std::size_t>(i)];
    out.samples[static_cast<std::size_t>(j)] = static_cast<float>(std::clamp(acc, -1.0, 1.0));
  }
  return out;
}

std::vector<Segment> window(const AudioClip& clip, double win_s, double hop_s) {
  validate(clip);
  if (!(win_s > 0.0) || !(hop_s > 0.0) || hop_s > win_s) {
    throw std::invalid_argument("window: require 0 < hop_s <= win_s");
  }
  const double sr = clip.sample_rate;
  const auto n = static_cast<std::int64_t>(clip.samples.size());
  const auto win_n = static_cast<std::int64_t>(std::llround(win_s * sr));
  const auto hop_n = std::max<std::int64_t>(1, std::llround(hop_s * sr));
  if (win_n < 1) throw std::invalid_argument("window: window shorter than one sample");

  const auto make = [&](std::int64_t onset) {
    Segment seg;
    seg.parent_id = clip.source_id;
    seg.onset_s = static_cast<double>(onset) / sr;
    seg.offset_s = static_cast<double>(std::min(onset + win_n, n)) / sr;
    seg.clip.sample_rate = clip.sample_rate;
    seg.clip.source_id = clip.source_id + "@" + std::to_string(onset);
    seg.clip.samples.assign(static_cast<std::size_t>(win_n), 0.0f);
    const std::int64_t len = std::min(win_n, n - onset);
    std::copy_n(clip.samples.begin() + onset, len, seg.clip.samples.begin());
    return seg;
  };

  std::vector<Segment> segments;
  if (win_n >= n) {
    segments.push_back(make(0));
    return segments;
  }
  std::int64_t onset = 0;
  for (; onset + win_n <= n; onset += hop_n) segments.push_back(make(onset));
  const std::int64_t last_end = onset - hop_n + win_n;
  if (last_end < n) segments.push_back(make(onset));
  return segments;
}

}  // namespace bioenc
