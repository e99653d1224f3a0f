#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bioenc {

/// Decoded mono waveform. Samples are in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 16000;
  std::string source_id;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// A window cut from a longer recording. `clip` always holds exactly the
/// window length in samples; the part past the parent end is zero.
struct Segment {
  AudioClip clip;
  double onset_s = 0.0;
  double offset_s = 0.0;
  std::string parent_id;
};

enum class WavEncoding { kPcm16, kFloat32 };

/// Reads a RIFF/WAVE file (PCM16 or IEEE float32). Multi-channel input is
/// mixed down by averaging channels. Throws DataError on malformed files.
AudioClip load_wav(const std::filesystem::path& path);

/// Decodes an in-memory WAV image; `source_id` is attached to the clip.
AudioClip decode_wav(std::span<const std::uint8_t> bytes, std::string source_id);

/// Writes a mono WAV file. PCM16 output is clipped to [-1, 1].
void save_wav(const std::filesystem::path& path, const AudioClip& clip,
              WavEncoding encoding = WavEncoding::kPcm16);

std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding);

/// Band-limited polyphase resampler: Kaiser-windowed sinc with 64 zero
/// crossings at the lower of the two rates. Output length is
/// round(n * target_rate / sample_rate). Identity when the rates match.
AudioClip resample(const AudioClip& clip, int target_rate);

/// Cuts the clip into windows of `win_s` seconds every `hop_s` seconds.
/// A zero-padded tail window is appended when the last full window stops
/// short of the clip end. A clip shorter than the window yields a single
/// zero-padded segment.
std::vector<Segment> window(const AudioClip& clip, double win_s, double hop_s);

/// Throws std::invalid_argument unless the clip is valid (finite samples,
/// positive rate).
void validate(const AudioClip& clip);

}  // namespace bioenc
