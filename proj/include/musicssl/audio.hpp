#pragma once

#include <filesystem>
#include <vector>

namespace musicssl {

/// Mono waveform. Samples are expected in [-1, 1] and finite.
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 16000;

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

/// Throws UsageError when the clip violates the AudioClip invariants.
void validate(const AudioClip& clip);

/// Reads a PCM WAV file (16-bit integer or 32-bit float, mono or stereo).
/// Stereo is averaged to mono. Throws DataError on missing files,
/// unsupported encodings and zero-length audio.
AudioClip load_audio(const std::filesystem::path& path);

enum class WavEncoding { kPcm16, kFloat32 };

/// Writes a mono WAV. 16-bit output is rounded to nearest and clamped.
void save_wav(const AudioClip& clip, const std::filesystem::path& path,
              WavEncoding encoding = WavEncoding::kPcm16);

/// Band-limited resampling with a Kaiser-windowed sinc kernel
/// (32 zero crossings). Equal rates return an exact copy.
AudioClip resample(const AudioClip& clip, int target_rate);

}  // namespace musicssl
