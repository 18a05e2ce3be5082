#include "musicssl/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

template <typename T>
T read_le(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

}  // namespace

void validate(const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw UsageError("sample_rate must be positive");
  for (float s : clip.samples)
    if (!std::isfinite(s)) throw UsageError("audio contains non-finite samples");
}

AudioClip load_audio(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open audio file " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& why) {
    return DataError(path.string() + ": " + why);
  };
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw fail("not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t data_off = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    std::string id(buf.data() + pos, 4);
    auto len = read_le<std::uint32_t>(buf, pos + 4);
    std::size_t body = pos + 8;
    if (body + len > buf.size()) {
      if (id == "data") len = static_cast<std::uint32_t>(buf.size() - body);
      else throw fail("truncated chunk '" + id + "'");
    }
    if (id == "fmt ") {
      if (len < 16) throw fail("short fmt chunk");
      format = read_le<std::uint16_t>(buf, body);
      channels = read_le<std::uint16_t>(buf, body + 2);
      rate = read_le<std::uint32_t>(buf, body + 4);
      bits = read_le<std::uint16_t>(buf, body + 14);
      if (format == kFormatExtensible) {
        if (len < 26) throw fail("short extensible fmt chunk");
        format = read_le<std::uint16_t>(buf, body + 24);
      }
      have_fmt = true;
    } else if (id == "data") {
      data_off = body;
      data_len = len;
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt) throw fail("missing fmt chunk");
  if (data_off == 0) throw fail("missing data chunk");
  if (channels != 1 && channels != 2)
    throw fail("unsupported channel count " + std::to_string(channels));
  if (rate == 0) throw fail("zero sample rate");
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32)
    throw fail("unsupported encoding (format " + std::to_string(format) + ", " +
               std::to_string(bits) + "-bit); need 16-bit PCM or 32-bit float");

  const std::size_t frame_bytes = channels * (bits / 8);
  const std::size_t frames = data_len / frame_bytes;
  if (frames == 0) throw fail("zero-length audio");

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      std::size_t off = data_off + i * frame_bytes + c * (bits / 8);
      double v;
      if (pcm16) {
        v = read_le<std::int16_t>(buf, off) / 32768.0;
      } else {
        v = read_le<float>(buf, off);
        if (!std::isfinite(v)) throw fail("non-finite float sample");
      }
      acc += v;
    }
    clip.samples[i] =
        static_cast<float>(std::clamp(acc / channels, -1.0, 1.0));
  }
  return clip;
}

void save_wav(const AudioClip& clip, const std::filesystem::path& path,
              WavEncoding encoding) {
  validate(clip);
  const bool pcm16 = encoding == WavEncoding::kPcm16;
  const std::uint16_t bits = pcm16 ? 16 : 32;
  const std::uint32_t data_len =
      static_cast<std::uint32_t>(clip.samples.size() * (bits / 8));
  const auto rate = static_cast<std::uint32_t>(clip.sample_rate);

  BinaryWriter w(path);
  w.magic("RIFF");
  w.u32(36 + data_len);
  w.magic("WAVE");
  w.magic("fmt ");
  w.u32(16);
  const std::uint16_t header16[2] = {pcm16 ? kFormatPcm : kFormatFloat, 1};
  w.bytes(header16, 4);
  w.u32(rate);
  w.u32(rate * (bits / 8));
  const std::uint16_t align_bits[2] = {static_cast<std::uint16_t>(bits / 8), bits};
  w.bytes(align_bits, 4);
  w.magic("data");
  w.u32(data_len);
  if (pcm16) {
    std::vector<std::int16_t> pcm(clip.samples.size());
    for (std::size_t i = 0; i < pcm.size(); ++i) {
      double v = std::round(static_cast<double>(clip.samples[i]) * 32767.0);
      pcm[i] = static_cast<std::int16_t>(std::clamp(v, -32768.0, 32767.0));
    }
    w.bytes(pcm.data(), pcm.size() * 2);
  } else {
    w.f32s(clip.samples);
  }
  w.close();
}

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) throw UsageError("target_rate must be positive");
  if (target_rate == clip.sample_rate) return clip;

  const auto n_in = static_cast<std::int64_t>(clip.samples.size());
  const std::int64_t n_out =
      (n_in * target_rate + clip.sample_rate / 2) / clip.sample_rate;
  const double ratio = static_cast<double>(target_rate) / clip.sample_rate;
  // Lowpass at 0.95 of the lower Nyquist, measured in input-sample units.
  const double cutoff = 0.5 * std::min(1.0, ratio) * 0.95;
  constexpr int kZeroCrossings = 16;
  constexpr double kBeta = 8.0;
  const double half_width = kZeroCrossings / (2.0 * cutoff);
  const double i0_beta = std::cyl_bessel_i(0.0, kBeta);

  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<std::size_t>(n_out));
  for (std::int64_t n = 0; n < n_out; ++n) {
    const double t = static_cast<double>(n) / ratio;
    const auto lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(t - half_width)));
    const auto hi = std::min<std::int64_t>(n_in - 1, static_cast<std::int64_t>(std::floor(t + half_width)));
    double acc = 0.0;
    for (std::int64_t k = lo; k <= hi; ++k) {
      const double x = t - static_cast<double>(k);
      const double r = x / half_width;
      const double window = std::cyl_bessel_i(0.0, kBeta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
      const double arg = 2.0 * cutoff * x;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      acc += clip.samples[static_cast<std::size_t>(k)] * 2.0 * cutoff * sinc * window;
    }
    out.samples[static_cast<std::size_t>(n)] = static_cast<float>(std::clamp(acc, -1.0, 1.0));
  }
  return out;
}

}  // namespace musicssl
