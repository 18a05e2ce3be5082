#include "musicssl/features.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "musicssl/common.hpp"
#include "spectrum.hpp"

namespace musicssl {

namespace {

constexpr double kLogFloor = 1e-10;
constexpr std::uint32_t kFeatureVersion = 1;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters, n_mels x bins, row-major.
std::vector<double> mel_filterbank(const MfccConfig& cfg) {
  const int bins = cfg.fft_size / 2 + 1;
  const double mlo = hz_to_mel(cfg.fmin), mhi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(i) / (cfg.n_mels + 1));
  std::vector<double> fb(static_cast<std::size_t>(cfg.n_mels * bins), 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb[static_cast<std::size_t>(m * bins + k)] = w;
    }
  }
  return fb;
}

}  // namespace

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::kMfcc: return "mfcc";
    case FeatureKind::kChroma: return "chroma";
    case FeatureKind::kDeep: return "deep";
  }
  return "unknown";
}

FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "mfcc") return FeatureKind::kMfcc;
  if (s == "chroma") return FeatureKind::kChroma;
  if (s == "deep") return FeatureKind::kDeep;
  throw UsageError("unknown feature kind '" + s + "'");
}

void MfccConfig::validate() const {
  if (n_coeffs < 1 || n_mels < 1) throw UsageError("n_coeffs and n_mels must be positive");
  if (n_coeffs > n_mels) throw UsageError("n_coeffs must not exceed n_mels");
  if (fft_size < 2 || hop < 1) throw UsageError("fft_size >= 2 and hop >= 1 required");
  if (sample_rate % hop != 0)
    throw UsageError("hop must divide the sample rate so frames align with the encoder");
  if (include_deltas && (delta_width < 3 || delta_width % 2 == 0))
    throw UsageError("delta_width must be odd and >= 3");
  if (!(fmin >= 0.0 && fmax > fmin && fmax <= sample_rate / 2.0))
    throw UsageError("mel range must satisfy 0 <= fmin < fmax <= nyquist");
}

std::size_t frame_count(std::size_t length, int window, int hop) {
  const auto w = static_cast<std::size_t>(window);
  if (length < w) return 0;
  return (length - w) / static_cast<std::size_t>(hop) + 1;
}

FeatureMatrix mfcc(const AudioClip& clip, const MfccConfig& cfg) {
  cfg.validate();
  if (clip.sample_rate != cfg.sample_rate)
    throw UsageError("mfcc expects " + std::to_string(cfg.sample_rate) +
                     " Hz audio, got " + std::to_string(clip.sample_rate));
  const float rate = static_cast<float>(cfg.sample_rate) / cfg.hop;
  const std::size_t frames = frame_count(clip.samples.size(), cfg.fft_size, cfg.hop);
  FeatureMatrix base(frames, static_cast<std::size_t>(cfg.n_coeffs), rate, FeatureKind::kMfcc);
  if (frames > 0) {
    const auto fb = mel_filterbank(cfg);
    detail::PowerSpectrum spec(cfg.fft_size);
    const auto bins = static_cast<std::size_t>(spec.bins());
    const auto n_mels = static_cast<std::size_t>(cfg.n_mels);
    std::vector<double> power(bins), logmel(n_mels);
    // Orthonormal DCT-II basis, n_coeffs x n_mels.
    std::vector<double> dct(static_cast<std::size_t>(cfg.n_coeffs) * n_mels);
    for (int c = 0; c < cfg.n_coeffs; ++c) {
      const double scale = std::sqrt((c == 0 ? 1.0 : 2.0) / static_cast<double>(n_mels));
      for (std::size_t m = 0; m < n_mels; ++m)
        dct[c * n_mels + m] =
            scale * std::cos(std::numbers::pi * c * (static_cast<double>(m) + 0.5) / static_cast<double>(n_mels));
    }
    for (std::size_t t = 0; t < frames; ++t) {
      spec.compute(std::span<const float>(clip.samples).subspan(t * cfg.hop, cfg.fft_size), power);
      for (std::size_t m = 0; m < n_mels; ++m) {
        double e = 0.0;
        const double* w = fb.data() + m * bins;
        for (std::size_t k = 0; k < bins; ++k) e += w[k] * power[k];
        logmel[m] = std::log(std::max(e, kLogFloor));
      }
      for (int c = 0; c < cfg.n_coeffs; ++c) {
        double acc = 0.0;
        for (std::size_t m = 0; m < n_mels; ++m) acc += dct[c * n_mels + m] * logmel[m];
        base.at(t, static_cast<std::size_t>(c)) = static_cast<float>(acc);
      }
    }
  }
  if (!cfg.include_deltas) return base;

  const FeatureMatrix d1 = deltas(base, cfg.delta_width);
  const FeatureMatrix d2 = deltas(d1, cfg.delta_width);
  const std::size_t n = base.cols;
  FeatureMatrix out(frames, 3 * n, rate, FeatureKind::kMfcc);
  for (std::size_t t = 0; t < frames; ++t) {
    std::copy_n(base.row(t).begin(), n, out.row(t).begin());
    std::copy_n(d1.row(t).begin(), n, out.row(t).begin() + static_cast<std::ptrdiff_t>(n));
    std::copy_n(d2.row(t).begin(), n, out.row(t).begin() + static_cast<std::ptrdiff_t>(2 * n));
  }
  return out;
}

FeatureMatrix deltas(const FeatureMatrix& f, int width) {
  if (width < 3 || width % 2 == 0) throw UsageError("delta width must be odd and >= 3");
  const int half = width / 2;
  double denom = 0.0;
  for (int n = 1; n <= half; ++n) denom += 2.0 * n * n;
  FeatureMatrix out(f.rows, f.cols, f.frame_rate, f.kind);
  if (f.rows == 0) return out;
  const auto last = static_cast<std::ptrdiff_t>(f.rows) - 1;
  const auto clamp_row = [&](std::ptrdiff_t t) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(t, 0, last));
  };
  for (std::size_t t = 0; t < f.rows; ++t) {
    const auto ti = static_cast<std::ptrdiff_t>(t);
    for (std::size_t d = 0; d < f.cols; ++d) {
      double acc = 0.0;
      for (int n = 1; n <= half; ++n)
        acc += n * (static_cast<double>(f.at(clamp_row(ti + n), d)) - f.at(clamp_row(ti - n), d));
      out.at(t, d) = static_cast<float>(acc / denom);
    }
  }
  return out;
}

FeatureMatrix chroma(const AudioClip& clip, const ChromaConfig& cfg) {
  if (clip.sample_rate != 16000) throw UsageError("chroma expects 16 kHz audio");
  const float rate = static_cast<float>(clip.sample_rate) / cfg.hop;
  const std::size_t frames = frame_count(clip.samples.size(), cfg.fft_size, cfg.hop);
  FeatureMatrix out(frames, 12, rate, FeatureKind::kChroma);
  if (frames == 0) return out;

  detail::PowerSpectrum spec(cfg.fft_size);
  const auto bins = static_cast<std::size_t>(spec.bins());
  std::vector<int> pitch_class(bins, -1);
  for (std::size_t k = 1; k < bins; ++k) {
    const double f = static_cast<double>(k) * clip.sample_rate / cfg.fft_size;
    if (f < cfg.fmin || f > cfg.fmax) continue;
    const long midi = std::lround(69.0 + 12.0 * std::log2(f / 440.0));
    pitch_class[k] = static_cast<int>(((midi % 12) + 12) % 12);
  }
  std::vector<double> power(bins);
  std::array<double, 12> acc{};
  for (std::size_t t = 0; t < frames; ++t) {
    spec.compute(std::span<const float>(clip.samples).subspan(t * cfg.hop, cfg.fft_size), power);
    acc.fill(0.0);
    for (std::size_t k = 1; k < bins; ++k)
      if (pitch_class[k] >= 0) acc[static_cast<std::size_t>(pitch_class[k])] += power[k];
    double total = 0.0;
    for (double v : acc) total += v;
    // Frames with negligible energy are treated as silence.
    if (total <= 1e-12) continue;
    for (std::size_t c = 0; c < 12; ++c) out.at(t, c) = static_cast<float>(acc[c] / total);
  }
  return out;
}

void save_features(const FeatureMatrix& f, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic("SSLF");
  w.u32(kFeatureVersion);
  w.u8(static_cast<std::uint8_t>(f.kind));
  w.f32(f.frame_rate);
  w.u64(f.rows);
  w.u32(static_cast<std::uint32_t>(f.cols));
  w.f32s(f.values);
  w.close();
}

FeatureMatrix load_features(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("SSLF");
  if (auto v = r.u32(); v != kFeatureVersion)
    throw DataError("unsupported feature file version " + std::to_string(v));
  FeatureMatrix f;
  const auto kind = r.u8();
  if (kind > 2) throw DataError("bad feature kind in " + path.string());
  f.kind = static_cast<FeatureKind>(kind);
  f.frame_rate = r.f32();
  f.rows = r.u64();
  f.cols = r.u32();
  if (f.cols != 0 && f.rows > (std::size_t{1} << 34) / f.cols)
    throw DataError("implausible feature shape in " + path.string());
  f.values = r.f32s(f.rows * f.cols);
  return f;
}

}  // namespace musicssl
