#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "musicssl/audio.hpp"

namespace musicssl {

enum class FeatureKind : std::uint8_t { kMfcc = 0, kChroma = 1, kDeep = 2 };

std::string to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& s);

/// Time-major T x D matrix of frame features.
struct FeatureMatrix {
  std::vector<float> values;  // row-major, rows * cols
  std::size_t rows = 0;
  std::size_t cols = 0;
  float frame_rate = 50.0f;
  FeatureKind kind = FeatureKind::kMfcc;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t t, std::size_t d, float rate, FeatureKind k)
      : values(t * d, 0.0f), rows(t), cols(d), frame_rate(rate), kind(k) {}

  std::span<float> row(std::size_t t) { return {values.data() + t * cols, cols}; }
  std::span<const float> row(std::size_t t) const {
    return {values.data() + t * cols, cols};
  }
  float& at(std::size_t t, std::size_t d) { return values[t * cols + d]; }
  float at(std::size_t t, std::size_t d) const { return values[t * cols + d]; }
};

struct MfccConfig {
  int n_mels = 40;
  int n_coeffs = 13;
  int fft_size = 1024;
  int hop = 320;  // 50 Hz at 16 kHz
  bool include_deltas = true;
  int delta_width = 5;
  int sample_rate = 16000;
  double fmin = 0.0;
  double fmax = 8000.0;

  /// Output dimension: n_coeffs, or 3 * n_coeffs with delta stacks.
  int dims() const { return include_deltas ? 3 * n_coeffs : n_coeffs; }
  void validate() const;
};

/// Number of analysis frames for a signal of `length` samples.
std::size_t frame_count(std::size_t length, int window, int hop);

/// MFCCs (HTK mel scale, Hann window, log floor 1e-10, orthonormal DCT-II),
/// optionally followed by delta and delta-delta stacks.
/// Clips shorter than one window yield a 0-row matrix.
FeatureMatrix mfcc(const AudioClip& clip, const MfccConfig& cfg = {});

/// Regression-slope deltas over `width` frames with replicated edges.
FeatureMatrix deltas(const FeatureMatrix& f, int width);

struct ChromaConfig {
  int fft_size = 4096;
  int hop = 320;
  double fmin = 65.0;
  double fmax = 2100.0;
};

/// 12-bin pitch-class energy (C = 0), each nonzero row L1-normalized.
FeatureMatrix chroma(const AudioClip& clip, const ChromaConfig& cfg = {});

/// Feature dump: "SSLF", version, kind, frame_rate, T, D, row-major f32.
void save_features(const FeatureMatrix& f, const std::filesystem::path& path);
FeatureMatrix load_features(const std::filesystem::path& path);

}  // namespace musicssl
