#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "musicssl/encoder.hpp"
#include "musicssl/features.hpp"
#include "musicssl/metrics.hpp"
#include "musicssl/pretrain.hpp"
#include "musicssl/probe.hpp"
#include "musicssl/quantize.hpp"

namespace musicssl {

struct DspSection {
  FeatureKind kind = FeatureKind::kMfcc;
  MfccConfig mfcc;
  ChromaConfig chroma;
  // Pad the waveform so feature frames line up 1:1 with encoder frames.
  bool align_to_encoder = true;
};

struct QuantizeSection {
  KmeansOptions kmeans;      // workers are taken from the command line
  int iter2_layer = -1;      // transformer layer for deep features; < 0 = L/2
};

struct ProbeSection {
  ProbeConfig probe;         // task and outputs are set from the labels
  WindowPolicy window;
};

struct MetricsSection {
  DbnConfig dbn;
  KeyScoring key;
  double beat_tolerance = 0.02;
};

/// The single configuration document of a run.
struct RunConfig {
  std::uint64_t seed = 0;
  DspSection dsp;
  QuantizeSection quantize;
  EncoderConfig encoder;
  TrainConfig pretrain;
  ProbeSection probe;
  MetricsSection metrics;

  /// Propagates the top-level seed into the sections and validates them.
  void finalize();
  int iter2_layer() const { return quantize.iter2_layer < 0 ? encoder.layers / 2 : quantize.iter2_layer; }
};

/// Parses a JSON document over the defaults. Unknown keys and type errors
/// raise UsageError naming the offending path (e.g. "pretrain.mask.span").
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical JSON (every field, fixed key order).
std::string to_json(const RunConfig& cfg);
/// hex FNV-1a of the canonical JSON.
std::string config_hash(const RunConfig& cfg);

/// Encoder rebuilt from a checkpoint's stored config and "encoder/" tensors.
Encoder encoder_from_checkpoint(const Checkpoint& ckpt);
RunConfig config_from_checkpoint(const Checkpoint& ckpt);

}  // namespace musicssl
