#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "musicssl/autodiff.hpp"

namespace musicssl {

using Param = ad::Parameter<float>;
using Tape = ad::Tape<float>;
using Var = ad::Var<float>;

struct ConvSpec {
  int channels = 64;
  int kernel = 3;
  int stride = 2;
};

struct EncoderConfig {
  // Total stride 320: 16 kHz in, 50 Hz out. Receptive field 400 samples.
  std::vector<ConvSpec> conv = {{64, 10, 5}, {64, 3, 2}, {64, 3, 2}, {64, 3, 2},
                                {64, 3, 2},  {64, 2, 2}, {64, 2, 2}};
  int layers = 2;
  int hidden = 64;
  int heads = 4;
  int ff_dim = 256;
  double dropout = 0.0;
  int max_positions = 1500;  // 30 s at 50 Hz
  int sample_rate = 16000;
  bool normalize_waveform = true;  // zero mean / unit variance per input

  void validate() const;
  int total_stride() const;
  int receptive_field() const;
  double frame_rate() const { return static_cast<double>(sample_rate) / total_stride(); }
  /// Output frames for `samples` input samples (0 when too short).
  std::size_t frames_for(std::size_t samples) const;
};

struct MaskSpec {
  int span = 10;
  double prob = 0.65;

  void validate() const;
  /// floor(prob * T / span), capped at the number of valid starts.
  std::size_t n_starts(std::size_t frames) const;
};

struct MaskDraw {
  std::vector<std::size_t> starts;  // sorted
  std::vector<bool> mask;           // per frame
  std::size_t count() const;
};

/// Span starts drawn uniformly without replacement from [0, T - span].
MaskDraw sample_mask(std::size_t frames, const MaskSpec& spec, std::uint64_t seed);

/// Expected number of masked frames under sample_mask (exact, by counting
/// the start sets that leave each frame uncovered).
double expected_mask_coverage(std::size_t frames, const MaskSpec& spec);

/// All layer activations of one input: index 0 is the projected conv output
/// (transformer input), 1..L the transformer layers. Each is [T, H].
struct EncoderOutput {
  std::vector<Var> layers;
  std::vector<bool> mask;
  std::size_t frames() const { return layers.empty() ? 0 : layers[0].dim(0); }
};

/// Ordered, uniquely named parameter set.
class ParamSet {
 public:
  Param& add(std::string name, ad::Shape shape, std::vector<float> init);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  std::vector<Param*> all();
  std::vector<const Param*> all() const;
  std::size_t count() const { return order_.size(); }
  std::size_t numel() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Param>> order_;
  std::map<std::string, Param*> by_name_;
};

struct ForwardOptions {
  const std::vector<bool>* mask = nullptr;  // frames to replace by the mask embedding
  bool train = false;                       // enables dropout
  std::uint64_t dropout_seed = 0;
  int stop_after_layer = -1;  // skip layers beyond this one (all when < 0)
};

class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// Waveform -> [T, H] projected conv features (before masking).
  Var frontend(Tape& tape, std::span<const float> wave);
  EncoderOutput forward(Tape& tape, std::span<const float> wave, const ForwardOptions& opt = {});

 private:
  Var linear(Tape& tape, Var x, const std::string& name);
  Var layer_norm(Tape& tape, Var x, const std::string& name);
  Var attention(Tape& tape, Var x, int layer, const ForwardOptions& opt);

  EncoderConfig cfg_;
  ParamSet params_;
};

/// Cosine-similarity codebook head: logit[t, k] = cos(W h_t + b, e_k) / temperature.
class DiscreteHead {
 public:
  DiscreteHead(int hidden, int proj_dim, int k, double temperature, std::uint64_t seed);

  Var logits(Tape& tape, Var h);
  int k() const { return k_; }
  double temperature() const { return temperature_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  int k_;
  double temperature_;
  ParamSet params_;
};

/// Linear regression head H -> H on the final student layer.
class RegressionHead {
 public:
  RegressionHead(int hidden, std::uint64_t seed);
  Var predict(Tape& tape, Var h);
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  ParamSet params_;
};

/// Mean of the top-k (all when nullopt) transformer layers, each optionally
/// normalized per frame without affine parameters. Values only.
std::vector<float> teacher_targets(const EncoderOutput& out, std::optional<int> top_k,
                                   bool normalize);

/// theta_T <- tau * theta_T + (1 - tau) * theta_S for every parameter.
void ema_update(ParamSet& teacher, const ParamSet& student, double tau);

/// Euclidean distance between two parameter sets of identical layout.
double param_distance(const ParamSet& a, const ParamSet& b);

/// FNV-1a over parameter names, shapes and value bytes.
std::uint64_t param_hash(const ParamSet& p);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct TensorRecord {
  std::string name;
  ad::Shape shape;
  std::vector<float> data;
};

/// "SSLC" file: version, config JSON, paradigm tag, step, tensor table.
struct Checkpoint {
  std::string config_json;  // full run config that produced the weights
  std::string paradigm;     // "discrete", "continuous" or "random"
  std::uint64_t step = 0;
  std::vector<TensorRecord> tensors;

  /// Adds every parameter under `prefix`; with moments, also the Adam state.
  void store(const ParamSet& params, const std::string& prefix, bool with_moments);
  /// Restores parameters from `prefix`; throws DataError on missing or
  /// mis-shaped tensors.
  void restore(ParamSet& params, const std::string& prefix, bool with_moments) const;
  bool has(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace musicssl
