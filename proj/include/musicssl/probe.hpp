#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "musicssl/audio.hpp"
#include "musicssl/encoder.hpp"

namespace musicssl {

enum class ProbeTask : std::uint8_t { kMulticlass = 0, kMultilabel = 1, kRegression = 2, kFramewise = 3 };

std::string to_string(ProbeTask t);
ProbeTask probe_task_from_string(const std::string& s);

struct WindowPolicy {
  double window_seconds = 5.0;
  double hop_seconds = 5.0;

  void validate() const;
};

struct ProbeConfig {
  ProbeTask task = ProbeTask::kMulticlass;
  int outputs = 2;  // classes, tags, regression targets; 1 for framewise
  int hidden = 512;
  double lr = 1e-3;
  int epochs = 50;
  int batch_size = 32;
  int patience = 10;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-layer features of one input: `frames` rows of (L+1) x H, stored
/// layer-minor ([frame][h][layer]) so the layer weighting is one matmul.
/// Clip-level tasks have frames = 1.
struct LayerEmbeddings {
  std::size_t frames = 0;
  std::size_t layers = 0;  // L + 1
  std::size_t dims = 0;    // H
  std::vector<float> values;

  float at(std::size_t t, std::size_t layer, std::size_t h) const {
    return values[(t * dims + h) * layers + layer];
  }
};

/// Windowed clip embedding: per window the temporal mean of every layer,
/// then the mean over windows. A clip shorter than the window is one window.
LayerEmbeddings extract_layer_embeddings(Encoder& enc, const AudioClip& clip, const WindowPolicy& policy);

/// Per-frame layer activations of the whole clip (framewise tasks).
LayerEmbeddings extract_frame_embeddings(Encoder& enc, const AudioClip& clip);

/// softmax(raw_weights)-weighted sum over layers -> frames x H.
std::vector<float> weighted_features(const LayerEmbeddings& e, std::span<const float> raw_weights);

/// Beat-frame targets: round(t * fps) and both neighbours set, clipped to [0, T).
std::vector<float> framewise_probe_targets(std::span<const double> beats, std::size_t frames,
                                           double frame_rate);

struct ProbeExample {
  LayerEmbeddings x;
  std::vector<float> y;  // class id | multi-hot | regression values | per-frame 0/1
};

/// Softmax layer weighting followed by a one-hidden-layer MLP.
class ProbeModel {
 public:
  ProbeModel() = default;
  ProbeModel(const ProbeConfig& cfg, std::size_t layers, std::size_t dims);

  const ProbeConfig& config() const { return cfg_; }
  std::size_t layers() const { return layers_; }
  std::size_t dims() const { return dims_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  std::vector<float> layer_weights() const;  // softmax-normalized

  /// Stacked frames of the given examples -> [rows, outputs] raw outputs.
  Var forward(Tape& tape, const std::vector<const LayerEmbeddings*>& xs);
  /// Task-typed scores per frame: class probabilities, tag probabilities,
  /// regression values or beat activations; frames x outputs.
  std::vector<float> predict(const LayerEmbeddings& x);

 private:
  ProbeConfig cfg_;
  std::size_t layers_ = 0;
  std::size_t dims_ = 0;
  ParamSet params_;
};

struct ProbeTrainResult {
  ProbeModel model;
  double best_valid = 0.0;  // task metric of the kept snapshot (higher is better)
  int best_epoch = 0;
  std::vector<double> valid_curve;
};

/// Adam on the MLP and layer weights, best-validation snapshot with early
/// stopping. Validation metric: accuracy, macro ROC-AUC, mean r^2, or
/// negative frame BCE for framewise.
ProbeTrainResult train_probe(const std::vector<ProbeExample>& train,
                             const std::vector<ProbeExample>& valid, const ProbeConfig& cfg);

/// Validation metric as used by train_probe.
double probe_metric(ProbeModel& model, const std::vector<ProbeExample>& data);

/// "SSLP" file: config, layer/dims, parameters, and the encoder config hash.
void save_probe(const ProbeModel& m, const std::string& encoder_hash, const std::filesystem::path& path);
ProbeModel load_probe(const std::filesystem::path& path, std::string* encoder_hash = nullptr);

}  // namespace musicssl
