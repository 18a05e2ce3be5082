#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "musicssl/config.hpp"
#include "musicssl/manifest.hpp"

namespace musicssl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Features and pseudo-labels
// ---------------------------------------------------------------------------

/// Handcrafted features of one clip. With dsp.align_to_encoder the waveform
/// is zero-padded by (window - receptive_field) / 2 on both sides, so frame t
/// is centred on the same samples as encoder frame t and T matches exactly.
FeatureMatrix clip_features(const AudioClip& clip, const RunConfig& cfg);

/// Writes <out>/<row.path>.sslf for every manifest row plus provenance.json.
void extract_features(const Manifest& m, const RunConfig& cfg, const fs::path& out, int workers);
std::vector<FeatureMatrix> load_feature_dir(const Manifest& m, const fs::path& dir);

/// Frame activations of one transformer layer (0 = conv projection).
FeatureMatrix deep_features(Encoder& enc, const AudioClip& clip, int layer);

std::vector<AudioClip> load_clips(const Manifest& m, int workers);

/// Codebook over all rows of `feats`; labels for every clip.
struct QuantizeResult {
  KmeansFit fit;
  std::vector<LabelSequence> labels;
};
QuantizeResult quantize_features(const std::vector<FeatureMatrix>& feats, const RunConfig& cfg, int workers);

/// Deep-feature K-means on the chosen layer of a trained checkpoint.
QuantizeResult fit_second_iteration(const Checkpoint& ckpt, const std::vector<AudioClip>& clips, int layer,
                                    const RunConfig& cfg, int workers);

/// <out>/codebook.sslk, <out>/labels/<row.path>.ssll and provenance.json.
void write_quantize_dir(const Manifest& m, const QuantizeResult& q, const RunConfig& cfg, const fs::path& out);
std::vector<LabelSequence> load_label_dir(const Manifest& m, const fs::path& dir);

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

struct PretrainRun {
  fs::path final_checkpoint;
  std::vector<fs::path> checkpoints;  // periodic ones, in step order
  std::vector<StepStats> log;         // steps run by this call
};

using StepCallback = std::function<void(const StepStats&)>;

/// Trains from scratch (or from the newest checkpoint in `out` when
/// `resume`), writing ckpt_NNNNNN.sslc every checkpoint_every steps and at
/// the last step, final.sslc, and loss.tsv.
PretrainRun run_pretraining(const RunConfig& cfg, std::vector<AudioClip> clips,
                            std::vector<LabelSequence> labels, const fs::path& out, bool resume = false,
                            const StepCallback& on_step = {});

/// Iteration 1 uses `labels`; every later iteration refits K-means on the
/// previous checkpoint's deep features and retrains from scratch. Each
/// iteration lives in <out>/iterN.
fs::path run_iteration_pipeline(const RunConfig& cfg, const Manifest& m, const std::vector<AudioClip>& clips,
                                std::vector<LabelSequence> labels, const fs::path& out, int workers,
                                const StepCallback& on_step = {});

// ---------------------------------------------------------------------------
// Probing and evaluation
// ---------------------------------------------------------------------------

struct PredictionItem {
  std::string path;
  std::size_t frames = 1;
  std::vector<float> scores;  // frames x outputs
};

/// Test-split outputs of a probe, tied to the labels and config used.
struct Predictions {
  LabelKind label_kind = LabelKind::kClass;
  ProbeTask task = ProbeTask::kMulticlass;
  std::size_t outputs = 0;
  std::vector<int> classes;  // class id of each output (class and key tasks)
  double frame_rate = 50.0;
  std::string config_hash;
  std::string labels_hash;
  std::string encoder_hash;
  std::vector<PredictionItem> items;

  std::string to_json() const;
  static Predictions from_json(const std::string& text);
};

struct ProbeRun {
  ProbeTrainResult train;
  Predictions predictions;
};

/// Integer id of a key label (tonic + 12 * mode).
int key_class(const KeyLabel& k);
KeyLabel key_from_class(int id);

/// Extracts embeddings for every split, trains the probe on train/valid
/// and predicts the test split. The encoder is only read.
ProbeRun run_probe(Encoder& enc, const Manifest& m, const LabelTable& labels, const std::string& labels_hash,
                   const RunConfig& cfg, int workers);

/// Task metrics of predictions against the label table. Throws DataError
/// when the predictions were made against another label file unless `force`.
MetricReport evaluate_predictions(const Predictions& p, const LabelTable& labels, const std::string& labels_hash,
                                  const RunConfig& cfg, bool force = false);

/// Table with one row per report and the union of metric columns.
std::string report_table(const std::vector<std::pair<std::string, MetricReport>>& runs);
std::string report_table_json(const std::vector<std::pair<std::string, MetricReport>>& runs);

/// Writes `content` via a temporary file and rename.
void write_text_atomic(const fs::path& path, const std::string& content);

}  // namespace musicssl
