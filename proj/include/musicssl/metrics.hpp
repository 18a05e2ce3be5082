#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace musicssl {

// ---------------------------------------------------------------------------
// Tagging (multi-label ranking metrics)
// ---------------------------------------------------------------------------

/// Per-tag AUC via the Mann-Whitney rank statistic (ties count one half).
/// Returns nullopt when the tag has only one class present.
std::optional<double> roc_auc(std::span<const double> scores,
                              std::span<const std::uint8_t> labels);

/// Step-interpolated average precision: sum over thresholds of
/// (recall increment) * precision. Tied scores form a single threshold.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels);

struct MacroMetric {
  double value = 0.0;
  std::vector<std::optional<double>> per_tag;
  std::vector<std::size_t> excluded_tags;  // single-class tags
};

/// scores and labels are item-major (n_items x n_tags). Tags with a single
/// class are dropped from the mean and listed in excluded_tags. Throws
/// DataError when no tag is valid.
MacroMetric roc_auc_macro(std::span<const double> scores,
                          std::span<const std::uint8_t> labels, std::size_t n_tags);
MacroMetric average_precision_macro(std::span<const double> scores,
                                    std::span<const std::uint8_t> labels,
                                    std::size_t n_tags);

// ---------------------------------------------------------------------------
// Classification / regression
// ---------------------------------------------------------------------------

double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Coefficient of determination 1 - SS_res / SS_tot. Throws DataError for
/// zero label variance.
double r2(std::span<const double> preds, std::span<const double> labels);

// ---------------------------------------------------------------------------
// Key detection
// ---------------------------------------------------------------------------

enum class Mode : std::uint8_t { kMajor = 0, kMinor = 1 };

struct KeyLabel {
  int tonic = 0;  // pitch class, C = 0
  Mode mode = Mode::kMajor;

  friend bool operator==(const KeyLabel&, const KeyLabel&) = default;
};

/// "tonic:mode", e.g. "9:minor".
std::string to_string(const KeyLabel& key);
KeyLabel parse_key(const std::string& s);

struct KeyScoring {
  bool bidirectional_fifth = false;
};

/// 1.0 exact, 0.5 estimate a fifth above (same mode), 0.3 relative,
/// 0.2 parallel, otherwise 0.
double refined_key_score(const KeyLabel& est, const KeyLabel& ref,
                         const KeyScoring& scoring = {});
double refined_key_accuracy(std::span<const KeyLabel> est,
                            std::span<const KeyLabel> ref,
                            const KeyScoring& scoring = {});

// ---------------------------------------------------------------------------
// Beat tracking
// ---------------------------------------------------------------------------

/// F-measure of one-to-one matching within +-tolerance seconds.
/// Both grids empty scores 1; exactly one empty scores 0.
double beat_f_measure(std::span<const double> est, std::span<const double> ref,
                      double tolerance = 0.02);

struct DbnConfig {
  double fps = 50.0;
  double min_bpm = 55.0;
  double max_bpm = 215.0;
  double transition_lambda = 100.0;
  double observation_lambda = 1.0 / 16.0;  // fraction of the beat period
  double threshold = 0.0;  // activations below are zeroed before decoding
  // Report the activation peak inside each decoded beat region instead of
  // the phase-0 frame (the two differ once a region spans several frames).
  bool correct = true;

  void validate() const;
};

struct BeatState {
  int interval = 0;  // frames per beat
  int phase = 0;     // frames left until the interval may change
};

/// Most likely (interval, phase) path; phase decrements every frame and the
/// interval can only change after phase 0.
std::vector<BeatState> dbn_viterbi_path(std::span<const double> activations,
                                        const DbnConfig& cfg = {});

/// Viterbi decoding over the (interval, phase) bar-less beat state space.
/// Returns beat times in seconds.
std::vector<double> dbn_decode(std::span<const double> activations,
                               const DbnConfig& cfg = {});

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricReport {
  std::string task;
  std::string split;
  std::string config_hash;
  std::map<std::string, double> metrics;
  std::map<std::string, std::vector<double>> per_tag;  // NaN marks excluded
  std::vector<std::size_t> excluded_tags;

  void validate() const;
  std::string to_json() const;
  std::string to_text() const;
  static MetricReport from_json(const std::string& text);
};

}  // namespace musicssl
