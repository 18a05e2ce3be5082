#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "musicssl/audio.hpp"
#include "musicssl/encoder.hpp"
#include "musicssl/quantize.hpp"

namespace musicssl {

enum class Paradigm : std::uint8_t { kDiscrete = 0, kContinuous = 1 };
enum class RegressionLoss : std::uint8_t { kMse = 0, kSmoothL1 = 1 };

std::string to_string(Paradigm p);
Paradigm paradigm_from_string(const std::string& s);
std::string to_string(RegressionLoss l);
RegressionLoss regression_loss_from_string(const std::string& s);

struct TrainConfig {
  Paradigm paradigm = Paradigm::kDiscrete;
  int steps = 2000;
  double crop_seconds = 1.0;
  double token_budget_seconds = 2.0;  // combined audio per batch
  double lr = 5e-4;
  double warmup_frac = 0.08;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-6;
  MaskSpec mask;
  // Continuous targets.
  std::optional<int> target_layers;  // top-k transformer layers; nullopt = all
  bool normalize_targets = true;
  RegressionLoss loss = RegressionLoss::kMse;
  double smooth_l1_beta = 1.0;
  double tau_start = 0.999;
  double tau_end = 0.9999;
  double tau_anneal_frac = 0.3;
  // Discrete targets.
  bool masked_only = true;
  double unmasked_weight = 0.0;  // weight of unmasked frames when !masked_only
  int head_dim = 256;
  double temperature = 0.1;
  int checkpoint_every = 500;
  int iterations = 1;  // pseudo-label refits (discrete)
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t crop_samples(int sample_rate = 16000) const;
  std::size_t crops_per_batch(int sample_rate = 16000) const;
  /// Warmup then linear decay to 0 at `steps`; step is 1-based.
  double lr_at(std::int64_t step) const;
  /// Linear anneal from tau_start to tau_end over the first tau_anneal_frac.
  double tau_at(std::int64_t step) const;
};

struct Crop {
  std::size_t clip = 0;    // index into the clip list
  std::size_t offset = 0;  // samples, a multiple of the encoder stride
  friend bool operator==(const Crop&, const Crop&) = default;
};

/// Deterministic crop schedule: batch b holds crops b*n .. b*n+n-1 of an
/// endless sequence of per-epoch shuffles of the usable clips. Any batch can
/// be recomputed from (seed, step) alone, which makes resumption exact.
class BatchPlan {
 public:
  BatchPlan(std::vector<std::size_t> clip_lengths, const TrainConfig& cfg, int hop = 320,
            int sample_rate = 16000);

  std::vector<Crop> batch(std::uint64_t step) const;
  std::size_t crops_per_batch() const { return per_batch_; }
  std::size_t crop_samples() const { return crop_; }
  const std::vector<std::size_t>& usable() const { return usable_; }
  const std::vector<std::size_t>& skipped() const { return skipped_; }

 private:
  std::vector<std::size_t> lengths_;
  std::vector<std::size_t> usable_;
  std::vector<std::size_t> skipped_;
  std::size_t crop_ = 0;
  std::size_t per_batch_ = 0;
  int hop_ = 320;
  std::uint64_t seed_ = 0;
};

struct StepStats {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double tau = 0.0;  // 1 for the discrete paradigm (no teacher)
  std::size_t masked_frames = 0;
};

/// Student, heads, optional EMA teacher and optimizer state for one run.
class Pretrainer {
 public:
  /// `labels` (discrete only) holds one sequence per clip aligned to encoder
  /// frames of the full clip; `k` is the codebook size.
  Pretrainer(const EncoderConfig& enc, const TrainConfig& cfg, std::vector<AudioClip> clips,
             std::vector<LabelSequence> labels = {}, int k = 0);

  /// One optimizer step on batch `steps_done() + 1`.
  StepStats step();
  std::uint64_t steps_done() const { return step_; }
  /// Loss of the current weights on batch `batch_index` (same crops and
  /// masks as the training step that consumes it), without any update.
  StepStats evaluate(std::uint64_t batch_index);

  const TrainConfig& config() const { return cfg_; }
  const BatchPlan& plan() const { return plan_; }
  Encoder& student() { return student_; }
  Encoder* teacher() { return teacher_ ? &*teacher_ : nullptr; }
  DiscreteHead* discrete_head() { return dhead_ ? &*dhead_ : nullptr; }
  RegressionHead* regression_head() { return rhead_ ? &*rhead_ : nullptr; }

  Checkpoint checkpoint(const std::string& config_json) const;
  /// Restores weights, teacher, moments and the step counter.
  void restore(const Checkpoint& ckpt);

  /// Mask used for crop j of a given step (exposed for tests).
  std::vector<bool> mask_for(std::uint64_t step, std::size_t j, std::size_t frames) const;

 private:
  StepStats discrete_step(const std::vector<Crop>& batch, std::uint64_t step, bool update);
  StepStats continuous_step(const std::vector<Crop>& batch, std::uint64_t step, bool update);
  std::span<const float> crop_wave(const Crop& c) const;
  std::vector<Param*> trainable();

  EncoderConfig enc_cfg_;
  TrainConfig cfg_;
  std::vector<AudioClip> clips_;
  std::vector<LabelSequence> labels_;
  BatchPlan plan_;
  Encoder student_;
  std::optional<Encoder> teacher_;
  std::optional<DiscreteHead> dhead_;
  std::optional<RegressionHead> rhead_;
  std::uint64_t step_ = 0;
};

/// Label ids for the frames of a crop; the label sequence covers the whole
/// clip at encoder frame rate. Throws DataError when the sequence is more
/// than one frame short.
std::vector<std::uint32_t> slice_labels(const LabelSequence& labels, std::size_t first_frame,
                                        std::size_t frames);

}  // namespace musicssl
