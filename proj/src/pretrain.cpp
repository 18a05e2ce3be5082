#include "musicssl/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "musicssl/common.hpp"

namespace musicssl {

std::string to_string(Paradigm p) { return p == Paradigm::kDiscrete ? "discrete" : "continuous"; }

Paradigm paradigm_from_string(const std::string& s) {
  if (s == "discrete") return Paradigm::kDiscrete;
  if (s == "continuous") return Paradigm::kContinuous;
  throw UsageError("unknown paradigm '" + s + "' (expected discrete or continuous)");
}

std::string to_string(RegressionLoss l) { return l == RegressionLoss::kMse ? "mse" : "smooth_l1"; }

RegressionLoss regression_loss_from_string(const std::string& s) {
  if (s == "mse") return RegressionLoss::kMse;
  if (s == "smooth_l1") return RegressionLoss::kSmoothL1;
  throw UsageError("unknown loss '" + s + "' (expected mse or smooth_l1)");
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (steps < 1) throw UsageError("pretrain.steps must be >= 1");
  if (!(crop_seconds > 0)) throw UsageError("pretrain.crop_seconds must be positive");
  if (token_budget_seconds < crop_seconds)
    throw UsageError("pretrain.token_budget_seconds must be >= pretrain.crop_seconds");
  if (!(lr > 0)) throw UsageError("pretrain.lr must be positive");
  if (!(warmup_frac >= 0 && warmup_frac < 1)) throw UsageError("pretrain.warmup_frac must lie in [0, 1)");
  if (weight_decay < 0) throw UsageError("pretrain.weight_decay must be >= 0");
  mask.validate();
  if (target_layers && *target_layers < 1) throw UsageError("pretrain.target_layers must be >= 1 or \"all\"");
  if (!(smooth_l1_beta > 0)) throw UsageError("pretrain.smooth_l1_beta must be positive");
  for (double t : {tau_start, tau_end})
    if (!(t >= 0 && t <= 1)) throw UsageError("pretrain.tau_start/tau_end must lie in [0, 1]");
  if (!(tau_anneal_frac >= 0 && tau_anneal_frac <= 1))
    throw UsageError("pretrain.tau_anneal_frac must lie in [0, 1]");
  if (unmasked_weight < 0) throw UsageError("pretrain.unmasked_weight must be >= 0");
  if (head_dim < 1) throw UsageError("pretrain.head_dim must be positive");
  if (!(temperature > 0)) throw UsageError("pretrain.temperature must be positive");
  if (checkpoint_every < 1) throw UsageError("pretrain.checkpoint_every must be >= 1");
  if (iterations < 1) throw UsageError("pretrain.iterations must be >= 1");
}

std::size_t TrainConfig::crop_samples(int sample_rate) const {
  return static_cast<std::size_t>(std::llround(crop_seconds * sample_rate));
}

std::size_t TrainConfig::crops_per_batch(int sample_rate) const {
  const auto budget = static_cast<std::size_t>(std::llround(token_budget_seconds * sample_rate));
  return budget / crop_samples(sample_rate);
}

double TrainConfig::lr_at(std::int64_t step) const {
  const auto warm = static_cast<std::int64_t>(std::llround(warmup_frac * steps));
  if (step <= warm) return lr * static_cast<double>(step) / static_cast<double>(warm);
  // Decays linearly; the final step still gets a nonzero rate.
  return lr * static_cast<double>(steps - step + 1) / static_cast<double>(steps - warm + 1);
}

double TrainConfig::tau_at(std::int64_t step) const {
  const double anneal = tau_anneal_frac * steps;
  if (anneal <= 0 || static_cast<double>(step) >= anneal) return tau_end;
  return tau_start + (tau_end - tau_start) * static_cast<double>(step) / anneal;
}

// ---------------------------------------------------------------------------
// BatchPlan
// ---------------------------------------------------------------------------

BatchPlan::BatchPlan(std::vector<std::size_t> clip_lengths, const TrainConfig& cfg, int hop,
                     int sample_rate)
    : lengths_(std::move(clip_lengths)),
      crop_(cfg.crop_samples(sample_rate)),
      per_batch_(cfg.crops_per_batch(sample_rate)),
      hop_(hop),
      seed_(cfg.seed) {
  for (std::size_t i = 0; i < lengths_.size(); ++i)
    (lengths_[i] >= crop_ ? usable_ : skipped_).push_back(i);
  if (usable_.empty())
    throw DataError("no training clip is at least " + std::to_string(cfg.crop_seconds) + " s long");
  if (per_batch_ == 0) throw UsageError("token budget holds no crop");
}

std::vector<Crop> BatchPlan::batch(std::uint64_t step) const {
  const std::size_t n = usable_.size();
  std::vector<Crop> out;
  std::vector<std::size_t> perm;
  std::uint64_t perm_epoch = ~0ULL;
  for (std::size_t j = 0; j < per_batch_; ++j) {
    const std::uint64_t g = step * per_batch_ + j;
    const std::uint64_t epoch = g / n;
    if (epoch != perm_epoch) {
      perm = usable_;
      std::mt19937_64 rng(mix64(seed_ ^ mix64(epoch + 0x6570)));
      for (std::size_t i = n; i > 1; --i) {
        const auto r = static_cast<std::size_t>(unit_from_hash(rng()) * static_cast<double>(i));
        std::swap(perm[i - 1], perm[r]);
      }
      perm_epoch = epoch;
    }
    const std::size_t clip = perm[g % n];
    const std::size_t slots = (lengths_[clip] - crop_) / hop_ + 1;
    const double u = unit_from_hash(mix64(seed_ ^ mix64(g) ^ 0x6f6666736574ULL));
    out.push_back({clip, static_cast<std::size_t>(u * static_cast<double>(slots)) * hop_});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

std::vector<std::uint32_t> slice_labels(const LabelSequence& labels, std::size_t first_frame,
                                        std::size_t frames) {
  const std::size_t have = labels.ids.size(), need = first_frame + frames;
  if (have + 1 < need)
    throw DataError("label sequence has " + std::to_string(have) + " frames, crop needs " +
                    std::to_string(need) + " (misaligned by more than one frame)");
  if (have == 0) throw DataError("empty label sequence");
  std::vector<std::uint32_t> out(frames);
  for (std::size_t t = 0; t < frames; ++t) out[t] = labels.ids[std::min(first_frame + t, have - 1)];
  return out;
}

// ---------------------------------------------------------------------------
// Pretrainer
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> lengths_of(const std::vector<AudioClip>& clips) {
  std::vector<std::size_t> out;
  for (const auto& c : clips) out.push_back(c.samples.size());
  return out;
}

void copy_values(ParamSet& dst, const ParamSet& src) {
  auto d = dst.all();
  auto s = src.all();
  for (std::size_t i = 0; i < d.size(); ++i) d[i]->value = s[i]->value;
}

}  // namespace

Pretrainer::Pretrainer(const EncoderConfig& enc, const TrainConfig& cfg, std::vector<AudioClip> clips,
                       std::vector<LabelSequence> labels, int k)
    : enc_cfg_(enc),
      cfg_(cfg),
      clips_(std::move(clips)),
      labels_(std::move(labels)),
      plan_((cfg.validate(), lengths_of(clips_)), cfg, enc.total_stride(), enc.sample_rate),
      student_(enc, cfg.seed) {
  for (const auto& c : clips_)
    if (c.sample_rate != enc.sample_rate) throw DataError("training audio must be 16 kHz");
  const std::size_t crop_frames = enc.frames_for(plan_.crop_samples());
  if (crop_frames == 0) throw UsageError("crop is shorter than the encoder receptive field");
  if (crop_frames > static_cast<std::size_t>(enc.max_positions))
    throw UsageError("crop yields more frames than encoder.max_positions");
  if (cfg_.paradigm == Paradigm::kDiscrete) {
    if (labels_.size() != clips_.size())
      throw DataError("discrete pre-training needs one label sequence per clip");
    for (const auto& l : labels_)
      for (auto id : l.ids)
        if (id >= static_cast<std::uint32_t>(k)) throw DataError("label id outside the codebook size");
    dhead_.emplace(enc.hidden, cfg_.head_dim, k, cfg_.temperature, cfg_.seed + 1);
  } else {
    if (enc.layers < 1) throw UsageError("continuous pre-training needs at least one transformer layer");
    if (cfg_.target_layers && *cfg_.target_layers > enc.layers)
      throw UsageError("pretrain.target_layers=" + std::to_string(*cfg_.target_layers) +
                       " exceeds encoder.layers=" + std::to_string(enc.layers));
    rhead_.emplace(enc.hidden, cfg_.seed + 1);
    teacher_.emplace(enc, cfg_.seed);
    copy_values(teacher_->params(), student_.params());
    for (auto* p : teacher_->params().all()) p->requires_grad = false;
  }
}

std::span<const float> Pretrainer::crop_wave(const Crop& c) const {
  return {clips_[c.clip].samples.data() + c.offset, plan_.crop_samples()};
}

std::vector<bool> Pretrainer::mask_for(std::uint64_t step, std::size_t j, std::size_t frames) const {
  const std::uint64_t base = mix64(cfg_.seed ^ mix64(step * 4096 + j) ^ 0x6d61736bULL);
  for (std::uint64_t attempt = 0; attempt < 2; ++attempt) {
    auto draw = sample_mask(frames, cfg_.mask, base + attempt);
    if (draw.count() > 0) return draw.mask;
  }
  throw DataError("mask is empty for a " + std::to_string(frames) +
                  "-frame crop; raise mask.prob or the crop length");
}

std::vector<Param*> Pretrainer::trainable() {
  auto ps = student_.params().all();
  auto hs = dhead_ ? dhead_->params().all() : rhead_->params().all();
  ps.insert(ps.end(), hs.begin(), hs.end());
  return ps;
}

StepStats Pretrainer::step() {
  const auto batch = plan_.batch(step_);
  ++step_;
  for (auto* p : trainable()) p->zero_grad();
  StepStats s = cfg_.paradigm == Paradigm::kDiscrete ? discrete_step(batch, step_, true)
                                                     : continuous_step(batch, step_, true);
  s.step = step_;
  s.lr = cfg_.lr_at(static_cast<std::int64_t>(step_));
  ad::AdamOptions opt{.lr = s.lr, .beta1 = cfg_.beta1, .beta2 = cfg_.beta2, .eps = cfg_.adam_eps,
                      .weight_decay = cfg_.weight_decay};
  auto params = trainable();
  ad::adam_step<float>(params, opt, static_cast<std::int64_t>(step_));
  if (teacher_) {
    s.tau = cfg_.tau_at(static_cast<std::int64_t>(step_));
    ema_update(teacher_->params(), student_.params(), s.tau);
  } else {
    s.tau = 1.0;
  }
  if (!std::isfinite(s.loss)) throw std::runtime_error("loss diverged at step " + std::to_string(step_));
  return s;
}

StepStats Pretrainer::discrete_step(const std::vector<Crop>& batch, std::uint64_t step, bool update) {
  Tape tape(update);
  std::vector<Var> logits;
  std::vector<std::uint32_t> targets;
  std::vector<bool> masked, unmasked;
  const int hop = enc_cfg_.total_stride();
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto& c = batch[j];
    const auto wave = crop_wave(c);
    const std::size_t frames = enc_cfg_.frames_for(wave.size());
    const auto mask = mask_for(step, j, frames);
    ForwardOptions fo{.mask = &mask, .train = update, .dropout_seed = ad::dropout_seed(cfg_.seed, j, step)};
    auto out = student_.forward(tape, wave, fo);
    logits.push_back(dhead_->logits(tape, out.layers.back()));
    const auto ids = slice_labels(labels_[c.clip], c.offset / hop, frames);
    targets.insert(targets.end(), ids.begin(), ids.end());
    for (bool m : mask) {
      masked.push_back(m);
      unmasked.push_back(!m);
    }
  }
  auto all = ad::concat<float>(logits, 0);
  Var loss = ad::cross_entropy<float>(all, targets, masked);
  const bool any_unmasked = std::find(unmasked.begin(), unmasked.end(), true) != unmasked.end();
  if (!cfg_.masked_only && cfg_.unmasked_weight > 0 && any_unmasked)
    loss = ad::add(loss, ad::scale(ad::cross_entropy<float>(all, targets, unmasked),
                                   static_cast<float>(cfg_.unmasked_weight)));
  if (update) tape.backward(loss);
  StepStats s;
  s.loss = loss.item();
  s.masked_frames = static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true));
  return s;
}

StepStats Pretrainer::continuous_step(const std::vector<Crop>& batch, std::uint64_t step, bool update) {
  std::vector<float> targets;
  {
    Tape frozen(false);
    for (const auto& c : batch) {
      auto out = teacher_->forward(frozen, crop_wave(c));
      const auto t = teacher_targets(out, cfg_.target_layers, cfg_.normalize_targets);
      targets.insert(targets.end(), t.begin(), t.end());
    }
  }
  Tape tape(update);
  std::vector<Var> preds;
  std::vector<bool> masked;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto wave = crop_wave(batch[j]);
    const auto mask = mask_for(step, j, enc_cfg_.frames_for(wave.size()));
    ForwardOptions fo{.mask = &mask, .train = update, .dropout_seed = ad::dropout_seed(cfg_.seed, j, step)};
    auto out = student_.forward(tape, wave, fo);
    preds.push_back(rhead_->predict(tape, out.layers.back()));
    masked.insert(masked.end(), mask.begin(), mask.end());
  }
  auto pred = ad::concat<float>(preds, 0);
  auto target = tape.constant(pred.shape(), std::move(targets));
  Var loss = cfg_.loss == RegressionLoss::kMse
                 ? ad::mse(pred, target, masked)
                 : ad::smooth_l1(pred, target, static_cast<float>(cfg_.smooth_l1_beta), masked);
  if (update) tape.backward(loss);
  StepStats s;
  s.loss = loss.item();
  s.masked_frames = static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true));
  return s;
}

StepStats Pretrainer::evaluate(std::uint64_t batch_index) {
  const auto batch = plan_.batch(batch_index);
  StepStats s = cfg_.paradigm == Paradigm::kDiscrete ? discrete_step(batch, batch_index + 1, false)
                                                     : continuous_step(batch, batch_index + 1, false);
  s.step = step_;
  return s;
}

Checkpoint Pretrainer::checkpoint(const std::string& config_json) const {
  Checkpoint c;
  c.config_json = config_json;
  c.paradigm = to_string(cfg_.paradigm);
  c.step = step_;
  c.store(student_.params(), "encoder/", true);
  if (dhead_) c.store(dhead_->params(), "heads/", true);
  if (rhead_) c.store(rhead_->params(), "heads/", true);
  if (teacher_) c.store(teacher_->params(), "teacher/", false);
  return c;
}

void Pretrainer::restore(const Checkpoint& ckpt) {
  if (ckpt.paradigm != to_string(cfg_.paradigm))
    throw DataError("checkpoint paradigm '" + ckpt.paradigm + "' does not match config '" +
                    to_string(cfg_.paradigm) + "'");
  ckpt.restore(student_.params(), "encoder/", true);
  if (dhead_) ckpt.restore(dhead_->params(), "heads/", true);
  if (rhead_) ckpt.restore(rhead_->params(), "heads/", true);
  if (teacher_) ckpt.restore(teacher_->params(), "teacher/", false);
  step_ = ckpt.step;
}

}  // namespace musicssl
