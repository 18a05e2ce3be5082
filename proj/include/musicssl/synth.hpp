#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "musicssl/audio.hpp"
#include "musicssl/manifest.hpp"

namespace musicssl {

enum class SynthTask : std::uint8_t { kPitch, kBeat, kKey, kTags, kEmotion };

std::string to_string(SynthTask t);
SynthTask synth_task_from_string(const std::string& s);
LabelKind label_kind_for(SynthTask t);

struct SynthSpec {
  SynthTask task = SynthTask::kPitch;
  int n_clips = 100;
  double duration = 2.0;  // seconds
  std::uint64_t seed = 0;
  int sample_rate = 16000;
  int min_midi = 36;  // pitch task label range, inclusive
  int max_midi = 84;

  void validate() const;
};

struct LabeledClip {
  AudioClip clip;
  Label label;
};

inline constexpr int kNumTags = 8;
/// Audible component behind each tag bit.
inline constexpr std::array<const char*, kNumTags> kTagNames = {
    "sine", "sawtooth", "square", "noise", "tremolo", "bass", "clicks", "chirp"};

inline constexpr double kPeak = 0.9;

double midi_to_hz(double midi);

LabeledClip gen_pitch_clip(int midi, double duration, std::uint64_t seed,
                           int sample_rate = 16000);
LabeledClip gen_click_track(double bpm, double duration, std::uint64_t seed,
                            int sample_rate = 16000);
LabeledClip gen_key_clip(const KeyLabel& key, double duration, std::uint64_t seed,
                         int sample_rate = 16000);
LabeledClip gen_tag_clip(TagBits tags, double duration, std::uint64_t seed,
                         int sample_rate = 16000);
LabeledClip gen_emotion_clip(double valence, double arousal, double duration,
                             std::uint64_t seed, int sample_rate = 16000);

/// The clip at `index` of the corpus described by `spec`.
LabeledClip gen_indexed_clip(const SynthSpec& spec, std::size_t index);

/// Deterministic 8:1:1 split by ranking index hashes.
Split split_for_index(std::size_t index, std::size_t n_clips);

struct CorpusPaths {
  std::filesystem::path manifest;
  std::filesystem::path labels;
};

/// Writes audio/clip_NNNNN.wav, labels.tsv and manifest.tsv under out_dir.
CorpusPaths gen_corpus(const SynthSpec& spec, const std::filesystem::path& out_dir,
                       int workers = 1);

}  // namespace musicssl
