#include "musicssl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

using Rng = std::mt19937_64;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::size_t sample_count(double duration, int sample_rate) {
  if (!(duration > 0.0)) throw UsageError("duration must be positive");
  return static_cast<std::size_t>(std::llround(duration * sample_rate));
}

struct Partial {
  double ratio;  // multiple of f0
  double amp;
  double phase;
};

// Adds a note with a linear attack and exponential decay; partials above
// 0.45 * sample_rate are skipped.
void add_note(std::vector<double>& buf, int sr, double start, double length, double f0,
              const std::vector<Partial>& partials, double gain, double attack, double decay) {
  const auto begin = static_cast<std::size_t>(std::max(0.0, std::round(start * sr)));
  const auto end = std::min(buf.size(), static_cast<std::size_t>(std::round((start + length) * sr)));
  const double release = 0.01;
  for (std::size_t n = begin; n < end; ++n) {
    const double t = static_cast<double>(n - begin) / sr;
    const double left = static_cast<double>(end - n) / sr;
    double env = gain * std::exp(-t / decay);
    if (t < attack) env *= t / attack;
    if (left < release) env *= left / release;
    double v = 0.0;
    for (const auto& p : partials) {
      const double f = f0 * p.ratio;
      if (f >= 0.45 * sr) continue;
      v += p.amp * std::sin(kTwoPi * f * t + p.phase);
    }
    buf[n] += env * v;
  }
}

// Decaying white-noise burst.
void add_click(std::vector<double>& buf, int sr, double start, double gain, Rng& rng) {
  const auto begin = static_cast<std::size_t>(std::round(start * sr));
  const auto len = static_cast<std::size_t>(0.04 * sr);
  for (std::size_t k = 0; k < len && begin + k < buf.size(); ++k) {
    const double t = static_cast<double>(k) / sr;
    buf[begin + k] += gain * std::exp(-t / 0.006) * uniform(rng, -1.0, 1.0);
  }
}

AudioClip finish(std::vector<double>& buf, int sr) {
  double peak = 0.0;
  for (double v : buf) peak = std::max(peak, std::abs(v));
  const double scale = peak > 0.0 ? kPeak / peak : 0.0;
  AudioClip clip;
  clip.sample_rate = sr;
  clip.samples.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) clip.samples[i] = static_cast<float>(buf[i] * scale);
  return clip;
}

std::vector<Partial> harmonic_partials(int count, Rng& rng, double rolloff) {
  std::vector<Partial> p;
  for (int k = 0; k < count; ++k)
    p.push_back({static_cast<double>(k + 1),
                 k == 0 ? 1.0 : uniform(rng, 0.1, 0.7) / std::pow(k + 1.0, rolloff),
                 uniform(rng, 0.0, kTwoPi)});
  return p;
}

constexpr std::array<int, 7> kMajorScale = {0, 2, 4, 5, 7, 9, 11};
constexpr std::array<int, 7> kMinorScale = {0, 2, 3, 5, 7, 8, 10};

}  // namespace

std::string to_string(SynthTask t) {
  switch (t) {
    case SynthTask::kPitch: return "pitch";
    case SynthTask::kBeat: return "beat";
    case SynthTask::kKey: return "key";
    case SynthTask::kTags: return "tags";
    case SynthTask::kEmotion: return "emotion";
  }
  return "?";
}

SynthTask synth_task_from_string(const std::string& s) {
  if (s == "pitch") return SynthTask::kPitch;
  if (s == "beat") return SynthTask::kBeat;
  if (s == "key") return SynthTask::kKey;
  if (s == "tags") return SynthTask::kTags;
  if (s == "emotion") return SynthTask::kEmotion;
  throw UsageError("unknown synth task '" + s + "'");
}

LabelKind label_kind_for(SynthTask t) {
  switch (t) {
    case SynthTask::kPitch: return LabelKind::kClass;
    case SynthTask::kBeat: return LabelKind::kBeats;
    case SynthTask::kKey: return LabelKind::kKey;
    case SynthTask::kTags: return LabelKind::kTags;
    case SynthTask::kEmotion: return LabelKind::kRegression;
  }
  return LabelKind::kClass;
}

void SynthSpec::validate() const {
  if (n_clips <= 0) throw UsageError("n_clips must be positive");
  if (!(duration > 0.0)) throw UsageError("duration must be positive");
  if (sample_rate <= 0) throw UsageError("sample_rate must be positive");
  if (min_midi < 36 || max_midi > 84 || min_midi > max_midi)
    throw UsageError("pitch range must lie within [36, 84]");
}

double midi_to_hz(double midi) { return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0); }

LabeledClip gen_pitch_clip(int midi, double duration, std::uint64_t seed, int sample_rate) {
  if (midi < 36 || midi > 84) throw UsageError("midi pitch must lie in [36, 84]");
  std::vector<double> buf(sample_count(duration, sample_rate), 0.0);
  Rng rng(seed);
  const auto partials = harmonic_partials(uniform_int(rng, 4, 8), rng, 0.5);
  const double decay = uniform(rng, 1.0, 3.0);
  add_note(buf, sample_rate, 0.0, duration, midi_to_hz(midi), partials, 1.0, 0.01, decay);
  return {finish(buf, sample_rate), midi};
}

LabeledClip gen_click_track(double bpm, double duration, std::uint64_t seed, int sample_rate) {
  if (bpm < 40.0 || bpm > 240.0) throw UsageError("bpm must lie in [40, 240]");
  std::vector<double> buf(sample_count(duration, sample_rate), 0.0);
  Rng rng(seed);
  for (auto& v : buf) v = uniform(rng, -0.01, 0.01);
  const auto count = static_cast<std::size_t>(std::floor(duration * bpm / 60.0 + 1e-9));
  BeatTimes beats;
  for (std::size_t k = 0; k < count; ++k) {
    beats.push_back(static_cast<double>(k) * 60.0 / bpm);
    add_click(buf, sample_rate, beats.back(), 0.8, rng);
  }
  return {finish(buf, sample_rate), beats};
}

LabeledClip gen_key_clip(const KeyLabel& key, double duration, std::uint64_t seed,
                         int sample_rate) {
  if (key.tonic < 0 || key.tonic > 11) throw UsageError("key tonic must lie in [0, 11]");
  std::vector<double> buf(sample_count(duration, sample_rate), 0.0);
  Rng rng(seed);
  const auto& scale = key.mode == Mode::kMajor ? kMajorScale : kMinorScale;
  const std::vector<Partial> timbre = {{1.0, 1.0, 0.0}, {2.0, 0.4, 0.0}, {3.0, 0.2, 0.0}};
  constexpr double kChord = 0.5, kNote = 0.125;
  int degree = 0;  // open on the tonic triad
  for (double start = 0.0; start < duration; start += kChord) {
    const int octave_base = 48 + 12 * uniform_int(rng, 0, 1);
    const std::array<int, 4> steps = {0, 2, 4, 7};  // root, third, fifth, octave
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const int s = degree + steps[i];
      const int pc = key.tonic + scale[static_cast<std::size_t>(s % 7)];
      const int midi = octave_base + pc + 12 * (s / 7);
      add_note(buf, sample_rate, start + kNote * static_cast<double>(i), 2.0 * kNote,
               midi_to_hz(midi), timbre, 1.0, 0.005, 0.15);
    }
    degree = uniform_int(rng, 0, 5);
  }
  return {finish(buf, sample_rate), key};
}

LabeledClip gen_tag_clip(TagBits tags, double duration, std::uint64_t seed, int sample_rate) {
  if ((tags & ((TagBits{1} << kNumTags) - 1)) == 0 || (tags >> kNumTags) != 0)
    throw UsageError("tag set must be a non-empty subset of the 8 tags");
  const std::size_t n = sample_count(duration, sample_rate);
  std::vector<double> buf(n, 0.0);
  Rng rng(seed);
  const double sr = sample_rate;
  const auto has = [&](int bit) { return (tags >> bit) & 1u; };
  const auto add_periodic = [&](double f0, auto amp_of_harmonic) {
    const double phase = uniform(rng, 0.0, kTwoPi);
    for (int k = 1; k * f0 < 0.45 * sr; ++k) {
      const double a = amp_of_harmonic(k);
      if (a == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i) buf[i] += a * std::sin(kTwoPi * k * f0 * i / sr + k * phase);
    }
  };
  if (has(0)) add_periodic(uniform(rng, 300.0, 1000.0), [](int k) { return k == 1 ? 0.8 : 0.0; });
  if (has(1)) add_periodic(uniform(rng, 100.0, 300.0), [](int k) { return 0.6 / k; });
  if (has(2)) add_periodic(uniform(rng, 100.0, 300.0), [](int k) { return k % 2 ? 0.6 / k : 0.0; });
  if (has(3))
    for (auto& v : buf) v += 0.5 * std::normal_distribution<double>(0.0, 1.0)(rng);
  if (has(5)) add_periodic(uniform(rng, 40.0, 90.0), [](int k) { return k == 1 ? 1.0 : k == 2 ? 0.5 : 0.0; });
  if (has(6)) {
    const double period = uniform(rng, 0.2, 0.4);
    for (double t = 0.0; t < duration; t += period) add_click(buf, sample_rate, t, 1.0, rng);
  }
  if (has(7)) {
    const double f_lo = uniform(rng, 200.0, 500.0), f_hi = uniform(rng, 2000.0, 4000.0);
    double phase = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double cyc = std::fmod(static_cast<double>(i) / sr, 1.0);
      phase += kTwoPi * (f_lo + (f_hi - f_lo) * cyc) / sr;
      buf[i] += 0.6 * std::sin(phase);
    }
  }
  if (has(4)) {
    // Tremolo needs a carrier when no other component is audible.
    if ((tags & ~(TagBits{1} << 4)) == 0)
      add_periodic(uniform(rng, 200.0, 600.0), [](int k) { return k % 2 ? 0.8 / (k * k) : 0.0; });
    const double rate = uniform(rng, 4.0, 8.0);
    for (std::size_t i = 0; i < n; ++i) buf[i] *= 0.55 + 0.45 * std::sin(kTwoPi * rate * i / sr);
  }
  return {finish(buf, sample_rate), tags};
}

LabeledClip gen_emotion_clip(double valence, double arousal, double duration,
                             std::uint64_t seed, int sample_rate) {
  if (!(valence >= -1.0 && valence <= 1.0 && arousal >= -1.0 && arousal <= 1.0))
    throw UsageError("valence and arousal must lie in [-1, 1]");
  std::vector<double> buf(sample_count(duration, sample_rate), 0.0);
  Rng rng(seed);
  // Arousal: onset rate 2..5 notes/s and 1..8 partials. Valence: chance of
  // drawing each note from the major rather than the minor scale.
  const double rate = 2.0 + 1.5 * (arousal + 1.0);
  const int n_partials = 1 + static_cast<int>(std::lround(3.5 * (arousal + 1.0)));
  const double p_major = 0.5 * (valence + 1.0);
  const int tonic = 60 + uniform_int(rng, 0, 11);
  const double ioi = 1.0 / rate;
  for (double start = 0.0; start < duration; start += ioi) {
    const bool major = uniform(rng, 0.0, 1.0) < p_major;
    const auto& scale = major ? kMajorScale : kMinorScale;
    const int midi = tonic + scale[static_cast<std::size_t>(uniform_int(rng, 0, 6))];
    const auto partials = harmonic_partials(n_partials, rng, 1.0);
    add_note(buf, sample_rate, start, ioi, midi_to_hz(midi), partials, 1.0, 0.005, 0.3);
  }
  return {finish(buf, sample_rate), Emotion{valence, arousal}};
}

LabeledClip gen_indexed_clip(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  const std::uint64_t clip_seed = mix64(spec.seed ^ mix64(index + 1));
  Rng rng(clip_seed ^ 0x5bd1e995ULL);
  switch (spec.task) {
    case SynthTask::kPitch:
      return gen_pitch_clip(uniform_int(rng, spec.min_midi, spec.max_midi), spec.duration,
                            clip_seed, spec.sample_rate);
    case SynthTask::kBeat:
      return gen_click_track(uniform(rng, 70.0, 180.0), spec.duration, clip_seed,
                             spec.sample_rate);
    case SynthTask::kKey: {
      KeyLabel key{uniform_int(rng, 0, 11), uniform_int(rng, 0, 1) ? Mode::kMinor : Mode::kMajor};
      return gen_key_clip(key, spec.duration, clip_seed, spec.sample_rate);
    }
    case SynthTask::kTags: {
      TagBits tags = 0;
      while (tags == 0)
        for (int b = 0; b < kNumTags; ++b)
          if (uniform(rng, 0.0, 1.0) < 0.3) tags |= TagBits{1} << b;
      return gen_tag_clip(tags, spec.duration, clip_seed, spec.sample_rate);
    }
    case SynthTask::kEmotion: {
      const double v = uniform(rng, -1.0, 1.0);
      const double a = uniform(rng, -1.0, 1.0);
      return gen_emotion_clip(v, a, spec.duration, clip_seed, spec.sample_rate);
    }
  }
  throw UsageError("unknown synth task");
}

Split split_for_index(std::size_t index, std::size_t n_clips) {
  if (index >= n_clips) throw UsageError("index out of range");
  const auto key = [](std::size_t i) { return mix64(0x73706c6974ULL ^ i); };
  const std::uint64_t mine = key(index);
  std::size_t rank = 0;
  for (std::size_t j = 0; j < n_clips; ++j) {
    const auto k = key(j);
    rank += k < mine || (k == mine && j < index);
  }
  const std::size_t n_train = n_clips * 8 / 10, n_valid = n_clips / 10;
  if (rank < n_train) return Split::kTrain;
  if (rank < n_train + n_valid) return Split::kValid;
  return Split::kTest;
}

CorpusPaths gen_corpus(const SynthSpec& spec, const std::filesystem::path& out_dir, int workers) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "audio");
  const auto n = static_cast<std::size_t>(spec.n_clips);

  // Split ranks computed once (split_for_index is O(n) per call).
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto key = [](std::size_t i) { return mix64(0x73706c6974ULL ^ i); };
  std::sort(order.begin(), order.end(), [&](auto a, auto b) {
    return key(a) < key(b) || (key(a) == key(b) && a < b);
  });
  std::vector<Split> splits(n);
  const std::size_t n_train = n * 8 / 10, n_valid = n / 10;
  for (std::size_t r = 0; r < n; ++r)
    splits[order[r]] = r < n_train ? Split::kTrain : r < n_train + n_valid ? Split::kValid : Split::kTest;

  Manifest manifest;
  manifest.root = out_dir;
  manifest.rows.resize(n);
  std::vector<Label> labels(n);
  parallel_for(n, workers, [&](std::size_t i) {
    auto lc = gen_indexed_clip(spec, i);
    char name[32];
    std::snprintf(name, sizeof(name), "audio/clip_%05zu.wav", i);
    save_wav(lc.clip, out_dir / name);
    manifest.rows[i] = {name, lc.clip.samples.size(), splits[i]};
    labels[i] = std::move(lc.label);
  });

  LabelTable table;
  table.kind = label_kind_for(spec.task);
  for (std::size_t i = 0; i < n; ++i) table.by_path.emplace(manifest.rows[i].path, labels[i]);
  CorpusPaths paths{out_dir / "manifest.tsv", out_dir / "labels.tsv"};
  write_manifest(manifest, paths.manifest);
  write_labels(table, paths.labels);
  return paths;
}

}  // namespace musicssl
