#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "musicssl/common.hpp"
#include "musicssl/features.hpp"
#include "musicssl/synth.hpp"
#include "oracles.hpp"

using namespace musicssl;
namespace fs = std::filesystem;

namespace {

// Spectral flatness (geometric / arithmetic mean of power) averaged over frames.
double flatness(const AudioClip& c) {
  const std::size_t n = 512;
  double acc = 0.0;
  int frames = 0;
  for (std::size_t start = 0; start + n <= c.samples.size() && frames < 8; start += 2000, ++frames) {
    std::span<const float> w(c.samples.data() + start, n);
    double lg = 0.0, ar = 0.0;
    for (std::size_t k = 4; k < n / 2; ++k) {
      const double p = std::pow(oracle::dft_mag(w, static_cast<double>(k)), 2) + 1e-12;
      lg += std::log(p);
      ar += p;
    }
    const double m = static_cast<double>(n / 2 - 4);
    acc += std::exp(lg / m) / (ar / m);
  }
  return acc / frames;
}

// Onsets: rises of the 10 ms RMS envelope above half its maximum.
int onset_count(const AudioClip& c) {
  const std::size_t hop = 160;
  std::vector<double> env;
  for (std::size_t s = 0; s + hop <= c.samples.size(); s += hop) {
    double e = 0.0;
    for (std::size_t i = s; i < s + hop; ++i) e += c.samples[i] * c.samples[i];
    env.push_back(std::sqrt(e / hop));
  }
  int count = 0;
  for (std::size_t i = 1; i < env.size(); ++i)
    if (env[i] > 1.5 * env[i - 1] + 1e-3) ++count, i += 5;
  return count;
}

double autocorr_f0(const AudioClip& c) {
  const std::size_t n = 4096, off = 2000;
  int best = 0;
  double best_v = -1e300;
  // Lags for 60..1300 Hz; the first strong peak is the period.
  std::vector<double> r(400, 0.0);
  for (int lag = 12; lag < 270; ++lag) {
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += c.samples[off + i] * c.samples[off + i + lag];
    r[lag] = v;
  }
  const double top = *std::max_element(r.begin(), r.end());
  for (int lag = 13; lag < 269; ++lag)
    if (r[lag] > 0.85 * top && r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1]) {
      best = lag;
      best_v = r[lag];
      break;
    }
  (void)best_v;
  // Parabolic refinement.
  const double a = r[best - 1], b = r[best], d = r[best + 1];
  const double shift = 0.5 * (a - d) / (a - 2 * b + d);
  return 16000.0 / (best + shift);
}

}  // namespace

TEST_CASE("pitch clips: tuning, determinism, range") {
  CHECK(midi_to_hz(69) == doctest::Approx(440.0));
  CHECK(midi_to_hz(81) == doctest::Approx(880.0));
  const auto a = gen_pitch_clip(60, 1.0, 42), b = gen_pitch_clip(60, 1.0, 42);
  CHECK(a.clip.samples == b.clip.samples);
  CHECK(std::get<int>(a.label) == 60);
  CHECK_THROWS_AS(gen_pitch_clip(35, 1.0, 0), UsageError);
  CHECK_THROWS_AS(gen_pitch_clip(85, 1.0, 0), UsageError);
}

TEST_CASE("pitch clips: autocorrelation f0 within a quartertone") {
  for (int midi : {45, 57, 60, 69, 76, 84}) {
    const auto c = gen_pitch_clip(midi, 1.0, static_cast<std::uint64_t>(midi));
    const double f0 = autocorr_f0(c.clip);
    const double cents = 1200.0 * std::log2(f0 / midi_to_hz(midi));
    CAPTURE(midi);
    CHECK(std::abs(cents) < 50.0);
  }
}

TEST_CASE("click tracks: beat grid") {
  const auto c = gen_click_track(120, 2.0, 1);
  CHECK(std::get<BeatTimes>(c.label) == BeatTimes{0.0, 0.5, 1.0, 1.5});
  CHECK(std::get<BeatTimes>(gen_click_track(60, 3.0, 1).label).size() == 3);
  for (double bpm : {40.0, 75.0, 97.0, 133.0, 240.0})
    for (double dur : {1.0, 2.5, 7.3})
      CHECK(std::get<BeatTimes>(gen_click_track(bpm, dur, 2).label).size() ==
            static_cast<std::size_t>(std::floor(dur * bpm / 60.0 + 1e-9)));
  CHECK_THROWS_AS(gen_click_track(30, 1.0, 0), UsageError);
}

TEST_CASE("click onsets are detectable within 5 ms") {
  const auto c = gen_click_track(100, 3.0, 4);
  for (double t : std::get<BeatTimes>(c.label)) {
    const auto s = static_cast<std::size_t>(t * 16000);
    // Peak absolute sample in the 20 ms after the beat lies within 5 ms of it.
    std::size_t arg = s;
    for (std::size_t i = s; i < std::min(c.clip.samples.size(), s + 320); ++i)
      if (std::abs(c.clip.samples[i]) > std::abs(c.clip.samples[arg])) arg = i;
    CHECK(static_cast<double>(arg - s) / 16000.0 <= 0.005);
  }
}

TEST_CASE("key clips: diatonic chroma mass, relative keys") {
  const auto c = gen_key_clip({0, Mode::kMajor}, 4.0, 3);
  const auto f = chroma(c.clip);
  std::vector<double> m(12, 0.0);
  for (std::size_t t = 0; t < f.rows; ++t)
    for (std::size_t d = 0; d < 12; ++d) m[d] += f.at(t, d);
  const double total = std::accumulate(m.begin(), m.end(), 0.0);
  double diatonic = 0.0;
  for (int pc : {0, 2, 4, 5, 7, 9, 11}) diatonic += m[static_cast<std::size_t>(pc)];
  CHECK(diatonic / total > 0.85);

  const auto am = gen_key_clip({9, Mode::kMinor}, 4.0, 3);
  const auto g = chroma(am.clip);
  std::vector<double> n(12, 0.0);
  for (std::size_t t = 0; t < g.rows; ++t)
    for (std::size_t d = 0; d < 12; ++d) n[d] += g.at(t, d);
  const double total_n = std::accumulate(n.begin(), n.end(), 0.0);
  double dia_n = 0.0;
  for (int pc : {0, 2, 4, 5, 7, 9, 11}) dia_n += n[static_cast<std::size_t>(pc)];
  CHECK(dia_n / total_n > 0.85);

  const auto again = gen_key_clip({0, Mode::kMajor}, 4.0, 3);
  CHECK(again.clip.samples == c.clip.samples);
  CHECK(std::get<KeyLabel>(again.label) == KeyLabel{0, Mode::kMajor});
}

TEST_CASE("tag and emotion clips") {
  const double noisy = flatness(gen_tag_clip(TagBits{1} << 3, 1.0, 5).clip);
  const double tonal = flatness(gen_tag_clip(TagBits{1} << 0, 1.0, 5).clip);
  CHECK(noisy > tonal);
  CHECK_THROWS_AS(gen_tag_clip(0, 1.0, 0), UsageError);

  const auto hi = gen_emotion_clip(0.0, 1.0, 4.0, 11), lo = gen_emotion_clip(0.0, -1.0, 4.0, 11);
  CHECK(onset_count(hi.clip) > onset_count(lo.clip));
  CHECK(std::get<Emotion>(hi.label) == Emotion{0.0, 1.0});
  CHECK_THROWS_AS(gen_emotion_clip(1.5, 0.0, 1.0, 0), UsageError);
}

TEST_CASE("every generated clip has finite samples and peak <= 0.95") {
  for (auto task : {SynthTask::kPitch, SynthTask::kBeat, SynthTask::kKey, SynthTask::kTags, SynthTask::kEmotion}) {
    SynthSpec s;
    s.task = task;
    s.n_clips = 6;
    s.duration = 1.0;
    for (std::size_t i = 0; i < 6; ++i) {
      const auto c = gen_indexed_clip(s, i);
      float peak = 0.0f;
      for (float v : c.clip.samples) {
        REQUIRE(std::isfinite(v));
        peak = std::max(peak, std::abs(v));
      }
      CHECK(peak <= 0.95f);
      CHECK(c.clip.samples == gen_indexed_clip(s, i).clip.samples);
    }
  }
}

TEST_CASE("gen_corpus: splits, determinism, label files") {
  const auto dir = fs::temp_directory_path() / "musicssl_test_synth";
  fs::remove_all(dir);
  SynthSpec s;
  s.n_clips = 100;
  s.duration = 0.5;
  s.seed = 3;
  const auto p = gen_corpus(s, dir / "a", 2);
  const auto m = read_manifest(p.manifest);
  REQUIRE(m.rows.size() == 100);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& r : m.rows) counts[static_cast<int>(*r.split)]++;
  CHECK(counts[0] == 80);
  CHECK(counts[1] == 10);
  CHECK(counts[2] == 10);
  const auto p2 = gen_corpus(s, dir / "b", 1);
  CHECK(file_checksum(p.manifest) == file_checksum(p2.manifest));
  CHECK(file_checksum(p.labels) == file_checksum(p2.labels));
  CHECK(file_checksum(m.resolve(m.rows[7])) == file_checksum(read_manifest(p2.manifest).resolve(m.rows[7])));

  SynthSpec b;
  b.task = SynthTask::kBeat;
  b.n_clips = 10;
  b.duration = 2.0;
  const auto pb = gen_corpus(b, dir / "beats");
  const auto lt = read_labels(pb.labels);
  CHECK(lt.kind == LabelKind::kBeats);
  CHECK(lt.by_path.size() == 10);

  // Labels round-trip through the table format.
  SynthSpec e;
  e.task = SynthTask::kEmotion;
  e.n_clips = 10;
  e.duration = 1.0;
  const auto pe = gen_corpus(e, dir / "emo");
  const auto le = read_labels(pe.labels);
  const auto me = read_manifest(pe.manifest);
  for (std::size_t i = 0; i < 10; ++i)
    CHECK(std::get<Emotion>(le.at(me.rows[i].path)) == std::get<Emotion>(gen_indexed_clip(e, i).label));
  fs::remove_all(dir);
}
