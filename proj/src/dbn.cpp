#include <algorithm>
#include <cmath>
#include <limits>

#include "musicssl/common.hpp"
#include "musicssl/metrics.hpp"

namespace musicssl {

namespace {

constexpr double kActivationFloor = 1e-12;

struct StateSpace {
  int min_interval = 0;
  int max_interval = 0;
  std::vector<int> offset;  // first state of each interval
  int size = 0;

  explicit StateSpace(const DbnConfig& cfg) {
    min_interval = static_cast<int>(std::ceil(cfg.fps * 60.0 / cfg.max_bpm - 1e-9));
    max_interval = static_cast<int>(std::floor(cfg.fps * 60.0 / cfg.min_bpm + 1e-9));
    min_interval = std::max(min_interval, 1);
    if (max_interval < min_interval)
      throw UsageError("dbn: tempo range admits no integer beat interval at this fps");
    for (int tau = min_interval; tau <= max_interval; ++tau) {
      offset.push_back(size);
      size += tau;
    }
  }
  int intervals() const { return max_interval - min_interval + 1; }
  int interval_of(int idx) const { return min_interval + idx; }
};

}  // namespace

void DbnConfig::validate() const {
  if (!(fps > 0.0)) throw UsageError("dbn: fps must be positive");
  if (!(min_bpm > 0.0 && min_bpm < max_bpm)) throw UsageError("dbn: need 0 < min_bpm < max_bpm");
  if (!(transition_lambda > 0.0)) throw UsageError("dbn: transition_lambda must be positive");
  if (!(observation_lambda > 0.0 && observation_lambda < 1.0))
    throw UsageError("dbn: observation_lambda must lie in (0, 1)");
}

std::vector<BeatState> dbn_viterbi_path(std::span<const double> activations,
                                        const DbnConfig& cfg) {
  cfg.validate();
  if (activations.empty()) throw UsageError("dbn: empty activation sequence");
  for (double a : activations)
    if (!(a >= 0.0 && a <= 1.0)) throw UsageError("dbn: activations must lie in [0, 1]");

  const StateSpace ss(cfg);
  const int n_int = ss.intervals();
  const auto n_states = static_cast<std::size_t>(ss.size);
  const double neg_inf = -std::numeric_limits<double>::infinity();

  // Unnormalized log weight for interval changes at phase 0, row = from. Normalizing each
  // row penalizes long intervals (more near neighbours) and flips tied octaves to double tempo.
  std::vector<double> trans(static_cast<std::size_t>(n_int * n_int));
  for (int i = 0; i < n_int; ++i) {
    const double tau = ss.interval_of(i);
    for (int j = 0; j < n_int; ++j)
      trans[static_cast<std::size_t>(i * n_int + j)] =
          -cfg.transition_lambda * std::abs(ss.interval_of(j) / tau - 1.0);
  }
  // Number of phases per interval that belong to the beat region.
  std::vector<int> beat_width(static_cast<std::size_t>(n_int));
  for (int i = 0; i < n_int; ++i)
    beat_width[i] = static_cast<int>(std::ceil(ss.interval_of(i) * cfg.observation_lambda - 1e-9));
  const double non_beat_norm = 1.0 / cfg.observation_lambda - 1.0;

  const std::size_t frames = activations.size();
  std::vector<double> score(n_states, -std::log(static_cast<double>(n_states)));
  std::vector<double> next(n_states);
  // Back-pointer for the entry state (tau, tau-1) of each interval and frame.
  std::vector<int> back(frames * static_cast<std::size_t>(n_int), -1);

  const auto observe = [&](std::vector<double>& s, double a) {
    a = a < cfg.threshold ? 0.0 : a;
    const double lb = std::log(std::max(a, kActivationFloor));
    const double ln = std::log(std::max(1.0 - a, kActivationFloor) / non_beat_norm);
    for (int i = 0; i < n_int; ++i) {
      const int tau = ss.interval_of(i);
      double* row = s.data() + ss.offset[static_cast<std::size_t>(i)];
      for (int phi = 0; phi < tau; ++phi) row[phi] += phi < beat_width[i] ? lb : ln;
    }
  };

  observe(score, activations[0]);
  for (std::size_t t = 1; t < frames; ++t) {
    for (int j = 0; j < n_int; ++j) {
      const int tau = ss.interval_of(j);
      const auto off = static_cast<std::size_t>(ss.offset[static_cast<std::size_t>(j)]);
      for (int phi = 0; phi + 1 < tau; ++phi) next[off + phi] = score[off + phi + 1];
      double best = neg_inf;
      int arg = -1;
      for (int i = 0; i < n_int; ++i) {
        const double v = score[static_cast<std::size_t>(ss.offset[static_cast<std::size_t>(i)])] +
                         trans[static_cast<std::size_t>(i * n_int + j)];
        if (v > best) {
          best = v;
          arg = i;
        }
      }
      next[off + static_cast<std::size_t>(tau - 1)] = best;
      back[t * static_cast<std::size_t>(n_int) + static_cast<std::size_t>(j)] = arg;
    }
    observe(next, activations[t]);
    std::swap(score, next);
  }

  // Final state: highest score, lowest index on ties.
  std::size_t best_state = 0;
  for (std::size_t s = 1; s < n_states; ++s)
    if (score[s] > score[best_state]) best_state = s;
  int cur_int = 0;
  while (cur_int + 1 < n_int &&
         static_cast<std::size_t>(ss.offset[static_cast<std::size_t>(cur_int + 1)]) <= best_state)
    ++cur_int;
  int cur_phase = static_cast<int>(best_state) - ss.offset[static_cast<std::size_t>(cur_int)];

  std::vector<BeatState> path(frames);
  for (std::size_t t = frames; t-- > 0;) {
    path[t] = {ss.interval_of(cur_int), cur_phase};
    if (t == 0) break;
    if (cur_phase + 1 < ss.interval_of(cur_int)) {
      ++cur_phase;
    } else {
      cur_int = back[t * static_cast<std::size_t>(n_int) + static_cast<std::size_t>(cur_int)];
      cur_phase = 0;
    }
  }
  return path;
}

std::vector<double> dbn_decode(std::span<const double> activations, const DbnConfig& cfg) {
  const auto path = dbn_viterbi_path(activations, cfg);
  std::vector<double> beats;
  if (!cfg.correct) {
    for (std::size_t t = 0; t < path.size(); ++t)
      if (path[t].phase == 0) beats.push_back(static_cast<double>(t) / cfg.fps);
    return beats;
  }
  const auto in_region = [&](std::size_t t) {
    const int width =
        static_cast<int>(std::ceil(path[t].interval * cfg.observation_lambda - 1e-9));
    return path[t].phase < width;
  };
  for (std::size_t t = 0; t < path.size();) {
    if (!in_region(t)) {
      ++t;
      continue;
    }
    // A region ends at its phase-0 frame; ties prefer that frame.
    std::size_t end = t;
    while (path[end].phase != 0 && end + 1 < path.size() && in_region(end + 1)) ++end;
    // Cut off by the end of the sequence: the beat itself lies past the last frame.
    if (path[end].phase != 0) break;
    std::size_t peak = end;
    for (std::size_t k = t; k <= end; ++k)
      if (activations[k] > activations[peak]) peak = k;
    beats.push_back(static_cast<double>(peak) / cfg.fps);
    t = end + 1;
  }
  return beats;
}

}  // namespace musicssl
