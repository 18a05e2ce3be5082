#include "musicssl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

void check_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DataError(std::string(what) + ": length mismatch");
}

std::pair<std::size_t, std::size_t> class_counts(std::span<const std::uint8_t> labels) {
  std::size_t pos = 0;
  for (auto l : labels) pos += l != 0;
  return {pos, labels.size() - pos};
}

template <typename PerTag>
MacroMetric macro(std::span<const double> scores, std::span<const std::uint8_t> labels,
                  std::size_t n_tags, PerTag per_tag, const char* name) {
  check_same_length(scores.size(), labels.size(), name);
  if (n_tags == 0 || scores.size() % n_tags != 0)
    throw DataError(std::string(name) + ": table shape does not match tag count");
  const std::size_t n_items = scores.size() / n_tags;
  MacroMetric out;
  out.per_tag.resize(n_tags);
  std::vector<double> col_scores(n_items);
  std::vector<std::uint8_t> col_labels(n_items);
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t j = 0; j < n_tags; ++j) {
    for (std::size_t i = 0; i < n_items; ++i) {
      col_scores[i] = scores[i * n_tags + j];
      col_labels[i] = labels[i * n_tags + j];
    }
    out.per_tag[j] = per_tag(col_scores, col_labels);
    if (out.per_tag[j]) {
      sum += *out.per_tag[j];
      ++valid;
    } else {
      out.excluded_tags.push_back(j);
    }
  }
  if (valid == 0) throw DataError(std::string(name) + ": no tag has both classes present");
  out.value = sum / static_cast<double>(valid);
  return out;
}

}  // namespace

std::optional<double> roc_auc(std::span<const double> scores,
                              std::span<const std::uint8_t> labels) {
  check_same_length(scores.size(), labels.size(), "roc_auc");
  const auto [n_pos, n_neg] = class_counts(labels);
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Sum of mid-ranks of positives (1-based ranks, ties averaged).
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum += mid_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> labels) {
  check_same_length(scores.size(), labels.size(), "average_precision");
  const auto [n_pos, n_neg] = class_counts(labels);
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, group_tp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_tp += labels[order[j]] != 0;
      ++j;
    }
    tp += group_tp;
    if (group_tp > 0)
      ap += (static_cast<double>(group_tp) / static_cast<double>(n_pos)) *
            (static_cast<double>(tp) / static_cast<double>(j));
    i = j;
  }
  return ap;
}

MacroMetric roc_auc_macro(std::span<const double> scores,
                          std::span<const std::uint8_t> labels, std::size_t n_tags) {
  return macro(scores, labels, n_tags, roc_auc, "roc_auc_macro");
}

MacroMetric average_precision_macro(std::span<const double> scores,
                                    std::span<const std::uint8_t> labels,
                                    std::size_t n_tags) {
  return macro(scores, labels, n_tags, average_precision, "average_precision_macro");
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  check_same_length(preds.size(), labels.size(), "accuracy");
  if (preds.empty()) throw DataError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double r2(std::span<const double> preds, std::span<const double> labels) {
  check_same_length(preds.size(), labels.size(), "r2");
  if (labels.empty()) throw DataError("r2: empty input");
  const double mean =
      std::accumulate(labels.begin(), labels.end(), 0.0) / static_cast<double>(labels.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ss_res += (labels[i] - preds[i]) * (labels[i] - preds[i]);
    ss_tot += (labels[i] - mean) * (labels[i] - mean);
  }
  if (ss_tot == 0.0) throw DataError("r2: labels have zero variance");
  return 1.0 - ss_res / ss_tot;
}

std::string to_string(const KeyLabel& key) {
  return std::to_string(key.tonic) + (key.mode == Mode::kMajor ? ":major" : ":minor");
}

KeyLabel parse_key(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw DataError("bad key label '" + s + "'");
  KeyLabel key;
  try {
    std::size_t used = 0;
    key.tonic = std::stoi(s.substr(0, colon), &used);
    if (used != colon) throw DataError("");
  } catch (const std::exception&) {
    throw DataError("bad key tonic in '" + s + "'");
  }
  if (key.tonic < 0 || key.tonic > 11) throw DataError("key tonic out of range in '" + s + "'");
  const auto mode = s.substr(colon + 1);
  if (mode == "major") key.mode = Mode::kMajor;
  else if (mode == "minor") key.mode = Mode::kMinor;
  else throw DataError("bad key mode in '" + s + "'");
  return key;
}

double refined_key_score(const KeyLabel& est, const KeyLabel& ref, const KeyScoring& scoring) {
  if (est.tonic < 0 || est.tonic > 11 || ref.tonic < 0 || ref.tonic > 11)
    throw UsageError("key tonic out of range");
  if (est == ref) return 1.0;
  const int up = ((est.tonic - ref.tonic) % 12 + 12) % 12;
  if (est.mode == ref.mode) {
    if (up == 7 || (scoring.bidirectional_fifth && up == 5)) return 0.5;
    return 0.0;
  }
  // Relative keys share a pitch-class set: minor tonic sits 9 above major.
  if (ref.mode == Mode::kMajor && up == 9) return 0.3;
  if (ref.mode == Mode::kMinor && up == 3) return 0.3;
  if (up == 0) return 0.2;
  return 0.0;
}

double refined_key_accuracy(std::span<const KeyLabel> est, std::span<const KeyLabel> ref,
                            const KeyScoring& scoring) {
  check_same_length(est.size(), ref.size(), "refined_key_accuracy");
  if (est.empty()) throw DataError("refined_key_accuracy: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) sum += refined_key_score(est[i], ref[i], scoring);
  return sum / static_cast<double>(est.size());
}

double beat_f_measure(std::span<const double> est, std::span<const double> ref,
                      double tolerance) {
  for (auto grid : {est, ref})
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (!std::isfinite(grid[i]) || grid[i] < 0.0 || (i > 0 && grid[i] <= grid[i - 1]))
        throw UsageError("beat grid must be finite, non-negative and strictly increasing");
  if (est.empty() && ref.empty()) return 1.0;
  if (est.empty() || ref.empty()) return 0.0;
  // Matching earliest-with-earliest is optimal for window matching on a line.
  const double window = tolerance + 1e-9;
  std::size_t i = 0, j = 0, hits = 0;
  while (i < est.size() && j < ref.size()) {
    if (std::abs(est[i] - ref[j]) <= window) {
      ++hits;
      ++i;
      ++j;
    } else if (est[i] < ref[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  if (hits == 0) return 0.0;
  const double p = static_cast<double>(hits) / static_cast<double>(est.size());
  const double r = static_cast<double>(hits) / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace musicssl
