#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "musicssl/metrics.hpp"

namespace musicssl {

enum class Split : std::uint8_t { kTrain, kValid, kTest };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestRow {
  std::string path;  // relative to the manifest's directory
  std::uint64_t samples = 0;
  std::optional<Split> split;
};

/// Tab-separated clip list: `path<TAB>samples[<TAB>split]`, '#' comments.
struct Manifest {
  std::filesystem::path root;  // directory the relative paths resolve against
  std::vector<ManifestRow> rows;

  std::filesystem::path resolve(const ManifestRow& row) const { return root / row.path; }
  std::vector<const ManifestRow*> select(std::optional<Split> split) const;
  void validate() const;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// How a label file line is encoded.
enum class LabelKind : std::uint8_t {
  kClass,       // integer
  kTags,        // hex bitset, bit i = tag i
  kRegression,  // two floats (valence arousal)
  kBeats,       // space-separated seconds
  kKey,         // tonic:mode
};

std::string to_string(LabelKind k);
LabelKind label_kind_from_string(const std::string& s);

struct Emotion {
  double valence = 0.0;
  double arousal = 0.0;
  friend bool operator==(const Emotion&, const Emotion&) = default;
};

using TagBits = std::uint64_t;
using BeatTimes = std::vector<double>;
using Label = std::variant<int, TagBits, Emotion, BeatTimes, KeyLabel>;

LabelKind kind_of(const Label& label);
std::string format_label(const Label& label);
Label parse_label(LabelKind kind, const std::string& text);

/// Sidecar label file: first line `# kind=<kind>`, then `path<TAB>label`.
struct LabelTable {
  LabelKind kind = LabelKind::kClass;
  std::map<std::string, Label> by_path;

  const Label& at(const std::string& path) const;
};

LabelTable read_labels(const std::filesystem::path& path);
void write_labels(const LabelTable& table, const std::filesystem::path& path);

}  // namespace musicssl
