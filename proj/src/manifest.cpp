#include "musicssl/manifest.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DataError("bad number '" + s + "'");
  }
  if (used != s.size()) throw DataError("bad number '" + s + "'");
  return v;
}

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}

std::vector<const ManifestRow*> Manifest::select(std::optional<Split> split) const {
  std::vector<const ManifestRow*> out;
  for (const auto& r : rows)
    if (!split || r.split == split) out.push_back(&r);
  return out;
}

void Manifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : rows) {
    if (r.path.empty()) throw DataError("manifest row with empty path");
    if (r.samples == 0) throw DataError("manifest row '" + r.path + "' has zero duration");
    if (!seen.insert(r.path).second) throw DataError("duplicate manifest path '" + r.path + "'");
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto cols = split_tabs(line);
    if (cols.size() < 2 || cols.size() > 3)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 2 or 3 columns");
    ManifestRow row;
    row.path = cols[0];
    try {
      row.samples = std::stoull(cols[1]);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad sample count");
    }
    if (cols.size() == 3 && !cols[2].empty()) row.split = split_from_string(cols[2]);
    m.rows.push_back(std::move(row));
  }
  m.validate();
  if (m.rows.empty()) throw DataError("manifest " + path.string() + " lists no clips");
  return m;
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  m.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# path\tsamples\tsplit\n";
  for (const auto& r : m.rows) {
    out << r.path << '\t' << r.samples;
    if (r.split) out << '\t' << to_string(*r.split);
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

std::string to_string(LabelKind k) {
  switch (k) {
    case LabelKind::kClass: return "class";
    case LabelKind::kTags: return "tags";
    case LabelKind::kRegression: return "regression";
    case LabelKind::kBeats: return "beats";
    case LabelKind::kKey: return "key";
  }
  return "?";
}

LabelKind label_kind_from_string(const std::string& s) {
  if (s == "class") return LabelKind::kClass;
  if (s == "tags") return LabelKind::kTags;
  if (s == "regression") return LabelKind::kRegression;
  if (s == "beats") return LabelKind::kBeats;
  if (s == "key") return LabelKind::kKey;
  throw DataError("unknown label kind '" + s + "'");
}

LabelKind kind_of(const Label& label) {
  return static_cast<LabelKind>(label.index());
}

std::string format_label(const Label& label) {
  struct Visitor {
    std::string operator()(int c) const { return std::to_string(c); }
    std::string operator()(TagBits bits) const {
      char buf[24];
      std::snprintf(buf, sizeof(buf), "%llx", static_cast<unsigned long long>(bits));
      return buf;
    }
    std::string operator()(const Emotion& e) const {
      return format_double(e.valence) + " " + format_double(e.arousal);
    }
    std::string operator()(const BeatTimes& beats) const {
      std::string s;
      for (std::size_t i = 0; i < beats.size(); ++i) {
        if (i) s += ' ';
        s += format_double(beats[i]);
      }
      return s;
    }
    std::string operator()(const KeyLabel& k) const { return to_string(k); }
  };
  return std::visit(Visitor{}, label);
}

Label parse_label(LabelKind kind, const std::string& text) {
  switch (kind) {
    case LabelKind::kClass: {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(text, &used);
      } catch (const std::exception&) {
        throw DataError("bad class label '" + text + "'");
      }
      if (used != text.size()) throw DataError("bad class label '" + text + "'");
      return v;
    }
    case LabelKind::kTags: {
      std::size_t used = 0;
      TagBits v = 0;
      try {
        v = std::stoull(text, &used, 16);
      } catch (const std::exception&) {
        throw DataError("bad tag bitset '" + text + "'");
      }
      if (used != text.size()) throw DataError("bad tag bitset '" + text + "'");
      return v;
    }
    case LabelKind::kRegression: {
      const auto sp = text.find(' ');
      if (sp == std::string::npos) throw DataError("regression label needs two values");
      return Emotion{parse_double(text.substr(0, sp)), parse_double(text.substr(sp + 1))};
    }
    case LabelKind::kBeats: {
      BeatTimes beats;
      std::istringstream ss(text);
      std::string tok;
      while (ss >> tok) beats.push_back(parse_double(tok));
      return beats;
    }
    case LabelKind::kKey:
      return parse_key(text);
  }
  throw DataError("unknown label kind");
}

const Label& LabelTable::at(const std::string& path) const {
  auto it = by_path.find(path);
  if (it == by_path.end()) throw DataError("no label for '" + path + "'");
  return it->second;
}

LabelTable read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open label file " + path.string());
  LabelTable t;
  std::string line;
  bool have_kind = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("kind=");
      if (pos != std::string::npos) {
        t.kind = label_kind_from_string(line.substr(pos + 5));
        have_kind = true;
      }
      continue;
    }
    if (!have_kind) throw DataError(path.string() + ": missing '# kind=' header");
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(path.string() + ": expected path<TAB>label");
    auto key = line.substr(0, tab);
    if (!t.by_path.emplace(key, parse_label(t.kind, line.substr(tab + 1))).second)
      throw DataError(path.string() + ": duplicate label for '" + key + "'");
  }
  if (!have_kind) throw DataError(path.string() + ": missing '# kind=' header");
  return t;
}

void write_labels(const LabelTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# kind=" << to_string(table.kind) << '\n';
  for (const auto& [p, label] : table.by_path) {
    if (kind_of(label) != table.kind) throw DataError("label kind mismatch for '" + p + "'");
    out << p << '\t' << format_label(label) << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace musicssl
