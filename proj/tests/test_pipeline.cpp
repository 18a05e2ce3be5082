#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "musicssl/common.hpp"
#include "musicssl/config.hpp"
#include "musicssl/pipeline.hpp"
#include "musicssl/synth.hpp"

using namespace musicssl;
namespace fs = std::filesystem;

namespace {

struct Corpus {
  fs::path dir;
  Manifest manifest;
  LabelTable labels;
  std::string labels_hash;
};

Corpus pitch_corpus(const std::string& name, int n, int lo, int hi) {
  Corpus c;
  c.dir = fs::temp_directory_path() / name;
  fs::remove_all(c.dir);
  SynthSpec s;
  s.n_clips = n;
  s.duration = 1.0;
  s.min_midi = lo;
  s.max_midi = hi;
  const auto p = gen_corpus(s, c.dir);
  c.manifest = read_manifest(p.manifest);
  c.labels = read_labels(p.labels);
  c.labels_hash = hex64(file_checksum(p.labels));
  return c;
}

// Predictions that put all mass on the true class.
Predictions oracle_predictions(const Corpus& c, const std::string& labels_hash) {
  Predictions p;
  p.label_kind = LabelKind::kClass;
  p.task = ProbeTask::kMulticlass;
  std::set<int> classes;
  for (const auto& [path, l] : c.labels.by_path) classes.insert(std::get<int>(l));
  p.classes.assign(classes.begin(), classes.end());
  p.outputs = p.classes.size();
  p.labels_hash = labels_hash;
  p.config_hash = "cfg";
  for (const auto* row : c.manifest.select(Split::kTest)) {
    PredictionItem it;
    it.path = row->path;
    it.scores.assign(p.outputs, 0.0f);
    const int y = std::get<int>(c.labels.at(row->path));
    it.scores[static_cast<std::size_t>(std::find(p.classes.begin(), p.classes.end(), y) - p.classes.begin())] = 1.0f;
    p.items.push_back(it);
  }
  return p;
}

}  // namespace

TEST_CASE("feature alignment matches encoder frames") {
  RunConfig cfg;
  cfg.finalize();
  for (double sec : {0.5, 1.0, 2.0, 3.7}) {
    const auto clip = gen_pitch_clip(60, sec, 1).clip;
    CHECK(clip_features(clip, cfg).rows == cfg.encoder.frames_for(clip.samples.size()));
  }
  cfg.dsp.kind = FeatureKind::kChroma;
  cfg.finalize();
  const auto clip = gen_pitch_clip(60, 2.0, 1).clip;
  CHECK(clip_features(clip, cfg).rows == cfg.encoder.frames_for(clip.samples.size()));
}

TEST_CASE("probe run leaves the encoder untouched and predicts the test split") {
  auto c = pitch_corpus("musicssl_test_pipe_probe", 40, 60, 61);
  RunConfig cfg;
  cfg.probe.probe.epochs = 5;
  cfg.probe.probe.hidden = 32;
  cfg.finalize();
  Encoder enc(cfg.encoder, 1);
  const auto before = param_hash(enc.params());
  const auto run = run_probe(enc, c.manifest, c.labels, c.labels_hash, cfg, 1);
  CHECK(param_hash(enc.params()) == before);
  CHECK(run.predictions.classes == std::vector<int>{60, 61});
  CHECK(run.predictions.items.size() == c.manifest.select(Split::kTest).size());
  CHECK(run.predictions.labels_hash == c.labels_hash);
  CHECK(run.predictions.config_hash == config_hash(cfg));
  for (const auto& it : run.predictions.items) {
    double s = 0.0;
    for (float v : it.scores) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  const auto back = Predictions::from_json(run.predictions.to_json());
  CHECK(back.to_json() == run.predictions.to_json());
  CHECK_THROWS_AS(Predictions::from_json("{\"task\": 1}"), DataError);
  fs::remove_all(c.dir);
}

TEST_CASE("evaluation: perfect predictions, label hash guard") {
  auto c = pitch_corpus("musicssl_test_pipe_eval", 30, 40, 50);
  RunConfig cfg;
  cfg.finalize();
  const auto p = oracle_predictions(c, c.labels_hash);
  const auto r = evaluate_predictions(p, c.labels, c.labels_hash, cfg);
  CHECK(r.metrics.at("accuracy") == 1.0);
  CHECK(r.metrics.at("n_items") == 3.0);
  CHECK(r.task == "class");
  CHECK(r.split == "test");

  CHECK_THROWS_AS(evaluate_predictions(p, c.labels, "0000000000000000", cfg), DataError);
  CHECK(evaluate_predictions(p, c.labels, "0000000000000000", cfg, true).metrics.at("accuracy") == 1.0);

  auto wrong = p;
  for (auto& it : wrong.items) std::rotate(it.scores.begin(), it.scores.begin() + 1, it.scores.end());
  CHECK(evaluate_predictions(wrong, c.labels, c.labels_hash, cfg).metrics.at("accuracy") < 1.0);
  fs::remove_all(c.dir);
}

TEST_CASE("report table: union of metric columns, missing cells") {
  MetricReport a, b;
  a.task = "class";
  a.split = "test";
  a.config_hash = "h1";
  a.metrics = {{"accuracy", 0.5}};
  b.task = "tags";
  b.split = "test";
  b.config_hash = "h2";
  b.metrics = {{"roc_auc", 0.75}, {"average_precision", 0.25}};
  const auto t = report_table({{"run_a", a}, {"run_b", b}});
  const auto header = t.substr(0, t.find('\n'));
  for (const char* col : {"run", "task", "split", "config", "accuracy", "average_precision", "roc_auc"})
    CHECK(header.find(col) != std::string::npos);
  CHECK(header.find("accuracy") < header.find("average_precision"));
  CHECK(t.find("0.5000") != std::string::npos);
  CHECK(t.find(" - ") != std::string::npos);
  CHECK(report_table({{"run_a", a}, {"run_b", b}}) == t);
  CHECK(report_table_json({{"run_a", a}}).find("\"run_a\"") != std::string::npos);
}

TEST_CASE("key classes") {
  for (int i = 0; i < 24; ++i) CHECK(key_class(key_from_class(i)) == i);
  CHECK(key_class({9, Mode::kMinor}) == 21);
  CHECK_THROWS_AS(key_from_class(24), DataError);
}
