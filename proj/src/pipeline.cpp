#include "musicssl/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

fs::path with_suffix(const fs::path& dir, const std::string& rel, const char* ext) {
  return dir / (rel + ext);
}

// Keeps the centre of analysis window t on the centre of encoder frame t.
AudioClip align_for_window(const AudioClip& clip, int window, int receptive_field) {
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  if (window >= receptive_field) {
    const std::size_t pad = static_cast<std::size_t>(window - receptive_field) / 2;
    out.samples.assign(clip.samples.size() + 2 * pad, 0.0f);
    std::copy(clip.samples.begin(), clip.samples.end(), out.samples.begin() + static_cast<std::ptrdiff_t>(pad));
  } else {
    const std::size_t trim = static_cast<std::size_t>(receptive_field - window) / 2;
    if (clip.samples.size() > 2 * trim)
      out.samples.assign(clip.samples.begin() + static_cast<std::ptrdiff_t>(trim),
                         clip.samples.end() - static_cast<std::ptrdiff_t>(trim));
  }
  return out;
}

ProbeTask task_for(LabelKind k) {
  switch (k) {
    case LabelKind::kClass:
    case LabelKind::kKey: return ProbeTask::kMulticlass;
    case LabelKind::kTags: return ProbeTask::kMultilabel;
    case LabelKind::kRegression: return ProbeTask::kRegression;
    case LabelKind::kBeats: return ProbeTask::kFramewise;
  }
  throw std::logic_error("unreachable");
}

int class_of(const Label& l) {
  if (const auto* k = std::get_if<KeyLabel>(&l)) return key_class(*k);
  return std::get<int>(l);
}

}  // namespace

void write_text_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << content;
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Features and pseudo-labels
// ---------------------------------------------------------------------------

FeatureMatrix clip_features(const AudioClip& clip, const RunConfig& cfg) {
  const auto& d = cfg.dsp;
  const int rf = cfg.encoder.receptive_field();
  switch (d.kind) {
    case FeatureKind::kMfcc:
      return mfcc(d.align_to_encoder ? align_for_window(clip, d.mfcc.fft_size, rf) : clip, d.mfcc);
    case FeatureKind::kChroma:
      return chroma(d.align_to_encoder ? align_for_window(clip, d.chroma.fft_size, rf) : clip, d.chroma);
    case FeatureKind::kDeep: break;
  }
  throw UsageError("dsp.kind=deep features come from a checkpoint (kmeans --iter2)");
}

std::vector<AudioClip> load_clips(const Manifest& m, int workers) {
  std::vector<AudioClip> clips(m.rows.size());
  parallel_for(m.rows.size(), workers, [&](std::size_t i) {
    auto c = load_audio(m.resolve(m.rows[i]));
    clips[i] = c.sample_rate == 16000 ? std::move(c) : resample(c, 16000);
  });
  return clips;
}

void extract_features(const Manifest& m, const RunConfig& cfg, const fs::path& out, int workers) {
  for (const auto& r : m.rows) fs::create_directories(with_suffix(out, r.path, ".sslf").parent_path());
  parallel_for(m.rows.size(), workers, [&](std::size_t i) {
    auto c = load_audio(m.resolve(m.rows[i]));
    if (c.sample_rate != 16000) c = resample(c, 16000);
    save_features(clip_features(c, cfg), with_suffix(out, m.rows[i].path, ".sslf"));
  });
  ordered_json prov = {{"config_hash", config_hash(cfg)},
                       {"kind", to_string(cfg.dsp.kind)},
                       {"align_to_encoder", cfg.dsp.align_to_encoder},
                       {"clips", m.rows.size()}};
  write_text_atomic(out / "provenance.json", prov.dump(2) + "\n");
}

std::vector<FeatureMatrix> load_feature_dir(const Manifest& m, const fs::path& dir) {
  std::vector<FeatureMatrix> out;
  out.reserve(m.rows.size());
  for (const auto& r : m.rows) out.push_back(load_features(with_suffix(dir, r.path, ".sslf")));
  return out;
}

FeatureMatrix deep_features(Encoder& enc, const AudioClip& clip, int layer) {
  if (layer < 0 || layer > enc.config().layers)
    throw UsageError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(enc.config().layers) + "]");
  Tape tape(false);
  ForwardOptions fo;
  fo.stop_after_layer = layer;
  auto out = enc.forward(tape, clip.samples, fo);
  const auto v = out.layers[static_cast<std::size_t>(layer)].value();
  FeatureMatrix f(out.frames(), static_cast<std::size_t>(enc.config().hidden),
                  static_cast<float>(enc.config().frame_rate()), FeatureKind::kDeep);
  std::copy(v.begin(), v.end(), f.values.begin());
  return f;
}

QuantizeResult quantize_features(const std::vector<FeatureMatrix>& feats, const RunConfig& cfg, int workers) {
  if (feats.empty()) throw DataError("no features to quantize");
  KmeansOptions opt = cfg.quantize.kmeans;
  opt.workers = workers;
  QuantizeResult q;
  q.fit = fit_kmeans(stack_rows(feats), opt);
  q.labels.resize(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i) q.labels[i] = assign(q.fit.codebook, feats[i], workers);
  return q;
}

QuantizeResult fit_second_iteration(const Checkpoint& ckpt, const std::vector<AudioClip>& clips, int layer,
                                    const RunConfig& cfg, int workers) {
  Encoder enc = encoder_from_checkpoint(ckpt);
  if (enc.config().hidden != cfg.encoder.hidden || enc.config().layers != cfg.encoder.layers)
    throw DataError("checkpoint encoder does not match the run config");
  if (layer < 0 || layer > enc.config().layers)
    throw UsageError("iter2 layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(enc.config().layers) + "]");
  std::vector<FeatureMatrix> feats(clips.size());
  parallel_for(clips.size(), workers, [&](std::size_t i) { feats[i] = deep_features(enc, clips[i], layer); });
  return quantize_features(feats, cfg, workers);
}

void write_quantize_dir(const Manifest& m, const QuantizeResult& q, const RunConfig& cfg, const fs::path& out) {
  if (q.labels.size() != m.rows.size()) throw DataError("label count does not match the manifest");
  fs::create_directories(out);
  save_codebook(q.fit.codebook, out / "codebook.sslk");
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    const auto p = with_suffix(out / "labels", m.rows[i].path, ".ssll");
    fs::create_directories(p.parent_path());
    save_label_sequence(q.labels[i], p);
  }
  ordered_json prov = {{"config_hash", config_hash(cfg)},
                       {"k", q.fit.codebook.k},
                       {"dims", q.fit.codebook.dims},
                       {"feature_kind", to_string(q.fit.codebook.feature_kind)},
                       {"lloyd_steps", q.fit.inertia.size()},
                       {"inertia", q.fit.inertia.empty() ? 0.0 : q.fit.inertia.back()}};
  write_text_atomic(out / "provenance.json", prov.dump(2) + "\n");
}

std::vector<LabelSequence> load_label_dir(const Manifest& m, const fs::path& dir) {
  std::vector<LabelSequence> out;
  for (const auto& r : m.rows) out.push_back(load_label_sequence(with_suffix(dir / "labels", r.path, ".ssll")));
  return out;
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

namespace {

fs::path ckpt_path(const fs::path& out, std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06llu.sslc", static_cast<unsigned long long>(step));
  return out / buf;
}

void save_checkpoint_atomic(const Checkpoint& c, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(c, tmp);
  fs::rename(tmp, path);
}

std::string log_line(const StepStats& s) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%llu\t%.6f\t%.6e\t%.6f\n", static_cast<unsigned long long>(s.step), s.loss,
                s.lr, s.tau);
  return buf;
}

// Keeps the header and the lines of steps <= `step`.
void truncate_log(const fs::path& log, std::uint64_t step) {
  std::string kept;
  if (fs::exists(log)) {
    std::ifstream in(log);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (line[0] == '#' || std::stoull(line.substr(0, line.find('\t'))) <= step) kept += line + "\n";
    }
  }
  if (kept.empty()) kept = "# step\tloss\tlr\ttau\n";
  write_text_atomic(log, kept);
}

}  // namespace

PretrainRun run_pretraining(const RunConfig& cfg, std::vector<AudioClip> clips, std::vector<LabelSequence> labels,
                            const fs::path& out, bool resume, const StepCallback& on_step) {
  const auto& tc = cfg.pretrain;
  if (tc.paradigm == Paradigm::kContinuous) labels.clear();
  const int k = static_cast<int>(cfg.quantize.kmeans.k);
  Pretrainer pt(cfg.encoder, tc, std::move(clips), std::move(labels), k);
  const std::string cfg_json = to_json(cfg);
  fs::create_directories(out);
  PretrainRun run;

  std::uint64_t start = 0;
  if (resume) {
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(out)) {
      const auto name = e.path().filename().string();
      if (name.starts_with("ckpt_") && name.ends_with(".sslc")) found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    if (!found.empty()) {
      const auto ckpt = load_checkpoint(found.back());
      if (ckpt.config_json != cfg_json)
        throw DataError("cannot resume " + found.back().string() + ": it was written with a different config");
      pt.restore(ckpt);
      start = ckpt.step;
      run.checkpoints = found;
    }
  }
  for (const auto& e : fs::directory_iterator(out)) {
    const auto name = e.path().filename().string();
    if (name.starts_with("ckpt_") && name.ends_with(".sslc") &&
        std::find(run.checkpoints.begin(), run.checkpoints.end(), e.path()) == run.checkpoints.end())
      fs::remove(e.path());
  }
  const fs::path log = out / "loss.tsv";
  truncate_log(log, start);
  std::ofstream log_out(log, std::ios::app);

  const auto steps = static_cast<std::uint64_t>(tc.steps);
  for (std::uint64_t s = start + 1; s <= steps; ++s) {
    const StepStats st = pt.step();
    run.log.push_back(st);
    log_out << log_line(st);
    log_out.flush();
    if (on_step) on_step(st);
    if (s % static_cast<std::uint64_t>(tc.checkpoint_every) == 0 || s == steps) {
      const auto p = ckpt_path(out, s);
      save_checkpoint_atomic(pt.checkpoint(cfg_json), p);
      run.checkpoints.push_back(p);
    }
  }
  if (!log_out) throw DataError("cannot write " + log.string());
  run.final_checkpoint = out / "final.sslc";
  save_checkpoint_atomic(pt.checkpoint(cfg_json), run.final_checkpoint);
  return run;
}

fs::path run_iteration_pipeline(const RunConfig& cfg, const Manifest& m, const std::vector<AudioClip>& clips,
                                std::vector<LabelSequence> labels, const fs::path& out, int workers,
                                const StepCallback& on_step) {
  if (cfg.pretrain.paradigm != Paradigm::kDiscrete) throw UsageError("iterations apply to the discrete paradigm");
  fs::path last;
  for (int it = 1; it <= cfg.pretrain.iterations; ++it) {
    const fs::path dir = out / ("iter" + std::to_string(it));
    if (it > 1) {
      auto q = fit_second_iteration(load_checkpoint(last), clips, cfg.iter2_layer(), cfg, workers);
      write_quantize_dir(m, q, cfg, dir / "quantize");
      labels = std::move(q.labels);
    }
    last = run_pretraining(cfg, clips, labels, dir, false, on_step).final_checkpoint;
  }
  return last;
}

// ---------------------------------------------------------------------------
// Probing
// ---------------------------------------------------------------------------

int key_class(const KeyLabel& k) { return k.tonic + 12 * static_cast<int>(k.mode); }

KeyLabel key_from_class(int id) {
  if (id < 0 || id >= 24) throw DataError("key class " + std::to_string(id) + " out of range");
  return {id % 12, id >= 12 ? Mode::kMinor : Mode::kMajor};
}

std::string Predictions::to_json() const {
  ordered_json j;
  j["label_kind"] = musicssl::to_string(label_kind);
  j["task"] = musicssl::to_string(task);
  j["outputs"] = outputs;
  j["classes"] = classes;
  j["frame_rate"] = frame_rate;
  j["config_hash"] = config_hash;
  j["labels_hash"] = labels_hash;
  j["encoder_hash"] = encoder_hash;
  ordered_json arr = ordered_json::array();
  for (const auto& it : items) arr.push_back({{"path", it.path}, {"frames", it.frames}, {"scores", it.scores}});
  j["items"] = arr;
  return j.dump(1) + "\n";
}

Predictions Predictions::from_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    Predictions p;
    p.label_kind = label_kind_from_string(j.at("label_kind").get<std::string>());
    p.task = probe_task_from_string(j.at("task").get<std::string>());
    p.outputs = j.at("outputs").get<std::size_t>();
    p.classes = j.at("classes").get<std::vector<int>>();
    p.frame_rate = j.at("frame_rate").get<double>();
    p.config_hash = j.at("config_hash").get<std::string>();
    p.labels_hash = j.at("labels_hash").get<std::string>();
    p.encoder_hash = j.at("encoder_hash").get<std::string>();
    for (const auto& it : j.at("items")) {
      PredictionItem item{it.at("path").get<std::string>(), it.at("frames").get<std::size_t>(),
                          it.at("scores").get<std::vector<float>>()};
      if (item.scores.size() != item.frames * p.outputs)
        throw DataError("prediction for " + item.path + " has the wrong number of scores");
      p.items.push_back(std::move(item));
    }
    return p;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed predictions: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("malformed predictions: ") + e.what());
  }
}

ProbeRun run_probe(Encoder& enc, const Manifest& m, const LabelTable& labels, const std::string& labels_hash,
                   const RunConfig& cfg, int workers) {
  const std::string hash_before = hex64(param_hash(enc.params()));
  ProbeConfig pc = cfg.probe.probe;
  pc.task = task_for(labels.kind);

  std::vector<int> classes;
  std::size_t n_tags = 1;
  if (labels.kind == LabelKind::kKey) {
    for (int c = 0; c < 24; ++c) classes.push_back(c);
  } else if (labels.kind == LabelKind::kClass) {
    std::set<int> seen;
    for (const auto& r : m.rows) seen.insert(std::get<int>(labels.at(r.path)));
    classes.assign(seen.begin(), seen.end());
    if (classes.size() < 2) throw DataError("class labels hold a single class");
  } else if (labels.kind == LabelKind::kTags) {
    for (const auto& r : m.rows) {
      const TagBits b = std::get<TagBits>(labels.at(r.path));
      if (b != 0) n_tags = std::max<std::size_t>(n_tags, 64 - static_cast<std::size_t>(std::countl_zero(b)));
    }
  }
  switch (pc.task) {
    case ProbeTask::kMulticlass: pc.outputs = static_cast<int>(classes.size()); break;
    case ProbeTask::kMultilabel: pc.outputs = static_cast<int>(n_tags); break;
    case ProbeTask::kRegression: pc.outputs = 2; break;
    case ProbeTask::kFramewise: pc.outputs = 1; break;
  }

  const double fps = enc.config().frame_rate();
  std::vector<ProbeExample> examples(m.rows.size());
  parallel_for(m.rows.size(), workers, [&](std::size_t i) {
    const auto& row = m.rows[i];
    auto clip = load_audio(m.resolve(row));
    if (clip.sample_rate != 16000) clip = resample(clip, 16000);
    const Label& l = labels.at(row.path);
    ProbeExample& e = examples[i];
    if (pc.task == ProbeTask::kFramewise) {
      e.x = extract_frame_embeddings(enc, clip);
      e.y = framewise_probe_targets(std::get<BeatTimes>(l), e.x.frames, fps);
      return;
    }
    e.x = extract_layer_embeddings(enc, clip, cfg.probe.window);
    switch (pc.task) {
      case ProbeTask::kMulticlass: {
        const auto it = std::lower_bound(classes.begin(), classes.end(), class_of(l));
        e.y = {static_cast<float>(it - classes.begin())};
        break;
      }
      case ProbeTask::kMultilabel: {
        const TagBits b = std::get<TagBits>(l);
        for (std::size_t t = 0; t < n_tags; ++t) e.y.push_back(static_cast<float>((b >> t) & 1U));
        break;
      }
      case ProbeTask::kRegression: {
        const auto& em = std::get<Emotion>(l);
        e.y = {static_cast<float>(em.valence), static_cast<float>(em.arousal)};
        break;
      }
      case ProbeTask::kFramewise: break;
    }
  });

  std::vector<ProbeExample> train, valid;
  std::vector<std::size_t> test;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    if (!m.rows[i].split) throw DataError("probing needs train/valid/test splits in the manifest");
    switch (*m.rows[i].split) {
      case Split::kTrain: train.push_back(examples[i]); break;
      case Split::kValid: valid.push_back(examples[i]); break;
      case Split::kTest: test.push_back(i); break;
    }
  }
  if (test.empty()) throw DataError("probe test split is empty");

  ProbeRun run;
  run.train = train_probe(train, valid, pc);
  auto& p = run.predictions;
  p.label_kind = labels.kind;
  p.task = pc.task;
  p.outputs = static_cast<std::size_t>(pc.outputs);
  p.classes = classes;
  p.frame_rate = fps;
  p.config_hash = config_hash(cfg);
  p.labels_hash = labels_hash;
  p.encoder_hash = hash_before;
  for (auto i : test) {
    const auto& x = examples[i].x;
    p.items.push_back({m.rows[i].path, x.frames, run.train.model.predict(x)});
  }
  if (hex64(param_hash(enc.params())) != hash_before) throw std::logic_error("probing modified the encoder");
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

MetricReport evaluate_predictions(const Predictions& p, const LabelTable& labels, const std::string& labels_hash,
                                  const RunConfig& cfg, bool force) {
  if (p.labels_hash != labels_hash && !force)
    throw DataError("predictions were made against labels " + p.labels_hash + ", not " + labels_hash +
                    " (use --force to evaluate anyway)");
  if (p.label_kind != labels.kind)
    throw DataError("predictions are for " + to_string(p.label_kind) + " labels, label file holds " +
                    to_string(labels.kind));
  if (p.items.empty()) throw DataError("no predictions to evaluate");
  MetricReport r;
  r.task = to_string(p.label_kind);
  r.split = "test";
  r.config_hash = p.config_hash;
  const std::size_t k = p.outputs;
  switch (p.task) {
    case ProbeTask::kMulticlass: {
      std::vector<int> est, ref;
      for (const auto& it : p.items) {
        const auto best = std::max_element(it.scores.begin(), it.scores.begin() + static_cast<std::ptrdiff_t>(k));
        est.push_back(p.classes.at(static_cast<std::size_t>(best - it.scores.begin())));
        ref.push_back(class_of(labels.at(it.path)));
      }
      r.metrics["accuracy"] = accuracy(est, ref);
      if (p.label_kind == LabelKind::kKey) {
        std::vector<KeyLabel> ek, rk;
        for (std::size_t i = 0; i < est.size(); ++i) {
          ek.push_back(key_from_class(est[i]));
          rk.push_back(key_from_class(ref[i]));
        }
        r.metrics["refined_accuracy"] = refined_key_accuracy(ek, rk, cfg.metrics.key);
      }
      break;
    }
    case ProbeTask::kMultilabel: {
      std::vector<double> s;
      std::vector<std::uint8_t> l;
      for (const auto& it : p.items) {
        s.insert(s.end(), it.scores.begin(), it.scores.end());
        const TagBits b = std::get<TagBits>(labels.at(it.path));
        for (std::size_t t = 0; t < k; ++t) l.push_back(static_cast<std::uint8_t>((b >> t) & 1U));
      }
      const auto roc = roc_auc_macro(s, l, k);
      const auto ap = average_precision_macro(s, l, k);
      r.metrics["roc_auc"] = roc.value;
      r.metrics["average_precision"] = ap.value;
      const auto flat = [](const MacroMetric& mm) {
        std::vector<double> v;
        for (const auto& x : mm.per_tag) v.push_back(x ? *x : std::numeric_limits<double>::quiet_NaN());
        return v;
      };
      r.per_tag["roc_auc"] = flat(roc);
      r.per_tag["average_precision"] = flat(ap);
      r.excluded_tags = roc.excluded_tags;
      break;
    }
    case ProbeTask::kRegression: {
      std::vector<double> pv, pa, lv, la;
      for (const auto& it : p.items) {
        const auto& em = std::get<Emotion>(labels.at(it.path));
        pv.push_back(it.scores[0]);
        pa.push_back(it.scores[1]);
        lv.push_back(em.valence);
        la.push_back(em.arousal);
      }
      r.metrics["r2_valence"] = r2(pv, lv);
      r.metrics["r2_arousal"] = r2(pa, la);
      break;
    }
    case ProbeTask::kFramewise: {
      DbnConfig dbn = cfg.metrics.dbn;
      dbn.fps = p.frame_rate;
      double f1 = 0.0;
      for (const auto& it : p.items) {
        const std::vector<double> act(it.scores.begin(), it.scores.end());
        const auto est = dbn_decode(act, dbn);
        f1 += beat_f_measure(est, std::get<BeatTimes>(labels.at(it.path)), cfg.metrics.beat_tolerance);
      }
      r.metrics["beat_f1"] = f1 / static_cast<double>(p.items.size());
      break;
    }
  }
  r.metrics["n_items"] = static_cast<double>(p.items.size());
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> metric_columns(const std::vector<std::pair<std::string, MetricReport>>& runs) {
  std::set<std::string> cols;
  for (const auto& [name, r] : runs)
    for (const auto& [k, v] : r.metrics) cols.insert(k);
  return {cols.begin(), cols.end()};
}

}  // namespace

std::string report_table(const std::vector<std::pair<std::string, MetricReport>>& runs) {
  const auto cols = metric_columns(runs);
  std::vector<std::string> header = {"run", "task", "split", "config"};
  header.insert(header.end(), cols.begin(), cols.end());
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, r] : runs) {
    std::vector<std::string> row = {name, r.task, r.split, r.config_hash};
    for (const auto& c : cols) {
      const auto it = r.metrics.find(c);
      if (it == r.metrics.end()) {
        row.emplace_back("-");
      } else {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", it->second);
        row.emplace_back(buf);
      }
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  const auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out += row[c];
      if (c + 1 < row.size()) out += std::string(width[c] - row[c].size() + 2, ' ');
    }
    out += "\n";
  };
  emit(header);
  std::vector<std::string> rule;
  for (auto w : width) rule.emplace_back(w, '-');
  emit(rule);
  for (const auto& row : rows) emit(row);
  return out;
}

std::string report_table_json(const std::vector<std::pair<std::string, MetricReport>>& runs) {
  const auto cols = metric_columns(runs);
  ordered_json j;
  j["columns"] = cols;
  ordered_json rows = ordered_json::array();
  for (const auto& [name, r] : runs) {
    ordered_json row = {{"run", name}, {"task", r.task}, {"split", r.split}, {"config_hash", r.config_hash}};
    ordered_json vals = ordered_json::object();
    for (const auto& c : cols) {
      const auto it = r.metrics.find(c);
      vals[c] = it == r.metrics.end() ? ordered_json(nullptr) : ordered_json(it->second);
    }
    row["metrics"] = vals;
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

}  // namespace musicssl
