// Acceptance run: one PASS/FAIL line per criterion.
//
//   musicssl_acceptance [--work DIR] [--keep] [ID ...]
//
// With no IDs every criterion runs. Exit status is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fd_check.hpp"
#include "musicssl/common.hpp"
#include "musicssl/config.hpp"
#include "musicssl/pipeline.hpp"
#include "musicssl/synth.hpp"
#include "oracles.hpp"

using namespace musicssl;
namespace fs = std::filesystem;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Shared inputs, built on first use.
struct Context {
  fs::path work;
  int workers = 1;

  const fs::path& pitch_corpus() {
    if (pitch_dir_.empty()) {
      pitch_dir_ = work / "pitch200";
      SynthSpec s;
      s.n_clips = 200;
      s.duration = 2.0;
      s.seed = 7;
      gen_corpus(s, pitch_dir_, workers);
    }
    return pitch_dir_;
  }
  const std::vector<AudioClip>& pitch_clips() {
    if (clips_.empty()) clips_ = load_clips(read_manifest(pitch_corpus() / "manifest.tsv"), workers);
    return clips_;
  }

 private:
  fs::path pitch_dir_;
  std::vector<AudioClip> clips_;
};

// ---------------------------------------------------------------------------

Result gradients(Context&) {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  std::string worst_op;
  std::size_t ops = 0;
  for (const auto& c : fdcheck::all_op_cases()) {
    ++ops;
    for (int rep = 0; rep < 10; ++rep) {
      auto [inputs, build] = c.make(rng);
      const double err = fdcheck::max_rel_error(build, inputs, rng(), 1e-5);
      if (!(err <= worst)) {
        worst = err;
        worst_op = c.name;
      }
    }
  }
  return {worst <= 1e-4, fmt("%zu ops x 10 instances, max rel err %.2e (%s) <= 1e-4", ops, worst, worst_op.c_str())};
}

Result masking(Context&) {
  MaskSpec spec;  // span 10, prob 0.65
  const std::size_t T = 1000, draws = 10000;
  bool counts_ok = true;
  double covered = 0.0;
  for (std::size_t s = 0; s < draws; ++s) {
    const auto d = sample_mask(T, spec, s);
    counts_ok &= d.starts.size() == 65;
    covered += static_cast<double>(d.count());
  }
  const double mc = covered / draws;
  const double expect = oracle::mask_coverage(T, 10, 65);
  const double rel = std::abs(mc - expect) / expect;
  return {counts_ok && rel <= 0.01,
          fmt("65 starts in all %zu draws: %s; MC coverage %.2f vs expected %.2f (rel %.4f <= 0.01)", draws,
              counts_ok ? "yes" : "no", mc, expect, rel)};
}

Result kmeans(Context&) {
  // Monotone inertia on random instances.
  bool monotone = true;
  for (std::uint64_t inst = 0; inst < 100; ++inst) {
    std::mt19937_64 rng(inst);
    std::normal_distribution<float> nd;
    FeatureMatrix f(100 + inst * 3, 2 + inst % 7, 50.0f, FeatureKind::kMfcc);
    for (auto& v : f.values) v = nd(rng);
    KmeansOptions opt;
    opt.k = 2 + inst % 15;
    opt.seed = inst;
    opt.tol = 0.0;
    const auto fit = fit_kmeans(f, opt);
    for (std::size_t i = 1; i < fit.inertia.size(); ++i) monotone &= fit.inertia[i] <= fit.inertia[i - 1];
  }

  // Blobs separated by 100x their radius.
  bool recovered = true;
  for (std::uint64_t inst = 0; inst < 10; ++inst) {
    std::mt19937_64 rng(100 + inst);
    std::normal_distribution<double> nd;
    const std::size_t k = 3 + inst % 5, per = 40, dims = 4;
    std::vector<double> centres(k * dims);
    for (auto& c : centres) c = 100.0 * nd(rng);
    FeatureMatrix f(k * per, dims, 50.0f, FeatureKind::kMfcc);
    std::vector<std::size_t> truth;
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t i = 0; i < per; ++i) {
        for (std::size_t d = 0; d < dims; ++d) f.at(c * per + i, d) = static_cast<float>(centres[c * dims + d] + nd(rng));
        truth.push_back(c);
      }
    // Only keep instances whose centres really are 100 radii apart.
    double min_sep = 1e300;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b) {
        double s = 0.0;
        for (std::size_t d = 0; d < dims; ++d) s += std::pow(centres[a * dims + d] - centres[b * dims + d], 2);
        min_sep = std::min(min_sep, std::sqrt(s));
      }
    if (min_sep < 100.0) continue;
    KmeansOptions opt;
    opt.k = k;
    opt.seed = inst;
    const auto fit = fit_kmeans(f, opt);
    for (std::size_t i = 0; i < f.rows; ++i)
      for (std::size_t j = 0; j < f.rows; ++j)
        recovered &= (truth[i] == truth[j]) == (fit.assignment[i] == fit.assignment[j]);
  }

  // K=1: the stored (f32) centroid is the correctly rounded data mean.
  double worst = 0.0;
  {
    std::mt19937_64 rng(5);
    std::normal_distribution<float> nd(3.0f, 2.0f);
    FeatureMatrix f(997, 6, 50.0f, FeatureKind::kMfcc);
    for (auto& v : f.values) v = nd(rng);
    KmeansOptions opt;
    opt.k = 1;
    opt.standardize = false;
    const auto fit = fit_kmeans(f, opt);
    for (std::size_t d = 0; d < f.cols; ++d) {
      double mean = 0.0;
      for (std::size_t i = 0; i < f.rows; ++i) mean += f.at(i, d);
      mean /= static_cast<double>(f.rows);
      worst = std::max(worst, std::abs(static_cast<double>(fit.codebook.centroids[d]) -
                                       static_cast<double>(static_cast<float>(mean))));
    }
  }
  return {monotone && recovered && worst <= 1e-9,
          fmt("monotone on 100 instances: %s; blob recovery: %s; K=1 |centroid - mean| = %.1e <= 1e-9",
              monotone ? "yes" : "no", recovered ? "yes" : "no", worst)};
}

Result metric_oracles(Context&) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> level(0, 9);
  double auc_err = 0.0, ap_err = 0.0;
  int instances = 0;
  while (instances < 1000) {
    const std::size_t n = 2 + rng() % 11, tags = 1 + rng() % 4;
    std::vector<double> s(n * tags);
    std::vector<std::uint8_t> y(n * tags);
    // Coarse score levels so ties are common.
    for (auto& v : s) v = level(rng) / 10.0;
    for (auto& v : y) v = static_cast<std::uint8_t>(rng() % 2);
    double auc_sum = 0.0, ap_sum = 0.0;
    int valid = 0;
    for (std::size_t t = 0; t < tags; ++t) {
      std::vector<double> st;
      std::vector<std::uint8_t> yt;
      for (std::size_t i = 0; i < n; ++i) {
        st.push_back(s[i * tags + t]);
        yt.push_back(y[i * tags + t]);
      }
      const auto pos = std::count(yt.begin(), yt.end(), 1);
      if (pos == 0 || pos == static_cast<long>(n)) continue;
      auc_sum += oracle::auc_pairs(st, yt);
      ap_sum += oracle::ap_thresholds(st, yt);
      ++valid;
    }
    if (valid == 0) continue;
    ++instances;
    auc_err = std::max(auc_err, std::abs(roc_auc_macro(s, y, tags).value - auc_sum / valid));
    ap_err = std::max(ap_err, std::abs(average_precision_macro(s, y, tags).value - ap_sum / valid));
  }

  double beat_err = 0.0;
  std::uniform_real_distribution<double> u(0.0, 2.0), jitter(-0.03, 0.03);
  for (int inst = 0; inst < 3000; ++inst) {
    std::vector<double> ref(rng() % 9), est;
    for (auto& r : ref) r = u(rng);
    std::sort(ref.begin(), ref.end());
    ref.erase(std::unique(ref.begin(), ref.end()), ref.end());
    for (double r : ref)
      if (rng() % 4) est.push_back(r + jitter(rng));
    for (std::size_t extra = rng() % 3; extra > 0; --extra) est.push_back(u(rng));
    for (auto& e : est) e = std::max(e, 0.0);
    std::sort(est.begin(), est.end());
    est.erase(std::unique(est.begin(), est.end()), est.end());
    if (est.size() > 8) est.resize(8);
    beat_err = std::max(beat_err, std::abs(beat_f_measure(est, ref, 0.02) - oracle::best_f_measure(est, ref, 0.02)));
  }

  int key_mismatch = 0;
  for (int a = 0; a < 24; ++a)
    for (int b = 0; b < 24; ++b) {
      const KeyLabel e{a % 12, a < 12 ? Mode::kMajor : Mode::kMinor}, r{b % 12, b < 12 ? Mode::kMajor : Mode::kMinor};
      key_mismatch += refined_key_score(e, r) != oracle::key_rule(e, r);
    }
  return {auc_err <= 1e-12 && ap_err <= 1e-12 && beat_err <= 1e-12 && key_mismatch == 0,
          fmt("AUC max err %.1e, AP max err %.1e (1000 instances, <= 1e-12); beat F max err %.1e over 3000 grids; "
              "key table %d/576 mismatches",
              auc_err, ap_err, beat_err, key_mismatch)};
}

Result dbn(Context&) {
  std::vector<double> beats;
  const auto act = oracle::impulse_train(120, 30.0, 50.0, 0.95, 0.02, &beats);
  const double f120 = beat_f_measure(dbn_decode(act), beats, 0.02);
  double worst = 1.0;
  int worst_bpm = 0;
  for (int bpm = 60; bpm <= 200; bpm += 10) {
    std::vector<double> b;
    const auto a = oracle::impulse_train(bpm, 30.0, 50.0, 0.95, 0.02, &b);
    const double f = beat_f_measure(dbn_decode(a), b, 0.02);
    if (f < worst) {
      worst = f;
      worst_bpm = bpm;
    }
  }
  return {f120 == 1.0 && worst >= 0.95,
          fmt("120 bpm F1 = %.4f (== 1); sweep 60-200 bpm min F1 = %.4f at %d bpm (>= 0.95)", f120, worst, worst_bpm)};
}

Result ema(Context&) {
  EncoderConfig cfg;
  Encoder student(cfg, 1), teacher(cfg, 2);
  const auto student_hash = param_hash(student.params());

  const auto before = param_hash(teacher.params());
  ema_update(teacher.params(), student.params(), 1.0);
  const bool keep = param_hash(teacher.params()) == before;

  Encoder copy(cfg, 2);
  ema_update(copy.params(), student.params(), 0.0);
  const bool copies = param_hash(copy.params()) == student_hash;

  // tau = 0.5: each element becomes the correctly rounded midpoint, and the
  // distance halves step after step.
  Encoder half(cfg, 2);
  bool exact = true;
  double worst_ratio = 0.0;
  double d = param_distance(half.params(), student.params());
  for (int step = 0; step < 8; ++step) {
    std::vector<std::vector<float>> old;
    for (const auto* p : half.params().all()) old.push_back(p->value);
    ema_update(half.params(), student.params(), 0.5);
    const auto hs = half.params().all();
    const auto ss = student.params().all();
    for (std::size_t i = 0; i < hs.size(); ++i)
      for (std::size_t j = 0; j < hs[i]->value.size(); ++j)
        exact &= hs[i]->value[j] ==
                 static_cast<float>((static_cast<double>(old[i][j]) + static_cast<double>(ss[i]->value[j])) / 2.0);
    const double nd = param_distance(half.params(), student.params());
    if (d > 0) worst_ratio = std::max(worst_ratio, std::abs(nd / d - 0.5));
    d = nd;
  }
  const bool frozen = param_hash(student.params()) == student_hash;
  return {keep && copies && exact && frozen,
          fmt("tau=1 bit-identical: %s; tau=0 copy: %s; tau=0.5 midpoint exact: %s (max |ratio - 0.5| = %.1e)",
              keep ? "yes" : "no", copies ? "yes" : "no", exact ? "yes" : "no", worst_ratio)};
}

double mean_eval(Pretrainer& p, int batches) {
  double s = 0.0;
  for (int b = 0; b < batches; ++b) s += p.evaluate(static_cast<std::uint64_t>(b)).loss;
  return s / batches;
}

Result discrete_sanity(Context& ctx) {
  const auto& clips = ctx.pitch_clips();
  RunConfig cfg;
  cfg.seed = 7;
  cfg.quantize.kmeans.k = 8;
  cfg.pretrain.steps = 500;
  cfg.finalize();
  std::vector<FeatureMatrix> feats;
  for (const auto& c : clips) feats.push_back(clip_features(c, cfg));
  const auto q = quantize_features(feats, cfg, ctx.workers);
  Pretrainer p(cfg.encoder, cfg.pretrain, clips, q.labels, 8);
  const double init = mean_eval(p, 16);
  for (int i = 0; i < 500; ++i) p.step();
  const double after = mean_eval(p, 16);
  const double ln8 = std::log(8.0);
  const double init_dev = std::abs(init - ln8) / ln8, drop = 1.0 - after / init;
  return {init_dev <= 0.10 && drop >= 0.40,
          fmt("initial loss %.4f vs ln 8 = %.4f (dev %.3f <= 0.10); after 500 steps %.4f (drop %.3f >= 0.40)", init,
              ln8, init_dev, after, drop)};
}

Result continuous_sanity(Context& ctx) {
  const auto& clips = ctx.pitch_clips();
  RunConfig cfg;
  cfg.seed = 7;
  cfg.pretrain.paradigm = Paradigm::kContinuous;
  cfg.pretrain.steps = 500;
  cfg.finalize();
  Pretrainer p(cfg.encoder, cfg.pretrain, clips);
  const double init = mean_eval(p, 16);
  bool dist_ok = true;
  double dmin = 1e300, dmax = 0.0;
  for (int i = 0; i < 500; ++i) {
    p.step();
    const double d = param_distance(p.teacher()->params(), p.student().params());
    dist_ok &= std::isfinite(d) && d > 0.0;
    dmin = std::min(dmin, d);
    dmax = std::max(dmax, d);
  }
  const double after = mean_eval(p, 16);
  const double drop = 1.0 - after / init;
  return {drop >= 0.50 && dist_ok,
          fmt("loss %.4f -> %.4f (drop %.3f >= 0.50); teacher-student distance in [%.3g, %.3g], finite and > 0: %s",
              init, after, drop, dmin, dmax, dist_ok ? "yes" : "no")};
}

Result transfer(Context& ctx) {
  const auto& clips = ctx.pitch_clips();
  const fs::path probe_dir = ctx.work / "pitch1000";
  {
    SynthSpec s;
    s.n_clips = 1000;
    s.duration = 2.0;
    s.seed = 1234;
    gen_corpus(s, probe_dir, ctx.workers);
  }
  const auto m = read_manifest(probe_dir / "manifest.tsv");
  const auto labels = read_labels(probe_dir / "labels.tsv");
  const auto lhash = hex64(file_checksum(probe_dir / "labels.tsv"));

  double pre_sum = 0.0, rnd_sum = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.pretrain.paradigm = Paradigm::kContinuous;
    cfg.pretrain.steps = 2000;
    cfg.pretrain.checkpoint_every = 2000;
    cfg.finalize();
    const auto run = run_pretraining(cfg, clips, {}, ctx.work / fmt("pretrain_seed%llu", (unsigned long long)seed));
    auto pre = encoder_from_checkpoint(load_checkpoint(run.final_checkpoint));
    // The random baseline is the same network before pre-training.
    Encoder rnd(cfg.encoder, cfg.seed);
    const auto acc = [&](Encoder& enc) {
      const auto pr = run_probe(enc, m, labels, lhash, cfg, ctx.workers);
      return evaluate_predictions(pr.predictions, labels, lhash, cfg).metrics.at("accuracy");
    };
    const double a = acc(pre), b = acc(rnd);
    pre_sum += a;
    rnd_sum += b;
    per_seed += fmt(" s%llu %.3f/%.3f", (unsigned long long)seed, a, b);
  }
  const double gap = (pre_sum - rnd_sum) / 3.0;
  return {gap >= 0.10, fmt("pitch probe accuracy pretrained %.3f vs random %.3f (gap %.3f >= 0.10);%s",
                           pre_sum / 3.0, rnd_sum / 3.0, gap, per_seed.c_str())};
}

Result probe_protocol(Context& ctx) {
  // Encoder hash across a real probe run.
  const fs::path dir = ctx.work / "probe_corpus";
  SynthSpec s;
  s.n_clips = 60;
  s.duration = 1.0;
  s.seed = 5;
  s.min_midi = 60;
  s.max_midi = 63;
  gen_corpus(s, dir, ctx.workers);
  RunConfig cfg;
  cfg.probe.probe.epochs = 10;
  cfg.finalize();
  Encoder enc(cfg.encoder, 3);
  const auto before = param_hash(enc.params());
  const auto labels = read_labels(dir / "labels.tsv");
  const auto run = run_probe(enc, read_manifest(dir / "manifest.tsv"), labels, "-", cfg, ctx.workers);
  const bool unchanged = param_hash(enc.params()) == before;

  // Layer weights: positive, sum to one, softmax of the raw parameter.
  const auto w = run.train.model.layer_weights();
  const auto& raw = run.train.model.params().at("probe.layer_w").value;
  double sum = 0.0, zsum = 0.0, softmax_err = 0.0;
  for (float r : raw) zsum += std::exp(static_cast<double>(r));
  for (std::size_t i = 0; i < w.size(); ++i) {
    sum += w[i];
    softmax_err = std::max(softmax_err, std::abs(w[i] - std::exp(static_cast<double>(raw[i])) / zsum));
  }
  const bool normalized = std::abs(sum - 1.0) <= 1e-6 && softmax_err <= 1e-6 &&
                          std::all_of(w.begin(), w.end(), [](float x) { return x > 0.0f; });

  // Linearly separable 4-class task, signal in one of three layers.
  const auto make = [](std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed), wrng(77);
    std::normal_distribution<float> nd;
    std::vector<float> wt(4 * 8);
    for (auto& x : wt) x = nd(wrng);
    std::vector<ProbeExample> out;
    while (out.size() < n) {
      LayerEmbeddings e;
      e.frames = 1;
      e.layers = 3;
      e.dims = 8;
      e.values.assign(24, 0.0f);
      for (std::size_t h = 0; h < 8; ++h) e.values[h * 3 + 1] = nd(rng);
      std::vector<double> sc(4, 0.0);
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t h = 0; h < 8; ++h) sc[c] += wt[c * 8 + h] * e.at(0, 1, h);
      auto sorted = sc;
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted[0] - sorted[1] < 0.5) continue;
      out.push_back({e, {static_cast<float>(std::max_element(sc.begin(), sc.end()) - sc.begin())}});
    }
    return out;
  };
  const auto train = make(300, 1), valid = make(60, 2);
  ProbeConfig pc;
  pc.outputs = 4;
  pc.hidden = 512;
  pc.lr = 1e-3;
  pc.epochs = 150;
  pc.patience = 150;
  pc.seed = 1;
  auto res = train_probe(train, valid, pc);
  const double train_acc = probe_metric(res.model, train);
  return {unchanged && normalized && train_acc == 1.0 && res.best_valid == 1.0,
          fmt("encoder hash unchanged: %s; layer weights softmax-normalized: %s (sum %.7f); separable task "
              "(lr 1e-3, hidden 512) train %.3f valid %.3f (== 1)",
              unchanged ? "yes" : "no", normalized ? "yes" : "no", sum, train_acc, res.best_valid)};
}

// One full pipeline through files: synth, features, kmeans, pretrain,
// probe, eval, report. Returns the report JSON and text bytes.
std::pair<std::string, std::string> pipeline_run(const fs::path& dir, int workers) {
  RunConfig cfg = parse_config(R"({"seed": 21, "quantize": {"k": 8}, "pretrain": {"steps": 200,
      "checkpoint_every": 100}, "probe": {"epochs": 20}})");
  SynthSpec s;
  s.n_clips = 60;
  s.duration = 2.0;
  s.seed = cfg.seed;
  const auto paths = gen_corpus(s, dir / "corpus", workers);
  const auto m = read_manifest(paths.manifest);
  extract_features(m, cfg, dir / "features", workers);
  const auto q = quantize_features(load_feature_dir(m, dir / "features"), cfg, workers);
  write_quantize_dir(m, q, cfg, dir / "kmeans");
  const auto clips = load_clips(m, workers);
  const auto run = run_pretraining(cfg, clips, load_label_dir(m, dir / "kmeans"), dir / "pretrain");
  auto enc = encoder_from_checkpoint(load_checkpoint(run.final_checkpoint));
  const auto labels = read_labels(paths.labels);
  const auto lhash = hex64(file_checksum(paths.labels));
  const auto pr = run_probe(enc, m, labels, lhash, cfg, workers);
  write_text_atomic(dir / "predictions.json", pr.predictions.to_json());
  std::ifstream in(dir / "predictions.json");
  std::stringstream ss;
  ss << in.rdbuf();
  const auto report = evaluate_predictions(Predictions::from_json(ss.str()), labels, lhash, cfg);
  const std::vector<std::pair<std::string, MetricReport>> rows = {{"run", report}};
  return {report_table_json(rows), report_table(rows)};
}

Result reproducibility(Context& ctx) {
  const auto a = pipeline_run(ctx.work / "repro_a", 1);
  const auto b = pipeline_run(ctx.work / "repro_b", std::max(2, ctx.workers));
  const bool same = a == b;
  return {same, fmt("two runs (1 and %d workers) byte-identical reports: %s (fnv %s / %s)", std::max(2, ctx.workers),
                    same ? "yes" : "no", hex64(fnv1a64(a.first)).c_str(), hex64(fnv1a64(b.first)).c_str())};
}

struct Criterion {
  int id;
  const char* name;
  Result (*run)(Context&);
};

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "musicssl_acceptance";
  bool keep = false;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--keep") {
      keep = true;
    } else {
      try {
        only.insert(std::stoi(a));
      } catch (const std::exception&) {
        std::fprintf(stderr, "usage: %s [--work DIR] [--keep] [ID ...]\n", argv[0]);
        return 64;
      }
    }
  }
  const std::vector<Criterion> all = {
      {1, "gradient correctness", gradients},
      {2, "masking statistics", masking},
      {3, "k-means", kmeans},
      {4, "metric oracles", metric_oracles},
      {5, "DBN decoding", dbn},
      {6, "EMA contract", ema},
      {7, "discrete pre-training", discrete_sanity},
      {8, "continuous pre-training", continuous_sanity},
      {9, "end-to-end transfer", transfer},
      {10, "probe protocol", probe_protocol},
      {11, "reproducibility", reproducibility},
  };

  fs::remove_all(work);
  fs::create_directories(work);
  Context ctx;
  ctx.work = work;
  int failures = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    try {
      r = c.run(ctx);
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !r.pass;
    std::printf("%s %2d %-24s %s [%.1f s]\n", r.pass ? "PASS" : "FAIL", c.id, c.name, r.detail.c_str(), secs);
    std::fflush(stdout);
  }
  if (!keep) fs::remove_all(work);
  return failures;
}
