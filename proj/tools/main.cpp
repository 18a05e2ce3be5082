// musicssl command-line driver.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "musicssl/common.hpp"
#include "musicssl/config.hpp"
#include "musicssl/pipeline.hpp"
#include "musicssl/synth.hpp"

using namespace musicssl;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  int workers = 1;
};

void add_common(CLI::App* cmd, Common& c, const char* out_help) {
  cmd->add_option("--seed", c.seed, "Seed (overrides the config)");
  cmd->add_option("--config", c.config, "Run config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, out_help)->required();
  cmd->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
}

RunConfig make_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_config("{}") : load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.finalize();
  }
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string task = "pitch";
  int n = 100;
  double duration = 2.0;
  int min_midi = 36;
  int max_midi = 84;
};

void cmd_synth(const Common& c, const SynthArgs& a) {
  SynthSpec s;
  s.task = synth_task_from_string(a.task);
  s.n_clips = a.n;
  s.duration = a.duration;
  s.seed = make_config(c).seed;
  s.min_midi = a.min_midi;
  s.max_midi = a.max_midi;
  s.validate();
  const auto paths = gen_corpus(s, c.out, c.workers);
  std::printf("manifest %s\nlabels %s\n", paths.manifest.c_str(), paths.labels.c_str());
}

struct FeatureArgs {
  std::string manifest;
  std::string kind;
};

void cmd_features(const Common& c, const FeatureArgs& a) {
  RunConfig cfg = make_config(c);
  if (!a.kind.empty()) {
    cfg.dsp.kind = feature_kind_from_string(a.kind);
    cfg.finalize();
  }
  const auto m = read_manifest(a.manifest);
  extract_features(m, cfg, c.out, c.workers);
  std::printf("%zu %s feature files in %s\n", m.rows.size(), to_string(cfg.dsp.kind).c_str(), c.out.c_str());
}

struct KmeansArgs {
  std::string manifest;
  std::string features;
  std::optional<std::size_t> k;
  std::string iter2;
  std::optional<int> layer;
};

void cmd_kmeans(const Common& c, const KmeansArgs& a) {
  RunConfig cfg = make_config(c);
  if (a.k) {
    cfg.quantize.kmeans.k = *a.k;
    cfg.finalize();
  }
  const auto m = read_manifest(a.manifest);
  QuantizeResult q;
  if (!a.iter2.empty()) {
    const auto ckpt = load_checkpoint(a.iter2);
    const int layer = a.layer ? *a.layer : config_from_checkpoint(ckpt).iter2_layer();
    q = fit_second_iteration(ckpt, load_clips(m, c.workers), layer, cfg, c.workers);
  } else {
    if (a.features.empty()) throw UsageError("kmeans needs --features or --iter2");
    q = quantize_features(load_feature_dir(m, a.features), cfg, c.workers);
  }
  write_quantize_dir(m, q, cfg, c.out);
  std::printf("codebook k=%zu d=%zu kind=%s, %zu Lloyd steps, inertia %.6g\n", q.fit.codebook.k,
              q.fit.codebook.dims, to_string(q.fit.codebook.feature_kind).c_str(), q.fit.inertia.size(),
              q.fit.inertia.empty() ? 0.0 : q.fit.inertia.back());
}

struct PretrainArgs {
  std::string manifest;
  std::string labels;
  std::string paradigm;
  std::optional<int> steps;
  std::optional<int> iterations;
  bool resume = false;
  bool quiet = false;
};

void cmd_pretrain(const Common& c, const PretrainArgs& a) {
  RunConfig cfg = make_config(c);
  if (!a.paradigm.empty()) cfg.pretrain.paradigm = paradigm_from_string(a.paradigm);
  if (a.steps) cfg.pretrain.steps = *a.steps;
  if (a.iterations) cfg.pretrain.iterations = *a.iterations;
  cfg.finalize();
  const auto m = read_manifest(a.manifest);
  auto clips = load_clips(m, c.workers);
  std::vector<LabelSequence> labels;
  if (cfg.pretrain.paradigm == Paradigm::kDiscrete) {
    if (a.labels.empty()) throw UsageError("discrete pre-training needs --labels (a kmeans output directory)");
    labels = load_label_dir(m, a.labels);
  }
  const auto every = static_cast<std::uint64_t>(std::max(1, cfg.pretrain.steps / 20));
  StepCallback progress = [&](const StepStats& s) {
    if (!a.quiet && (s.step % every == 0 || s.step == static_cast<std::uint64_t>(cfg.pretrain.steps)))
      std::fprintf(stderr, "step %llu loss %.4f lr %.2e tau %.5f\n", static_cast<unsigned long long>(s.step),
                   s.loss, s.lr, s.tau);
  };
  fs::path final_ckpt;
  if (cfg.pretrain.paradigm == Paradigm::kDiscrete && cfg.pretrain.iterations > 1) {
    if (a.resume) throw UsageError("--resume is not supported with --iterations > 1");
    final_ckpt = run_iteration_pipeline(cfg, m, clips, std::move(labels), c.out, c.workers, progress);
  } else {
    final_ckpt = run_pretraining(cfg, std::move(clips), std::move(labels), c.out, a.resume, progress).final_checkpoint;
  }
  std::printf("final checkpoint %s\n", final_ckpt.c_str());
}

struct ProbeArgs {
  std::string ckpt;
  bool random = false;
  std::string manifest;
  std::string labels;
};

void cmd_probe(const Common& c, const ProbeArgs& a) {
  RunConfig cfg = make_config(c);
  if (a.ckpt.empty() == !a.random) throw UsageError("probe needs exactly one of --ckpt and --random");
  std::optional<Encoder> enc;
  if (a.random) {
    enc.emplace(cfg.encoder, cfg.seed);
  } else {
    enc.emplace(encoder_from_checkpoint(load_checkpoint(a.ckpt)));
  }
  const auto m = read_manifest(a.manifest);
  const auto labels = read_labels(a.labels);
  const auto run = run_probe(*enc, m, labels, hex64(file_checksum(a.labels)), cfg, c.workers);
  const fs::path out(c.out);
  fs::create_directories(out);
  save_probe(run.train.model, run.predictions.encoder_hash, out / "probe.sslp");
  write_text_atomic(out / "predictions.json", run.predictions.to_json());
  std::printf("probe %s: best valid %.4f at epoch %d; %zu test predictions\n", to_string(run.predictions.task).c_str(),
              run.train.best_valid, run.train.best_epoch, run.predictions.items.size());
}

struct EvalArgs {
  std::string predictions;
  std::string labels;
  bool force = false;
};

void cmd_eval(const Common& c, const EvalArgs& a) {
  const RunConfig cfg = make_config(c);
  const auto p = Predictions::from_json(read_file(a.predictions));
  const auto labels = read_labels(a.labels);
  const auto r = evaluate_predictions(p, labels, hex64(file_checksum(a.labels)), cfg, a.force);
  fs::path out(c.out);
  write_text_atomic(out, r.to_json());
  write_text_atomic(fs::path(out).replace_extension(".txt"), r.to_text());
  std::fputs(r.to_text().c_str(), stdout);
}

void cmd_report(const Common& c, const std::vector<std::string>& inputs) {
  std::vector<std::pair<std::string, MetricReport>> runs;
  for (const auto& in : inputs) {
    auto r = MetricReport::from_json(read_file(in));
    const fs::path p(in);
    const auto name = p.parent_path().filename().string();
    runs.emplace_back(name.empty() ? p.stem().string() : name + "/" + p.stem().string(), std::move(r));
  }
  const fs::path out(c.out);
  const auto table = report_table(runs);
  write_text_atomic(out, report_table_json(runs));
  write_text_atomic(fs::path(out).replace_extension(".txt"), table);
  std::fputs(table.c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised music pre-training workbench"};
  app.require_subcommand(1);

  Common common;
  SynthArgs synth;
  FeatureArgs feat;
  KmeansArgs km;
  PretrainArgs pre;
  ProbeArgs probe;
  EvalArgs ev;
  std::vector<std::string> report_inputs;

  auto* s = app.add_subcommand("synth", "Generate a synthetic labeled corpus");
  add_common(s, common, "Corpus directory");
  s->add_option("--task", synth.task, "pitch|beat|key|tags|emotion");
  s->add_option("--n", synth.n, "Number of clips");
  s->add_option("--duration", synth.duration, "Clip length in seconds");
  s->add_option("--min-midi", synth.min_midi, "Lowest pitch (pitch task)");
  s->add_option("--max-midi", synth.max_midi, "Highest pitch (pitch task)");

  auto* f = app.add_subcommand("features", "Extract MFCC or chroma features");
  add_common(f, common, "Feature directory");
  f->add_option("--manifest", feat.manifest)->required()->check(CLI::ExistingFile);
  f->add_option("--kind", feat.kind, "mfcc|chroma (overrides dsp.kind)");

  auto* k = app.add_subcommand("kmeans", "Fit a codebook and write pseudo-labels");
  add_common(k, common, "Codebook directory");
  k->add_option("--manifest", km.manifest)->required()->check(CLI::ExistingFile);
  k->add_option("--features", km.features, "Feature directory");
  k->add_option("--k", km.k, "Number of clusters (overrides quantize.k)");
  k->add_option("--iter2", km.iter2, "Checkpoint for deep-feature clustering")->check(CLI::ExistingFile);
  k->add_option("--layer", km.layer, "Layer for --iter2 (default L/2)");

  auto* p = app.add_subcommand("pretrain", "Self-supervised pre-training");
  add_common(p, common, "Run directory");
  p->add_option("--manifest", pre.manifest)->required()->check(CLI::ExistingFile);
  p->add_option("--labels", pre.labels, "kmeans output directory (discrete)");
  p->add_option("--paradigm", pre.paradigm, "discrete|continuous");
  p->add_option("--steps", pre.steps);
  p->add_option("--iterations", pre.iterations, "Pseudo-label iterations (discrete)");
  p->add_flag("--resume", pre.resume, "Continue from the newest checkpoint in --out");
  p->add_flag("--quiet", pre.quiet);

  auto* pr = app.add_subcommand("probe", "Train a probe on a frozen encoder");
  add_common(pr, common, "Probe directory");
  pr->add_option("--ckpt", probe.ckpt)->check(CLI::ExistingFile);
  pr->add_flag("--random", probe.random, "Use a randomly initialized encoder");
  pr->add_option("--manifest", probe.manifest)->required()->check(CLI::ExistingFile);
  pr->add_option("--labels", probe.labels)->required()->check(CLI::ExistingFile);

  auto* e = app.add_subcommand("eval", "Score predictions against labels");
  add_common(e, common, "Report file (JSON; a .txt twin is written)");
  e->add_option("--predictions", ev.predictions)->required()->check(CLI::ExistingFile);
  e->add_option("--labels", ev.labels)->required()->check(CLI::ExistingFile);
  e->add_flag("--force", ev.force, "Evaluate even when the label file differs");

  auto* r = app.add_subcommand("report", "Tabulate metric reports");
  add_common(r, common, "Table file (JSON; a .txt twin is written)");
  r->add_option("reports", report_inputs)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  // Outputs this invocation creates are removed again when it fails.
  const fs::path out(common.out);
  const bool existed = fs::exists(out);
  std::vector<fs::path> twins;
  if (!existed && (e->parsed() || r->parsed())) twins.push_back(fs::path(out).replace_extension(".txt"));
  const auto cleanup = [&] {
    std::error_code ec;
    if (!existed) fs::remove_all(out, ec);
    for (const auto& t : twins) fs::remove(t, ec);
  };

  try {
    if (s->parsed()) cmd_synth(common, synth);
    if (f->parsed()) cmd_features(common, feat);
    if (k->parsed()) cmd_kmeans(common, km);
    if (p->parsed()) cmd_pretrain(common, pre);
    if (pr->parsed()) cmd_probe(common, probe);
    if (e->parsed()) cmd_eval(common, ev);
    if (r->parsed()) cmd_report(common, report_inputs);
  } catch (const UsageError& err) {
    cleanup();
    std::fprintf(stderr, "usage error: %s\n", err.what());
    return 1;
  } catch (const std::exception& err) {
    cleanup();
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return 0;
}
