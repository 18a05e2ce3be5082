#include "musicssl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Strict view of one JSON object: every key must be consumed, and values
// must have the exact JSON type of the target field.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw UsageError(where() + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const json& v = *it;
    const auto fail = [&](const char* want) {
      throw UsageError(sub(key) + ": expected " + want + ", got " + v.type_name());
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail("a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) fail("a non-negative integer");
      out = v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail("an integer");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail("a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) fail("a string");
      out = v.get<std::string>();
    }
  }

  /// String field converted by `parse`; its UsageError gets the key path.
  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string s;
    if (!j_.contains(key)) {
      seen_.insert(key);
      return;
    }
    get(key, s);
    try {
      out = parse(s);
    } catch (const UsageError& e) {
      throw UsageError(sub(key) + ": " + e.what());
    }
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::optional<Section> child(const char* key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    return Section(*v, sub(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw UsageError("unknown config key '" + sub(it.key()) + "'");
  }

  std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Rethrows validation errors with the section name in front.
template <typename Fn>
void checked(const std::string& section, Fn&& fn) {
  try {
    fn();
  } catch (const UsageError& e) {
    const std::string msg = e.what();
    if (msg.rfind(section + ".", 0) == 0) throw;
    throw UsageError(section + ": " + msg);
  }
}

void read_dsp(Section s, DspSection& d) {
  s.get_enum("kind", d.kind, feature_kind_from_string);
  s.get("align_to_encoder", d.align_to_encoder);
  if (auto m = s.child("mfcc")) {
    m->get("n_mels", d.mfcc.n_mels);
    m->get("n_coeffs", d.mfcc.n_coeffs);
    m->get("fft_size", d.mfcc.fft_size);
    m->get("hop", d.mfcc.hop);
    m->get("include_deltas", d.mfcc.include_deltas);
    m->get("delta_width", d.mfcc.delta_width);
    m->get("fmin", d.mfcc.fmin);
    m->get("fmax", d.mfcc.fmax);
    m->finish();
  }
  if (auto c = s.child("chroma")) {
    c->get("fft_size", d.chroma.fft_size);
    c->get("hop", d.chroma.hop);
    c->get("fmin", d.chroma.fmin);
    c->get("fmax", d.chroma.fmax);
    c->finish();
  }
  s.finish();
}

void read_quantize(Section s, QuantizeSection& q) {
  s.get("k", q.kmeans.k);
  s.get("max_iter", q.kmeans.max_iter);
  s.get("tol", q.kmeans.tol);
  s.get("standardize", q.kmeans.standardize);
  s.get("frame_budget", q.kmeans.frame_budget);
  s.get("iter2_layer", q.iter2_layer);
  s.finish();
}

void read_encoder(Section s, EncoderConfig& e) {
  if (const json* conv = s.raw("conv")) {
    const std::string path = s.sub("conv");
    if (!conv->is_array()) throw UsageError(path + ": expected an array");
    e.conv.clear();
    for (std::size_t i = 0; i < conv->size(); ++i) {
      Section c((*conv)[i], path + "[" + std::to_string(i) + "]");
      ConvSpec spec;
      c.get("channels", spec.channels);
      c.get("kernel", spec.kernel);
      c.get("stride", spec.stride);
      c.finish();
      e.conv.push_back(spec);
    }
  }
  s.get("layers", e.layers);
  s.get("hidden", e.hidden);
  s.get("heads", e.heads);
  s.get("ff_dim", e.ff_dim);
  s.get("dropout", e.dropout);
  s.get("max_positions", e.max_positions);
  s.get("normalize_waveform", e.normalize_waveform);
  s.finish();
}

void read_pretrain(Section s, TrainConfig& t) {
  s.get_enum("paradigm", t.paradigm, paradigm_from_string);
  s.get("steps", t.steps);
  s.get("crop_seconds", t.crop_seconds);
  s.get("token_budget_seconds", t.token_budget_seconds);
  s.get("lr", t.lr);
  s.get("warmup_frac", t.warmup_frac);
  s.get("weight_decay", t.weight_decay);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("adam_eps", t.adam_eps);
  if (auto m = s.child("mask")) {
    m->get("span", t.mask.span);
    m->get("prob", t.mask.prob);
    m->finish();
  }
  if (const json* tl = s.raw("target_layers")) {
    if (tl->is_string() && tl->get<std::string>() == "all") {
      t.target_layers.reset();
    } else if (tl->is_number_integer()) {
      t.target_layers = tl->get<int>();
    } else {
      throw UsageError(s.sub("target_layers") + ": expected an integer or \"all\"");
    }
  }
  s.get("normalize_targets", t.normalize_targets);
  s.get_enum("loss", t.loss, regression_loss_from_string);
  s.get("smooth_l1_beta", t.smooth_l1_beta);
  s.get("tau_start", t.tau_start);
  s.get("tau_end", t.tau_end);
  s.get("tau_anneal_frac", t.tau_anneal_frac);
  s.get("masked_only", t.masked_only);
  s.get("unmasked_weight", t.unmasked_weight);
  s.get("head_dim", t.head_dim);
  s.get("temperature", t.temperature);
  s.get("checkpoint_every", t.checkpoint_every);
  s.get("iterations", t.iterations);
  s.finish();
}

void read_probe(Section s, ProbeSection& p) {
  s.get("hidden", p.probe.hidden);
  s.get("lr", p.probe.lr);
  s.get("epochs", p.probe.epochs);
  s.get("batch_size", p.probe.batch_size);
  s.get("patience", p.probe.patience);
  s.get("weight_decay", p.probe.weight_decay);
  s.get("window_seconds", p.window.window_seconds);
  s.get("hop_seconds", p.window.hop_seconds);
  s.finish();
}

void read_metrics(Section s, MetricsSection& m) {
  s.get("beat_tolerance", m.beat_tolerance);
  s.get("bidirectional_fifth", m.key.bidirectional_fifth);
  if (auto d = s.child("dbn")) {
    d->get("min_bpm", m.dbn.min_bpm);
    d->get("max_bpm", m.dbn.max_bpm);
    d->get("transition_lambda", m.dbn.transition_lambda);
    d->get("observation_lambda", m.dbn.observation_lambda);
    d->get("threshold", m.dbn.threshold);
    d->get("correct", m.dbn.correct);
    d->finish();
  }
  s.finish();
}

ordered_json encoder_json(const EncoderConfig& e) {
  ordered_json conv = ordered_json::array();
  for (const auto& c : e.conv) conv.push_back({{"channels", c.channels}, {"kernel", c.kernel}, {"stride", c.stride}});
  return {{"conv", conv},
          {"layers", e.layers},
          {"hidden", e.hidden},
          {"heads", e.heads},
          {"ff_dim", e.ff_dim},
          {"dropout", e.dropout},
          {"max_positions", e.max_positions},
          {"normalize_waveform", e.normalize_waveform}};
}

}  // namespace

void RunConfig::finalize() {
  pretrain.seed = seed;
  quantize.kmeans.seed = seed;
  probe.probe.seed = seed;
  checked("dsp.mfcc", [&] { dsp.mfcc.validate(); });
  if (dsp.chroma.fft_size < 2 || dsp.chroma.hop < 1) throw UsageError("dsp.chroma: fft_size >= 2 and hop >= 1 required");
  if (quantize.kmeans.k < 1) throw UsageError("quantize.k must be >= 1");
  if (quantize.kmeans.max_iter < 1) throw UsageError("quantize.max_iter must be >= 1");
  if (!(quantize.kmeans.tol >= 0)) throw UsageError("quantize.tol must be >= 0");
  checked("encoder", [&] { encoder.validate(); });
  if (quantize.iter2_layer > encoder.layers)
    throw UsageError("quantize.iter2_layer exceeds encoder.layers (" + std::to_string(encoder.layers) + ")");
  checked("pretrain", [&] { pretrain.validate(); });
  if (pretrain.target_layers && *pretrain.target_layers > encoder.layers)
    throw UsageError("pretrain.target_layers exceeds encoder.layers (" + std::to_string(encoder.layers) + ")");
  if (dsp.mfcc.hop != encoder.total_stride() && dsp.align_to_encoder)
    throw UsageError("dsp.mfcc.hop must equal the encoder stride when align_to_encoder is set");
  checked("probe.window", [&] { probe.window.validate(); });
  if (probe.probe.hidden < 1) throw UsageError("probe.hidden must be >= 1");
  if (!(probe.probe.lr > 0)) throw UsageError("probe.lr must be positive");
  if (probe.probe.epochs < 1 || probe.probe.batch_size < 1 || probe.probe.patience < 1)
    throw UsageError("probe.epochs, probe.batch_size and probe.patience must be >= 1");
  metrics.dbn.fps = encoder.frame_rate();
  checked("metrics.dbn", [&] { metrics.dbn.validate(); });
  if (!(metrics.beat_tolerance > 0)) throw UsageError("metrics.beat_tolerance must be positive");
}

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Section root(doc, "");
  root.get("seed", cfg.seed);
  if (auto s = root.child("dsp")) read_dsp(*s, cfg.dsp);
  if (auto s = root.child("quantize")) read_quantize(*s, cfg.quantize);
  if (auto s = root.child("encoder")) read_encoder(*s, cfg.encoder);
  if (auto s = root.child("pretrain")) read_pretrain(*s, cfg.pretrain);
  if (auto s = root.child("probe")) read_probe(*s, cfg.probe);
  if (auto s = root.child("metrics")) read_metrics(*s, cfg.metrics);
  root.finish();
  cfg.finalize();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const RunConfig& c) {
  const auto& d = c.dsp;
  const auto& q = c.quantize;
  const auto& t = c.pretrain;
  const auto& p = c.probe;
  const auto& m = c.metrics;
  ordered_json j;
  j["seed"] = c.seed;
  j["dsp"] = {{"kind", to_string(d.kind)},
              {"align_to_encoder", d.align_to_encoder},
              {"mfcc",
               {{"n_mels", d.mfcc.n_mels},
                {"n_coeffs", d.mfcc.n_coeffs},
                {"fft_size", d.mfcc.fft_size},
                {"hop", d.mfcc.hop},
                {"include_deltas", d.mfcc.include_deltas},
                {"delta_width", d.mfcc.delta_width},
                {"fmin", d.mfcc.fmin},
                {"fmax", d.mfcc.fmax}}},
              {"chroma",
               {{"fft_size", d.chroma.fft_size},
                {"hop", d.chroma.hop},
                {"fmin", d.chroma.fmin},
                {"fmax", d.chroma.fmax}}}};
  j["quantize"] = {{"k", q.kmeans.k},
                   {"max_iter", q.kmeans.max_iter},
                   {"tol", q.kmeans.tol},
                   {"standardize", q.kmeans.standardize},
                   {"frame_budget", q.kmeans.frame_budget},
                   {"iter2_layer", q.iter2_layer}};
  j["encoder"] = encoder_json(c.encoder);
  ordered_json tl = t.target_layers ? ordered_json(*t.target_layers) : ordered_json("all");
  j["pretrain"] = {{"paradigm", to_string(t.paradigm)},
                   {"steps", t.steps},
                   {"crop_seconds", t.crop_seconds},
                   {"token_budget_seconds", t.token_budget_seconds},
                   {"lr", t.lr},
                   {"warmup_frac", t.warmup_frac},
                   {"weight_decay", t.weight_decay},
                   {"beta1", t.beta1},
                   {"beta2", t.beta2},
                   {"adam_eps", t.adam_eps},
                   {"mask", {{"span", t.mask.span}, {"prob", t.mask.prob}}},
                   {"target_layers", tl},
                   {"normalize_targets", t.normalize_targets},
                   {"loss", to_string(t.loss)},
                   {"smooth_l1_beta", t.smooth_l1_beta},
                   {"tau_start", t.tau_start},
                   {"tau_end", t.tau_end},
                   {"tau_anneal_frac", t.tau_anneal_frac},
                   {"masked_only", t.masked_only},
                   {"unmasked_weight", t.unmasked_weight},
                   {"head_dim", t.head_dim},
                   {"temperature", t.temperature},
                   {"checkpoint_every", t.checkpoint_every},
                   {"iterations", t.iterations}};
  j["probe"] = {{"hidden", p.probe.hidden},
                {"lr", p.probe.lr},
                {"epochs", p.probe.epochs},
                {"batch_size", p.probe.batch_size},
                {"patience", p.probe.patience},
                {"weight_decay", p.probe.weight_decay},
                {"window_seconds", p.window.window_seconds},
                {"hop_seconds", p.window.hop_seconds}};
  j["metrics"] = {{"beat_tolerance", m.beat_tolerance},
                  {"bidirectional_fifth", m.key.bidirectional_fifth},
                  {"dbn",
                   {{"min_bpm", m.dbn.min_bpm},
                    {"max_bpm", m.dbn.max_bpm},
                    {"transition_lambda", m.dbn.transition_lambda},
                    {"observation_lambda", m.dbn.observation_lambda},
                    {"threshold", m.dbn.threshold},
                    {"correct", m.dbn.correct}}}};
  return j.dump(2);
}

std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(to_json(cfg))); }

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
  try {
    return parse_config(ckpt.config_json);
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
}

Encoder encoder_from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = config_from_checkpoint(ckpt);
  Encoder enc(cfg.encoder, cfg.seed);
  ckpt.restore(enc.params(), "encoder/", false);
  return enc;
}

}  // namespace musicssl
