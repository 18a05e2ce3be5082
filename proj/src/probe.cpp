#include "musicssl/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "musicssl/common.hpp"
#include "musicssl/metrics.hpp"

namespace musicssl {

namespace {

constexpr std::uint32_t kProbeVersion = 1;

std::vector<float> torch_linear_init(std::size_t n, std::size_t fan_in, std::mt19937_64& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> ud(-b, b);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(ud(rng));
  return v;
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

std::string to_string(ProbeTask t) {
  switch (t) {
    case ProbeTask::kMulticlass: return "multiclass";
    case ProbeTask::kMultilabel: return "multilabel";
    case ProbeTask::kRegression: return "regression";
    case ProbeTask::kFramewise: return "framewise";
  }
  return "?";
}

ProbeTask probe_task_from_string(const std::string& s) {
  for (auto t : {ProbeTask::kMulticlass, ProbeTask::kMultilabel, ProbeTask::kRegression, ProbeTask::kFramewise})
    if (to_string(t) == s) return t;
  throw UsageError("unknown probe task '" + s + "'");
}

void WindowPolicy::validate() const {
  if (!(window_seconds > 0) || !(hop_seconds > 0)) throw UsageError("probe window and hop must be positive");
}

void ProbeConfig::validate() const {
  if (outputs < 1) throw UsageError("probe needs at least one output");
  if (task == ProbeTask::kMulticlass && outputs < 2) throw UsageError("multiclass probe needs >= 2 classes");
  if (task == ProbeTask::kFramewise && outputs != 1) throw UsageError("framewise probe has exactly one output");
  if (hidden < 1) throw UsageError("probe.hidden must be >= 1");
  if (!(lr > 0)) throw UsageError("probe.lr must be positive");
  if (epochs < 1 || batch_size < 1 || patience < 1)
    throw UsageError("probe.epochs, probe.batch_size and probe.patience must be >= 1");
  if (weight_decay < 0) throw UsageError("probe.weight_decay must be >= 0");
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

LayerEmbeddings extract_layer_embeddings(Encoder& enc, const AudioClip& clip, const WindowPolicy& policy) {
  policy.validate();
  const int sr = enc.config().sample_rate;
  if (clip.sample_rate != sr) throw DataError("probe audio must be 16 kHz");
  const std::size_t len = clip.samples.size();
  const auto win = static_cast<std::size_t>(std::llround(policy.window_seconds * sr));
  const auto hop = static_cast<std::size_t>(std::llround(policy.hop_seconds * sr));
  std::vector<std::size_t> starts;
  if (len <= win) {
    starts.push_back(0);
  } else {
    for (std::size_t s = 0; s + win <= len; s += hop) starts.push_back(s);
  }
  const std::size_t span = std::min(win, len);
  const std::size_t layers = static_cast<std::size_t>(enc.config().layers) + 1;
  const std::size_t dims = static_cast<std::size_t>(enc.config().hidden);
  std::vector<double> acc(layers * dims, 0.0);
  for (auto s : starts) {
    Tape tape(false);
    auto out = enc.forward(tape, std::span(clip.samples.data() + s, span));
    const std::size_t t = out.frames();
    for (std::size_t l = 0; l < layers; ++l) {
      const auto v = out.layers[l].value();
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t h = 0; h < dims; ++h) acc[h * layers + l] += v[r * dims + h] / static_cast<double>(t);
    }
  }
  LayerEmbeddings e{1, layers, dims, std::vector<float>(layers * dims)};
  for (std::size_t i = 0; i < acc.size(); ++i) e.values[i] = static_cast<float>(acc[i] / starts.size());
  return e;
}

LayerEmbeddings extract_frame_embeddings(Encoder& enc, const AudioClip& clip) {
  if (clip.sample_rate != enc.config().sample_rate) throw DataError("probe audio must be 16 kHz");
  Tape tape(false);
  auto out = enc.forward(tape, clip.samples);
  const std::size_t t = out.frames(), layers = out.layers.size(), dims = enc.config().hidden;
  LayerEmbeddings e{t, layers, dims, std::vector<float>(t * layers * dims)};
  for (std::size_t l = 0; l < layers; ++l) {
    const auto v = out.layers[l].value();
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t h = 0; h < dims; ++h) e.values[(r * dims + h) * layers + l] = v[r * dims + h];
  }
  return e;
}

std::vector<float> weighted_features(const LayerEmbeddings& e, std::span<const float> raw_weights) {
  if (raw_weights.size() != e.layers)
    throw std::invalid_argument("layer weight count " + std::to_string(raw_weights.size()) +
                                " does not match " + std::to_string(e.layers) + " layers");
  const float mx = *std::max_element(raw_weights.begin(), raw_weights.end());
  std::vector<double> w(e.layers);
  double z = 0.0;
  for (std::size_t l = 0; l < e.layers; ++l) z += (w[l] = std::exp(static_cast<double>(raw_weights[l]) - mx));
  std::vector<float> out(e.frames * e.dims);
  for (std::size_t t = 0; t < e.frames; ++t)
    for (std::size_t h = 0; h < e.dims; ++h) {
      double s = 0.0;
      for (std::size_t l = 0; l < e.layers; ++l) s += w[l] / z * e.at(t, l, h);
      out[t * e.dims + h] = static_cast<float>(s);
    }
  return out;
}

std::vector<float> framewise_probe_targets(std::span<const double> beats, std::size_t frames,
                                           double frame_rate) {
  std::vector<float> y(frames, 0.0f);
  for (double b : beats) {
    const auto c = static_cast<long long>(std::llround(b * frame_rate));
    for (long long f = c - 1; f <= c + 1; ++f)
      if (f >= 0 && f < static_cast<long long>(frames)) y[static_cast<std::size_t>(f)] = 1.0f;
  }
  return y;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

ProbeModel::ProbeModel(const ProbeConfig& cfg, std::size_t layers, std::size_t dims)
    : cfg_(cfg), layers_(layers), dims_(dims) {
  cfg_.validate();
  std::mt19937_64 rng(mix64(cfg_.seed ^ 0x70726f6265ULL));
  const auto hid = static_cast<std::size_t>(cfg_.hidden), out = static_cast<std::size_t>(cfg_.outputs);
  params_.add("probe.layer_w", {layers}, std::vector<float>(layers, 0.0f));
  params_.add("probe.fc1.weight", {dims, hid}, torch_linear_init(dims * hid, dims, rng));
  params_.add("probe.fc1.bias", {hid}, torch_linear_init(hid, dims, rng));
  params_.add("probe.fc2.weight", {hid, out}, torch_linear_init(hid * out, hid, rng));
  params_.add("probe.fc2.bias", {out}, torch_linear_init(out, hid, rng));
}

std::vector<float> ProbeModel::layer_weights() const {
  const auto& w = params_.at("probe.layer_w").value;
  LayerEmbeddings one{1, layers_, 1, std::vector<float>(layers_, 0.0f)};
  std::vector<float> out(layers_);
  for (std::size_t l = 0; l < layers_; ++l) {
    std::fill(one.values.begin(), one.values.end(), 0.0f);
    one.values[l] = 1.0f;
    out[l] = weighted_features(one, w)[0];
  }
  return out;
}

Var ProbeModel::forward(Tape& tape, const std::vector<const LayerEmbeddings*>& xs) {
  std::size_t rows = 0;
  for (const auto* x : xs) {
    if (x->layers != layers_ || x->dims != dims_)
      throw DataError("probe input has " + std::to_string(x->layers) + "x" + std::to_string(x->dims) +
                      " features, model expects " + std::to_string(layers_) + "x" + std::to_string(dims_));
    rows += x->frames;
  }
  std::vector<float> flat;
  flat.reserve(rows * dims_ * layers_);
  for (const auto* x : xs) flat.insert(flat.end(), x->values.begin(), x->values.end());
  auto x = tape.constant({rows, dims_, layers_}, std::move(flat));
  auto w = ad::reshape(ad::softmax(ad::reshape(tape.param(params_.at("probe.layer_w")), {1, layers_})), {layers_, 1});
  auto feats = ad::reshape(ad::matmul(x, w), {rows, dims_});
  auto h = ad::relu(ad::add(ad::matmul(feats, tape.param(params_.at("probe.fc1.weight"))),
                            tape.param(params_.at("probe.fc1.bias"))));
  return ad::add(ad::matmul(h, tape.param(params_.at("probe.fc2.weight"))), tape.param(params_.at("probe.fc2.bias")));
}

std::vector<float> ProbeModel::predict(const LayerEmbeddings& x) {
  Tape tape(false);
  auto out = forward(tape, {&x});
  std::vector<float> v(out.value().begin(), out.value().end());
  const std::size_t k = static_cast<std::size_t>(cfg_.outputs);
  switch (cfg_.task) {
    case ProbeTask::kMulticlass:
      for (std::size_t r = 0; r < x.frames; ++r) {
        float* row = v.data() + r * k;
        const float mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        for (std::size_t j = 0; j < k; ++j) row[j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / z);
      }
      break;
    case ProbeTask::kMultilabel:
    case ProbeTask::kFramewise:
      for (auto& s : v) s = static_cast<float>(sigmoid(s));
      break;
    case ProbeTask::kRegression: break;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

Var probe_loss(ProbeModel& m, Tape& tape, const std::vector<const ProbeExample*>& batch) {
  std::vector<const LayerEmbeddings*> xs;
  std::vector<float> y;
  for (const auto* e : batch) {
    xs.push_back(&e->x);
    y.insert(y.end(), e->y.begin(), e->y.end());
  }
  auto out = m.forward(tape, xs);
  switch (m.config().task) {
    case ProbeTask::kMulticlass: {
      std::vector<std::uint32_t> ids(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) ids[i] = static_cast<std::uint32_t>(y[i]);
      return ad::cross_entropy<float>(out, ids);
    }
    case ProbeTask::kMultilabel:
    case ProbeTask::kFramewise:
      return ad::bce_with_logits(out, tape.constant(out.shape(), std::move(y)));
    case ProbeTask::kRegression:
      return ad::mse(out, tape.constant(out.shape(), std::move(y)));
  }
  throw std::logic_error("unreachable");
}

void check_example(const ProbeExample& e, const ProbeConfig& cfg) {
  const std::size_t k = static_cast<std::size_t>(cfg.outputs);
  const std::size_t want = cfg.task == ProbeTask::kMulticlass ? e.x.frames : e.x.frames * k;
  if (e.y.size() != want) throw DataError("probe example label size does not match its features");
  if (cfg.task == ProbeTask::kMulticlass)
    for (float c : e.y)
      if (c < 0 || c >= static_cast<float>(k) || c != std::floor(c)) throw DataError("class label out of range");
}

}  // namespace

double probe_metric(ProbeModel& model, const std::vector<ProbeExample>& data) {
  const auto& cfg = model.config();
  const std::size_t k = static_cast<std::size_t>(cfg.outputs);
  std::vector<float> scores, labels;
  for (const auto& e : data) {
    const auto p = model.predict(e.x);
    scores.insert(scores.end(), p.begin(), p.end());
    labels.insert(labels.end(), e.y.begin(), e.y.end());
  }
  switch (cfg.task) {
    case ProbeTask::kMulticlass: {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto* row = scores.data() + i * k;
        hit += static_cast<std::size_t>(std::max_element(row, row + k) - row) == static_cast<std::size_t>(labels[i]);
      }
      return static_cast<double>(hit) / static_cast<double>(labels.size());
    }
    case ProbeTask::kMultilabel: {
      std::vector<double> s(scores.begin(), scores.end());
      std::vector<std::uint8_t> l(labels.size());
      for (std::size_t i = 0; i < l.size(); ++i) l[i] = labels[i] > 0.5f;
      try {
        return roc_auc_macro(s, l, k).value;
      } catch (const DataError&) {
        break;  // no tag with both classes: fall back to the likelihood
      }
    }
    [[fallthrough]];
    case ProbeTask::kFramewise: {
      double bce = 0.0;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        const double p = std::clamp(static_cast<double>(scores[i]), 1e-7, 1.0 - 1e-7);
        bce -= labels[i] > 0.5f ? std::log(p) : std::log(1.0 - p);
      }
      return -bce / static_cast<double>(scores.size());
    }
    case ProbeTask::kRegression: {
      double sum = 0.0;
      int used = 0;
      for (std::size_t j = 0; j < k; ++j) {
        std::vector<double> p, y;
        for (std::size_t i = j; i < scores.size(); i += k) {
          p.push_back(scores[i]);
          y.push_back(labels[i]);
        }
        try {
          sum += r2(p, y);
          ++used;
        } catch (const DataError&) {
        }
      }
      if (used > 0) return sum / used;
      double mse = 0.0;
      for (std::size_t i = 0; i < scores.size(); ++i) mse += std::pow(scores[i] - labels[i], 2);
      return -mse / static_cast<double>(scores.size());
    }
  }
  throw std::logic_error("unreachable");
}

ProbeTrainResult train_probe(const std::vector<ProbeExample>& train, const std::vector<ProbeExample>& valid,
                             const ProbeConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("probe training split is empty");
  if (valid.empty()) throw DataError("probe validation split is empty");
  for (const auto* set : {&train, &valid})
    for (const auto& e : *set) check_example(e, cfg);
  ProbeTrainResult res;
  res.model = ProbeModel(cfg, train[0].x.layers, train[0].x.dims);
  ProbeModel& m = res.model;
  auto params = m.params().all();
  std::vector<std::vector<float>> best;
  res.best_valid = -std::numeric_limits<double>::infinity();
  ad::AdamOptions opt{.lr = cfg.lr, .weight_decay = cfg.weight_decay};
  std::int64_t step = 0;
  int since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix64(cfg.seed ^ mix64(static_cast<std::uint64_t>(epoch))));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(unit_from_hash(rng()) * static_cast<double>(i))]);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<const ProbeExample*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&train[order[i]]);
      m.params().zero_grad();
      Tape tape;
      tape.backward(probe_loss(m, tape, batch));
      ad::adam_step<float>(params, opt, ++step);
    }
    const double metric = probe_metric(m, valid);
    res.valid_curve.push_back(metric);
    if (metric > res.best_valid) {
      res.best_valid = metric;
      res.best_epoch = epoch;
      best.clear();
      for (const auto* p : params) best.push_back(p->value);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  return res;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

void save_probe(const ProbeModel& m, const std::string& encoder_hash, const std::filesystem::path& path) {
  const auto& c = m.config();
  nlohmann::ordered_json j = {{"task", to_string(c.task)}, {"outputs", c.outputs}, {"hidden", c.hidden},
                              {"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
                              {"patience", c.patience}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
  BinaryWriter w(path);
  w.magic("SSLP");
  w.u32(kProbeVersion);
  w.str(j.dump());
  w.str(encoder_hash);
  w.u64(m.layers());
  w.u64(m.dims());
  const auto ps = m.params().all();
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (const auto* p : ps) {
    w.str(p->name);
    w.u64(p->value.size());
    w.f32s(p->value);
  }
  w.close();
}

ProbeModel load_probe(const std::filesystem::path& path, std::string* encoder_hash) {
  BinaryReader r(path);
  r.expect_magic("SSLP");
  if (r.u32() != kProbeVersion) throw DataError("unsupported probe version in " + path.string());
  ProbeConfig c;
  try {
    const auto j = nlohmann::json::parse(r.str());
    c.task = probe_task_from_string(j.at("task").get<std::string>());
    c.outputs = j.at("outputs").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.lr = j.at("lr").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.patience = j.at("patience").get<int>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt probe config in " + path.string() + ": " + e.what());
  }
  const auto hash = r.str();
  if (encoder_hash) *encoder_hash = hash;
  const auto layers = r.u64(), dims = r.u64();
  ProbeModel m(c, layers, dims);
  const auto n = r.u32();
  if (n != m.params().count()) throw DataError("probe parameter count mismatch in " + path.string());
  for (std::uint32_t i = 0; i < n; ++i) {
    auto& p = m.params().at(r.str());
    const auto size = r.u64();
    if (size != p.value.size()) throw DataError("probe parameter size mismatch in " + path.string());
    p.value = r.f32s(size);
  }
  if (!r.at_end()) throw DataError("trailing bytes in probe file " + path.string());
  return m;
}

}  // namespace musicssl
