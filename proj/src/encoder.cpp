#include "musicssl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<float> normal_init(std::size_t n, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(nd(rng));
  return v;
}

std::vector<float> uniform_init(std::size_t n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ud(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(ud(rng));
  return v;
}

void add_linear(ParamSet& ps, const std::string& name, int in, int out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / (in + out));
  const auto n = static_cast<std::size_t>(in) * out;
  ps.add(name + ".weight", {std::size_t(in), std::size_t(out)}, uniform_init(n, -bound, bound, rng));
  ps.add(name + ".bias", {std::size_t(out)}, std::vector<float>(out, 0.0f));
}

void add_norm(ParamSet& ps, const std::string& name, int dim) {
  ps.add(name + ".gamma", {std::size_t(dim)}, std::vector<float>(dim, 1.0f));
  ps.add(name + ".beta", {std::size_t(dim)}, std::vector<float>(dim, 0.0f));
}

Var apply_linear(Tape& tape, ParamSet& ps, Var x, const std::string& name) {
  return ad::add(ad::matmul(x, tape.param(ps.at(name + ".weight"))), tape.param(ps.at(name + ".bias")));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
  if (conv.empty()) throw UsageError("encoder.conv must list at least one layer");
  for (const auto& c : conv)
    if (c.channels < 1 || c.kernel < 1 || c.stride < 1)
      throw UsageError("encoder.conv entries need positive channels, kernel and stride");
  if (layers < 0) throw UsageError("encoder.layers must be >= 0");
  if (hidden < 1 || heads < 1 || hidden % heads != 0)
    throw UsageError("encoder.hidden must be a positive multiple of encoder.heads");
  if (ff_dim < 1) throw UsageError("encoder.ff_dim must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("encoder.dropout must lie in [0, 1)");
  if (max_positions < 1) throw UsageError("encoder.max_positions must be positive");
  if (sample_rate != 16000) throw UsageError("encoder.sample_rate must be 16000");
  if (sample_rate % total_stride() != 0)
    throw UsageError("product of conv strides must divide the sample rate");
}

int EncoderConfig::total_stride() const {
  int s = 1;
  for (const auto& c : conv) s *= c.stride;
  return s;
}

int EncoderConfig::receptive_field() const {
  int rf = 1, jump = 1;
  for (const auto& c : conv) {
    rf += (c.kernel - 1) * jump;
    jump *= c.stride;
  }
  return rf;
}

std::size_t EncoderConfig::frames_for(std::size_t samples) const {
  std::size_t t = samples;
  for (const auto& c : conv) {
    if (t < static_cast<std::size_t>(c.kernel)) return 0;
    t = (t - c.kernel) / c.stride + 1;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

void MaskSpec::validate() const {
  if (span < 1) throw UsageError("mask.span must be >= 1");
  if (!(prob >= 0.0 && prob <= 1.0)) throw UsageError("mask.prob must lie in [0, 1]");
}

std::size_t MaskSpec::n_starts(std::size_t frames) const {
  if (frames < static_cast<std::size_t>(span)) return 0;
  // The epsilon keeps exact products such as 0.65 * 1000 / 10 from rounding down.
  const auto n = static_cast<std::size_t>(std::floor(prob * frames / span + 1e-9));
  return std::min(n, frames - span + 1);
}

std::size_t MaskDraw::count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

MaskDraw sample_mask(std::size_t frames, const MaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  MaskDraw d;
  d.mask.assign(frames, false);
  const std::size_t n = spec.n_starts(frames);
  if (n == 0) return d;
  const std::size_t valid = frames - spec.span + 1;
  std::vector<std::size_t> pool(valid);
  std::iota(pool.begin(), pool.end(), 0);
  std::mt19937_64 rng(mix64(seed));
  // Partial Fisher-Yates: the first n entries are a uniform n-subset.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, valid - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  d.starts.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(d.starts.begin(), d.starts.end());
  for (auto s : d.starts)
    for (int j = 0; j < spec.span; ++j) d.mask[s + j] = true;
  return d;
}

double expected_mask_coverage(std::size_t frames, const MaskSpec& spec) {
  const std::size_t n = spec.n_starts(frames);
  if (n == 0) return 0.0;
  const std::size_t span = spec.span, valid = frames - span + 1;
  double total = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t lo = f + 1 >= span ? f + 1 - span : 0;
    const std::size_t hi = std::min(f, valid - 1);
    const std::size_t covering = hi - lo + 1;
    // P(no chosen start covers f) = C(valid - covering, n) / C(valid, n).
    double miss = 1.0;
    for (std::size_t i = 0; i < n && miss > 0.0; ++i)
      miss *= valid - covering >= i + 1 ? static_cast<double>(valid - covering - i) / (valid - i) : 0.0;
    total += 1.0 - miss;
  }
  return total;
}

// ---------------------------------------------------------------------------
// ParamSet
// ---------------------------------------------------------------------------

Param& ParamSet::add(std::string name, ad::Shape shape, std::vector<float> init) {
  if (by_name_.count(name)) throw std::logic_error("duplicate parameter name " + name);
  auto p = std::make_unique<Param>(name, std::move(shape), std::move(init));
  auto* raw = p.get();
  order_.push_back(std::move(p));
  by_name_[raw->name] = raw;
  return *raw;
}

Param& ParamSet::at(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter " + name);
  return *it->second;
}

const Param& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::vector<Param*> ParamSet::all() {
  std::vector<Param*> out;
  for (auto& p : order_) out.push_back(p.get());
  return out;
}

std::vector<const Param*> ParamSet::all() const {
  std::vector<const Param*> out;
  for (const auto& p : order_) out.push_back(p.get());
  return out;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& p : order_) n += p->value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : order_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(mix64(seed ^ 0x656e636f646572ULL));
  int cin = 1;
  for (std::size_t i = 0; i < cfg_.conv.size(); ++i) {
    const auto& c = cfg_.conv[i];
    const std::string name = "conv." + std::to_string(i);
    const std::size_t fan_in = static_cast<std::size_t>(c.kernel) * cin;
    params_.add(name + ".weight", {std::size_t(c.kernel), std::size_t(cin), std::size_t(c.channels)},
                normal_init(fan_in * c.channels, std::sqrt(2.0 / fan_in), rng));
    add_norm(params_, name + ".ln", c.channels);
    cin = c.channels;
  }
  const int h = cfg_.hidden;
  add_norm(params_, "feat_ln", cin);
  add_linear(params_, "proj", cin, h, rng);
  params_.add("mask_emb", {std::size_t(h)}, uniform_init(h, 0.0, 1.0, rng));
  params_.add("pos_emb", {std::size_t(cfg_.max_positions), std::size_t(h)},
              normal_init(static_cast<std::size_t>(cfg_.max_positions) * h, 0.02, rng));
  add_norm(params_, "enc_ln", h);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer." + std::to_string(l);
    for (const char* m : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) add_linear(params_, p + m, h, h, rng);
    add_norm(params_, p + ".ln1", h);
    add_linear(params_, p + ".ff1", h, cfg_.ff_dim, rng);
    add_linear(params_, p + ".ff2", cfg_.ff_dim, h, rng);
    add_norm(params_, p + ".ln2", h);
  }
}

Var Encoder::linear(Tape& tape, Var x, const std::string& name) {
  return apply_linear(tape, params_, x, name);
}

Var Encoder::layer_norm(Tape& tape, Var x, const std::string& name) {
  return ad::layer_norm(x, std::optional(tape.param(params_.at(name + ".gamma"))),
                        std::optional(tape.param(params_.at(name + ".beta"))));
}

Var Encoder::frontend(Tape& tape, std::span<const float> wave) {
  const auto rf = static_cast<std::size_t>(cfg_.receptive_field());
  if (wave.size() < rf)
    throw DataError("input of " + std::to_string(wave.size()) + " samples is shorter than the encoder receptive field (" +
                    std::to_string(rf) + ")");
  std::vector<float> x(wave.begin(), wave.end());
  if (cfg_.normalize_waveform) {
    double mu = 0.0, var = 0.0;
    for (float v : x) mu += v;
    mu /= static_cast<double>(x.size());
    for (float v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (auto& v : x) v = static_cast<float>((v - mu) * inv);
  }
  const std::size_t n = x.size();
  Var h = tape.constant({n, 1}, std::move(x));
  for (std::size_t i = 0; i < cfg_.conv.size(); ++i) {
    const std::string name = "conv." + std::to_string(i);
    h = ad::conv1d<float>(h, tape.param(params_.at(name + ".weight")), std::nullopt,
                          static_cast<std::size_t>(cfg_.conv[i].stride));
    h = ad::gelu(layer_norm(tape, h, name + ".ln"));
  }
  return linear(tape, layer_norm(tape, h, "feat_ln"), "proj");
}

Var Encoder::attention(Tape& tape, Var x, int layer, const ForwardOptions& opt) {
  const std::string p = "layer." + std::to_string(layer) + ".attn";
  const std::size_t t = x.dim(0), h = cfg_.hidden, nh = cfg_.heads, dh = h / nh;
  auto split = [&](Var v) { return ad::transpose(ad::reshape(v, {t, nh, dh}), 0, 1); };
  auto q = ad::scale(split(linear(tape, x, p + ".q")), 1.0f / std::sqrt(static_cast<float>(dh)));
  auto k = split(linear(tape, x, p + ".k"));
  auto v = split(linear(tape, x, p + ".v"));
  auto probs = ad::softmax(ad::bmm(q, k, true));
  if (opt.train && cfg_.dropout > 0)
    probs = ad::dropout(probs, cfg_.dropout, mix64(opt.dropout_seed ^ (layer * 16 + 1)));
  auto ctx = ad::reshape(ad::transpose(ad::bmm(probs, v), 0, 1), {t, h});
  return linear(tape, ctx, p + ".o");
}

EncoderOutput Encoder::forward(Tape& tape, std::span<const float> wave, const ForwardOptions& opt) {
  EncoderOutput out;
  Var x = frontend(tape, wave);
  const std::size_t t = x.dim(0);
  if (t > static_cast<std::size_t>(cfg_.max_positions))
    throw DataError("input yields " + std::to_string(t) + " frames, more than encoder.max_positions");
  if (opt.mask) {
    if (opt.mask->size() != t) throw std::invalid_argument("mask length does not match frame count");
    out.mask = *opt.mask;
    x = ad::replace_rows(x, out.mask, tape.param(params_.at("mask_emb")));
  } else {
    out.mask.assign(t, false);
  }
  auto pos = ad::slice(tape.param(params_.at("pos_emb")), 0, 0, t);
  x = layer_norm(tape, ad::add(x, pos), "enc_ln");
  const bool drop = opt.train && cfg_.dropout > 0;
  auto maybe_drop = [&](Var v, std::uint64_t site) {
    return drop ? ad::dropout(v, cfg_.dropout, mix64(opt.dropout_seed ^ site)) : v;
  };
  x = maybe_drop(x, 0xfeed);
  out.layers.push_back(x);
  const int last = opt.stop_after_layer < 0 ? cfg_.layers : std::min(opt.stop_after_layer, cfg_.layers);
  for (int l = 0; l < last; ++l) {
    const std::string p = "layer." + std::to_string(l);
    const std::uint64_t site = static_cast<std::uint64_t>(l) * 16;
    x = layer_norm(tape, ad::add(x, maybe_drop(attention(tape, x, l, opt), site + 2)), p + ".ln1");
    auto ff = linear(tape, ad::gelu(linear(tape, x, p + ".ff1")), p + ".ff2");
    x = layer_norm(tape, ad::add(x, maybe_drop(ff, site + 3)), p + ".ln2");
    out.layers.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

DiscreteHead::DiscreteHead(int hidden, int proj_dim, int k, double temperature, std::uint64_t seed)
    : k_(k), temperature_(temperature) {
  if (k < 2) throw UsageError("discrete head needs K >= 2");
  if (!(temperature > 0)) throw UsageError("discrete head temperature must be positive");
  if (proj_dim < 1) throw UsageError("discrete head projection dim must be positive");
  std::mt19937_64 rng(mix64(seed ^ 0x6865616444ULL));
  add_linear(params_, "head.proj", hidden, proj_dim, rng);
  // Positive codes start nearly collinear, so initial logits are close to uniform.
  params_.add("head.codes", {std::size_t(k), std::size_t(proj_dim)},
              uniform_init(static_cast<std::size_t>(k) * proj_dim, 0.0, 1.0, rng));
}

Var DiscreteHead::logits(Tape& tape, Var h) {
  auto z = ad::normalize_rows(apply_linear(tape, params_, h, "head.proj"));
  auto codes = ad::normalize_rows(tape.param(params_.at("head.codes")));
  return ad::scale(ad::matmul(z, ad::transpose(codes, 0, 1)), static_cast<float>(1.0 / temperature_));
}

RegressionHead::RegressionHead(int hidden, std::uint64_t seed) {
  std::mt19937_64 rng(mix64(seed ^ 0x6865616452ULL));
  add_linear(params_, "head.reg", hidden, hidden, rng);
}

Var RegressionHead::predict(Tape& tape, Var h) { return apply_linear(tape, params_, h, "head.reg"); }

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

std::vector<float> teacher_targets(const EncoderOutput& out, std::optional<int> top_k, bool normalize) {
  const int layers = static_cast<int>(out.layers.size()) - 1;
  if (layers < 1) throw UsageError("teacher targets need at least one transformer layer");
  const int k = top_k.value_or(layers);
  if (k < 1 || k > layers)
    throw UsageError("target_layers=" + std::to_string(k) + " outside [1, " + std::to_string(layers) + "]");
  const std::size_t t = out.layers[0].dim(0), h = out.layers[0].dim(1);
  std::vector<double> acc(t * h, 0.0);
  std::vector<double> row(h);
  for (int l = layers - k + 1; l <= layers; ++l) {
    const auto v = out.layers[l].value();
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t j = 0; j < h; ++j) row[j] = v[r * h + j];
      if (normalize) {
        double mu = 0.0, var = 0.0;
        for (double x : row) mu += x;
        mu /= static_cast<double>(h);
        for (double x : row) var += (x - mu) * (x - mu);
        const double inv = 1.0 / std::sqrt(var / static_cast<double>(h) + 1e-5);
        for (auto& x : row) x = (x - mu) * inv;
      }
      for (std::size_t j = 0; j < h; ++j) acc[r * h + j] += row[j];
    }
  }
  std::vector<float> targets(t * h);
  for (std::size_t i = 0; i < acc.size(); ++i) targets[i] = static_cast<float>(acc[i] / k);
  return targets;
}

namespace {

void require_same_layout(const ParamSet& a, const ParamSet& b) {
  const auto pa = a.all(), pb = b.all();
  if (pa.size() != pb.size()) throw DataError("parameter sets differ in size");
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->name != pb[i]->name || pa[i]->shape != pb[i]->shape)
      throw DataError("parameter mismatch at " + pa[i]->name);
}

}  // namespace

void ema_update(ParamSet& teacher, const ParamSet& student, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("EMA decay must lie in [0, 1]");
  require_same_layout(teacher, student);
  const float a = static_cast<float>(tau), b = static_cast<float>(1.0 - tau);
  auto ts = teacher.all();
  auto ss = student.all();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    auto& tv = ts[i]->value;
    const auto& sv = ss[i]->value;
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = a * tv[j] + b * sv[j];
  }
}

double param_distance(const ParamSet& a, const ParamSet& b) {
  require_same_layout(a, b);
  const auto pa = a.all(), pb = b.all();
  double s = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i]->value.size(); ++j) {
      const double d = static_cast<double>(pa[i]->value[j]) - pb[i]->value[j];
      s += d * d;
    }
  return std::sqrt(s);
}

std::uint64_t param_hash(const ParamSet& p) {
  std::uint64_t h = fnv1a64(std::string_view("params"));
  for (const auto* q : p.all()) {
    h = fnv1a64(q->name, h);
    h = fnv1a64(std::as_bytes(std::span(q->shape)), h);
    h = fnv1a64(std::as_bytes(std::span(q->value)), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void Checkpoint::store(const ParamSet& params, const std::string& prefix, bool with_moments) {
  for (const auto* p : params.all()) {
    tensors.push_back({prefix + p->name, p->shape, p->value});
    if (with_moments) {
      tensors.push_back({"adam.m/" + prefix + p->name, p->shape, p->m});
      tensors.push_back({"adam.v/" + prefix + p->name, p->shape, p->v});
    }
  }
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
}

void Checkpoint::restore(ParamSet& params, const std::string& prefix, bool with_moments) const {
  std::map<std::string, const TensorRecord*> index;
  for (const auto& t : tensors) index[t.name] = &t;
  auto fetch = [&](const std::string& name, const ad::Shape& shape) -> const std::vector<float>& {
    auto it = index.find(name);
    if (it == index.end()) throw DataError("checkpoint lacks tensor " + name);
    if (it->second->shape != shape)
      throw DataError("checkpoint tensor " + name + " has shape " + ad::to_string(it->second->shape) +
                      ", model expects " + ad::to_string(shape));
    return it->second->data;
  };
  for (auto* p : params.all()) {
    p->value = fetch(prefix + p->name, p->shape);
    if (with_moments) {
      p->m = fetch("adam.m/" + prefix + p->name, p->shape);
      p->v = fetch("adam.v/" + prefix + p->name, p->shape);
    }
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic("SSLC");
  w.u32(kCheckpointVersion);
  w.str(ckpt.config_json);
  w.str(ckpt.paradigm);
  w.u64(ckpt.step);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    w.f32s(t.data);
  }
  w.close();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("SSLC");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(v) + " in " + path.string());
  Checkpoint c;
  c.config_json = r.str();
  c.paradigm = r.str();
  c.step = r.u64();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorRecord t;
    t.name = r.str();
    const auto rank = r.u32();
    if (rank > 8) throw DataError("corrupt tensor rank in " + path.string());
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.u64());
    const auto count = ad::numel(t.shape);
    if (count > (std::size_t{1} << 32)) throw DataError("corrupt tensor size in " + path.string());
    t.data = r.f32s(count);
    c.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw DataError("trailing bytes in checkpoint " + path.string());
  return c;
}

}  // namespace musicssl
