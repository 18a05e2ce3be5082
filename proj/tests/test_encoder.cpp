#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "musicssl/common.hpp"
#include "musicssl/encoder.hpp"
#include "oracles.hpp"

using namespace musicssl;
namespace fs = std::filesystem;

namespace {

std::vector<float> wave(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 0.3f);
  std::vector<float> w(n);
  for (auto& x : w) x = nd(rng);
  return w;
}

EncoderConfig small(int layers = 2) {
  EncoderConfig c;
  c.layers = layers;
  return c;
}

}  // namespace

TEST_CASE("frame geometry follows the conv stack") {
  const EncoderConfig c;
  CHECK(c.total_stride() == 320);
  CHECK(c.receptive_field() == 400);
  CHECK(c.frame_rate() == doctest::Approx(50.0));
  for (std::size_t n : {0u, 399u, 400u, 719u, 720u, 16000u, 32000u, 48123u}) {
    // Walk the stack layer by layer.
    long len = static_cast<long>(n);
    for (const auto& s : c.conv) len = len < s.kernel ? 0 : (len - s.kernel) / s.stride + 1;
    CAPTURE(n);
    CHECK(c.frames_for(n) == static_cast<std::size_t>(len));
  }
  CHECK(c.frames_for(16000) == 49);
  CHECK(c.frames_for(32000) == 99);

  Encoder enc(c, 1);
  Tape tape(false);
  const auto w = wave(16000, 1);
  const auto out = enc.forward(tape, w);
  CHECK(out.frames() == 49);
  CHECK(out.layers.size() == 3);
  for (const auto& l : out.layers) CHECK(l.shape() == ad::Shape{49, 64});
}

TEST_CASE("mask draws: start count, span coverage, expectation") {
  MaskSpec spec;
  CHECK(spec.n_starts(1000) == 65);
  CHECK(spec.n_starts(49) == 3);
  CHECK(spec.n_starts(9) == 0);
  CHECK(expected_mask_coverage(1000, spec) == doctest::Approx(oracle::mask_coverage(1000, 10, 65)).epsilon(1e-9));
  CHECK(expected_mask_coverage(49, spec) == doctest::Approx(oracle::mask_coverage(49, 10, 3)).epsilon(1e-9));

  double total = 0.0;
  const int draws = 2000;
  for (int s = 0; s < draws; ++s) {
    const auto d = sample_mask(1000, spec, static_cast<std::uint64_t>(s));
    REQUIRE(d.starts.size() == 65);
    for (std::size_t i = 1; i < d.starts.size(); ++i) REQUIRE(d.starts[i] > d.starts[i - 1]);
    REQUIRE(d.starts.back() <= 990);
    std::vector<bool> expect(1000, false);
    for (auto st : d.starts)
      for (int j = 0; j < 10; ++j) expect[st + j] = true;
    REQUIRE(d.mask == expect);
    total += static_cast<double>(d.count());
  }
  CHECK(total / draws == doctest::Approx(expected_mask_coverage(1000, spec)).epsilon(0.01));
  CHECK(sample_mask(1000, spec, 5).starts == sample_mask(1000, spec, 5).starts);
  CHECK(sample_mask(5, spec, 1).count() == 0);
}

TEST_CASE("forward: determinism, seeds, prefix layers, L=0") {
  const auto w = wave(16000, 2);
  Encoder a(small(), 3), b(small(), 3), c(small(), 4);
  Tape ta(false), tb(false), tc(false);
  const auto oa = a.forward(ta, w), ob = b.forward(tb, w), oc = c.forward(tc, w);
  const auto va = oa.layers.back().value(), vb = ob.layers.back().value(), vc = oc.layers.back().value();
  CHECK(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
  CHECK_FALSE(std::equal(va.begin(), va.end(), vc.begin(), vc.end()));
  CHECK(param_hash(a.params()) == param_hash(b.params()));
  CHECK(param_hash(a.params()) != param_hash(c.params()));

  Tape tp(false);
  ForwardOptions fo;
  fo.stop_after_layer = 1;
  const auto op = a.forward(tp, w, fo);
  REQUIRE(op.layers.size() == 2);
  const auto p1 = op.layers[1].value(), f1 = oa.layers[1].value();
  CHECK(std::equal(p1.begin(), p1.end(), f1.begin(), f1.end()));

  Encoder zero(small(0), 3);
  Tape tz(false);
  const auto oz = zero.forward(tz, w);
  CHECK(oz.layers.size() == 1);
  CHECK(oz.frames() == 49);
  CHECK_THROWS_AS(teacher_targets(oz, std::nullopt, true), UsageError);
}

TEST_CASE("fully masked inputs do not depend on the waveform") {
  Encoder enc(small(), 5);
  ForwardOptions fo;
  const std::vector<bool> all(49, true);
  fo.mask = &all;
  Tape t1(false), t2(false);
  const auto a = enc.forward(t1, wave(16000, 1), fo), b = enc.forward(t2, wave(16000, 2), fo);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto va = a.layers[l].value(), vb = b.layers[l].value();
    CHECK(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
  }
  const std::vector<bool> wrong(10, true);
  fo.mask = &wrong;
  Tape t3(false);
  CHECK_THROWS(enc.forward(t3, wave(16000, 1), fo));
}

TEST_CASE("discrete head: bounded, scale invariant, near-uniform at init") {
  for (int k : {8, 100, 500}) {
    DiscreteHead head(64, 256, k, 0.1, 7);
    Tape tape(false);
    const auto hv = wave(20 * 64, 9);
    auto h = tape.constant({20, 64}, hv);
    std::vector<float> hs(hv);
    for (auto& x : hs) x *= 3.5f;
    auto h2 = tape.constant({20, 64}, hs);
    const auto l1 = head.logits(tape, h), l2 = head.logits(tape, h2);
    CHECK(l1.shape() == ad::Shape{20, static_cast<std::size_t>(k)});
    for (std::size_t i = 0; i < l1.numel(); ++i) {
      CHECK(std::abs(l1.value()[i]) <= 10.0f + 1e-4f);
      CHECK(l1.value()[i] == doctest::Approx(l2.value()[i]).epsilon(1e-4));
    }
    std::vector<std::uint32_t> targets(20);
    for (std::size_t i = 0; i < 20; ++i) targets[i] = static_cast<std::uint32_t>((i * 7) % k);
    const double ce = ad::cross_entropy(l1, targets).item();
    CAPTURE(k);
    CHECK(std::abs(ce - std::log(static_cast<double>(k))) < 0.1 * std::log(static_cast<double>(k)));
  }
  CHECK_THROWS_AS(DiscreteHead(64, 256, 1, 0.1, 0), UsageError);
}

TEST_CASE("teacher targets: per-layer normalization and top-k averaging") {
  Encoder enc(small(3), 11);
  Tape tape(false);
  const auto out = enc.forward(tape, wave(16000, 3));
  const std::size_t t = out.frames(), h = 64;

  const auto top1 = teacher_targets(out, 1, true);
  for (std::size_t r = 0; r < t; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += top1[r * h + j];
    mu /= h;
    for (std::size_t j = 0; j < h; ++j) var += (top1[r * h + j] - mu) * (top1[r * h + j] - mu);
    CHECK(std::abs(mu) < 1e-5);
    CHECK(var / h == doctest::Approx(1.0).epsilon(1e-3));
  }

  const auto raw2 = teacher_targets(out, 2, false);
  const auto l2 = out.layers[2].value(), l3 = out.layers[3].value();
  for (std::size_t i = 0; i < t * h; ++i) CHECK(raw2[i] == doctest::Approx((l2[i] + l3[i]) / 2.0).epsilon(1e-5));
  const auto all = teacher_targets(out, std::nullopt, false), three = teacher_targets(out, 3, false);
  CHECK(all == three);
  CHECK_THROWS_AS(teacher_targets(out, 4, true), UsageError);
  CHECK_THROWS_AS(teacher_targets(out, 0, true), UsageError);
}

TEST_CASE("EMA: tau=1 keeps, tau=0 copies, tau=0.5 halves the distance") {
  Encoder student(small(), 1);
  Encoder teacher(small(), 2);
  const auto before = param_hash(teacher.params());
  ema_update(teacher.params(), student.params(), 1.0);
  CHECK(param_hash(teacher.params()) == before);

  Encoder t0(small(), 2);
  ema_update(t0.params(), student.params(), 0.0);
  CHECK(param_hash(t0.params()) == param_hash(student.params()));
  CHECK(param_distance(t0.params(), student.params()) == 0.0);

  Encoder half(small(), 2);
  double d = param_distance(half.params(), student.params());
  for (int i = 0; i < 5; ++i) {
    ema_update(half.params(), student.params(), 0.5);
    const double nd = param_distance(half.params(), student.params());
    CHECK(nd == doctest::Approx(d / 2).epsilon(1e-5));
    d = nd;
  }
  CHECK_THROWS_AS(ema_update(half.params(), student.params(), 1.5), UsageError);
  Encoder other(small(1), 2);
  CHECK_THROWS(ema_update(other.params(), student.params(), 0.5));
}

TEST_CASE("gradients reach every encoder parameter") {
  Encoder enc(small(), 13);
  Tape tape;
  auto m = sample_mask(49, MaskSpec{}, 4).mask;
  ForwardOptions fo;
  fo.mask = &m;
  const auto out = enc.forward(tape, wave(16000, 5), fo);
  auto y = out.layers.back();
  // A non-symmetric readout so layer-norm outputs do not cancel.
  std::vector<float> wts(y.numel());
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd;
  for (auto& x : wts) x = nd(rng);
  auto loss = ad::sum_all(ad::mul(y, tape.constant(y.shape(), wts)));
  tape.backward(loss);
  for (const auto* p : enc.params().all()) {
    double g = 0.0;
    for (float x : p->grad) g += std::abs(x);
    CAPTURE(p->name);
    CHECK(g > 0.0);
    CHECK(std::isfinite(g));
  }
}

TEST_CASE("checkpoint round trip and validation") {
  Encoder enc(small(), 21);
  DiscreteHead head(64, 32, 8, 0.1, 21);
  for (auto* p : enc.params().all()) p->m.assign(p->value.size(), 0.25f);
  Checkpoint ck;
  ck.config_json = "{\"seed\": 21}";
  ck.paradigm = "discrete";
  ck.step = 123;
  ck.store(enc.params(), "encoder/", true);
  ck.store(head.params(), "head/", false);
  CHECK(ck.has("encoder/proj.weight"));
  CHECK(ck.has("head/head.codes"));

  const auto dir = fs::temp_directory_path() / "musicssl_test_encoder";
  fs::create_directories(dir);
  save_checkpoint(ck, dir / "a.sslc");
  const auto back = load_checkpoint(dir / "a.sslc");
  CHECK(back.config_json == ck.config_json);
  CHECK(back.paradigm == "discrete");
  CHECK(back.step == 123);

  Encoder fresh(small(), 99);
  back.restore(fresh.params(), "encoder/", true);
  CHECK(param_hash(fresh.params()) == param_hash(enc.params()));
  CHECK(fresh.params().at("proj.weight").m[0] == 0.25f);

  Encoder bigger(small(3), 1);
  CHECK_THROWS_AS(back.restore(bigger.params(), "encoder/", false), DataError);
  CHECK_THROWS_AS(back.restore(fresh.params(), "nothing/", false), DataError);

  {
    std::ofstream out(dir / "bad.sslc", std::ios::binary);
    out << "SSLCgarbage";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.sslc"), DataError);
  fs::remove_all(dir);
}
