#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "musicssl/common.hpp"
#include "musicssl/config.hpp"
#include "musicssl/encoder.hpp"
#include "musicssl/features.hpp"
#include "musicssl/metrics.hpp"
#include "musicssl/synth.hpp"

namespace py = pybind11;
using namespace musicssl;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::span<const double> span_of(const F64& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

AudioClip clip_of(const F32& wave, int sr) {
  if (wave.ndim() != 1) throw py::value_error("waveform must be 1-D");
  AudioClip c;
  c.sample_rate = sr;
  c.samples.assign(wave.data(), wave.data() + wave.size());
  return c;
}

py::array_t<float> matrix(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
  py::array_t<float> out({rows, cols});
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(float));
  return out;
}

py::array_t<float> vec(const std::vector<float>& v) {
  py::array_t<float> out(static_cast<py::ssize_t>(v.size()));
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(float));
  return out;
}

// item-major (n_items, n_tags) inputs
std::pair<std::vector<double>, std::vector<std::uint8_t>> tag_arrays(const F64& s, const U8& y) {
  if (s.ndim() != 2 || y.ndim() != 2 || s.shape(0) != y.shape(0) || s.shape(1) != y.shape(1))
    throw py::value_error("scores and labels must be 2-D with equal shapes");
  return {{s.data(), s.data() + s.size()}, {y.data(), y.data() + y.size()}};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);

  m.def("pitch_clip", [](int midi, double duration, std::uint64_t seed) {
    return vec(gen_pitch_clip(midi, duration, seed).clip.samples);
  }, py::arg("midi"), py::arg("duration") = 2.0, py::arg("seed") = 0);
  m.def("click_track", [](double bpm, double duration, std::uint64_t seed) {
    const auto c = gen_click_track(bpm, duration, seed);
    return py::make_tuple(vec(c.clip.samples), std::get<std::vector<double>>(c.label));
  }, py::arg("bpm"), py::arg("duration") = 10.0, py::arg("seed") = 0);

  m.def("mfcc", [](const F32& wave, int sr) {
    const auto f = mfcc(clip_of(wave, sr));
    return matrix(f.values, f.rows, f.cols);
  }, py::arg("wave"), py::arg("sample_rate") = 16000);
  m.def("chroma", [](const F32& wave, int sr) {
    const auto f = chroma(clip_of(wave, sr));
    return matrix(f.values, f.rows, f.cols);
  }, py::arg("wave"), py::arg("sample_rate") = 16000);

  m.def("roc_auc_macro", [](const F64& s, const U8& y) {
    const auto [sv, yv] = tag_arrays(s, y);
    return roc_auc_macro(sv, yv, static_cast<std::size_t>(s.shape(1))).value;
  });
  m.def("average_precision_macro", [](const F64& s, const U8& y) {
    const auto [sv, yv] = tag_arrays(s, y);
    return average_precision_macro(sv, yv, static_cast<std::size_t>(s.shape(1))).value;
  });
  m.def("beat_f_measure", [](const F64& est, const F64& ref, double tol) {
    return beat_f_measure(span_of(est), span_of(ref), tol);
  }, py::arg("est"), py::arg("ref"), py::arg("tolerance") = 0.02);
  m.def("key_score", [](const std::string& est, const std::string& ref) {
    return refined_key_score(parse_key(est), parse_key(ref));
  });
  m.def("dbn_decode", [](const F64& act, double fps, double min_bpm, double max_bpm) {
    DbnConfig c;
    c.fps = fps;
    c.min_bpm = min_bpm;
    c.max_bpm = max_bpm;
    c.validate();
    return dbn_decode(span_of(act), c);
  }, py::arg("activations"), py::arg("fps") = 50.0, py::arg("min_bpm") = 55.0, py::arg("max_bpm") = 215.0);

  m.def("config_hash", [](const std::string& json) { return config_hash(parse_config(json)); },
        py::arg("config_json") = "{}");
  m.def("canonical_config", [](const std::string& json) { return to_json(parse_config(json)); },
        py::arg("config_json") = "{}");

  // Layer outputs of a freshly initialized encoder: list of (frames, hidden) arrays.
  m.def("encode", [](const F32& wave, const std::string& json) {
    const auto cfg = parse_config(json);
    Encoder enc(cfg.encoder, cfg.seed);
    Tape tape(false);
    const auto out = enc.forward(tape, std::span<const float>(wave.data(), static_cast<std::size_t>(wave.size())));
    py::list layers;
    for (const auto& l : out.layers) {
      const auto v = l.value();
      layers.append(matrix({v.begin(), v.end()}, l.dim(0), l.dim(1)));
    }
    return layers;
  }, py::arg("wave"), py::arg("config_json") = "{}");
}
