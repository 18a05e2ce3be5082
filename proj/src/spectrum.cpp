#include "spectrum.hpp"

#include <fftw3.h>

#include <cmath>
#include <mutex>
#include <numbers>

namespace musicssl::detail {

namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

PowerSpectrum::PowerSpectrum(int fft_size) : n_(fft_size), window_(fft_size) {
  // Periodic Hann.
  for (int i = 0; i < n_; ++i)
    window_[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n_);
  std::lock_guard lock(planner_mutex());
  in_ = fftw_alloc_real(static_cast<std::size_t>(n_));
  auto* out = fftw_alloc_complex(static_cast<std::size_t>(bins()));
  out_ = out;
  plan_ = fftw_plan_dft_r2c_1d(n_, in_, out, FFTW_ESTIMATE);
}

PowerSpectrum::~PowerSpectrum() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(plan_));
  fftw_free(out_);
  fftw_free(in_);
}

void PowerSpectrum::compute(std::span<const float> frame, std::span<double> power) {
  for (int i = 0; i < n_; ++i) in_[i] = frame[static_cast<std::size_t>(i)] * window_[i];
  fftw_execute(static_cast<fftw_plan>(plan_));
  const auto* out = static_cast<const fftw_complex*>(out_);
  for (int k = 0; k < bins(); ++k)
    power[static_cast<std::size_t>(k)] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
}

}  // namespace musicssl::detail
