#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace musicssl::detail {

/// Hann-windowed power spectrum of fixed-size frames. Plans are created
/// under a global lock; execution is re-entrant.
class PowerSpectrum {
 public:
  explicit PowerSpectrum(int fft_size);
  ~PowerSpectrum();
  PowerSpectrum(const PowerSpectrum&) = delete;
  PowerSpectrum& operator=(const PowerSpectrum&) = delete;

  int size() const { return n_; }
  int bins() const { return n_ / 2 + 1; }

  /// frame.size() == size(); writes bins() values into power.
  void compute(std::span<const float> frame, std::span<double> power);

 private:
  int n_;
  std::vector<double> window_;
  double* in_;
  void* out_;
  void* plan_;
};

}  // namespace musicssl::detail
