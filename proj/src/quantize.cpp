#include "musicssl/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include "musicssl/common.hpp"

namespace musicssl {

namespace {

constexpr std::uint32_t kCodebookVersion = 1;

// Standardized copy of the selected rows, computed in double from f32 stats.
std::vector<double> standardized(const FeatureMatrix& f, std::span<const std::size_t> rows,
                                 const std::optional<NormStats>& norm) {
  const std::size_t d = f.cols;
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = f.row(rows[i]);
    for (std::size_t j = 0; j < d; ++j) {
      double v = r[j];
      if (norm) v = (v - norm->mean[j]) / static_cast<double>(norm->std[j]);
      out[i * d + j] = v;
    }
  }
  return out;
}

double sq_dist(const double* x, const float* c, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = x[j] - static_cast<double>(c[j]);
    s += diff * diff;
  }
  return s;
}

// Nearest centroid with lowest-index tie-break; returns (id, distance).
std::pair<std::uint32_t, double> nearest(const double* x, const std::vector<float>& cents,
                                         std::size_t k, std::size_t d) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    const double dist = sq_dist(x, cents.data() + j * d, d);
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::uint32_t>(j);
    }
  }
  return {best, best_d};
}

void check_finite(const FeatureMatrix& f) {
  for (float v : f.values)
    if (!std::isfinite(v)) throw DataError("k-means input contains non-finite features");
}

}  // namespace

void Codebook::validate() const {
  if (k < 1) throw DataError("codebook must have K >= 1");
  if (centroids.size() != k * dims) throw DataError("codebook centroid table has wrong size");
  for (float v : centroids)
    if (!std::isfinite(v)) throw DataError("codebook centroid is not finite");
  if (norm) {
    if (norm->mean.size() != dims || norm->std.size() != dims)
      throw DataError("codebook norm stats have wrong width");
    for (float s : norm->std)
      if (!(s > 0.0f) || !std::isfinite(s)) throw DataError("codebook std must be positive");
  }
}

FeatureMatrix stack_rows(std::span<const FeatureMatrix> parts) {
  if (parts.empty()) throw DataError("nothing to stack");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols != parts[0].cols) throw DataError("feature widths differ across files");
    if (p.kind != parts[0].kind) throw DataError("feature kinds differ across files");
    total += p.rows;
  }
  FeatureMatrix out(total, parts[0].cols, parts[0].frame_rate, parts[0].kind);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.values.begin(), p.values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(at * out.cols));
    at += p.rows;
  }
  return out;
}

KmeansFit fit_kmeans(const FeatureMatrix& features, const KmeansOptions& opt) {
  if (opt.k < 1) throw UsageError("K must be >= 1");
  if (features.rows < opt.k)
    throw DataError("k-means needs at least K rows (" + std::to_string(features.rows) +
                    " < " + std::to_string(opt.k) + ")");
  if (opt.max_iter < 1) throw UsageError("max_iter must be >= 1");
  check_finite(features);
  const std::size_t d = features.cols, k = opt.k;
  std::mt19937_64 rng(opt.seed);

  KmeansFit fit;
  fit.fit_rows.resize(features.rows);
  std::iota(fit.fit_rows.begin(), fit.fit_rows.end(), 0);
  if (features.rows > opt.frame_budget && opt.frame_budget >= k) {
    // Seeded partial Fisher-Yates, then restore row order.
    for (std::size_t i = 0; i < opt.frame_budget; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, fit.fit_rows.size() - 1);
      std::swap(fit.fit_rows[i], fit.fit_rows[pick(rng)]);
    }
    fit.fit_rows.resize(opt.frame_budget);
    std::sort(fit.fit_rows.begin(), fit.fit_rows.end());
  }
  const std::size_t n = fit.fit_rows.size();

  Codebook& cb = fit.codebook;
  cb.k = k;
  cb.dims = d;
  cb.feature_kind = features.kind;
  if (opt.standardize) {
    NormStats stats{std::vector<float>(d), std::vector<float>(d)};
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (auto r : fit.fit_rows) mean += features.at(r, j);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (auto r : fit.fit_rows) {
        const double dv = features.at(r, j) - mean;
        var += dv * dv;
      }
      const double sd = std::sqrt(var / static_cast<double>(n));
      stats.mean[j] = static_cast<float>(mean);
      // Constant dimensions keep unit scale.
      stats.std[j] = sd > 1e-12 && std::isfinite(static_cast<float>(sd)) && static_cast<float>(sd) > 0.0f
                         ? static_cast<float>(sd)
                         : 1.0f;
    }
    cb.norm = std::move(stats);
  }
  const auto x = standardized(features, fit.fit_rows, cb.norm);

  // k-means++ seeding.
  cb.centroids.assign(k * d, 0.0f);
  const auto set_centroid = [&](std::size_t j, std::size_t i) {
    for (std::size_t c = 0; c < d; ++c) cb.centroids[j * d + c] = static_cast<float>(x[i * d + c]);
  };
  set_centroid(0, std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  std::vector<double> closest(n);
  for (std::size_t i = 0; i < n; ++i) closest[i] = sq_dist(&x[i * d], cb.centroids.data(), d);
  for (std::size_t j = 1; j < k; ++j) {
    const double total = std::accumulate(closest.begin(), closest.end(), 0.0);
    std::size_t chosen = 0;
    if (total > 0.0) {
      double target = std::uniform_real_distribution<double>(0.0, total)(rng);
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= closest[i];
        if (target < 0.0 && closest[i] > 0.0) {
          chosen = i;
          break;
        }
      }
      while (closest[chosen] == 0.0 && chosen > 0) --chosen;
    } else {
      chosen = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    set_centroid(j, chosen);
    for (std::size_t i = 0; i < n; ++i)
      closest[i] = std::min(closest[i], sq_dist(&x[i * d], cb.centroids.data() + j * d, d));
  }

  // Lloyd iterations.
  fit.assignment.assign(n, 0);
  std::vector<double> dist(n);
  std::vector<double> sums(k * d);
  std::vector<std::size_t> counts(k);
  for (int it = 0; it < opt.max_iter; ++it) {
    parallel_for(n, opt.workers, [&](std::size_t i) {
      std::tie(fit.assignment[i], dist[i]) = nearest(&x[i * d], cb.centroids, k, d);
    });
    const double cur = std::accumulate(dist.begin(), dist.end(), 0.0);
    if (!fit.inertia.empty()) {
      const double prev = fit.inertia.back();
      if (cur > prev * (1.0 + 1e-9) + 1e-12)
        throw std::logic_error("k-means inertia increased between Lloyd iterations");
    }
    fit.inertia.push_back(cur);
    if (fit.inertia.size() >= 2) {
      const double prev = fit.inertia[fit.inertia.size() - 2];
      if (prev <= 0.0 || (prev - cur) / prev < opt.tol) break;
    }
    if (it + 1 == opt.max_iter) break;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = fit.assignment[i];
      ++counts[a];
      for (std::size_t c = 0; c < d; ++c) sums[a * d + c] += x[i * d + c];
    }
    std::vector<std::size_t> empty;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        empty.push_back(j);
        continue;
      }
      for (std::size_t c = 0; c < d; ++c)
        cb.centroids[j * d + c] = static_cast<float>(sums[j * d + c] / static_cast<double>(counts[j]));
    }
    if (!empty.empty()) {
      // Farthest points from their (updated) centroids, largest first.
      std::vector<double> far(n);
      for (std::size_t i = 0; i < n; ++i)
        far[i] = sq_dist(&x[i * d], cb.centroids.data() + fit.assignment[i] * d, d);
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return far[a] > far[b]; });
      for (std::size_t e = 0; e < empty.size() && e < n; ++e) set_centroid(empty[e], idx[e]);
    }
  }
  cb.validate();
  return fit;
}

LabelSequence assign(const Codebook& codebook, const FeatureMatrix& features, int workers) {
  codebook.validate();
  if (features.cols != codebook.dims)
    throw DataError("feature width " + std::to_string(features.cols) +
                    " does not match codebook width " + std::to_string(codebook.dims));
  LabelSequence out;
  out.frame_rate = features.frame_rate;
  out.ids.resize(features.rows);
  const std::size_t d = features.cols;
  parallel_for(features.rows, workers, [&](std::size_t t) {
    std::vector<double> x(d);
    const auto r = features.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      x[j] = r[j];
      if (codebook.norm) x[j] = (x[j] - codebook.norm->mean[j]) / static_cast<double>(codebook.norm->std[j]);
    }
    out.ids[t] = nearest(x.data(), codebook.centroids, codebook.k, d).first;
  });
  return out;
}

double inertia(const Codebook& codebook, const FeatureMatrix& features,
               std::span<const std::uint32_t> ids) {
  if (ids.size() != features.rows) throw DataError("inertia: id count mismatch");
  std::vector<std::size_t> rows(features.rows);
  std::iota(rows.begin(), rows.end(), 0);
  const auto x = standardized(features, rows, codebook.norm);
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    total += sq_dist(&x[i * codebook.dims], codebook.centroids.data() + ids[i] * codebook.dims,
                     codebook.dims);
  return total;
}

void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  cb.validate();
  BinaryWriter w(path);
  w.magic("SSLK");
  w.u32(kCodebookVersion);
  w.u32(static_cast<std::uint32_t>(cb.k));
  w.u32(static_cast<std::uint32_t>(cb.dims));
  w.u8(static_cast<std::uint8_t>(cb.feature_kind));
  w.u8(cb.norm ? 1 : 0);
  if (cb.norm) {
    w.f32s(cb.norm->mean);
    w.f32s(cb.norm->std);
  }
  w.f32s(cb.centroids);
  w.close();
}

Codebook load_codebook(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic("SSLK");
  if (auto v = r.u32(); v != kCodebookVersion)
    throw DataError("unsupported codebook version " + std::to_string(v));
  Codebook cb;
  cb.k = r.u32();
  cb.dims = r.u32();
  const auto kind = r.u8();
  if (kind > 2) throw DataError("bad feature kind in " + path.string());
  cb.feature_kind = static_cast<FeatureKind>(kind);
  if (cb.k == 0 || cb.dims == 0 || cb.k * cb.dims > (std::size_t{1} << 30))
    throw DataError("implausible codebook shape in " + path.string());
  if (r.u8()) cb.norm = NormStats{r.f32s(cb.dims), r.f32s(cb.dims)};
  cb.centroids = r.f32s(cb.k * cb.dims);
  cb.validate();
  return cb;
}

void save_label_sequence(const LabelSequence& labels, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic("SSLL");
  w.u64(labels.ids.size());
  w.bytes(labels.ids.data(), labels.ids.size() * sizeof(std::uint32_t));
  w.close();
}

LabelSequence load_label_sequence(const std::filesystem::path& path, float frame_rate) {
  BinaryReader r(path);
  r.expect_magic("SSLL");
  const auto t = r.u64();
  if (t > (std::uint64_t{1} << 32)) throw DataError("implausible label count in " + path.string());
  LabelSequence out;
  out.frame_rate = frame_rate;
  out.ids.resize(t);
  r.bytes(out.ids.data(), t * sizeof(std::uint32_t));
  return out;
}

}  // namespace musicssl
