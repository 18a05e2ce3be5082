#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "musicssl/features.hpp"

namespace musicssl {

struct NormStats {
  std::vector<float> mean;
  std::vector<float> std;  // every entry > 0
};

/// K-means codebook over (optionally standardized) frame features.
struct Codebook {
  std::vector<float> centroids;  // K x D, in standardized space when norm is set
  std::size_t k = 0;
  std::size_t dims = 0;
  FeatureKind feature_kind = FeatureKind::kMfcc;
  std::optional<NormStats> norm;

  std::span<const float> centroid(std::size_t j) const {
    return {centroids.data() + j * dims, dims};
  }
  void validate() const;
};

/// Per-frame cluster ids.
struct LabelSequence {
  std::vector<std::uint32_t> ids;
  float frame_rate = 50.0f;
};

struct KmeansOptions {
  std::size_t k = 100;
  int max_iter = 100;
  double tol = 1e-4;  // stop when relative inertia improvement falls below
  std::uint64_t seed = 0;
  bool standardize = true;
  std::size_t frame_budget = 2'000'000;  // fit on a seeded subsample above this
  int workers = 1;
};

struct KmeansFit {
  Codebook codebook;
  std::vector<double> inertia;  // one entry per Lloyd assignment step
  std::vector<std::uint32_t> assignment;  // final assignment of the fit rows
  std::vector<std::size_t> fit_rows;  // row indices used (all rows unless subsampled)
};

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are moved
/// to the point farthest from its centroid. Centroids are kept in f32 after
/// every update so that `assign` reproduces the fit exactly.
KmeansFit fit_kmeans(const FeatureMatrix& rows, const KmeansOptions& opt);

/// Stacks several matrices of equal width (and kind) row-wise.
FeatureMatrix stack_rows(std::span<const FeatureMatrix> parts);

/// Nearest centroid after applying the codebook's normalization; ties go
/// to the lowest index.
LabelSequence assign(const Codebook& codebook, const FeatureMatrix& features, int workers = 1);

/// Sum of squared distances to the assigned centroids (standardized space).
double inertia(const Codebook& codebook, const FeatureMatrix& features,
               std::span<const std::uint32_t> ids);

void save_codebook(const Codebook& cb, const std::filesystem::path& path);
Codebook load_codebook(const std::filesystem::path& path);

/// Label file: "SSLL", T (u64), then T u32 ids.
void save_label_sequence(const LabelSequence& labels, const std::filesystem::path& path);
LabelSequence load_label_sequence(const std::filesystem::path& path, float frame_rate = 50.0f);

}  // namespace musicssl
