#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "musicssl/common.hpp"
#include "musicssl/quantize.hpp"

using namespace musicssl;
namespace fs = std::filesystem;

namespace {

FeatureMatrix blobs(std::size_t per, std::size_t dims, std::size_t k, double sep, double radius,
                    std::uint64_t seed, std::vector<std::size_t>* truth = nullptr) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  FeatureMatrix f(per * k, dims, 50.0f, FeatureKind::kMfcc);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t r = c * per + i;
      for (std::size_t d = 0; d < dims; ++d)
        f.at(r, d) = static_cast<float>((d == c % dims ? sep * static_cast<double>(c + 1) : 0.0) + radius * nd(rng));
      if (truth) truth->push_back(c);
    }
  return f;
}

// Inertia of a partition with centroids recomputed in double.
template <typename Id>
double partition_inertia(const FeatureMatrix& f, const std::vector<Id>& lab, std::size_t k) {
  const std::size_t n = f.rows, d = f.cols;
  std::vector<double> sum(k * d, 0.0), cnt(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    cnt[lab[i]] += 1;
    for (std::size_t j = 0; j < d; ++j) sum[lab[i] * d + j] += f.at(i, j);
  }
  double in = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = sum[lab[i] * d + j] / cnt[lab[i]];
      in += (f.at(i, j) - c) * (f.at(i, j) - c);
    }
  return in;
}

// Optimal K-means inertia over all partitions of a tiny set (3^12 labelings).
double brute_force_inertia(const FeatureMatrix& f, std::size_t k) {
  const std::size_t n = f.rows;
  std::vector<std::size_t> lab(n, 0);
  double best = 1e300;
  while (true) {
    best = std::min(best, partition_inertia(f, lab, k));
    std::size_t pos = 0;
    while (pos < n && ++lab[pos] == k) lab[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace

TEST_CASE("separated blobs are recovered exactly") {
  std::vector<std::size_t> truth;
  const auto f = blobs(30, 4, 3, 100.0, 1.0, 1, &truth);
  KmeansOptions opt;
  opt.k = 3;
  const auto fit = fit_kmeans(f, opt);
  // Same partition up to relabeling.
  for (std::size_t i = 0; i < f.rows; ++i)
    for (std::size_t j = 0; j < f.rows; ++j)
      CHECK((truth[i] == truth[j]) == (fit.assignment[i] == fit.assignment[j]));
}

TEST_CASE("K equal to the number of distinct points reaches zero inertia") {
  FeatureMatrix f(10, 2, 50.0f, FeatureKind::kMfcc);
  for (std::size_t i = 0; i < 10; ++i) {
    f.at(i, 0) = static_cast<float>(i % 5);
    f.at(i, 1) = static_cast<float>((i % 5) * (i % 5));
  }
  KmeansOptions opt;
  opt.k = 5;
  const auto fit = fit_kmeans(f, opt);
  CHECK(fit.inertia.back() < 1e-9);
}

TEST_CASE("12-point instance matches the exhaustive optimum") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto f = blobs(4, 2, 3, 3.0, 1.0, 100 + seed);
    KmeansOptions opt;
    opt.k = 3;
    opt.standardize = false;
    opt.seed = seed;
    opt.tol = 0.0;
    const auto fit = fit_kmeans(f, opt);
    CAPTURE(seed);
    CHECK(std::abs(partition_inertia(f, fit.assignment, 3) - brute_force_inertia(f, 3)) < 1e-9);
  }
}

TEST_CASE("Lloyd inertia never increases") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    FeatureMatrix f(200, 5, 50.0f, FeatureKind::kMfcc);
    std::normal_distribution<float> nd;
    for (auto& v : f.values) v = nd(rng);
    KmeansOptions opt;
    opt.k = 1 + seed % 10;
    opt.seed = seed;
    opt.tol = 0.0;
    const auto fit = fit_kmeans(f, opt);
    for (std::size_t i = 1; i < fit.inertia.size(); ++i) CHECK(fit.inertia[i] <= fit.inertia[i - 1] * (1 + 1e-12));
  }
}

TEST_CASE("K=1 centroid is the standardized mean") {
  const auto f = blobs(50, 3, 2, 5.0, 2.0, 7);
  KmeansOptions opt;
  opt.k = 1;
  const auto fit = fit_kmeans(f, opt);
  for (float c : fit.codebook.centroids) CHECK(std::abs(c) < 1e-6);
  REQUIRE(fit.codebook.norm);
  for (std::size_t d = 0; d < 3; ++d) {
    double mean = 0.0;
    for (std::size_t i = 0; i < f.rows; ++i) mean += f.at(i, d);
    CHECK(fit.codebook.norm->mean[d] == doctest::Approx(mean / f.rows).epsilon(1e-6));
  }
}

TEST_CASE("assign: exact centroids, tie rule, reproduces the fit") {
  Codebook cb;
  cb.k = 6;
  cb.dims = 1;
  cb.centroids = {100.0f, 10.0f, -1.0f, 20.0f, 30.0f, 1.0f};
  FeatureMatrix f(2, 1, 50.0f, FeatureKind::kMfcc);
  f.at(0, 0) = 20.0f;  // centroid 3
  f.at(1, 0) = 0.0f;   // equidistant to centroids 2 and 5
  const auto l = assign(cb, f);
  CHECK(l.ids[0] == 3);
  CHECK(l.ids[1] == 2);

  const auto g = blobs(40, 3, 4, 2.0, 1.0, 9);
  KmeansOptions opt;
  opt.k = 4;
  const auto fit = fit_kmeans(g, opt);
  CHECK(assign(fit.codebook, g).ids == fit.assignment);
  CHECK(assign(fit.codebook, g, 3).ids == fit.assignment);
  FeatureMatrix bad(2, 2, 50.0f, FeatureKind::kMfcc);
  CHECK_THROWS(assign(fit.codebook, bad));
}

TEST_CASE("refits are byte-identical and files round-trip") {
  const auto g = blobs(40, 3, 4, 2.0, 1.0, 9);
  KmeansOptions opt;
  opt.k = 4;
  opt.seed = 5;
  const auto a = fit_kmeans(g, opt), b = fit_kmeans(g, opt);
  CHECK(a.codebook.centroids == b.codebook.centroids);
  const auto dir = fs::temp_directory_path() / "musicssl_test_quantize";
  fs::create_directories(dir);
  save_codebook(a.codebook, dir / "a.sslk");
  save_codebook(b.codebook, dir / "b.sslk");
  CHECK(file_checksum(dir / "a.sslk") == file_checksum(dir / "b.sslk"));
  const auto cb = load_codebook(dir / "a.sslk");
  CHECK(cb.centroids == a.codebook.centroids);
  CHECK(cb.norm->std == a.codebook.norm->std);
  const auto labels = assign(cb, g);
  save_label_sequence(labels, dir / "l.ssll");
  CHECK(load_label_sequence(dir / "l.ssll").ids == labels.ids);
  fs::remove_all(dir);
}

TEST_CASE("fit errors") {
  FeatureMatrix f(3, 2, 50.0f, FeatureKind::kMfcc);
  KmeansOptions opt;
  opt.k = 4;
  CHECK_THROWS_AS(fit_kmeans(f, opt), DataError);
  opt.k = 2;
  f.at(1, 1) = std::nanf("");
  CHECK_THROWS_AS(fit_kmeans(f, opt), DataError);
}

TEST_CASE("subsampling above the frame budget is seeded") {
  const auto g = blobs(500, 3, 2, 10.0, 1.0, 3);
  KmeansOptions opt;
  opt.k = 2;
  opt.frame_budget = 100;
  const auto a = fit_kmeans(g, opt), b = fit_kmeans(g, opt);
  CHECK(a.fit_rows.size() == 100);
  CHECK(a.fit_rows == b.fit_rows);
  CHECK(a.codebook.centroids == b.codebook.centroids);
}
