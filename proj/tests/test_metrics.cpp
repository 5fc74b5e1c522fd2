#include <gtest/gtest.h>

#include <cmath>

#include "ultravar/error.hpp"
#include "ultravar/metrics.hpp"
#include "ultravar/rng.hpp"

using namespace uvar;

namespace {

Tensor random_image(std::size_t side, Rng& rng) {
  Tensor t({1, side, side});
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
  return t;
}

Tensor noisy_copy(const Tensor& x, double sigma, Rng& rng) {
  Tensor y = x.clone();
  for (auto& v : y.data()) v = static_cast<float>(std::clamp(v + rng.normal() * sigma, 0.0, 1.0));
  return y;
}

// Direct per-window SSIM, written independently of the library.
SsimTerms naive_ssim(const std::vector<double>& x, const std::vector<double>& y, std::size_t side) {
  const std::size_t win = 11;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  std::vector<double> g(win);
  double gs = 0.0;
  for (std::size_t i = 0; i < win; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  double s_sum = 0.0, cs_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + win <= side; ++r)
    for (std::size_t c = 0; c + win <= side; ++c) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (std::size_t i = 0; i < win; ++i)
        for (std::size_t j = 0; j < win; ++j) {
          const double w = g[i] * g[j];
          const double a = x[(r + i) * side + c + j], b = y[(r + i) * side + c + j];
          mx += w * a;
          my += w * b;
          xx += w * a * a;
          yy += w * b * b;
          xy += w * a * b;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
      const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
      const double cs = (2 * cov + c2) / (vx + vy + c2);
      s_sum += l * cs;
      cs_sum += cs;
      ++count;
    }
  return {s_sum / count, cs_sum / count};
}

std::vector<double> pool(const std::vector<double>& x, std::size_t side) {
  std::vector<double> out((side / 2) * (side / 2));
  for (std::size_t r = 0; r < side / 2; ++r)
    for (std::size_t c = 0; c < side / 2; ++c)
      out[r * (side / 2) + c] = (x[2 * r * side + 2 * c] + x[2 * r * side + 2 * c + 1] + x[(2 * r + 1) * side + 2 * c] +
                                 x[(2 * r + 1) * side + 2 * c + 1]) / 4.0;
  return out;
}

std::vector<double> as_double(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor gaussian_features(std::size_t n, std::vector<double> mean, std::vector<double> stddev, Rng& rng) {
  Tensor t({n, mean.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < mean.size(); ++j)
      t.data()[i * mean.size() + j] = static_cast<float>(mean[j] + stddev[j] * rng.normal());
  return t;
}

}  // namespace

TEST(Ssim, IdenticalImagesScoreOne) {
  Rng rng(1);
  Tensor x = random_image(32, rng);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-9);
  EXPECT_NEAR(ms_ssim(x, x), 1.0, 1e-9);
}

TEST(Ssim, ConstantImagesReduceToLuminance) {
  Tensor x({1, 32, 32}, 0.4f), y({1, 32, 32}, 0.8f);
  const double mx = static_cast<double>(0.4f), my = static_cast<double>(0.8f);
  const double want = (2 * mx * my + 1e-4) / (mx * mx + my * my + 1e-4);
  EXPECT_NEAR(ssim(x, y), want, 1e-6);
  EXPECT_NEAR(want, 0.8000, 5e-4);
}

TEST(Ssim, Symmetric) {
  Rng rng(2);
  Tensor x = random_image(32, rng), y = noisy_copy(x, 0.2, rng);
  EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-12);
  EXPECT_NEAR(ms_ssim(x, y), ms_ssim(y, x), 1e-12);
}

TEST(Ssim, MatchesNaiveOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s);
    Tensor x = random_image(24, rng), y = noisy_copy(x, 0.1 + 0.1 * s, rng);
    const SsimTerms want = naive_ssim(as_double(x), as_double(y), 24);
    const SsimTerms got = ssim_terms(x, y);
    EXPECT_NEAR(got.ssim, want.ssim, 1e-6);
    EXPECT_NEAR(got.cs, want.cs, 1e-6);
  }
}

TEST(Ssim, MoreNoiseScoresLower) {
  Rng rng(3);
  Tensor x = random_image(32, rng);
  double prev = 1.0;
  for (double sigma : {0.05, 0.15, 0.3}) {
    Rng r(4);
    const double v = ssim(x, noisy_copy(x, sigma, r));
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(MsSsim, LevelCount) {
  EXPECT_EQ(ms_ssim_levels(32), 2u);
  EXPECT_EQ(ms_ssim_levels(21), 1u);
  EXPECT_EQ(ms_ssim_levels(176), 5u);
  EXPECT_EQ(ms_ssim_levels(1000), 5u);
  Tensor x({1, 32, 32}, 0.5f);
  EXPECT_THROW(ms_ssim(x, x, {}, 3), ConfigError);
}

TEST(MsSsim, SingleLevelEqualsSsim) {
  Rng rng(5);
  Tensor x = random_image(32, rng), y = noisy_copy(x, 0.2, rng);
  EXPECT_NEAR(ms_ssim(x, y, {}, 1), ssim(x, y), 1e-12);
}

TEST(MsSsim, MatchesPerLevelOracle) {
  const double w[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  for (std::size_t levels : {2u, 3u}) {
    Rng rng(6 + levels);
    const std::size_t side = 48;
    Tensor x = random_image(side, rng), y = noisy_copy(x, 0.15, rng);
    auto a = as_double(x), b = as_double(y);
    double wsum = 0.0;
    for (std::size_t i = 0; i < levels; ++i) wsum += w[i];
    double want = 1.0;
    std::size_t s = side;
    for (std::size_t i = 0; i < levels; ++i) {
      const SsimTerms t = naive_ssim(a, b, s);
      want *= std::pow(std::max(i + 1 < levels ? t.cs : t.ssim, 0.0), w[i] / wsum);
      a = pool(a, s);
      b = pool(b, s);
      s /= 2;
    }
    EXPECT_NEAR(ms_ssim(x, y, {}, levels), want, 1e-6) << levels;
  }
}

TEST(AvgPool, Halves) {
  Tensor x({1, 2, 4}, {1, 3, 5, 7, 3, 5, 7, 9});
  Tensor y = avg_pool2(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2}));
  EXPECT_FLOAT_EQ(y.data()[0], 3.0f);
  EXPECT_FLOAT_EQ(y.data()[1], 7.0f);
}

TEST(Frechet, IdenticalSetsScoreZero) {
  Rng rng(7);
  Tensor a = gaussian_features(500, {0, 1, 2}, {1, 2, 0.5}, rng);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
}

TEST(Frechet, OneDimensionalShift) {
  Rng rng(8);
  Tensor a = gaussian_features(100000, {0}, {1}, rng);
  Tensor b = gaussian_features(100000, {1}, {1}, rng);
  EXPECT_NEAR(frechet_distance(a, b), 1.0, 0.05);
}

TEST(Frechet, DiagonalCovarianceClosedForm) {
  Rng rng(9);
  Tensor a = gaussian_features(100000, {0, 0}, {1, 2}, rng);
  Tensor b = gaussian_features(100000, {0, 0}, {2, 1}, rng);
  // sum over dims of (sigma_a - sigma_b)^2
  EXPECT_NEAR(frechet_distance(a, b), 2.0, 0.1);
}

TEST(Frechet, GrowsWithSeparation) {
  Rng rng(10);
  Tensor a = gaussian_features(2000, {0, 0}, {1, 1}, rng);
  double prev = -1.0;
  for (double shift : {0.0, 0.5, 1.0, 2.0}) {
    Rng r(11);
    const double d = frechet_distance(a, gaussian_features(2000, {shift, 0}, {1, 1}, r));
    EXPECT_GT(d, prev);
    prev = d;
  }
  EXPECT_THROW(frechet_distance(a, Tensor::zeros({5, 3})), DimensionError);
}

TEST(Pca, PointsOnALine) {
  const double dir[3] = {1 / std::sqrt(14.0), 2 / std::sqrt(14.0), 3 / std::sqrt(14.0)};
  Tensor x({50, 3});
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 3; ++j) x.data()[i * 3 + j] = static_cast<float>((static_cast<double>(i) - 24.5) * dir[j] + j);
  PcaResult r = pca(x, 2);
  EXPECT_NEAR(r.eigenvalues[1], 0.0, 1e-6 * r.eigenvalues[0]);
  EXPECT_NEAR(r.eigenvalues[0] / r.total_variance, 1.0, 1e-9);
  // first coordinate is the signed position along the line
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(r.projected.data()[i * 2], static_cast<double>(i) - 24.5, 1e-4);
}

TEST(Pca, RecoversAxisAlignedVariances) {
  Rng rng(12);
  Tensor x = gaussian_features(20000, {1, -1, 3}, {3, 2, 1}, rng);
  PcaResult r = pca(x, 2);
  EXPECT_NEAR(r.eigenvalues[0], 9.0, 0.3);
  EXPECT_NEAR(r.eigenvalues[1], 4.0, 0.15);
  EXPECT_NEAR(r.total_variance, 14.0, 0.4);
  // the projection spans the first two axes: third coordinate is not recoverable
  double c0 = 0, c1 = 0;
  for (std::size_t i = 0; i < 20000; ++i) {
    c0 += std::fabs(r.projected.data()[i * 2] - (x.data()[i * 3] - 1.0));
    c1 += std::fabs(r.projected.data()[i * 2 + 1] - (x.data()[i * 3 + 1] + 1.0));
  }
  EXPECT_LT(c0 / 20000, 0.1);
  EXPECT_LT(c1 / 20000, 0.1);
}

TEST(Pca, RejectsBadArguments) {
  EXPECT_THROW(pca(Tensor::zeros({1, 3}), 2), DimensionError);
  EXPECT_THROW(pca(Tensor::zeros({4, 3}), 4), ConfigError);
  EXPECT_EQ(pca_project(Tensor::zeros({4, 3}), 2).shape(), (Shape{4, 2}));
}
