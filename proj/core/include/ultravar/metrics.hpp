#pragma once

#include <vector>

#include "ultravar/tensor.hpp"

namespace uvar {

struct SsimConfig {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

struct SsimTerms {
  double ssim = 0.0;  // mean of l * cs
  double cs = 0.0;    // mean contrast-structure term
};

// Valid sliding Gaussian windows over the trailing two dims of a
// single-channel image.
SsimTerms ssim_terms(const Tensor& x, const Tensor& y, const SsimConfig& config = {});
double ssim(const Tensor& x, const Tensor& y, const SsimConfig& config = {});

// Largest L <= 5 with side >= 2^(L-1) * window.
std::size_t ms_ssim_levels(std::size_t side, const SsimConfig& config = {});
// levels == 0 selects ms_ssim_levels(min side).
double ms_ssim(const Tensor& x, const Tensor& y, const SsimConfig& config = {}, std::size_t levels = 0);
// 2x2 average pooling of an [.. x H x W] single-channel image.
Tensor avg_pool2(const Tensor& x);

// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), covariances + 1e-6 I.
double frechet_distance(const Tensor& a, const Tensor& b);

struct PcaResult {
  Tensor projected;                 // [N x k]
  std::vector<double> eigenvalues;  // top k, descending
  double total_variance = 0.0;
};
PcaResult pca(const Tensor& feats, std::size_t k = 2);
Tensor pca_project(const Tensor& feats, std::size_t k = 2);

}  // namespace uvar
