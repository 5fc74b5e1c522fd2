#include "ultravar/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "ultravar/error.hpp"

namespace uvar {

namespace {

std::pair<std::size_t, std::size_t> image_dims(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("metrics: need an image, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (h * w != x.numel()) throw DimensionError("metrics: single-channel image expected, got " + shape_str(x.shape()));
  return {h, w};
}

std::vector<double> gaussian_window(const SsimConfig& c) {
  std::vector<double> g(c.window);
  const double mid = (static_cast<double>(c.window) - 1.0) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < c.window; ++i) {
    const double d = static_cast<double>(i) - mid;
    s += g[i] = std::exp(-d * d / (2.0 * c.sigma * c.sigma));
  }
  for (auto& v : g) v /= s;
  return g;
}

// Separable valid-mode filtering of a double image.
std::vector<double> filter(const std::vector<double>& img, std::size_t h, std::size_t w, const std::vector<double>& g) {
  const std::size_t n = g.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(h * ow), out(oh * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double a = 0.0;
      for (std::size_t i = 0; i < n; ++i) a += g[i] * img[y * w + x + i];
      tmp[y * ow + x] = a;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double a = 0.0;
      for (std::size_t i = 0; i < n; ++i) a += g[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = a;
    }
  return out;
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("features must be [N x d], got " + shape_str(t.shape()));
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  auto v = t.data();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = v[static_cast<std::size_t>(i * m.cols() + j)];
  return m;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, Eigen::VectorXd& mean) {
  mean = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - mean.transpose();
  const double denom = x.rows() > 1 ? static_cast<double>(x.rows() - 1) : 1.0;
  return (c.transpose() * c) / denom;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("frechet: eigendecomposition did not converge");
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

SsimTerms ssim_terms(const Tensor& x, const Tensor& y, const SsimConfig& c) {
  const auto [h, w] = image_dims(x);
  if (image_dims(y) != std::make_pair(h, w))
    throw DimensionError("ssim: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  if (h < c.window || w < c.window) throw ConfigError("ssim: image smaller than the window");
  std::vector<double> a(x.data().begin(), x.data().end()), b(y.data().begin(), y.data().end());
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto g = gaussian_window(c);
  const auto mu_a = filter(a, h, w, g), mu_b = filter(b, h, w, g);
  const auto s_aa = filter(aa, h, w, g), s_bb = filter(bb, h, w, g), s_ab = filter(ab, h, w, g);
  const double c1 = (c.k1 * c.range) * (c.k1 * c.range), c2 = (c.k2 * c.range) * (c.k2 * c.range);
  double sum_ssim = 0.0, sum_cs = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = s_aa[i] - mu_a[i] * mu_a[i], vb = s_bb[i] - mu_b[i] * mu_b[i];
    const double cov = s_ab[i] - mu_a[i] * mu_b[i];
    const double l = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
    const double cs = (2.0 * cov + c2) / (va + vb + c2);
    sum_ssim += l * cs;
    sum_cs += cs;
  }
  const double n = static_cast<double>(mu_a.size());
  return {sum_ssim / n, sum_cs / n};
}

double ssim(const Tensor& x, const Tensor& y, const SsimConfig& config) { return ssim_terms(x, y, config).ssim; }

std::size_t ms_ssim_levels(std::size_t side, const SsimConfig& config) {
  std::size_t levels = 0;
  while (levels < 5 && side >= (std::size_t{1} << levels) * config.window) ++levels;
  if (levels == 0) throw ConfigError("ms_ssim: image side " + std::to_string(side) + " below the window size");
  return levels;
}

Tensor avg_pool2(const Tensor& x) {
  const auto [h, w] = image_dims(x);
  const std::size_t oh = h / 2, ow = w / 2;
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Tensor out(shape);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const double s = static_cast<double>(xv[2 * y * w + 2 * xx]) + xv[2 * y * w + 2 * xx + 1] +
                       xv[(2 * y + 1) * w + 2 * xx] + xv[(2 * y + 1) * w + 2 * xx + 1];
      o[y * ow + xx] = static_cast<float>(s / 4.0);
    }
  return out;
}

double ms_ssim(const Tensor& x, const Tensor& y, const SsimConfig& config, std::size_t levels) {
  static constexpr double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  const auto [h, w] = image_dims(x);
  const std::size_t side = std::min(h, w);
  const std::size_t max_levels = ms_ssim_levels(side, config);
  if (levels == 0) levels = max_levels;
  if (levels > max_levels)
    throw ConfigError("ms_ssim: " + std::to_string(levels) + " levels need side >= " +
                      std::to_string((std::size_t{1} << (levels - 1)) * config.window));
  double wsum = 0.0;
  for (std::size_t i = 0; i < levels; ++i) wsum += kWeights[i];
  Tensor a = x, b = y;
  double result = 1.0;
  for (std::size_t i = 0; i < levels; ++i) {
    const SsimTerms t = ssim_terms(a, b, config);
    const double wi = kWeights[i] / wsum;
    if (i + 1 < levels) {
      result *= std::pow(std::max(t.cs, 0.0), wi);
      a = avg_pool2(a);
      b = avg_pool2(b);
    } else {
      result *= std::pow(std::max(t.ssim, 0.0), wi);
    }
  }
  return result;
}

double frechet_distance(const Tensor& a, const Tensor& b) {
  const Eigen::MatrixXd xa = to_matrix(a), xb = to_matrix(b);
  if (xa.cols() != xb.cols()) throw DimensionError("frechet: feature dims differ");
  if (xa.rows() < 1 || xb.rows() < 1) throw DimensionError("frechet: empty feature set");
  Eigen::VectorXd ma, mb;
  const Eigen::Index d = xa.cols();
  const Eigen::MatrixXd reg = 1e-6 * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sa = covariance(xa, ma) + reg, sb = covariance(xb, mb) + reg;
  const Eigen::MatrixXd ra = psd_sqrt(sa);
  const Eigen::MatrixXd cross = psd_sqrt(ra * sb * ra);
  const double dist = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross.trace();
  if (!std::isfinite(dist)) throw NumericError("frechet: non-finite distance");
  return std::max(dist, 0.0);
}

PcaResult pca(const Tensor& feats, std::size_t k) {
  const Eigen::MatrixXd x = to_matrix(feats);
  if (x.rows() < 2) throw DimensionError("pca: need at least 2 samples");
  if (k == 0 || k > static_cast<std::size_t>(x.cols())) throw ConfigError("pca: k must be in [1, d]");
  Eigen::VectorXd mean;
  const Eigen::MatrixXd cov = covariance(x, mean);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("pca: eigendecomposition did not converge");
  const Eigen::Index d = x.cols();
  Eigen::MatrixXd basis(d, static_cast<Eigen::Index>(k));
  PcaResult res;
  for (std::size_t j = 0; j < k; ++j) {
    const Eigen::Index col = d - 1 - static_cast<Eigen::Index>(j);
    Eigen::VectorXd v = es.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    basis.col(static_cast<Eigen::Index>(j)) = v;
    res.eigenvalues.push_back(std::max(es.eigenvalues()(col), 0.0));
  }
  res.total_variance = cov.trace();
  const Eigen::MatrixXd proj = (x.rowwise() - mean.transpose()) * basis;
  res.projected = Tensor({feats.dim(0), k});
  auto o = res.projected.data();
  for (Eigen::Index i = 0; i < proj.rows(); ++i)
    for (Eigen::Index j = 0; j < proj.cols(); ++j) o[static_cast<std::size_t>(i * proj.cols() + j)] = static_cast<float>(proj(i, j));
  return res;
}

Tensor pca_project(const Tensor& feats, std::size_t k) { return pca(feats, k).projected; }

}  // namespace uvar
