#include "ultravar/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ultravar/error.hpp"

namespace uvar {

AdamW::AdamW(ParamList params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    kernels::check_finite(g, ("gradient of " + params_[i].name).c_str());
    auto w = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = params_[i].decay ? lr * config_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double wj = w[j];
      wj -= decay * wj;
      wj -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      w[j] = static_cast<float>(wj);
    }
    p.zero_grad();
  }
}

void AdamW::zero_grad() { zero_grads(params_); }

void AdamW::reset_rows(std::size_t index, std::size_t begin, std::size_t end) {
  if (index >= params_.size()) throw IndexError("AdamW::reset_rows: parameter index out of range");
  const Tensor& p = params_[index].tensor;
  const std::size_t row = p.numel() / p.dim(0);
  std::fill(m_[index].begin() + begin * row, m_[index].begin() + end * row, 0.0);
  std::fill(v_[index].begin() + begin * row, v_[index].begin() + end * row, 0.0);
}

double cosine_lr(double base, double floor, std::size_t epoch, std::size_t total) {
  if (total <= 1) return base;
  const double t = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(total - 1));
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace uvar
