#pragma once

#include <vector>

#include "ultravar/nn.hpp"
#include "ultravar/rng.hpp"

namespace uvar {

struct PemConfig {
  std::size_t features = 16;   // Cp
  std::size_t cond_dim = 32;   // d_c
  std::size_t cond_hidden = 16;
  std::size_t cond_kernel = 3;
  std::size_t cond_stride = 2;
};

// Conv stack (ReLU between layers) followed by a global spatial mean.
struct ConditionNet {
  std::vector<Conv2d> layers;

  static ConditionNet create(const PemConfig& config, Rng& rng);
  // [B x 1 x H x W] -> [B x d_c]
  Tensor operator()(const Tensor& image) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Gfm {
  Conv2d f;        // Cp -> Cp, 3x3
  Linear scale;    // d_c -> Cp
  Linear shift;    // d_c -> Cp

  static Gfm create(const PemConfig& config, Rng& rng);
  // relu(f(x) * scale(cond) + shift(cond) + f(x)), per-channel over space.
  Tensor operator()(const Tensor& x, const Tensor& cond) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// relu(fx * s + t + fx) with s, t [B x Cp] broadcast over space.
Tensor gfm_modulate(const Tensor& fx, const Tensor& s, const Tensor& t);

struct Pem {
  PemConfig config;
  ConditionNet cond_net;
  Conv2d input;      // 1 -> Cp
  Gfm blocks[3];
  Conv2d output;     // Cp -> 1, zero-initialized

  static Pem create(const PemConfig& config, Rng& rng);
  // clamp(image + output(GFM3(GFM2(GFM1(input(image)))))), cond computed once.
  Tensor operator()(const Tensor& image) const;
  void collect(ParamList& out) const;
  ParamList params() const;
};

}  // namespace uvar
