#pragma once

#include <cstdint>
#include <vector>

#include "ultravar/nn.hpp"
#include "ultravar/rng.hpp"
#include "ultravar/tensor.hpp"

namespace uvar {

struct VqvaeConfig {
  std::size_t image_side = 32;
  std::size_t downsample = 4;  // power of two
  std::size_t channels = 16;   // C
  std::size_t codebook_size = 128;  // K
  std::vector<std::size_t> schedule{1, 2, 4, 8};
  std::size_t hidden1 = 16;
  std::size_t hidden2 = 32;
  double beta = 0.25;
  bool quant_loss_conventional = false;

  std::size_t latent_side() const { return image_side / downsample; }
  // Throws ConfigError when the schedule, factor or sizes are inconsistent.
  void validate() const;
};

// Per-scale index grids idx_k, row-major p_k x p_k.
struct MultiScaleTokens {
  std::vector<std::vector<std::size_t>> grids;

  std::size_t total() const;
  std::vector<std::size_t> flat() const;
  bool operator==(const MultiScaleTokens&) const = default;
};

struct QuantizeResult {
  Tensor f_hat;                            // [B x C x h x w]
  std::vector<MultiScaleTokens> tokens;    // one per batch element
  Tensor l_quant;                          // scalar
  std::vector<Tensor> d;                   // per-scale quantizer inputs [B x C x p x p]
  std::vector<Tensor> residuals;           // r_1..r_n, r_k = f - f_hat_{k-1}
  std::vector<Tensor> partial;             // f_hat_1..f_hat_n
};

// Index of the nearest codebook row (squared L2), lowest index on ties.
std::size_t nearest_code(std::span<const float> v, const Tensor& codebook);

// Per-scale sum over channels, mean over positions of
//   |sg[z] - d|^2 + beta |z - sg[d]|^2       (as printed)
//   |sg[d] - z|^2 + beta |d - sg[z]|^2       (conventional)
Tensor quant_loss(const Tensor& z, const Tensor& d, double beta, bool conventional);

// Mean squared reconstruction error plus the quantization loss.
Tensor vqvae_loss(const Tensor& x, const Tensor& x_hat, const Tensor& l_quant);

struct Vqvae {
  VqvaeConfig config;
  std::vector<Conv2d> encoder;
  std::vector<Conv2d> decoder;
  Tensor codebook;           // [K x C]
  std::vector<Conv2d> phi;   // one per scale, 3x3 C->C

  static Vqvae create(const VqvaeConfig& config, Rng& rng);

  // [B x 1 x H x W] -> [B x C x h x w]
  Tensor encode(const Tensor& image) const;
  QuantizeResult quantize(const Tensor& f) const;
  // [B x C x h x w] -> [B x 1 x H x W] in (0, 1)
  Tensor decode(const Tensor& f_hat) const;

  // z_k looked up from a grid, [B x C x p x p].
  Tensor lookup(const std::vector<const std::vector<std::size_t>*>& grids, std::size_t p) const;
  // phi_k(resize(z_k, p_n)), the contribution of scale k to f_hat.
  Tensor scale_update(std::size_t k, const Tensor& z) const;
  // Cumulative f_hat after the first `scales` scales of each token pyramid.
  Tensor tokens_to_latent(const std::vector<MultiScaleTokens>& tokens, std::size_t scales) const;
  // Inputs for scales 2..n: resize(f_hat_{k-1}, p_k), each [B x C x p_k x p_k].
  std::vector<Tensor> tokens_to_teacher_inputs(const std::vector<MultiScaleTokens>& tokens) const;

  void collect(ParamList& out) const;
  ParamList params() const;
};

// Replaces codebook rows unused during an epoch with random quantizer inputs
// drawn from `reservoir` ([M x C]). Returns the re-seeded row indices.
std::vector<std::size_t> reseed_dead_codes(Tensor& codebook, std::span<const std::uint64_t> usage,
                                           const std::vector<float>& reservoir, Rng& rng);

}  // namespace uvar
