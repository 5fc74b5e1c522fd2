#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "ultravar/nn.hpp"
#include "ultravar/pem.hpp"
#include "ultravar/rng.hpp"
#include "ultravar/vqvae.hpp"

namespace uvar {

struct VarConfig {
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t ff_mult = 4;
  std::size_t num_classes = 2;
  std::size_t ssl_window = 8;
  std::size_t ssl_hidden_mult = 2;
  double ssl_dropout = 0.1;
  double class_dropout = 0.1;
  bool disable_scl = false;

  void validate() const;
};

struct SamplerConfig {
  double temperature = 1.0;
  double top_p = 0.95;
  double cfg_scale = 1.5;
  std::uint64_t seed = 0;
};

// Residual windowed MLP over logits: x + W2(drop(GELU(W1 LN(window))))
// with windows of `window` consecutive rows flattened to window*V.
struct SmoothScaling {
  LayerNorm norm;
  Linear w1;
  Linear w2;  // zero-initialized
  std::size_t window = 8;
  float dropout = 0.0f;

  static SmoothScaling create(std::size_t vocab, std::size_t window, std::size_t hidden_mult, float dropout,
                              Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

// logits [L x V]; rows are zero-padded to a multiple of the window and the
// padding stripped afterwards. Dropout is applied only when `rng` is given.
Tensor smooth_scaling(const Tensor& logits, const SmoothScaling& ssl, Rng* rng = nullptr);

// (1 + g) * cond - g * uncond with g = cfg_scale * stage_ratio.
Tensor cfg_combine(const Tensor& l_cond, const Tensor& l_uncond, double cfg_scale, double stage_ratio);

// Temperature + nucleus sampling over one row of logits.
std::size_t sample(std::span<const float> logits, double temperature, double top_p, Rng& rng);

// i / (n - 1), or 0 for a single stage.
double stage_ratio(std::size_t stage, std::size_t stages);

std::size_t sequence_length(const std::vector<std::size_t>& schedule, std::size_t scales);
// 1-based scale id per position for the first `scales` scales.
std::vector<std::size_t> scale_ids(const std::vector<std::size_t>& schedule, std::size_t scales);
// Row-major [L x L], allowed iff scale(query) >= scale(key).
std::vector<std::uint8_t> block_causal_mask(const std::vector<std::size_t>& ids);

struct VarBlock {
  LayerNorm ln1;
  Linear q, k, v, proj;
  LayerNorm ln2;
  Linear ff1, ff2;
};

struct VarModel {
  VarConfig config;
  VqvaeConfig vq;
  Linear in_proj;      // C -> D
  Tensor class_emb;    // [(num_classes + 1) x D], last row = null class
  std::vector<VarBlock> blocks;
  LayerNorm final_norm;
  Linear head;         // D -> K
  SmoothScaling ssl;

  static VarModel create(const VarConfig& config, const VqvaeConfig& vq, Rng& rng);

  std::size_t null_class() const { return config.num_classes; }

  // Start token from the class embedding, then the projected teacher inputs
  // of scales 2..`scales` (each [1 x C x p x p] or [C x p x p]). Returns [L x D].
  Tensor build_sequence(std::size_t class_id, const std::vector<Tensor>& inputs, std::size_t scales) const;
  // [L x D] -> [L x K] under the block-causal mask.
  Tensor forward_logits(const Tensor& seq) const;
  // Smooth scaling applied to each scale block separately.
  Tensor refine(const Tensor& logits, std::size_t scales, Rng* dropout_rng) const;

  void collect(ParamList& out) const;
  ParamList params() const;
};

// Cross entropy over every position.
Tensor var_loss(const Tensor& logits, std::span<const std::size_t> targets);

struct GenerateOptions {
  bool use_pem = true;
  bool use_scl = true;
  // Token grids forced for the leading scales instead of being sampled.
  std::vector<std::vector<std::size_t>> forced;
};

struct Generated {
  MultiScaleTokens tokens;
  Tensor image;  // [1 x 1 x H x W]
};

// Per-sample RNG stream keyed by (sampler seed, sample index).
Generated generate(std::size_t class_id, const SamplerConfig& sampler, std::uint64_t sample_index,
                   const Vqvae& vqvae, const Pem* pem, const VarModel& var,
                   const GenerateOptions& options = {});

}  // namespace uvar
