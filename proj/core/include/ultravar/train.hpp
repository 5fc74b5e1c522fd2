#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ultravar/config.hpp"
#include "ultravar/pem.hpp"
#include "ultravar/var.hpp"
#include "ultravar/vqvae.hpp"

namespace uvar {

struct Stage1Log {
  std::size_t epoch = 0;
  double l_recon = 0.0;  // on the final output (PEM-refined when trained)
  double l_quant = 0.0;
  std::size_t reseeded = 0;
};

struct Stage1Options {
  TrainConfig train;
  bool train_pem = true;
  bool pem_post_hoc = false;  // freeze the autoencoder, fit PEM only
  std::uint64_t seed = 0;
  std::function<void(const Stage1Log&)> on_epoch;
};

// Per batch: L = MSE(decode) [+ MSE(pem(decode))] + L_quant.
std::vector<Stage1Log> train_stage1(Vqvae& vqvae, Pem* pem, const std::vector<Tensor>& images,
                                    const Stage1Options& options);

struct Stage2Log {
  std::size_t epoch = 0;
  double l_var = 0.0;
};

struct Stage2Options {
  TrainConfig train;
  std::uint64_t seed = 0;
  bool class_dropout = true;
  bool ssl_dropout = true;
  std::function<void(const Stage2Log&)> on_epoch;
  // Called after every optimizer step with the mean batch loss.
  std::function<void(std::size_t, double)> on_step;
};

struct TeacherData {
  std::vector<MultiScaleTokens> tokens;
  std::vector<std::vector<Tensor>> inputs;  // per sample, scales 2..n, [C x p x p]
};

// Tokens and teacher-forced inputs of each image under a frozen autoencoder.
TeacherData teacher_data(const Vqvae& vqvae, const std::vector<Tensor>& images);

// Teacher-forced L_VAR of one sample.
Tensor var_sample_loss(const VarModel& var, std::size_t class_id, const std::vector<Tensor>& inputs,
                       const MultiScaleTokens& tokens, Rng* dropout_rng);

std::vector<Stage2Log> train_stage2(VarModel& var, const Vqvae& vqvae, const std::vector<Tensor>& images,
                                    const std::vector<std::size_t>& labels, const Stage2Options& options);

// Reconstruction through encode -> quantize -> decode [-> pem], no gradient.
Tensor reconstruct(const Vqvae& vqvae, const Pem* pem, const Tensor& batch);

// Stacks [1 x H x W] images into [B x 1 x H x W].
Tensor batch_of(const std::vector<Tensor>& images);

}  // namespace uvar
