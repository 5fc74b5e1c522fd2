#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ultravar/downstream.hpp"
#include "ultravar/optim.hpp"
#include "ultravar/pem.hpp"
#include "ultravar/synth.hpp"
#include "ultravar/var.hpp"
#include "ultravar/vqvae.hpp"

namespace uvar {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double lr_floor = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  std::size_t max_steps = 0;  // 0 = no cap

  AdamWConfig adamw() const { return {lr, beta1, beta2, 1e-8, weight_decay}; }
};

struct DataCounts {
  std::size_t train_class0 = 141;
  std::size_t train_class1 = 75;
  std::size_t test_class0 = 39;
  std::size_t test_class1 = 15;
};

struct EvalConfig {
  std::size_t seeds = 5;
  std::size_t augment_class0 = 0;
  std::size_t augment_class1 = 66;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SynthConfig synth;
  DataCounts counts;
  VqvaeConfig vqvae;
  PemConfig pem;
  VarConfig var;
  TrainConfig stage1;
  TrainConfig stage2;
  bool disable_pem = false;
  bool pem_post_hoc = false;
  SamplerConfig sampler;
  ClassifierConfig classifier;
  EvalConfig eval;

  void validate() const;
  // Sorted keys, no whitespace; stable for hashing.
  std::string to_json() const;
  // Unknown keys raise ConfigError; absent keys keep their defaults.
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace uvar
