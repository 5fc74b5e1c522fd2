#pragma once

#include <cstddef>
#include <vector>

#include "ultravar/nn.hpp"

namespace uvar {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adaptive-moment optimizer with decoupled weight decay. Moments are kept in
// float64, one buffer per parameter in registration order.
class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig config);

  // Applies one update using the gradients currently stored on the
  // parameters, then clears them. Parameters without a gradient are skipped.
  void step(double lr);
  void zero_grad();

  // Forgets the moments of rows [begin, end) of parameter `index` (used when
  // codebook entries are re-seeded).
  void reset_rows(std::size_t index, std::size_t begin, std::size_t end);

  const ParamList& params() const { return params_; }
  std::size_t steps() const { return t_; }

 private:
  ParamList params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Cosine annealing from `base` to `floor` over `total` epochs, evaluated per epoch.
double cosine_lr(double base, double floor, std::size_t epoch, std::size_t total);

}  // namespace uvar
