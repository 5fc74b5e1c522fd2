#pragma once

#include <string>
#include <vector>

#include "ultravar/ops.hpp"
#include "ultravar/rng.hpp"
#include "ultravar/tensor.hpp"

namespace uvar {

// A parameter exposed under its hierarchical checkpoint name.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decay = true;  // decoupled weight decay applies
};
using ParamList = std::vector<NamedTensor>;

// Normal(0, stddev) initialized trainable tensor.
Tensor normal_param(Shape shape, double stddev, Rng& rng);
Tensor zero_param(Shape shape);
Tensor const_param(Shape shape, float value);

struct Conv2d {
  Tensor weight;  // [out x in x k x k]
  Tensor bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  // He-normal weights, zero bias.
  static Conv2d create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                       Rng& rng, double gain = 2.0);
  static Conv2d zeros(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride);

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], may be undefined

  static Linear create(std::size_t in, std::size_t out, Rng& rng, double stddev, bool with_bias = true);
  static Linear zeros(std::size_t in, std::size_t out, bool with_bias = true);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm create(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

// Copies every tensor value of `src` into the same-named tensor of `dst`.
// Missing names or shape mismatches raise StateError.
void assign_params(const ParamList& dst, const ParamList& src);
ParamList find_prefix(const ParamList& params, const std::string& prefix);
void zero_grads(const ParamList& params);

}  // namespace uvar
