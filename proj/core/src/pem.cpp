#include "ultravar/pem.hpp"

#include "ultravar/error.hpp"
#include "ultravar/ops.hpp"

namespace uvar {

ConditionNet ConditionNet::create(const PemConfig& config, Rng& rng) {
  ConditionNet net;
  const std::size_t k = config.cond_kernel, s = config.cond_stride;
  net.layers.push_back(Conv2d::create(1, config.cond_hidden, k, s, rng));
  net.layers.push_back(Conv2d::create(config.cond_hidden, 2 * config.cond_hidden, k, s, rng));
  net.layers.push_back(Conv2d::create(2 * config.cond_hidden, config.cond_dim, 1, 1, rng, 1.0));
  return net;
}

Tensor ConditionNet::operator()(const Tensor& image) const {
  Tensor h = image;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return mean_spatial(h);
}

void ConditionNet::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
}

Gfm Gfm::create(const PemConfig& config, Rng& rng) {
  Gfm g;
  g.f = Conv2d::create(config.features, config.features, 3, 1, rng);
  g.scale = Linear::create(config.cond_dim, config.features, rng, 0.02);
  g.shift = Linear::create(config.cond_dim, config.features, rng, 0.02);
  return g;
}

Tensor gfm_modulate(const Tensor& fx, const Tensor& s, const Tensor& t) {
  if (fx.rank() != 4 || s.rank() != 2 || s.shape() != t.shape() || s.dim(0) != fx.dim(0) || s.dim(1) != fx.dim(1))
    throw DimensionError("gfm: features " + shape_str(fx.shape()) + " vs modulation " + shape_str(s.shape()));
  const Shape bc{s.dim(0), s.dim(1), 1, 1};
  return relu(add(add(mul(fx, reshape(s, bc)), reshape(t, bc)), fx));
}

Tensor Gfm::operator()(const Tensor& x, const Tensor& cond) const {
  return gfm_modulate(f(x), scale(cond), shift(cond));
}

void Gfm::collect(const std::string& prefix, ParamList& out) const {
  f.collect(prefix + ".f", out);
  scale.collect(prefix + ".scale", out);
  shift.collect(prefix + ".shift", out);
}

Pem Pem::create(const PemConfig& config, Rng& rng) {
  Pem p;
  p.config = config;
  p.cond_net = ConditionNet::create(config, rng);
  p.input = Conv2d::create(1, config.features, 3, 1, rng);
  for (auto& b : p.blocks) b = Gfm::create(config, rng);
  p.output = Conv2d::zeros(config.features, 1, 3, 1);
  return p;
}

Tensor Pem::operator()(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 1)
    throw DimensionError("pem: expected [B x 1 x H x W], got " + shape_str(image.shape()));
  const Tensor cond = cond_net(image);
  Tensor h = input(image);
  for (const auto& b : blocks) h = b(h, cond);
  return clamp(add(image, output(h)), 0.0f, 1.0f);
}

void Pem::collect(ParamList& out) const {
  cond_net.collect("pem.cond", out);
  input.collect("pem.input", out);
  for (std::size_t i = 0; i < 3; ++i) blocks[i].collect("pem.gfm." + std::to_string(i), out);
  output.collect("pem.output", out);
}

ParamList Pem::params() const {
  ParamList out;
  collect(out);
  return out;
}

}  // namespace uvar
