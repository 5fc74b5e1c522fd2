#include "ultravar/nn.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "ultravar/error.hpp"

namespace uvar {

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal() * stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor zero_param(Shape shape) { return const_param(std::move(shape), 0.0f); }

Tensor const_param(Shape shape, float value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Conv2d Conv2d::create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                      Rng& rng, double gain) {
  Conv2d c;
  const double fan_in = static_cast<double>(in * kernel * kernel);
  c.weight = normal_param({out, in, kernel, kernel}, std::sqrt(gain / fan_in), rng);
  c.bias = zero_param({out});
  c.stride = stride;
  c.padding = kernel / 2;
  return c;
}

Conv2d Conv2d::zeros(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride) {
  Conv2d c;
  c.weight = zero_param({out, in, kernel, kernel});
  c.bias = zero_param({out});
  c.stride = stride;
  c.padding = kernel / 2;
  return c;
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, false});
}

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, double stddev, bool with_bias) {
  Linear l;
  l.weight = normal_param({in, out}, stddev, rng);
  if (with_bias) l.bias = zero_param({out});
  return l;
}

Linear Linear::zeros(std::size_t in, std::size_t out, bool with_bias) {
  Linear l;
  l.weight = zero_param({in, out});
  if (with_bias) l.bias = zero_param({out});
  return l;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, false});
}

LayerNorm LayerNorm::create(std::size_t dim) {
  return LayerNorm{const_param({dim}, 1.0f), zero_param({dim})};
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

void assign_params(const ParamList& dst, const ParamList& src) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& p : src) by_name[p.name] = &p.tensor;
  for (const auto& p : dst) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw StateError("missing parameter '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw StateError("parameter '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                       ", expected " + shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    std::copy(it->second->data().begin(), it->second->data().end(), t.data().begin());
  }
}

ParamList find_prefix(const ParamList& params, const std::string& prefix) {
  ParamList out;
  for (const auto& p : params) {
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  }
  return out;
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace uvar
