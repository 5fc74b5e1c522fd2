#include "ultravar/vqvae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "ultravar/error.hpp"
#include "ultravar/ops.hpp"

namespace uvar {

void VqvaeConfig::validate() const {
  if (downsample < 2 || !std::has_single_bit(downsample))
    throw ConfigError("vqvae: downsample must be a power of two >= 2, got " + std::to_string(downsample));
  if (image_side == 0 || image_side % downsample != 0)
    throw ConfigError("vqvae: image side " + std::to_string(image_side) + " not divisible by " +
                      std::to_string(downsample));
  if (codebook_size < 2) throw ConfigError("vqvae: codebook size must be >= 2");
  if (channels == 0 || hidden1 == 0 || hidden2 == 0) throw ConfigError("vqvae: zero width");
  if (schedule.empty() || schedule.front() != 1)
    throw ConfigError("vqvae: schedule must start at 1");
  for (std::size_t i = 1; i < schedule.size(); ++i)
    if (schedule[i] <= schedule[i - 1]) throw ConfigError("vqvae: schedule must be strictly increasing");
  if (schedule.back() != latent_side())
    throw ConfigError("vqvae: schedule ends at " + std::to_string(schedule.back()) + " but latent side is " +
                      std::to_string(latent_side()));
}

std::size_t MultiScaleTokens::total() const {
  std::size_t n = 0;
  for (const auto& g : grids) n += g.size();
  return n;
}

std::vector<std::size_t> MultiScaleTokens::flat() const {
  std::vector<std::size_t> out;
  out.reserve(total());
  for (const auto& g : grids) out.insert(out.end(), g.begin(), g.end());
  return out;
}

std::size_t nearest_code(std::span<const float> v, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(1) != v.size())
    throw DimensionError("nearest_code: vector of length " + std::to_string(v.size()) + " vs codebook " +
                         shape_str(codebook.shape()));
  const std::size_t k = codebook.dim(0), c = v.size();
  auto cb = codebook.data();
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t i = 0; i < k; ++i) {
    double dist = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double diff = static_cast<double>(v[j]) - cb[i * c + j];
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = i;
    }
  }
  return best;
}

Tensor quant_loss(const Tensor& z, const Tensor& d, double beta, bool conventional) {
  if (z.shape() != d.shape())
    throw DimensionError("quant_loss: " + shape_str(z.shape()) + " vs " + shape_str(d.shape()));
  const float channels = static_cast<float>(d.dim(1));
  const float b = static_cast<float>(beta);
  Tensor loss = conventional
                    ? add(mse_loss(stop_gradient(d), z), scale(mse_loss(d, stop_gradient(z)), b))
                    : add(mse_loss(stop_gradient(z), d), scale(mse_loss(z, stop_gradient(d)), b));
  return scale(loss, channels);
}

Tensor vqvae_loss(const Tensor& x, const Tensor& x_hat, const Tensor& l_quant) {
  return add(mse_loss(x_hat, x), l_quant);
}

Vqvae Vqvae::create(const VqvaeConfig& config, Rng& rng) {
  config.validate();
  Vqvae m;
  m.config = config;
  const std::size_t levels = static_cast<std::size_t>(std::countr_zero(config.downsample));
  const std::size_t c = config.channels, w1 = config.hidden1, w2 = config.hidden2;

  m.encoder.push_back(Conv2d::create(1, w1, 3, 1, rng));
  for (std::size_t i = 1; i <= levels; ++i)
    m.encoder.push_back(Conv2d::create(i == 1 ? w1 : w2, i == levels ? c : w2, 3, 2, rng, i == levels ? 1.0 : 2.0));

  m.decoder.push_back(Conv2d::create(c, w2, 3, 1, rng));
  for (std::size_t i = 1; i < levels; ++i) m.decoder.push_back(Conv2d::create(w2, w2, 3, 1, rng));
  m.decoder.push_back(Conv2d::create(w2, w1, 3, 1, rng));
  m.decoder.push_back(Conv2d::create(w1, 1, 3, 1, rng, 1.0));

  Tensor cb({config.codebook_size, c});
  const double s = 1.0 / std::sqrt(static_cast<double>(c));
  for (auto& v : cb.data()) v = static_cast<float>(rng.normal() * s);
  cb.set_requires_grad(true);
  m.codebook = cb;

  for (std::size_t k = 0; k < config.schedule.size(); ++k) {
    Conv2d phi = Conv2d::zeros(c, c, 3, 1);
    auto w = phi.weight.data();
    for (std::size_t ch = 0; ch < c; ++ch) w[((ch * c + ch) * 3 + 1) * 3 + 1] = 1.0f;
    m.phi.push_back(phi);
  }
  return m;
}

Tensor Vqvae::encode(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 1)
    throw DimensionError("encode: expected [B x 1 x H x W], got " + shape_str(image.shape()));
  if (image.dim(2) % config.downsample != 0 || image.dim(3) % config.downsample != 0)
    throw ConfigError("encode: " + shape_str(image.shape()) + " not divisible by " +
                      std::to_string(config.downsample));
  Tensor h = image;
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    h = encoder[i](h);
    if (i + 1 < encoder.size()) h = relu(h);
  }
  return h;
}

Tensor Vqvae::lookup(const std::vector<const std::vector<std::size_t>*>& grids, std::size_t p) const {
  std::vector<std::size_t> ids;
  ids.reserve(grids.size() * p * p);
  for (const auto* g : grids) {
    if (g->size() != p * p)
      throw DimensionError("lookup: grid of " + std::to_string(g->size()) + " tokens for side " + std::to_string(p));
    ids.insert(ids.end(), g->begin(), g->end());
  }
  const std::size_t b = grids.size(), c = config.channels;
  Tensor z = reshape(embedding(codebook, ids), {b, p * p, c});
  return reshape(transpose(z), {b, c, p, p});
}

Tensor Vqvae::scale_update(std::size_t k, const Tensor& z) const {
  const std::size_t pn = config.schedule.back();
  return phi.at(k)(bilinear_resize(z, pn, pn));
}

QuantizeResult Vqvae::quantize(const Tensor& f) const {
  const std::size_t pn = config.schedule.back();
  if (f.rank() != 4 || f.dim(1) != config.channels)
    throw DimensionError("quantize: expected [B x C x h x w], got " + shape_str(f.shape()));
  if (f.dim(2) != pn || f.dim(3) != pn)
    throw ConfigError("quantize: latent " + shape_str(f.shape()) + " does not match schedule end " +
                      std::to_string(pn));
  const std::size_t batch = f.dim(0), c = config.channels;
  QuantizeResult res;
  res.tokens.resize(batch);
  Tensor f_hat = Tensor::zeros(f.shape());
  std::vector<float> v(c);
  for (std::size_t k = 0; k < config.schedule.size(); ++k) {
    const std::size_t p = config.schedule[k];
    Tensor r = sub(f, stop_gradient(f_hat));
    Tensor d = bilinear_resize(r, p, p);
    auto dv = d.data();
    std::vector<const std::vector<std::size_t>*> grids;
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<std::size_t> grid(p * p);
      for (std::size_t pos = 0; pos < p * p; ++pos) {
        for (std::size_t ch = 0; ch < c; ++ch) v[ch] = dv[(b * c + ch) * p * p + pos];
        grid[pos] = nearest_code(v, codebook);
      }
      res.tokens[b].grids.push_back(std::move(grid));
    }
    for (std::size_t b = 0; b < batch; ++b) grids.push_back(&res.tokens[b].grids.back());
    Tensor z = lookup(grids, p);
    Tensor lk = quant_loss(z, d, config.beta, config.quant_loss_conventional);
    res.l_quant = res.l_quant.defined() ? add(res.l_quant, lk) : lk;
    f_hat = add(f_hat, scale_update(k, z));
    res.d.push_back(d);
    res.residuals.push_back(r);
    res.partial.push_back(f_hat);
  }
  res.f_hat = f_hat;
  return res;
}

Tensor Vqvae::decode(const Tensor& f_hat) const {
  const std::size_t pn = config.schedule.back();
  if (f_hat.rank() != 4 || f_hat.dim(1) != config.channels || f_hat.dim(2) != pn || f_hat.dim(3) != pn)
    throw DimensionError("decode: expected [B x " + std::to_string(config.channels) + " x " + std::to_string(pn) +
                         " x " + std::to_string(pn) + "], got " + shape_str(f_hat.shape()));
  const std::size_t last = decoder.size() - 1;
  Tensor h = f_hat;
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    if (i >= 1 && i < last) h = upsample_nearest(h, 2);
    h = decoder[i](h);
    h = i < last ? relu(h) : sigmoid(h);
  }
  return h;
}

Tensor Vqvae::tokens_to_latent(const std::vector<MultiScaleTokens>& tokens, std::size_t scales) const {
  const std::size_t pn = config.schedule.back();
  Tensor f_hat = Tensor::zeros({tokens.size(), config.channels, pn, pn});
  for (std::size_t k = 0; k < scales; ++k) {
    std::vector<const std::vector<std::size_t>*> grids;
    for (const auto& t : tokens) grids.push_back(&t.grids.at(k));
    f_hat = add(f_hat, scale_update(k, lookup(grids, config.schedule[k])));
  }
  return f_hat;
}

std::vector<Tensor> Vqvae::tokens_to_teacher_inputs(const std::vector<MultiScaleTokens>& tokens) const {
  const std::size_t n = config.schedule.size();
  for (const auto& t : tokens)
    if (t.grids.size() != n) throw ConfigError("teacher inputs: token pyramid does not match schedule");
  std::vector<Tensor> inputs;
  if (n <= 1) return inputs;
  const std::size_t pn = config.schedule.back();
  Tensor f_hat = Tensor::zeros({tokens.size(), config.channels, pn, pn});
  for (std::size_t k = 0; k + 1 < n; ++k) {
    std::vector<const std::vector<std::size_t>*> grids;
    for (const auto& t : tokens) grids.push_back(&t.grids[k]);
    f_hat = add(f_hat, scale_update(k, lookup(grids, config.schedule[k])));
    inputs.push_back(bilinear_resize(f_hat, config.schedule[k + 1], config.schedule[k + 1]));
  }
  return inputs;
}

void Vqvae::collect(ParamList& out) const {
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect("vqvae.encoder." + std::to_string(i), out);
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect("vqvae.decoder." + std::to_string(i), out);
  out.push_back({"vqvae.codebook", codebook, false});
  for (std::size_t i = 0; i < phi.size(); ++i) phi[i].collect("vqvae.phi." + std::to_string(i), out);
}

ParamList Vqvae::params() const {
  ParamList out;
  collect(out);
  return out;
}

std::vector<std::size_t> reseed_dead_codes(Tensor& codebook, std::span<const std::uint64_t> usage,
                                           const std::vector<float>& reservoir, Rng& rng) {
  const std::size_t k = codebook.dim(0), c = codebook.dim(1);
  if (usage.size() != k) throw DimensionError("reseed_dead_codes: usage length mismatch");
  std::vector<std::size_t> dead;
  const std::size_t m = reservoir.size() / c;
  if (m == 0) return dead;
  auto cb = codebook.data();
  for (std::size_t i = 0; i < k; ++i) {
    if (usage[i] != 0) continue;
    const std::size_t src = rng.below(m);
    std::copy_n(reservoir.begin() + static_cast<std::ptrdiff_t>(src * c), c, cb.begin() + static_cast<std::ptrdiff_t>(i * c));
    dead.push_back(i);
  }
  return dead;
}

}  // namespace uvar
