#include "ultravar/var.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ultravar/error.hpp"
#include "ultravar/ops.hpp"

namespace uvar {

void VarConfig::validate() const {
  if (model_dim == 0 || heads == 0 || model_dim % heads != 0)
    throw ConfigError("var: model_dim " + std::to_string(model_dim) + " not divisible by heads " +
                      std::to_string(heads));
  if ((model_dim / heads) % 2 != 0) throw ConfigError("var: rotary head dim must be even");
  if (layers == 0 || ff_mult == 0 || num_classes == 0 || ssl_window == 0 || ssl_hidden_mult == 0)
    throw ConfigError("var: sizes must be positive");
  if (ssl_dropout < 0.0 || ssl_dropout >= 1.0 || class_dropout < 0.0 || class_dropout >= 1.0)
    throw ConfigError("var: dropout rates must be in [0, 1)");
}

SmoothScaling SmoothScaling::create(std::size_t vocab, std::size_t window, std::size_t hidden_mult, float dropout,
                                    Rng& rng) {
  SmoothScaling s;
  const std::size_t flat = window * vocab, hidden = hidden_mult * vocab;
  s.norm = LayerNorm::create(flat);
  s.w1 = Linear::create(flat, hidden, rng, 1.0 / std::sqrt(static_cast<double>(flat)), false);
  s.w2 = Linear::zeros(hidden, flat, false);
  s.window = window;
  s.dropout = dropout;
  return s;
}

void SmoothScaling::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  w1.collect(prefix + ".w1", out);
  w2.collect(prefix + ".w2", out);
}

Tensor smooth_scaling(const Tensor& logits, const SmoothScaling& ssl, Rng* rng) {
  if (logits.rank() != 2) throw DimensionError("smooth_scaling: expected [L x V], got " + shape_str(logits.shape()));
  const std::size_t len = logits.dim(0), vocab = logits.dim(1), w = ssl.window;
  if (ssl.norm.gamma.numel() != w * vocab)
    throw DimensionError("smooth_scaling: layer built for " + std::to_string(ssl.norm.gamma.numel()) +
                         " flattened logits, got window " + std::to_string(w) + " x " + std::to_string(vocab));
  const std::size_t padded = (len + w - 1) / w * w;
  Tensor x = padded == len ? logits : pad_rows(logits, padded);
  Tensor h = gelu(ssl.w1(ssl.norm(reshape(x, {padded / w, w * vocab}))));
  if (rng != nullptr && ssl.dropout > 0.0f) h = dropout(h, ssl.dropout, *rng);
  Tensor m = reshape(ssl.w2(h), {padded, vocab});
  if (padded != len) m = slice_rows(m, 0, len);
  return add(logits, m);
}

Tensor cfg_combine(const Tensor& l_cond, const Tensor& l_uncond, double cfg_scale, double stage_ratio) {
  if (stage_ratio < 0.0 || stage_ratio > 1.0) throw ContractError("cfg_combine: stage ratio outside [0, 1]");
  const double g = cfg_scale * stage_ratio;
  if (g == 0.0) return l_cond;
  return sub(scale(l_cond, static_cast<float>(1.0 + g)), scale(l_uncond, static_cast<float>(g)));
}

std::size_t sample(std::span<const float> logits, double temperature, double top_p, Rng& rng) {
  if (logits.empty()) throw ContractError("sample: empty logits");
  if (!(temperature > 0.0)) throw ContractError("sample: temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ContractError("sample: top_p must be in (0, 1]");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    total += p[i];
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < order.size()) {
    mass += p[order[keep++]];
    if (mass >= top_p * total) break;
  }
  double u = rng.uniform() * mass;
  for (std::size_t i = 0; i < keep; ++i) {
    u -= p[order[i]];
    if (u < 0.0) return order[i];
  }
  return order[keep - 1];
}

double stage_ratio(std::size_t stage, std::size_t stages) {
  return stages <= 1 ? 0.0 : static_cast<double>(stage) / static_cast<double>(stages - 1);
}

std::size_t sequence_length(const std::vector<std::size_t>& schedule, std::size_t scales) {
  std::size_t n = 0;
  for (std::size_t k = 0; k < scales && k < schedule.size(); ++k) n += schedule[k] * schedule[k];
  return n;
}

std::vector<std::size_t> scale_ids(const std::vector<std::size_t>& schedule, std::size_t scales) {
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < scales && k < schedule.size(); ++k) ids.insert(ids.end(), schedule[k] * schedule[k], k + 1);
  return ids;
}

std::vector<std::uint8_t> block_causal_mask(const std::vector<std::size_t>& ids) {
  const std::size_t n = ids.size();
  std::vector<std::uint8_t> mask(n * n);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k) mask[q * n + k] = ids[q] >= ids[k] ? 1 : 0;
  return mask;
}

VarModel VarModel::create(const VarConfig& config, const VqvaeConfig& vq, Rng& rng) {
  config.validate();
  vq.validate();
  VarModel m;
  m.config = config;
  m.vq = vq;
  const std::size_t d = config.model_dim, c = vq.channels, ff = config.ff_mult * d;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  m.in_proj = Linear::create(c, d, rng, 1.0 / std::sqrt(static_cast<double>(c)));
  m.class_emb = normal_param({config.num_classes + 1, d}, 0.5, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    VarBlock b;
    b.ln1 = LayerNorm::create(d);
    b.q = Linear::create(d, d, rng, sd);
    b.k = Linear::create(d, d, rng, sd);
    b.v = Linear::create(d, d, rng, sd);
    b.proj = Linear::create(d, d, rng, 0.02);
    b.ln2 = LayerNorm::create(d);
    b.ff1 = Linear::create(d, ff, rng, sd);
    b.ff2 = Linear::create(ff, d, rng, 0.02);
    m.blocks.push_back(b);
  }
  m.final_norm = LayerNorm::create(d);
  m.head = Linear::create(d, vq.codebook_size, rng, 0.02);
  m.ssl = SmoothScaling::create(vq.codebook_size, config.ssl_window, config.ssl_hidden_mult,
                                static_cast<float>(config.ssl_dropout), rng);
  return m;
}

Tensor VarModel::build_sequence(std::size_t class_id, const std::vector<Tensor>& inputs, std::size_t scales) const {
  if (class_id > config.num_classes) throw IndexError("build_sequence: class " + std::to_string(class_id) + " out of range");
  if (scales == 0 || scales > vq.schedule.size() || inputs.size() < scales - 1)
    throw ConfigError("build_sequence: " + std::to_string(inputs.size()) + " teacher inputs for " +
                      std::to_string(scales) + " scales");
  const std::size_t id[1] = {class_id};
  std::vector<Tensor> parts{embedding(class_emb, id)};
  for (std::size_t k = 1; k < scales; ++k) {
    const Tensor& x = inputs[k - 1];
    const std::size_t p = vq.schedule[k];
    if (x.numel() != vq.channels * p * p)
      throw DimensionError("build_sequence: teacher input " + shape_str(x.shape()) + " does not match scale side " +
                        std::to_string(p));
    parts.push_back(in_proj(transpose(reshape(x, {vq.channels, p * p}))));
  }
  return concat_rows(parts);
}

Tensor VarModel::forward_logits(const Tensor& seq) const {
  if (seq.rank() != 2 || seq.dim(1) != config.model_dim)
    throw DimensionError("forward_logits: expected [L x " + std::to_string(config.model_dim) + "], got " +
                         shape_str(seq.shape()));
  const std::size_t len = seq.dim(0);
  std::size_t scales = 0;
  while (scales < vq.schedule.size() && sequence_length(vq.schedule, scales) < len) ++scales;
  if (sequence_length(vq.schedule, scales) != len)
    throw ConfigError("forward_logits: length " + std::to_string(len) + " is not a scale boundary");
  const auto mask = block_causal_mask(scale_ids(vq.schedule, scales));
  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), 0);
  const std::size_t h = config.heads;
  const float inv = 1.0f / std::sqrt(static_cast<float>(config.model_dim / h));
  Tensor x = seq;
  for (const auto& b : blocks) {
    Tensor n1 = b.ln1(x);
    Tensor q = rotary(split_heads(b.q(n1), h), positions);
    Tensor k = rotary(split_heads(b.k(n1), h), positions);
    Tensor v = split_heads(b.v(n1), h);
    Tensor att = softmax(scale(bmm(q, k, true), inv), mask);
    x = add(x, b.proj(merge_heads(bmm(att, v))));
    x = add(x, b.ff2(gelu(b.ff1(b.ln2(x)))));
  }
  return head(final_norm(x));
}

Tensor VarModel::refine(const Tensor& logits, std::size_t scales, Rng* dropout_rng) const {
  std::vector<Tensor> parts;
  std::size_t off = 0;
  for (std::size_t k = 0; k < scales; ++k) {
    const std::size_t n = vq.schedule[k] * vq.schedule[k];
    parts.push_back(smooth_scaling(slice_rows(logits, off, off + n), ssl, dropout_rng));
    off += n;
  }
  if (off != logits.dim(0)) throw ConfigError("refine: logits do not cover whole scales");
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

void VarModel::collect(ParamList& out) const {
  in_proj.collect("var.in_proj", out);
  out.push_back({"var.class_emb", class_emb, false});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "var.blocks." + std::to_string(l);
    const auto& b = blocks[l];
    b.ln1.collect(p + ".ln1", out);
    b.q.collect(p + ".q", out);
    b.k.collect(p + ".k", out);
    b.v.collect(p + ".v", out);
    b.proj.collect(p + ".proj", out);
    b.ln2.collect(p + ".ln2", out);
    b.ff1.collect(p + ".ff1", out);
    b.ff2.collect(p + ".ff2", out);
  }
  final_norm.collect("var.final_norm", out);
  head.collect("var.head", out);
  ssl.collect("var.ssl", out);
}

ParamList VarModel::params() const {
  ParamList out;
  collect(out);
  return out;
}

Tensor var_loss(const Tensor& logits, std::span<const std::size_t> targets) {
  return softmax_cross_entropy(logits, targets);
}

Generated generate(std::size_t class_id, const SamplerConfig& sampler, std::uint64_t sample_index,
                   const Vqvae& vqvae, const Pem* pem, const VarModel& var, const GenerateOptions& options) {
  if (!var.head.weight.defined() || !vqvae.codebook.defined()) throw StateError("generate: parameters not loaded");
  if (options.use_pem && pem == nullptr) throw StateError("generate: PEM requested but not loaded");
  if (class_id > var.config.num_classes) throw IndexError("generate: class " + std::to_string(class_id) + " out of range");
  NoGradGuard no_grad;
  const auto& schedule = var.vq.schedule;
  const std::size_t n = schedule.size(), pn = schedule.back();
  Rng rng(sampler.seed, 0x6E4E, sample_index);
  Generated out;
  std::vector<Tensor> inputs;
  Tensor f_hat = Tensor::zeros({1, var.vq.channels, pn, pn});
  const bool scl = options.use_scl && !var.config.disable_scl;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t p = schedule[i], count = p * p;
    const std::size_t off = sequence_length(schedule, i);
    std::vector<std::size_t> grid(count);
    if (i < options.forced.size()) {
      if (options.forced[i].size() != count) throw ConfigError("generate: forced grid size mismatch");
      grid = options.forced[i];
    } else {
      Tensor logits = slice_rows(var.forward_logits(var.build_sequence(class_id, inputs, i + 1)), off, off + count);
      const double ratio = stage_ratio(i, n);
      if (sampler.cfg_scale * ratio != 0.0) {
        Tensor uncond =
            slice_rows(var.forward_logits(var.build_sequence(var.null_class(), inputs, i + 1)), off, off + count);
        logits = cfg_combine(logits, uncond, sampler.cfg_scale, ratio);
      }
      if (scl) logits = smooth_scaling(logits, var.ssl);
      const std::size_t vocab = logits.dim(1);
      auto lv = logits.data();
      for (std::size_t j = 0; j < count; ++j)
        grid[j] = sample(lv.subspan(j * vocab, vocab), sampler.temperature, sampler.top_p, rng);
    }
    out.tokens.grids.push_back(grid);
    f_hat = add(f_hat, vqvae.scale_update(i, vqvae.lookup({&out.tokens.grids.back()}, p)));
    if (i + 1 < n) inputs.push_back(bilinear_resize(f_hat, schedule[i + 1], schedule[i + 1]));
  }
  out.image = vqvae.decode(f_hat);
  if (options.use_pem) out.image = (*pem)(out.image);
  return out;
}

}  // namespace uvar
