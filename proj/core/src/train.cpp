#include "ultravar/train.hpp"

#include <algorithm>
#include <numeric>

#include "ultravar/downstream.hpp"
#include "ultravar/error.hpp"
#include "ultravar/ops.hpp"
#include "ultravar/optim.hpp"

namespace uvar {

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, std::uint64_t stream, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, stream, epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::size_t epochs_for(const TrainConfig& t, std::size_t steps_per_epoch) {
  if (t.max_steps == 0) return t.epochs;
  return std::min(t.epochs, (t.max_steps + steps_per_epoch - 1) / steps_per_epoch);
}

void check_loss(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " became non-finite");
}

}  // namespace

Tensor batch_of(const std::vector<Tensor>& images) {
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  return stack_images(images, order, 0, images.size());
}

Tensor reconstruct(const Vqvae& vqvae, const Pem* pem, const Tensor& batch) {
  NoGradGuard no_grad;
  Tensor x = vqvae.decode(vqvae.quantize(vqvae.encode(batch)).f_hat);
  return pem ? (*pem)(x) : x;
}

std::vector<Stage1Log> train_stage1(Vqvae& vqvae, Pem* pem, const std::vector<Tensor>& images,
                                    const Stage1Options& options) {
  if (images.empty()) throw ConfigError("stage 1: empty training set");
  const TrainConfig& tc = options.train;
  const bool use_pem = pem != nullptr && options.train_pem;
  const bool train_ae = !(use_pem && options.pem_post_hoc);
  ParamList params;
  if (train_ae) vqvae.collect(params);
  if (use_pem) pem->collect(params);
  std::size_t codebook_index = params.size();
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].name == "vqvae.codebook") codebook_index = i;
  AdamW opt(params, tc.adamw());

  const std::size_t n = images.size(), bs = std::min(tc.batch_size, n);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t epochs = epochs_for(tc, steps_per_epoch);
  const std::size_t k = vqvae.config.codebook_size, c = vqvae.config.channels;
  std::vector<Stage1Log> logs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = shuffled(n, options.seed, 0x51A1, epoch);
    const double lr = cosine_lr(tc.lr, tc.lr_floor, epoch, epochs);
    std::vector<std::uint64_t> usage(k, 0);
    std::vector<float> reservoir;
    std::size_t seen = 0;
    Rng res_rng(options.seed, 0x2E5E, epoch);
    double sum_recon = 0.0, sum_quant = 0.0;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < n && (tc.max_steps == 0 || step < tc.max_steps); b += bs, ++step) {
      const std::size_t e = std::min(n, b + bs);
      Tensor x = stack_images(images, order, b, e);
      Tape tape;
      Tensor loss, recon, l_quant;
      QuantizeResult q;
      {
        auto scope = tape.activate();
        Tensor f = vqvae.encode(x);
        q = vqvae.quantize(f);
        l_quant = q.l_quant;
        Tensor x_hat = vqvae.decode(straight_through(f, q.f_hat));
        recon = mse_loss(x_hat, x);
        if (use_pem) {
          Tensor refined = mse_loss((*pem)(x_hat), x);
          loss = train_ae ? add(add(recon, refined), l_quant) : refined;
          recon = refined;
        } else {
          loss = add(recon, l_quant);
        }
      }
      check_loss(loss.item(), "stage-1 loss");
      backward(loss, tape);
      opt.step(lr);
      sum_recon += recon.item() * static_cast<double>(e - b);
      sum_quant += l_quant.item() * static_cast<double>(e - b);
      counted += e - b;
      for (std::size_t s = 0; s < q.tokens.size(); ++s)
        for (const auto& g : q.tokens[s].grids)
          for (auto id : g) ++usage[id];
      // reservoir sample of quantizer inputs, for re-seeding unused codes
      for (const auto& d : q.d) {
        const std::size_t positions = d.dim(2) * d.dim(3);
        auto dv = d.data();
        for (std::size_t bb = 0; bb < d.dim(0); ++bb)
          for (std::size_t pos = 0; pos < positions; ++pos, ++seen) {
            std::size_t slot = reservoir.size() / c;
            if (slot >= 256) {
              slot = res_rng.below(seen + 1);
              if (slot >= 256) continue;
            } else {
              reservoir.resize(reservoir.size() + c);
            }
            for (std::size_t ch = 0; ch < c; ++ch) reservoir[slot * c + ch] = dv[(bb * c + ch) * positions + pos];
          }
      }
    }
    Stage1Log log{epoch, counted ? sum_recon / counted : 0.0, counted ? sum_quant / counted : 0.0, 0};
    if (train_ae && epoch + 1 < epochs) {
      Rng rng(options.seed, 0xDEAD, epoch);
      const auto dead = reseed_dead_codes(vqvae.codebook, usage, reservoir, rng);
      for (auto row : dead) opt.reset_rows(codebook_index, row, row + 1);
      log.reseeded = dead.size();
    }
    logs.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
    if (tc.max_steps != 0 && step >= tc.max_steps) break;
  }
  return logs;
}

TeacherData teacher_data(const Vqvae& vqvae, const std::vector<Tensor>& images) {
  NoGradGuard no_grad;
  TeacherData out;
  const std::size_t chunk = 32;
  for (std::size_t b = 0; b < images.size(); b += chunk) {
    const std::vector<Tensor> part(images.begin() + static_cast<std::ptrdiff_t>(b),
                                   images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), b + chunk)));
    const auto q = vqvae.quantize(vqvae.encode(batch_of(part)));
    const auto inputs = vqvae.tokens_to_teacher_inputs(q.tokens);
    for (std::size_t i = 0; i < part.size(); ++i) {
      out.tokens.push_back(q.tokens[i]);
      std::vector<Tensor> per;
      for (const auto& t : inputs) {
        Tensor s = slice_rows(t, i, i + 1);
        per.push_back(reshape(s, {t.dim(1), t.dim(2), t.dim(3)}));
      }
      out.inputs.push_back(std::move(per));
    }
  }
  return out;
}

Tensor var_sample_loss(const VarModel& var, std::size_t class_id, const std::vector<Tensor>& inputs,
                       const MultiScaleTokens& tokens, Rng* dropout_rng) {
  const std::size_t n = var.vq.schedule.size();
  Tensor logits = var.forward_logits(var.build_sequence(class_id, inputs, n));
  if (!var.config.disable_scl) logits = var.refine(logits, n, dropout_rng);
  const auto targets = tokens.flat();
  return var_loss(logits, targets);
}

std::vector<Stage2Log> train_stage2(VarModel& var, const Vqvae& vqvae, const std::vector<Tensor>& images,
                                    const std::vector<std::size_t>& labels, const Stage2Options& options) {
  if (images.empty() || images.size() != labels.size()) throw ConfigError("stage 2: images and labels differ");
  for (auto l : labels)
    if (l >= var.config.num_classes) throw IndexError("stage 2: label " + std::to_string(l) + " out of range");
  const TeacherData teacher = teacher_data(vqvae, images);
  const TrainConfig& tc = options.train;
  AdamW opt(var.params(), tc.adamw());
  const std::size_t n = images.size(), bs = std::min(tc.batch_size, n);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t epochs = epochs_for(tc, steps_per_epoch);
  std::vector<Stage2Log> logs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = shuffled(n, options.seed, 0x52A2, epoch);
    const double lr = cosine_lr(tc.lr, tc.lr_floor, epoch, epochs);
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < n && (tc.max_steps == 0 || step < tc.max_steps); b += bs, ++step) {
      const std::size_t e = std::min(n, b + bs);
      double batch_loss = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        const std::size_t s = order[i];
        Rng rng(options.seed, 0xC1D0, step * 1024 + (i - b));
        std::size_t cls = labels[s];
        if (options.class_dropout && rng.bernoulli(var.config.class_dropout)) cls = var.null_class();
        Tape tape;
        Tensor loss;
        {
          auto scope = tape.activate();
          loss = scale(var_sample_loss(var, cls, teacher.inputs[s], teacher.tokens[s],
                                       options.ssl_dropout ? &rng : nullptr),
                       1.0f / static_cast<float>(e - b));
        }
        check_loss(loss.item(), "L_VAR");
        backward(loss, tape);
        batch_loss += loss.item();
      }
      opt.step(lr);
      if (options.on_step) options.on_step(step, batch_loss);
      total += batch_loss * static_cast<double>(e - b);
      counted += e - b;
    }
    Stage2Log log{epoch, counted ? total / counted : 0.0};
    logs.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
    if (tc.max_steps != 0 && step >= tc.max_steps) break;
  }
  return logs;
}

}  // namespace uvar
