#include "ultravar/downstream.hpp"

#include <algorithm>
#include <numeric>

#include "ultravar/error.hpp"
#include "ultravar/ops.hpp"
#include "ultravar/optim.hpp"

namespace uvar {

Classifier Classifier::create(const ClassifierConfig& config, Rng& rng) {
  Classifier c;
  c.c1 = Conv2d::create(1, config.width1, 3, 2, rng);
  c.c2 = Conv2d::create(config.width1, config.width2, 3, 2, rng);
  c.c3 = Conv2d::create(config.width2, config.width3, 3, 2, rng);
  c.head = Linear::create(config.width3, 2, rng, 0.01);
  return c;
}

Tensor Classifier::features(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
    throw DimensionError("classifier: expected [B x 1 x H x W] with sides divisible by 8, got " + shape_str(x.shape()));
  return mean_spatial(relu(c3(relu(c2(relu(c1(x)))))));
}

Tensor Classifier::logits(const Tensor& x) const { return head(features(x)); }

ParamList Classifier::params() const {
  ParamList out;
  c1.collect("cls.c1", out);
  c2.collect("cls.c2", out);
  c3.collect("cls.c3", out);
  head.collect("cls.head", out);
  return out;
}

EvalReport EvalReport::from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  EvalReport r;
  r.tp = tp;
  r.fp = fp;
  r.tn = tn;
  r.fn = fn;
  const std::size_t total = tp + fp + tn + fn;
  r.accuracy = total ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
  if (tp + fp) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  else r.zero_denominator = true;
  if (tp + fn) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  else r.zero_denominator = true;
  if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  else r.zero_denominator = true;
  return r;
}

Tensor stack_images(const std::vector<Tensor>& images, std::span<const std::size_t> order, std::size_t begin,
                    std::size_t end) {
  const Shape& s = images.at(order[begin]).shape();
  const std::size_t h = s[s.size() - 2], w = s.back();
  Tensor out({end - begin, 1, h, w});
  auto o = out.data();
  for (std::size_t i = begin; i < end; ++i) {
    const Tensor& img = images[order[i]];
    if (img.numel() != h * w) throw DimensionError("stack_images: mixed image sizes");
    std::copy(img.data().begin(), img.data().end(), o.begin() + static_cast<std::ptrdiff_t>((i - begin) * h * w));
  }
  return out;
}

TrainedClassifier train_classifier(const LabeledImages& data, const ClassifierConfig& config, std::uint64_t seed) {
  std::size_t counts[2] = {0, 0};
  for (auto l : data.labels) {
    if (l > 1) throw IndexError("train_classifier: label " + std::to_string(l));
    ++counts[l];
  }
  if (counts[0] == 0 || counts[1] == 0) throw ConfigError("train_classifier: need samples of both classes");
  if (config.batch_size == 0 || config.epochs == 0) throw ConfigError("train_classifier: zero epochs or batch");
  Rng init(seed, 0xC1A5);
  TrainedClassifier out{Classifier::create(config, init), {}};
  AdamW opt(out.model.params(), {config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(seed, 0x5BF1, epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    const double lr = cosine_lr(config.lr, config.lr_floor, epoch, config.epochs);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t e = std::min(order.size(), b + config.batch_size);
      Tensor x = stack_images(data.images, order, b, e);
      std::vector<std::size_t> y;
      for (std::size_t i = b; i < e; ++i) y.push_back(data.labels[order[i]]);
      Tape tape;
      Tensor loss;
      {
        auto scope = tape.activate();
        loss = softmax_cross_entropy(out.model.logits(x), y);
      }
      backward(loss, tape);
      opt.step(lr);
      total += loss.item() * static_cast<double>(e - b);
    }
    out.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  return out;
}

Tensor classifier_features(const Classifier& model, const std::vector<Tensor>& images) {
  NoGradGuard no_grad;
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < order.size(); b += 64) {
    const std::size_t e = std::min(order.size(), b + 64);
    parts.push_back(model.features(stack_images(images, order, b, e)));
  }
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

EvalReport evaluate(const Classifier& model, const LabeledImages& test) {
  if (test.size() == 0) throw ContractError("evaluate: empty test set");
  NoGradGuard no_grad;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const std::size_t idx[1] = {i};
    Tensor l = model.logits(stack_images(test.images, idx, 0, 1));
    const bool positive = l.data()[1] > l.data()[0];
    const bool truth = test.labels[i] == 1;
    if (positive && truth) ++tp;
    else if (positive) ++fp;
    else if (truth) ++fn;
    else ++tn;
  }
  return EvalReport::from_counts(tp, fp, tn, fn);
}

LabeledImages augment(const LabeledImages& base, const AugmentationPlan& plan) {
  LabeledImages out = base;
  if (plan.add_class0 + plan.add_class1 == 0) return out;
  if (!plan.generator) throw StateError("augmentation: generator not loaded");
  for (std::size_t i = 0; i < plan.add_class0; ++i) out.push(plan.generator(0, i), 0);
  for (std::size_t i = 0; i < plan.add_class1; ++i) out.push(plan.generator(1, i), 1);
  return out;
}

std::pair<EvalReport, EvalReport> augmentation_experiment(const LabeledImages& base, const LabeledImages& test,
                                                          const AugmentationPlan& plan,
                                                          const ClassifierConfig& config, std::uint64_t seed) {
  const LabeledImages augmented = augment(base, plan);
  const EvalReport without = evaluate(train_classifier(base, config, seed).model, test);
  const EvalReport with = evaluate(train_classifier(augmented, config, seed).model, test);
  return {without, with};
}

}  // namespace uvar
