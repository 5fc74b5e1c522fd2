#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "ultravar/nn.hpp"
#include "ultravar/rng.hpp"

namespace uvar {

struct ClassifierConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double lr_floor = 1e-5;
  double weight_decay = 0.01;
  std::size_t width1 = 16;
  std::size_t width2 = 32;
  std::size_t width3 = 32;
};

struct LabeledImages {
  std::vector<Tensor> images;  // each [1 x H x W]
  std::vector<std::size_t> labels;

  std::size_t size() const { return images.size(); }
  void push(const Tensor& image, std::size_t label) {
    images.push_back(image);
    labels.push_back(label);
  }
};

struct Classifier {
  Conv2d c1, c2, c3;
  Linear head;

  static Classifier create(const ClassifierConfig& config, Rng& rng);
  // Global-average-pooled features [B x width3].
  Tensor features(const Tensor& x) const;
  Tensor logits(const Tensor& x) const;
  ParamList params() const;
};

struct EvalReport {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  // Set when precision, recall or F1 hit a zero denominator and were defined as 0.
  bool zero_denominator = false;

  static EvalReport from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn);
  bool operator==(const EvalReport&) const = default;
};

struct TrainedClassifier {
  Classifier model;
  std::vector<double> epoch_loss;
};

// Stacks images [1 x H x W] into [B x 1 x H x W].
Tensor stack_images(const std::vector<Tensor>& images, std::span<const std::size_t> order, std::size_t begin,
                    std::size_t end);

TrainedClassifier train_classifier(const LabeledImages& data, const ClassifierConfig& config, std::uint64_t seed);
EvalReport evaluate(const Classifier& model, const LabeledImages& test);
// Features of every image, [N x width3].
Tensor classifier_features(const Classifier& model, const std::vector<Tensor>& images);

struct AugmentationPlan {
  std::size_t add_class0 = 0;
  std::size_t add_class1 = 0;
  std::uint64_t seed = 0;
  // Produces synthetic image `index` of class `label`, [1 x H x W].
  std::function<Tensor(std::size_t label, std::size_t index)> generator;
};

// Adds the planned generated samples after the base data.
LabeledImages augment(const LabeledImages& base, const AugmentationPlan& plan);

// Two classifiers with the same seed: base only, and base + plan.
std::pair<EvalReport, EvalReport> augmentation_experiment(const LabeledImages& base, const LabeledImages& test,
                                                          const AugmentationPlan& plan,
                                                          const ClassifierConfig& config, std::uint64_t seed);

}  // namespace uvar
