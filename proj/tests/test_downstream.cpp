#include <gtest/gtest.h>

#include <cmath>

#include "ultravar/downstream.hpp"
#include "ultravar/error.hpp"
#include "ultravar/ops.hpp"
#include "ultravar/synth.hpp"

using namespace uvar;

namespace {

LabeledImages synth_set(std::size_t per_class, Split split) {
  SynthConfig c;
  LabeledImages out;
  for (std::size_t label = 0; label < 2; ++label)
    for (std::size_t i = 0; i < per_class; ++i) out.push(render_indexed(c, split, label, i).image, label);
  return out;
}

ClassifierConfig small_config(std::size_t epochs) {
  ClassifierConfig c;
  c.epochs = epochs;
  c.width1 = 8;
  c.width2 = 8;
  c.width3 = 8;
  return c;
}

}  // namespace

TEST(Report, F1FromPrecisionAndRecall) {
  EvalReport r = EvalReport::from_counts(8, 2, 37, 7);
  EXPECT_NEAR(r.precision, 0.8, 1e-12);
  EXPECT_NEAR(r.recall, 8.0 / 15.0, 1e-12);
  EXPECT_NEAR(r.f1, 0.640, 1e-12);
  EXPECT_NEAR(r.accuracy, 45.0 / 54.0, 1e-12);
  EXPECT_FALSE(r.zero_denominator);
}

TEST(Report, PerfectPredictor) {
  EvalReport r = EvalReport::from_counts(15, 0, 39, 0);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.f1, 1.0);
}

TEST(Report, AlwaysClassZero) {
  EvalReport r = EvalReport::from_counts(0, 0, 39, 15);
  EXPECT_NEAR(r.accuracy, 0.722, 5e-4);
  EXPECT_EQ(r.precision, 0.0);
  EXPECT_EQ(r.recall, 0.0);
  EXPECT_EQ(r.f1, 0.0);
  EXPECT_TRUE(r.zero_denominator);
}

TEST(Report, IdentitiesOnRandomConfusions) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const std::size_t tp = 1 + rng.below(30), fp = rng.below(30), tn = rng.below(30), fn = rng.below(30);
    EvalReport r = EvalReport::from_counts(tp, fp, tn, fn);
    const double n = static_cast<double>(tp + fp + tn + fn);
    EXPECT_NEAR(r.accuracy, (tp + tn) / n, 1e-12);
    EXPECT_NEAR(r.f1, 2.0 * tp / (2.0 * tp + fp + fn), 1e-12);
    EXPECT_NEAR(r.f1, 2 * r.precision * r.recall / (r.precision + r.recall), 1e-12);
    EXPECT_GE(r.f1, std::min(r.precision, r.recall) - 1e-12);
    EXPECT_LE(r.f1, std::max(r.precision, r.recall) + 1e-12);
  }
}

TEST(Classifier, ShapesAndInitialLoss) {
  Rng rng(2);
  Classifier m = Classifier::create(ClassifierConfig{}, rng);
  LabeledImages d = synth_set(4, Split::Train);
  std::vector<std::size_t> order{0, 1, 2, 3, 4, 5, 6, 7};
  Tensor x = stack_images(d.images, order, 0, 8);
  EXPECT_EQ(x.shape(), (Shape{8, 1, 32, 32}));
  EXPECT_EQ(m.features(x).shape(), (Shape{8, 32}));
  Tensor logits = m.logits(x);
  EXPECT_EQ(logits.shape(), (Shape{8, 2}));
  EXPECT_NEAR(softmax_cross_entropy(logits, d.labels).item(), std::log(2.0), 0.02);
}

TEST(Classifier, TiesGoToClassZero) {
  Rng rng(3);
  Classifier m = Classifier::create(small_config(1), rng);
  for (const auto& p : m.params()) {
    Tensor t = p.tensor;
    std::fill(t.data().begin(), t.data().end(), 0.0f);
  }
  EvalReport r = evaluate(m, synth_set(3, Split::Test));
  EXPECT_EQ(r.tp + r.fp, 0u);
  EXPECT_EQ(r.tn, 3u);
  EXPECT_EQ(r.fn, 3u);
}

TEST(Training, DeterministicForSeed) {
  LabeledImages d = synth_set(4, Split::Train);
  TrainedClassifier a = train_classifier(d, small_config(3), 5);
  TrainedClassifier b = train_classifier(d, small_config(3), 5);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  auto pa = a.model.params(), pb = b.model.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].tensor.numel(); ++j) ASSERT_EQ(pa[i].tensor.data()[j], pb[i].tensor.data()[j]);
  TrainedClassifier c = train_classifier(d, small_config(3), 6);
  EXPECT_NE(a.epoch_loss, c.epoch_loss);
}

TEST(Training, OverfitsEightSamples) {
  LabeledImages d = synth_set(4, Split::Train);
  ClassifierConfig c;
  c.epochs = 80;
  c.lr = 3e-3;
  TrainedClassifier t = train_classifier(d, c, 7);
  EXPECT_LT(t.epoch_loss.back(), t.epoch_loss.front());
  EvalReport r = evaluate(t.model, d);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Training, RejectsMissingClass) {
  LabeledImages d;
  SynthConfig c;
  for (std::size_t i = 0; i < 4; ++i) d.push(render_indexed(c, Split::Train, 0, i).image, 0);
  EXPECT_THROW(train_classifier(d, small_config(1), 1), ConfigError);
}

TEST(Augment, AppendsPlannedSamples) {
  LabeledImages base = synth_set(2, Split::Train);
  std::vector<std::pair<std::size_t, std::size_t>> calls;
  AugmentationPlan plan{1, 3, 0, [&](std::size_t label, std::size_t index) {
                          calls.emplace_back(label, index);
                          return Tensor({1, 32, 32}, static_cast<float>(label));
                        }};
  LabeledImages out = augment(base, plan);
  ASSERT_EQ(out.size(), 8u);
  EXPECT_EQ(out.labels, (std::vector<std::size_t>{0, 0, 1, 1, 0, 1, 1, 1}));
  EXPECT_EQ(calls, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 0}, {1, 1}, {1, 2}}));
}

TEST(Augment, EmptyPlanLeavesReportUnchanged) {
  LabeledImages base = synth_set(3, Split::Train), test = synth_set(2, Split::Test);
  AugmentationPlan plan;
  auto [a, b] = augmentation_experiment(base, test, plan, small_config(2), 11);
  EXPECT_EQ(a, b);
}

TEST(Augment, MissingGeneratorIsStateError) {
  LabeledImages base = synth_set(2, Split::Train), test = synth_set(1, Split::Test);
  AugmentationPlan plan;
  plan.add_class1 = 2;
  EXPECT_THROW(augmentation_experiment(base, test, plan, small_config(1), 1), StateError);
}
