#include <gtest/gtest.h>

#include <cmath>

#include "support/module_grad_suite.hpp"
#include "ultravar/error.hpp"
#include "ultravar/ops.hpp"
#include "ultravar/vqvae.hpp"

using namespace uvar;
using namespace uvar::testing;

namespace {

VqvaeConfig two_scale_config() {
  VqvaeConfig c = tiny_vqvae_config();
  c.image_side = 4;
  c.downsample = 2;
  c.codebook_size = 4;
  c.schedule = {1, 2};
  return c;
}

std::size_t brute_nearest(const std::vector<double>& v, const Tensor& cb) {
  const std::size_t c = v.size();
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t k = 0; k < cb.dim(0); ++k) {
    double d = 0.0;
    for (std::size_t j = 0; j < c; ++j) d += (v[j] - cb.data()[k * c + j]) * (v[j] - cb.data()[k * c + j]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

TEST(Encode, ZeroImageGivesZeroLatent) {
  Rng rng(1);
  Vqvae m = Vqvae::create(VqvaeConfig{}, rng);
  Tensor f = m.encode(Tensor::zeros({1, 1, 32, 32}));
  for (float v : f.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Encode, ShapeContract) {
  Rng rng(1);
  Vqvae m = Vqvae::create(VqvaeConfig{}, rng);
  Tensor f = m.encode(Tensor::zeros({2, 1, 32, 32}));
  EXPECT_EQ(f.shape(), (Shape{2, 16, 8, 8}));
  EXPECT_THROW(m.encode(Tensor::zeros({1, 1, 30, 30})), ConfigError);
}

TEST(Config, RejectsBadSchedules) {
  VqvaeConfig c;
  c.schedule = {2, 4, 8};
  EXPECT_THROW(c.validate(), ConfigError);
  c.schedule = {1, 4, 2, 8};
  EXPECT_THROW(c.validate(), ConfigError);
  c.schedule = {1, 2, 4};
  EXPECT_THROW(c.validate(), ConfigError);
  c = VqvaeConfig{};
  c.downsample = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = VqvaeConfig{};
  c.codebook_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(NearestCode, ExactMatchAndTie) {
  Tensor cb({2, 2}, {0, 0, 1, 1});
  const float a[2] = {1, 1}, b[2] = {0.5f, 0.5f};
  EXPECT_EQ(nearest_code(a, cb), 1u);
  EXPECT_EQ(nearest_code(b, cb), 0u);
}

TEST(NearestCode, MatchesExhaustiveScan) {
  Rng rng(5);
  Tensor cb = random_tensor({16, 3}, rng, 1.0, false);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> v(3);
    std::vector<float> vf(3);
    for (int j = 0; j < 3; ++j) vf[j] = static_cast<float>(v[j] = rng.normal());
    for (int j = 0; j < 3; ++j) v[j] = vf[j];
    EXPECT_EQ(nearest_code(vf, cb), brute_nearest(v, cb));
  }
}

TEST(NearestCode, LengthMismatchThrows) {
  Tensor cb({2, 2}, {0, 0, 1, 1});
  const float a[3] = {1, 1, 1};
  EXPECT_THROW(nearest_code(a, cb), DimensionError);
}

TEST(QuantLoss, BetaWeightingExample) {
  Tensor z({1, 2, 1, 1}, {1, 1});
  Tensor d({1, 2, 1, 1}, {0, 0});
  z.set_requires_grad(true);
  d.set_requires_grad(true);
  Tape tape;
  Tensor l;
  {
    auto s = tape.activate();
    l = quant_loss(z, d, 0.25, false);
  }
  EXPECT_NEAR(l.item(), 2.5, 1e-6);
  backward(l, tape);
  // first term trains d, second (weighted) trains z
  EXPECT_NEAR(d.grad()[0], -2.0, 1e-6);
  EXPECT_NEAR(z.grad()[0], 0.5, 1e-6);
}

TEST(QuantLoss, ConventionalFormSwapsRoles) {
  Tensor z({1, 2, 1, 1}, {1, 1});
  Tensor d({1, 2, 1, 1}, {0, 0});
  z.set_requires_grad(true);
  d.set_requires_grad(true);
  Tape tape;
  Tensor l;
  {
    auto s = tape.activate();
    l = quant_loss(z, d, 0.25, true);
  }
  EXPECT_NEAR(l.item(), 2.5, 1e-6);
  backward(l, tape);
  EXPECT_NEAR(z.grad()[0], 2.0, 1e-6);
  EXPECT_NEAR(d.grad()[0], -0.5, 1e-6);
}

TEST(Quantize, SingleScaleIsPlainVq) {
  VqvaeConfig c = tiny_vqvae_config();
  c.image_side = 2;
  c.schedule = {1};
  c.codebook_size = 8;
  Rng rng(3);
  Vqvae m = Vqvae::create(c, rng);
  Tensor f = random_tensor({5, 2, 1, 1}, rng, 1.0, false);
  QuantizeResult q = m.quantize(f);
  for (std::size_t b = 0; b < 5; ++b) {
    const float v[2] = {f.data()[2 * b], f.data()[2 * b + 1]};
    const std::size_t idx = nearest_code(v, m.codebook);
    EXPECT_EQ(q.tokens[b].grids[0][0], idx);
    EXPECT_EQ(q.f_hat.data()[2 * b], m.codebook.data()[idx * 2]);
    EXPECT_EQ(q.f_hat.data()[2 * b + 1], m.codebook.data()[idx * 2 + 1]);
  }
}

TEST(Quantize, TwoScaleMatchesHandRolledOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Vqvae m = Vqvae::create(two_scale_config(), rng);
    Tensor f = random_tensor({1, 2, 2, 2}, rng, 1.0, false);
    QuantizeResult q = m.quantize(f);
    auto fv = f.data();
    auto cb = m.codebook.data();
    // scale 1: align-corners-false 2 -> 1 is the plain mean
    std::vector<double> d1(2);
    for (int ch = 0; ch < 2; ++ch)
      d1[ch] = (static_cast<double>(fv[ch * 4]) + fv[ch * 4 + 1] + fv[ch * 4 + 2] + fv[ch * 4 + 3]) / 4.0;
    const std::size_t i1 = brute_nearest(d1, m.codebook);
    ASSERT_EQ(q.tokens[0].grids[0][0], i1) << "seed " << seed;
    for (int pos = 0; pos < 4; ++pos) {
      std::vector<double> r(2);
      for (int ch = 0; ch < 2; ++ch) r[ch] = static_cast<double>(fv[ch * 4 + pos]) - cb[i1 * 2 + ch];
      const std::size_t i2 = brute_nearest(r, m.codebook);
      ASSERT_EQ(q.tokens[0].grids[1][pos], i2) << "seed " << seed << " pos " << pos;
      for (int ch = 0; ch < 2; ++ch)
        EXPECT_NEAR(q.f_hat.data()[ch * 4 + pos], static_cast<double>(cb[i1 * 2 + ch]) + cb[i2 * 2 + ch], 1e-6);
    }
  }
}

TEST(Quantize, ResidualTelescopes) {
  Rng rng(11);
  Vqvae m = Vqvae::create(VqvaeConfig{}, rng);
  Tensor f = random_tensor({2, 16, 8, 8}, rng, 1.0, false);
  QuantizeResult q = m.quantize(f);
  for (std::size_t k = 0; k + 1 < q.residuals.size(); ++k) {
    Tensor diff = sub(f, q.partial[k]);
    for (std::size_t i = 0; i < diff.numel(); ++i)
      EXPECT_NEAR(diff.data()[i], q.residuals[k + 1].data()[i], 1e-6);
  }
}

TEST(Quantize, TokensValidAndDeterministic) {
  Rng rng(2);
  Vqvae m = Vqvae::create(VqvaeConfig{}, rng);
  Tensor x({3, 1, 32, 32});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  auto a = m.quantize(m.encode(x));
  auto b = m.quantize(m.encode(x));
  ASSERT_EQ(a.tokens.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.tokens[i], b.tokens[i]);
    ASSERT_EQ(a.tokens[i].grids.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(a.tokens[i].grids[k].size(), m.config.schedule[k] * m.config.schedule[k]);
      for (auto t : a.tokens[i].grids[k]) EXPECT_LT(t, 128u);
    }
  }
}

TEST(Quantize, LatentScheduleMismatchThrows) {
  Rng rng(2);
  Vqvae m = Vqvae::create(VqvaeConfig{}, rng);
  EXPECT_THROW(m.quantize(Tensor::zeros({1, 16, 4, 4})), ConfigError);
}

TEST(Decode, ShapeAndZeroLatent) {
  Rng rng(4);
  Vqvae m = Vqvae::create(VqvaeConfig{}, rng);
  Tensor x = m.decode(Tensor::zeros({1, 16, 8, 8}));
  EXPECT_EQ(x.shape(), (Shape{1, 1, 32, 32}));
  for (float v : x.data()) EXPECT_EQ(v, 0.5f);
}

TEST(VqvaeLoss, Examples) {
  Tensor x({2, 2}, {0.1f, 0.2f, 0.3f, 0.4f});
  EXPECT_EQ(vqvae_loss(x, x, Tensor::scalar(0)).item(), 0.0f);
  EXPECT_NEAR(vqvae_loss(Tensor::zeros({4, 4}), Tensor({4, 4}, 1.0f), Tensor::scalar(0)).item(), 1.0, 1e-7);
  Rng rng(9);
  Tensor a = random_tensor({3, 5}, rng, 1.0, false), b = random_tensor({3, 5}, rng, 1.0, false);
  double ref = 0.0;
  for (std::size_t i = 0; i < 15; ++i) ref += std::pow(static_cast<double>(a.data()[i]) - b.data()[i], 2) / 15.0;
  EXPECT_NEAR(vqvae_loss(a, b, Tensor::scalar(0.75f)).item(), ref + 0.75, 1e-6);
}

TEST(TeacherInputs, SingleScaleIsEmpty) {
  VqvaeConfig c = tiny_vqvae_config();
  c.image_side = 2;
  c.schedule = {1};
  Rng rng(1);
  Vqvae m = Vqvae::create(c, rng);
  MultiScaleTokens t;
  t.grids = {{0}};
  EXPECT_TRUE(m.tokens_to_teacher_inputs({t}).empty());
}

TEST(TeacherInputs, ConstantCumulativeMapStaysConstant) {
  Rng rng(1);
  Vqvae m = Vqvae::create(tiny_vqvae_config(), rng);
  MultiScaleTokens t;
  t.grids = {{2}, {0, 0, 0, 0}, std::vector<std::size_t>(16, 0)};
  // scale 1 is a single code: f_hat_1 is that code everywhere
  auto inputs = m.tokens_to_teacher_inputs({t});
  ASSERT_EQ(inputs.size(), 2u);
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(inputs[0].data()[ch * 4 + i], m.codebook.data()[2 * 2 + ch], 1e-6);
}

TEST(TeacherInputs, MatchQuantizerPrefix) {
  Rng rng(8);
  Vqvae m = Vqvae::create(tiny_vqvae_config(), rng);
  perturb(m.params(), rng, 0.05);
  Tensor f = random_tensor({2, 2, 4, 4}, rng, 1.0, false);
  QuantizeResult q = m.quantize(f);
  auto inputs = m.tokens_to_teacher_inputs(q.tokens);
  ASSERT_EQ(inputs.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t p = m.config.schedule[k + 1];
    Tensor ref = bilinear_resize(q.partial[k], p, p);
    for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(inputs[k].data()[i], ref.data()[i], 1e-6);
  }
  Tensor latent = m.tokens_to_latent(q.tokens, 3);
  for (std::size_t i = 0; i < latent.numel(); ++i) EXPECT_NEAR(latent.data()[i], q.f_hat.data()[i], 1e-6);
}

// The reconstruction gradient reaching the encoder equals that of a model
// whose quantizer is the constant offset (f_hat - f).
TEST(StraightThrough, EncoderGradientMatchesIdentityQuantizer) {
  Rng rng(21);
  Vqvae m = Vqvae::create(tiny_vqvae_config(), rng);
  perturb(m.params(), rng, 0.05);
  Tensor x({1, 1, 8, 8});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  ParamList enc;
  for (const auto& c : m.encoder) c.collect("e", enc);
  Tensor offset;
  {
    NoGradGuard g;
    Tensor f = m.encode(x);
    offset = sub(m.quantize(f).f_hat, f);
  }
  auto inputs = tensors_of(enc);
  for (auto& t : inputs) t.drop_grad();
  {
    Tape tape;
    Tensor loss;
    {
      auto s = tape.activate();
      Tensor f = m.encode(x);
      loss = project(m.decode(straight_through(f, m.quantize(f).f_hat)), 77);
    }
    backward(loss, tape);
  }
  std::vector<std::vector<float>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  NoGradGuard g;
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto data = inputs[i].data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const float orig = data[j];
      data[j] = orig + 1e-3f;
      const double up = project(m.decode(add(m.encode(x), offset)), 77).item();
      data[j] = orig - 1e-3f;
      const double down = project(m.decode(add(m.encode(x), offset)), 77).item();
      data[j] = orig;
      const double fd = (up - down) / ((static_cast<double>(orig + 1e-3f)) - (orig - 1e-3f));
      worst = std::max(worst, std::fabs(fd - analytic[i][j]) / std::max(1.0, std::fabs(fd)));
    }
  }
  EXPECT_LE(worst, 1e-3);
}

TEST(Reseed, ReplacesOnlyUnusedRows) {
  Tensor cb({3, 2}, {1, 1, 2, 2, 3, 3});
  std::vector<std::uint64_t> usage{5, 0, 1};
  std::vector<float> reservoir{9, 9};
  Rng rng(0);
  auto dead = reseed_dead_codes(cb, usage, reservoir, rng);
  ASSERT_EQ(dead, (std::vector<std::size_t>{1}));
  EXPECT_EQ(cb.data()[0], 1.0f);
  EXPECT_EQ(cb.data()[2], 9.0f);
  EXPECT_EQ(cb.data()[3], 9.0f);
  EXPECT_EQ(cb.data()[4], 3.0f);
}

const std::vector<double> kModuleSteps{1e-2, 3e-3, 1e-3};

TEST(ModuleGradientHarness, FlagsWrongGradientThroughKinks) {
  Rng rng(3);
  Tensor x = random_tensor({4, 4}, rng);
  // analytic gradient is half the true one
  const auto r = gradcheck({x}, [](const std::vector<Tensor>& in) {
    return project(mul(relu(in[0]), stop_gradient(relu(in[0]))), 1);
  }, kModuleSteps);
  EXPECT_GT(r.max_error, 0.1);
}

class ModuleGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ModuleGradient, MatchesFiniteDifferences) {
  const auto cases = module_op_cases();
  const auto& c = cases[GetParam()];
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, 0xAB);
    GradInstance inst = c.make(rng, seed);
    const auto r = gradcheck(inst.inputs, inst.loss, kModuleSteps);
    EXPECT_LE(r.max_error, 1e-3) << c.name << " seed " << seed << " worst " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(Modules, ModuleGradient, ::testing::Range<std::size_t>(0, module_op_cases().size()),
                         [](const auto& info) { return module_op_cases()[info.param].name; });
