#pragma once

// Central finite-difference gradient checking, test-only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ultravar/ops.hpp"
#include "ultravar/rng.hpp"
#include "ultravar/tensor.hpp"

namespace uvar::testing {

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_error = 0.0;  // |analytic - fd| / max(1, |fd|)
  std::string worst;       // "input i[j]" of the worst element
  std::size_t checked = 0;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal() * scale);
  t.set_requires_grad(grad);
  return t;
}

// Moves values out of (-margin, margin) so kinked ops are not probed at the kink.
inline void keep_away_from(Tensor& t, float point, float margin) {
  for (auto& v : t.data()) {
    if (std::fabs(v - point) < margin) v = v >= point ? point + margin : point - margin;
  }
}

// Random projection so the scalar loss touches every output element with
// O(1) weights.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed, 0xF00D);
  Tensor w(out.shape());
  for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return sum(mul(out, w));
}

// Each element's error is the smallest over `steps` and over the central and
// one-sided differences: a kink only spoils the probes that straddle it, a
// wrong gradient is wrong for all of them.
inline GradCheckResult gradcheck(std::vector<Tensor> inputs, const LossFn& loss_fn,
                                 const std::vector<double>& steps) {
  for (auto& t : inputs) t.drop_grad();
  {
    Tape tape;
    auto scope = tape.activate();
    Tensor loss = loss_fn(inputs);
    backward(loss, tape);
  }
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& t = inputs[i];
    if (!t.requires_grad()) continue;
    std::vector<float> analytic(t.numel(), 0.0f);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto data = t.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const float orig = data[j];
      const double l0 = steps.size() > 1 ? loss_fn(inputs).item() : 0.0;
      double err = 1e300;
      for (double step : steps) {
        const float up = static_cast<float>(orig + step);
        const float down = static_cast<float>(orig - step);
        data[j] = up;
        const double lu = loss_fn(inputs).item();
        data[j] = down;
        const double ld = loss_fn(inputs).item();
        data[j] = orig;
        std::vector<double> fds{(lu - ld) / (static_cast<double>(up) - static_cast<double>(down))};
        if (steps.size() > 1) {
          fds.push_back((lu - l0) / (static_cast<double>(up) - orig));
          fds.push_back((l0 - ld) / (orig - static_cast<double>(down)));
        }
        for (double fd : fds) err = std::min(err, std::fabs(analytic[j] - fd) / std::max(1.0, std::fabs(fd)));
      }
      ++result.checked;
      if (err > result.max_error) {
        result.max_error = err;
        result.worst = "input " + std::to_string(i) + "[" + std::to_string(j) + "]";
      }
    }
  }
  for (auto& t : inputs) t.drop_grad();
  return result;
}

inline GradCheckResult gradcheck(std::vector<Tensor> inputs, const LossFn& loss_fn, double step = 1e-3) {
  return gradcheck(std::move(inputs), loss_fn, std::vector<double>{step});
}

}  // namespace uvar::testing
