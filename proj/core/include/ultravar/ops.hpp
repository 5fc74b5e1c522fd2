#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ultravar/rng.hpp"
#include "ultravar/tensor.hpp"

// Differentiable tensor operations. Each op computes its forward value
// eagerly and, when a tape is active and an input requires a gradient,
// records its backward closure. Forward outputs are checked for NaN/Inf and
// raise NumericError instead of propagating.
namespace uvar {

// ---- elementwise (numpy-style broadcasting for the binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& x);
// Exact erf-based GELU: x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Gradient passes where lo <= x <= hi, zero elsewhere.
Tensor clamp(const Tensor& x, float lo, float hi);

// ---- reductions (float64 accumulation) ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse_loss(const Tensor& a, const Tensor& b);
// Mean over the trailing two (spatial) dims: [..., H, W] -> [...].
Tensor mean_spatial(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
// Swaps the trailing two dims: [..., r, c] -> [..., c, r].
Tensor transpose(const Tensor& x);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor pad_rows(const Tensor& x, std::size_t rows);
// [L x D] -> [H x L x D/H] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched [B x m x k] . [B x k x n]; with transpose_b, b is [B x n x k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
// x[N x in] . w[in x out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// ---- convolution / resampling ----
// x [B x C x H x W], w [O x C x kh x kw], bias [O] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);
// Align-corners-false bilinear interpolation over the trailing two dims.
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

// ---- normalization / attention pieces ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
// Softmax over the last dim. `allowed`, when non-empty, is a row-major
// [rows x cols] mask broadcast over leading dims; disallowed entries get
// probability zero.
Tensor softmax(const Tensor& x, std::span<const std::uint8_t> allowed = {});
// x [H x L x d]: rotates each (2j, 2j+1) pair by positions[l] * 10000^(-2j/d).
Tensor rotary(const Tensor& x, std::span<const std::size_t> positions);
Tensor dropout(const Tensor& x, float p, Rng& rng);
// Row gather: table[V x D], ids -> [n x D].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

// ---- losses ----
// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// ---- gradient routing ----
Tensor stop_gradient(const Tensor& x);
// Value of `quantized`, identity gradient to both `continuous` and `quantized`.
Tensor straight_through(const Tensor& continuous, const Tensor& quantized);

// ---- raw kernels, shared with the metrics and benchmarks ----
namespace kernels {
// C[m x n] (+)= A[m x k] . B[k x n], contiguous row-major, float64 accumulation.
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);
void check_finite(std::span<const float> values, const char* op);
}  // namespace kernels

}  // namespace uvar
