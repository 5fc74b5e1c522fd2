#include "ultravar/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ultravar/error.hpp"

namespace uvar {

namespace kernels {

void check_finite(std::span<const float> values, const char* op) {
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  thread_local std::vector<double> acc;
  acc.resize(n);
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (accumulate) {
      for (std::size_t j = 0; j < n; ++j) acc[j] = crow[j];
    } else {
      std::fill(acc.begin(), acc.end(), 0.0);
    }
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const float* brow = b + p * n;
      double* out = acc.data();
      for (std::size_t j = 0; j < n; ++j) out[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
  }
}

}  // namespace kernels

namespace {

using kernels::check_finite;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void record(const char* op, std::vector<Tensor> inputs, Tensor& out, Tape::BackwardFn fn) {
  out.set_requires_grad(true);
  Tape::active()->record(op, std::move(inputs), out, std::move(fn));
}

// Gradient sink for an input, or an empty span when it takes no gradient.
std::span<float> sink(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  Tensor handle = t;
  return handle.ensure_grad();
}

void transpose_into(const float* src, std::size_t rows, std::size_t cols, std::vector<float>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

// C (+)= op(A) . op(B) where op transposes when the flag is set.
// Without transposes A is [m x k] and B is [k x n].
void gemm_t(bool ta, bool tb, const float* a, const float* b, float* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  thread_local std::vector<float> at, bt;
  const float* ap = a;
  const float* bp = b;
  if (ta) {
    transpose_into(a, k, m, at);
    ap = at.data();
  }
  if (tb) {
    transpose_into(b, n, k, bt);
    bp = bt.data();
  }
  kernels::gemm(ap, bp, c, m, k, n, accumulate);
}

// ---- broadcasting ----

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  std::vector<std::size_t> ea(r, 1), eb(r, 1);
  std::copy(a.begin(), a.end(), ea.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), eb.begin() + (r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    bc.out[i] = std::max(ea[i], eb[i]);
  }
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    bc.stride_a[i] = ea[i] == 1 ? 0 : sa;
    bc.stride_b[i] = eb[i] == 1 ? 0 : sb;
    sa *= ea[i];
    sb *= eb[i];
  }
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::size_t total = shape_numel(bc.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind, const char* name) {
  const bool same = a.shape() == b.shape();
  Broadcast bc;
  if (!same) bc = broadcast_shapes(a.shape(), b.shape(), name);
  Tensor out(same ? a.shape() : bc.out);
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  auto apply = [kind](float x, float y) {
    switch (kind) {
      case BinOp::Add: return x + y;
      case BinOp::Sub: return x - y;
      case BinOp::Mul: return x * y;
    }
    return 0.0f;
  };
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply(av[i], bv[i]);
  } else {
    for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      o[i] = apply(av[ia], bv[ib]);
    });
  }
  check_finite(out.data(), name);
  if (tracking({&a, &b})) {
    record(name, {a, b}, out, [a, b, out, kind, same, bc]() mutable {
      auto g = std::as_const(out).grad();
      auto ga = sink(a);
      auto gb = sink(b);
      auto av = std::as_const(a).data();
      auto bv = std::as_const(b).data();
      auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
        switch (kind) {
          case BinOp::Add:
            if (!ga.empty()) ga[ia] += g[i];
            if (!gb.empty()) gb[ib] += g[i];
            break;
          case BinOp::Sub:
            if (!ga.empty()) ga[ia] += g[i];
            if (!gb.empty()) gb[ib] -= g[i];
            break;
          case BinOp::Mul:
            if (!ga.empty()) ga[ia] += g[i] * bv[ib];
            if (!gb.empty()) gb[ib] += g[i] * av[ia];
            break;
        }
      };
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
      } else {
        for_each_broadcast(bc, step);
      }
    });
  }
  return out;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(xv[i]);
  check_finite(out.data(), name);
  if (tracking({&x})) {
    record(name, {x}, out, [x, out, deriv]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      auto xv = std::as_const(x).data();
      auto ov = std::as_const(out).data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], ov[i]);
    });
  }
  return out;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// Per-axis interpolation taps for align-corners-false bilinear resampling.
struct Taps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w0, w1;
};

Taps bilinear_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w0.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = i0 + 1 < in ? i0 + 1 : i0;
    const double lambda = src - static_cast<double>(i0);
    t.i0[d] = i0;
    t.i1[d] = i1;
    t.w1[d] = i1 == i0 ? 0.0 : lambda;
    t.w0[d] = 1.0 - t.w1[d];
  }
  return t;
}

void im2col(const float* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
            float* cols) {
  const std::size_t plane = oh * ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        float* row = cols + ((ch * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            float v = 0.0f;
            if (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w)) {
              v = x[(ch * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
            }
            row[oy * ow + ox] = v;
          }
        }
      }
    }
  }
}

void col2im(const float* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow,
            float* gx) {
  const std::size_t plane = oh * ow;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const float* row = cols + ((ch * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            gx[(ch * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& a, float s) {
  return unary(
      a, "scale", [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary(
      a, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, "gelu",
      [](float v) {
        const double d = v;
        return static_cast<float>(0.5 * d * (1.0 + std::erf(d * inv_sqrt2)));
      },
      [inv_sqrt2pi](float v, float) {
        const double d = v;
        const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
        return static_cast<float>(cdf + d * pdf);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](float v) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
      [](float, float s) { return s * (1.0f - s); });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  return unary(
      x, "clamp", [lo, hi](float v) { return std::clamp(v, lo, hi); },
      [lo, hi](float v, float) { return (v >= lo && v <= hi) ? 1.0f : 0.0f; });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  check_finite(out.data(), "sum");
  if (tracking({&x})) {
    record("sum", {x}, out, [x, out]() mutable {
      const float g = std::as_const(out).grad()[0];
      for (auto& v : sink(x)) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc / n));
  check_finite(out.data(), "mean");
  if (tracking({&x})) {
    record("mean", {x}, out, [x, out, n]() mutable {
      const float g = static_cast<float>(std::as_const(out).grad()[0] / n);
      for (auto& v : sink(x)) v += g;
    });
  }
  return out;
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse_loss: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  auto av = a.data();
  auto bv = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    acc += d * d;
  }
  const double n = static_cast<double>(av.size());
  Tensor out = Tensor::scalar(static_cast<float>(acc / n));
  check_finite(out.data(), "mse_loss");
  if (tracking({&a, &b})) {
    record("mse_loss", {a, b}, out, [a, b, out, n]() mutable {
      const double g = std::as_const(out).grad()[0] * 2.0 / n;
      auto ga = sink(a);
      auto gb = sink(b);
      auto av = std::as_const(a).data();
      auto bv = std::as_const(b).data();
      for (std::size_t i = 0; i < av.size(); ++i) {
        const float d = static_cast<float>(g * (static_cast<double>(av[i]) - bv[i]));
        if (!ga.empty()) ga[i] += d;
        if (!gb.empty()) gb[i] -= d;
      }
    });
  }
  return out;
}

Tensor mean_spatial(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("mean_spatial: need at least rank 2");
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  if (out_shape.empty()) out_shape.push_back(1);
  const std::size_t plane = x.dim(x.rank() - 2) * x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / plane;
  Tensor out(out_shape);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += xv[p * plane + i];
    o[p] = static_cast<float>(acc / static_cast<double>(plane));
  }
  check_finite(out.data(), "mean_spatial");
  if (tracking({&x})) {
    record("mean_spatial", {x}, out, [x, out, plane, planes]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      const float inv = 1.0f / static_cast<float>(plane);
      for (std::size_t p = 0; p < planes; ++p) {
        const float gp = g[p] * inv;
        for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += gp;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    record("reshape", {x}, out, [x, out]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose: need rank >= 2, got " + shape_str(x.shape()));
  Shape shape = x.shape();
  const std::size_t r = shape[shape.size() - 2], c = shape.back();
  const std::size_t batch = x.numel() / (r * c);
  std::swap(shape[shape.size() - 2], shape.back());
  Tensor out(shape);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o[base + j * r + i] = xv[base + i * c + j];
  }
  if (tracking({&x})) {
    record("transpose", {x}, out, [x, out, r, c, batch]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * r * c;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[base + i * c + j] += g[base + j * r + i];
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1 || begin > end || end > x.dim(0)) {
    throw IndexError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  const std::size_t row = x.numel() / shape[0];
  shape[0] = end - begin;
  auto xv = x.data();
  Tensor out(shape, std::vector<float>(xv.begin() + begin * row, xv.begin() + end * row));
  if (tracking({&x})) {
    record("slice_rows", {x}, out, [x, out, begin, row]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * row + i] += g[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw DimensionError("concat_rows: trailing dims differ " + shape_str(s) + " vs " +
                           shape_str(shape));
    }
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  auto o = out.data();
  std::size_t off = 0;
  bool any = false;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + off);
    off += p.numel();
    any = any || tracking({&p});
  }
  if (any) {
    record("concat_rows", parts, out, [parts, out]() mutable {
      auto g = std::as_const(out).grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        auto gp = sink(p);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        off += p.numel();
      }
    });
  }
  return out;
}

Tensor pad_rows(const Tensor& x, std::size_t rows) {
  if (rows < x.dim(0)) throw DimensionError("pad_rows: target smaller than input");
  Shape shape = x.shape();
  shape[0] = rows;
  Tensor out(shape);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (tracking({&x})) {
    record("pad_rows", {x}, out, [x, out]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_rank(x, 2, "split_heads");
  const std::size_t len = x.dim(0), d = x.dim(1);
  if (heads == 0 || d % heads != 0) throw ConfigError("split_heads: model dim not divisible by heads");
  const std::size_t dh = d / heads;
  Tensor out({heads, len, dh});
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < dh; ++j) o[(h * len + l) * dh + j] = xv[l * d + h * dh + j];
  if (tracking({&x})) {
    record("split_heads", {x}, out, [x, out, heads, len, d, dh]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t j = 0; j < dh; ++j) gx[l * d + h * dh + j] += g[(h * len + l) * dh + j];
    });
  }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  require_rank(x, 3, "merge_heads");
  const std::size_t heads = x.dim(0), len = x.dim(1), dh = x.dim(2), d = heads * dh;
  Tensor out({len, d});
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t j = 0; j < dh; ++j) o[l * d + h * dh + j] = xv[(h * len + l) * dh + j];
  if (tracking({&x})) {
    record("merge_heads", {x}, out, [x, out, heads, len, d, dh]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t j = 0; j < dh; ++j) gx[(h * len + l) * dh + j] += g[l * d + h * dh + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  kernels::gemm(a.ptr(), b.ptr(), out.ptr(), m, k, n, false);
  check_finite(out.data(), "matmul");
  if (tracking({&a, &b})) {
    record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const float* g = std::as_const(out).grad().data();
      if (a.requires_grad()) gemm_t(false, true, g, b.ptr(), sink(a).data(), m, n, k, true);
      if (b.requires_grad()) gemm_t(true, false, a.ptr(), g, sink(b).data(), k, m, n, true);
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_t(false, transpose_b, a.ptr() + i * m * k, b.ptr() + i * k * n, out.ptr() + i * m * n, m,
           k, n, false);
  }
  check_finite(out.data(), "bmm");
  if (tracking({&a, &b})) {
    record("bmm", {a, b}, out, [a, b, out, batch, m, k, n, transpose_b]() mutable {
      const float* g = std::as_const(out).grad().data();
      float* ga = a.requires_grad() ? sink(a).data() : nullptr;
      float* gb = b.requires_grad() ? sink(b).data() : nullptr;
      for (std::size_t i = 0; i < batch; ++i) {
        const float* gi = g + i * m * n;
        const float* ai = a.ptr() + i * m * k;
        const float* bi = b.ptr() + i * k * n;
        // out = a . op(b)
        if (ga) gemm_t(false, !transpose_b, gi, bi, ga + i * m * k, m, n, k, true);
        if (gb) {
          if (transpose_b) {
            gemm_t(true, false, gi, ai, gb + i * k * n, n, m, k, true);  // g^T a : [n x k]
          } else {
            gemm_t(true, false, ai, gi, gb + i * k * n, k, m, n, true);  // a^T g : [k x n]
          }
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t rows = x.dim(0), in = x.dim(1), outd = w.dim(1);
  if (w.dim(0) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  if (bias.defined() && bias.numel() != outd) throw DimensionError("linear: bias size mismatch");
  Tensor out({rows, outd});
  float* o = out.ptr();
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.ptr(), bias.ptr() + outd, o + r * outd);
  }
  kernels::gemm(x.ptr(), w.ptr(), o, rows, in, outd, bias.defined());
  check_finite(out.data(), "linear");
  if (tracking({&x, &w, &bias})) {
    std::vector<Tensor> ins{x, w};
    if (bias.defined()) ins.push_back(bias);
    record("linear", std::move(ins), out, [x, w, bias, out, rows, in, outd]() mutable {
      const float* g = std::as_const(out).grad().data();
      if (x.requires_grad()) gemm_t(false, true, g, w.ptr(), sink(x).data(), rows, outd, in, true);
      if (w.requires_grad()) gemm_t(true, false, x.ptr(), g, sink(w).data(), in, rows, outd, true);
      if (bias.defined() && bias.requires_grad()) {
        auto gb = sink(bias);
        for (std::size_t j = 0; j < outd; ++j) {
          double acc = 0.0;
          for (std::size_t r = 0; r < rows; ++r) acc += g[r * outd + j];
          gb[j] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution / resampling

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c) {
    throw DimensionError("conv2d: input channels " + std::to_string(c) + " vs weight " +
                         shape_str(w.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (kh > h + 2 * padding || kw > wd + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != o) throw DimensionError("conv2d: bias size mismatch");
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - kw) / stride + 1;
  const std::size_t ckk = c * kh * kw, plane = oh * ow;
  const bool track = tracking({&x, &w, &bias});

  Tensor out({batch, o, oh, ow});
  auto cols = std::make_shared<std::vector<float>>(track ? batch * ckk * plane : ckk * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    float* cb = cols->data() + (track ? b * ckk * plane : 0);
    im2col(x.ptr() + b * c * h * wd, c, h, wd, kh, kw, stride, padding, oh, ow, cb);
    float* ob = out.ptr() + b * o * plane;
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < o; ++oc) std::fill(ob + oc * plane, ob + (oc + 1) * plane, bias.ptr()[oc]);
    }
    kernels::gemm(w.ptr(), cb, ob, o, ckk, plane, bias.defined());
  }
  check_finite(out.data(), "conv2d");
  if (track) {
    std::vector<Tensor> ins{x, w};
    if (bias.defined()) ins.push_back(bias);
    record("conv2d", std::move(ins), out,
           [x, w, bias, out, cols, batch, c, h, wd, o, kh, kw, stride, padding, oh, ow, ckk,
            plane]() mutable {
             const float* g = std::as_const(out).grad().data();
             float* gw = w.requires_grad() ? sink(w).data() : nullptr;
             float* gx = x.requires_grad() ? sink(x).data() : nullptr;
             std::vector<float> gcols(gx ? ckk * plane : 0);
             for (std::size_t b = 0; b < batch; ++b) {
               const float* gb = g + b * o * plane;
               const float* cb = cols->data() + b * ckk * plane;
               if (gw) gemm_t(false, true, gb, cb, gw, o, plane, ckk, true);
               if (gx) {
                 gemm_t(true, false, w.ptr(), gb, gcols.data(), ckk, o, plane, false);
                 col2im(gcols.data(), c, h, wd, kh, kw, stride, padding, oh, ow, gx + b * c * h * wd);
               }
             }
             if (bias.defined() && bias.requires_grad()) {
               auto gbias = sink(bias);
               for (std::size_t oc = 0; oc < o; ++oc) {
                 double acc = 0.0;
                 for (std::size_t b = 0; b < batch; ++b) {
                   const float* gp = g + (b * o + oc) * plane;
                   for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                 }
                 gbias[oc] += static_cast<float>(acc);
               }
             }
           });
  }
  return out;
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() < 2) throw DimensionError("upsample_nearest: need at least rank 2");
  if (factor == 0) throw ConfigError("upsample_nearest: factor must be positive");
  Shape shape = x.shape();
  const std::size_t h = shape[shape.size() - 2], w = shape[shape.size() - 1];
  const std::size_t oh = h * factor, ow = w * factor;
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  const std::size_t planes = x.numel() / (h * w);
  Tensor out(shape);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        o[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
  if (tracking({&x})) {
    record("upsample_nearest", {x}, out, [x, out, planes, h, w, oh, ow, factor]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx)
            gx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
    });
  }
  return out;
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() < 2) throw DimensionError("bilinear_resize: need at least rank 2");
  if (out_h == 0 || out_w == 0) throw ConfigError("bilinear_resize: output dims must be >= 1");
  Shape shape = x.shape();
  const std::size_t h = shape[shape.size() - 2], w = shape[shape.size() - 1];
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  const std::size_t planes = x.numel() / (h * w);
  auto ty = std::make_shared<Taps>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<Taps>(bilinear_taps(w, out_w));
  Tensor out(shape);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = xv.data() + p * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const float* r0 = src + ty->i0[y] * w;
      const float* r1 = src + ty->i1[y] * w;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const double top = tx->w0[xx] * r0[tx->i0[xx]] + tx->w1[xx] * r0[tx->i1[xx]];
        const double bot = tx->w0[xx] * r1[tx->i0[xx]] + tx->w1[xx] * r1[tx->i1[xx]];
        o[(p * out_h + y) * out_w + xx] = static_cast<float>(ty->w0[y] * top + ty->w1[y] * bot);
      }
    }
  }
  check_finite(out.data(), "bilinear_resize");
  if (tracking({&x})) {
    record("bilinear_resize", {x}, out, [x, out, ty, tx, planes, h, w, out_h, out_w]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t p = 0; p < planes; ++p) {
        float* dst = gx.data() + p * h * w;
        for (std::size_t y = 0; y < out_h; ++y) {
          float* r0 = dst + ty->i0[y] * w;
          float* r1 = dst + ty->i1[y] * w;
          for (std::size_t xx = 0; xx < out_w; ++xx) {
            const double gv = g[(p * out_h + y) * out_w + xx];
            const double gt = gv * ty->w0[y], gbm = gv * ty->w1[y];
            r0[tx->i0[xx]] += static_cast<float>(gt * tx->w0[xx]);
            r0[tx->i1[xx]] += static_cast<float>(gt * tx->w1[xx]);
            r1[tx->i0[xx]] += static_cast<float>(gbm * tx->w0[xx]);
            r1[tx->i1[xx]] += static_cast<float>(gbm * tx->w1[xx]);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / attention pieces

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: parameter length " + std::to_string(gamma.numel()) +
                         " vs last dim " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * is;
      (*xhat)[r * d + j] = static_cast<float>(xh);
      o[r * d + j] = static_cast<float>(xh * gv[j] + bv[j]);
    }
  }
  check_finite(out.data(), "layer_norm");
  if (tracking({&x, &gamma, &beta})) {
    record("layer_norm", {x, gamma, beta}, out,
           [x, gamma, beta, out, xhat, inv_std, rows, d]() mutable {
             auto g = std::as_const(out).grad();
             auto gx = sink(x);
             auto gg = sink(gamma);
             auto gb = sink(beta);
             auto gam = std::as_const(gamma).data();
             std::vector<double> dg(gg.empty() ? 0 : d, 0.0), db(gb.empty() ? 0 : d, 0.0);
             for (std::size_t r = 0; r < rows; ++r) {
               const float* gr = g.data() + r * d;
               const float* xh = xhat->data() + r * d;
               if (!gg.empty())
                 for (std::size_t j = 0; j < d; ++j) dg[j] += static_cast<double>(gr[j]) * xh[j];
               if (!gb.empty())
                 for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
               if (!gx.empty()) {
                 double m1 = 0.0, m2 = 0.0;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double gh = static_cast<double>(gr[j]) * gam[j];
                   m1 += gh;
                   m2 += gh * xh[j];
                 }
                 m1 /= static_cast<double>(d);
                 m2 /= static_cast<double>(d);
                 const double is = (*inv_std)[r];
                 for (std::size_t j = 0; j < d; ++j) {
                   const double gh = static_cast<double>(gr[j]) * gam[j];
                   gx[r * d + j] += static_cast<float>(is * (gh - m1 - xh[j] * m2));
                 }
               }
             }
             for (std::size_t j = 0; j < dg.size(); ++j) gg[j] += static_cast<float>(dg[j]);
             for (std::size_t j = 0; j < db.size(); ++j) gb[j] += static_cast<float>(db[j]);
           });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::span<const std::uint8_t> allowed) {
  if (x.rank() < 1) throw DimensionError("softmax: scalar input");
  const std::size_t cols = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / cols;
  std::size_t mask_rows = 0;
  if (!allowed.empty()) {
    if (allowed.size() % cols != 0) throw DimensionError("softmax: mask width mismatch");
    mask_rows = allowed.size() / cols;
    if (rows % mask_rows != 0) throw DimensionError("softmax: mask rows do not tile input");
  }
  auto mask = std::make_shared<std::vector<std::uint8_t>>(allowed.begin(), allowed.end());
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * cols;
    const std::uint8_t* m = mask_rows ? mask->data() + (r % mask_rows) * cols : nullptr;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < cols; ++j)
      if (!m || m[j]) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j)
      if (!m || m[j]) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < cols; ++j)
      o[r * cols + j] = (!m || m[j]) ? static_cast<float>(std::exp(row[j] - mx) / z) : 0.0f;
  }
  check_finite(out.data(), "softmax");
  if (tracking({&x})) {
    record("softmax", {x}, out, [x, out, rows, cols]() mutable {
      auto g = std::as_const(out).grad();
      auto y = std::as_const(out).data();
      auto gx = sink(x);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += static_cast<double>(g[r * cols + j]) * y[r * cols + j];
        for (std::size_t j = 0; j < cols; ++j)
          gx[r * cols + j] += static_cast<float>(y[r * cols + j] * (g[r * cols + j] - dot));
      }
    });
  }
  return out;
}

Tensor rotary(const Tensor& x, std::span<const std::size_t> positions) {
  require_rank(x, 3, "rotary");
  const std::size_t heads = x.dim(0), len = x.dim(1), d = x.dim(2);
  if (d % 2 != 0) throw ConfigError("rotary: head dimension must be even, got " + std::to_string(d));
  if (positions.size() != len) throw DimensionError("rotary: positions length mismatch");
  auto cs = std::make_shared<std::vector<double>>(len * d);  // interleaved cos, sin per pair
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double theta = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
      const double ang = static_cast<double>(positions[l]) * theta;
      (*cs)[l * d + 2 * j] = std::cos(ang);
      (*cs)[l * d + 2 * j + 1] = std::sin(ang);
    }
  }
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < len; ++l) {
      const float* xr = xv.data() + (h * len + l) * d;
      float* orow = o.data() + (h * len + l) * d;
      for (std::size_t j = 0; j < d / 2; ++j) {
        const double c = (*cs)[l * d + 2 * j], s = (*cs)[l * d + 2 * j + 1];
        const double a = xr[2 * j], b = xr[2 * j + 1];
        orow[2 * j] = static_cast<float>(a * c - b * s);
        orow[2 * j + 1] = static_cast<float>(a * s + b * c);
      }
    }
  check_finite(out.data(), "rotary");
  if (tracking({&x})) {
    record("rotary", {x}, out, [x, out, cs, heads, len, d]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < len; ++l) {
          const float* gr = g.data() + (h * len + l) * d;
          float* gxr = gx.data() + (h * len + l) * d;
          for (std::size_t j = 0; j < d / 2; ++j) {
            const double c = (*cs)[l * d + 2 * j], s = (*cs)[l * d + 2 * j + 1];
            const double ga = gr[2 * j], gb = gr[2 * j + 1];
            gxr[2 * j] += static_cast<float>(ga * c + gb * s);
            gxr[2 * j + 1] += static_cast<float>(-ga * s + gb * c);
          }
        }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, float p, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout: rate must be in [0,1)");
  if (p == 0.0f) return x;
  auto keep = std::make_shared<std::vector<float>>(x.numel());
  const float s = 1.0f / (1.0f - p);
  for (auto& k : *keep) k = rng.uniform() < p ? 0.0f : s;
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * (*keep)[i];
  if (tracking({&x})) {
    record("dropout", {x}, out, [x, out, keep]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = sink(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*keep)[i];
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1);
  auto idv = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " out of range [0," +
                       std::to_string(v) + ")");
    }
    std::copy(table.ptr() + ids[i] * d, table.ptr() + (ids[i] + 1) * d, out.ptr() + i * d);
  }
  if (tracking({&table})) {
    record("embedding", {table}, out, [table, out, idv, d]() mutable {
      auto g = std::as_const(out).grad();
      auto gt = sink(table);
      for (std::size_t i = 0; i < idv->size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[(*idv)[i] * d + j] += g[i * d + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n) throw DimensionError("softmax_cross_entropy: target count mismatch");
  auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(n * v);
  auto tg = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= v) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[r]) +
                       " out of range [0," + std::to_string(v) + ")");
    }
    const float* row = lv.data() + r * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t j = 0; j < v; ++j) (*probs)[r * v + j] = std::exp(row[j] - lse);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(n)));
  check_finite(out.data(), "softmax_cross_entropy");
  if (tracking({&logits})) {
    record("softmax_cross_entropy", {logits}, out, [logits, out, probs, tg, n, v]() mutable {
      const double g = std::as_const(out).grad()[0] / static_cast<double>(n);
      auto gl = sink(logits);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < v; ++j) {
          const double onehot = j == (*tg)[r] ? 1.0 : 0.0;
          gl[r * v + j] += static_cast<float>(g * ((*probs)[r * v + j] - onehot));
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gradient routing

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

Tensor straight_through(const Tensor& continuous, const Tensor& quantized) {
  if (continuous.shape() != quantized.shape()) {
    throw DimensionError("straight_through: shape mismatch");
  }
  Tensor out(quantized.shape(),
             std::vector<float>(quantized.data().begin(), quantized.data().end()));
  if (tracking({&continuous, &quantized})) {
    record("straight_through", {continuous, quantized}, out, [continuous, quantized, out]() mutable {
      auto g = std::as_const(out).grad();
      for (auto* t : {&continuous, &quantized}) {
        auto gt = sink(*t);
        for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

}  // namespace uvar
