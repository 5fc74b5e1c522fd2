#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace uvar {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 tensor. A Tensor is a shared handle: copies alias
// the same storage, which is what lets the tape hand gradients back to the
// parameters a model holds. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, v); }

  bool defined() const { return impl_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<float> data();
  std::span<const float> data() const;
  float* ptr() { return data().data(); }
  const float* ptr() const { return data().data(); }
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  // Gradient buffer; absent until backward writes to it or ensure_grad().
  bool has_grad() const;
  std::span<float> grad();
  std::span<const float> grad() const;
  std::span<float> ensure_grad();
  void zero_grad();
  void drop_grad();

  // Same storage, gradient tracking off.
  Tensor detach() const;
  Tensor clone() const;

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Ordered record of differentiable operations. Ops append to the active tape
// (see Tape::Scope) whenever one of their inputs requires a gradient, so the
// record is topologically ordered by construction.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Scope activate() { return Scope(*this); }

  void record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn);
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  static Tape* active();

 private:
  std::vector<Node> nodes_;
};

// Reverse traversal: seeds d(loss)/d(loss) = 1 and runs every recorded node
// whose output received a gradient, newest first.
void backward(const Tensor& loss, Tape& tape);

// Suspends recording for the current thread (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

}  // namespace uvar
