#pragma once

// Define-by-run reverse-mode automatic differentiation over lbc::Tensor.
//
// Every op call builds a new node holding its forward value and a closure that
// routes the node's gradient to its inputs. The graph is rebuilt per forward
// pass and is freed when the last Var referring to it goes away. Leaf
// parameters (created with parameter()) persist across passes and accumulate
// gradients until zero_grad() is called.
//
// All ops are instantiated for float (training, inference) and double
// (gradient checks). Every forward value is checked for NaN/Inf; a non-finite
// result throws NumericError naming the op.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lbc/tensor.hpp"

namespace lbc::ad {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward;

  // Zero-initialised on first use.
  Tensor<T>& grad_buffer() {
    if (grad.numel() != value.numel() || grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    }
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  // Direct access for optimizers and finite-difference probes. Only valid on
  // leaves; mutating an interior value does not re-run its consumers.
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.numel() == node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> value);

template <typename T>
Var<T> parameter(Tensor<T> value);

// Disables graph construction on this thread while alive. Ops still compute
// values but record no parents or backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Building block for ops defined outside this header (fused likelihoods and
// the like). `backward` receives the output gradient and must accumulate into
// the grad_buffer() of every input that requires_grad.
template <typename T>
Var<T> make_op(const char* name, Tensor<T> value, const std::vector<Var<T>>& inputs,
               std::function<void(const Tensor<T>&)> backward);

// Throws NumericError if `t` holds NaN or Inf.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where);

// Binary ops broadcast only when ranks match and each dim pair is equal or has
// a 1, or when one operand holds a single element.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
// Throws NumericError on any zero in the denominator.
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, T offset);
template <typename T> Var<T> square(const Var<T>& a);
// Throws NumericError on negative input.
template <typename T> Var<T> sqrt(const Var<T>& a);
template <typename T> Var<T> abs(const Var<T>& a);
// Natural log; throws NumericError on nonpositive input.
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);
// max(a, c); zero gradient where the floor is active (a < c).
template <typename T> Var<T> clamp_min(const Var<T>& a, T c);
// min(max(a, lo), hi); zero gradient outside [lo, hi].
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);

// Throw DimensionError on an empty input.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

// Channels [begin, end) of a C x H x W tensor.
template <typename T> Var<T> slice_channels(const Var<T>& a, std::int64_t begin, std::int64_t end);

// Per-tap enable flags for a Kh x Kw kernel, row-major. Empty = all taps.
using TapMask = std::vector<std::uint8_t>;

// Stride-1 cross-correlation. input: Cin x H x W; weight: Cout x Cin x Kh x Kw;
// bias: Cout or an empty Var. Output: Cout x (H + 2p - Kh + 1) x (W + 2p - Kw + 1).
// Disabled taps are never read, so their weight gradients stay zero.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int padding,
              const TapMask& mask = {});

// Populates gradients of every reachable node that requires_grad. Leaf
// gradients accumulate across calls until zero_grad(); interior gradients are
// recomputed on each call. Throws DimensionError if `loss` is not a scalar.
template <typename T>
void backward(const Var<T>& loss);

// Largest relative disagreement between autodiff and central differences over
// `params`. For each parameter tensor the error is
//   max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)
// and the function returns the maximum over tensors. `f` is re-evaluated
// 2 * numel times and must be deterministic.
double grad_check(const std::function<Var<double>()>& f, std::span<Var<double>> params,
                  double eps = 1e-6);

}  // namespace lbc::ad
