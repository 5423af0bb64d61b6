#pragma once

#include <functional>

#include "robustgrad/activation.hpp"
#include "robustgrad/ops.hpp"
#include "robustgrad/tape.hpp"

namespace robustgrad {

/// (d^2 output / dx^2) v, computed as the gradient of <grad output, v> with respect to x.
template <Real T>
Var<T> hessian_vector_product(const Var<T>& output, const Var<T>& x, const Tensor<T>& v, bool create_graph = false) {
  if (v.shape() != x.shape()) throw ShapeMismatch("hvp direction " + to_string(v.shape()) + " vs " + to_string(x.shape()));
  auto& tape = x.tape();
  const auto g = tape.gradient(output, {x}, true)[0];
  const auto inner = sum(mul(g, tape.constant(v)));
  return tape.gradient(inner, {x}, create_graph)[0];
}

/// Repeated Hessian-vector products against a fixed point. The first-order gradient graph
/// is recorded once and reused for every product.
template <Real T>
class HessianOperator {
 public:
  HessianOperator(const Var<T>& output, const Var<T>& x)
      : x_(x), grad_(x.tape().gradient(output, {x}, true)[0]) {}

  const Var<T>& gradient() const noexcept { return grad_; }

  Tensor<T> apply(const Tensor<T>& v) const {
    if (v.shape() != x_.shape()) throw ShapeMismatch("hvp direction " + to_string(v.shape()));
    auto& tape = x_.tape();
    const auto inner = sum(mul(grad_, tape.constant(v)));
    return tape.gradient(inner, {x_}, false)[0].value();
  }

 private:
  Var<T> x_;
  Var<T> grad_;
};

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of x, dividing by
/// the step actually represented.
template <Real T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw Error("finite difference step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    const T hi = orig + h, lo = orig - h;
    probe[i] = hi;
    const T fp = f(probe);
    probe[i] = lo;
    const T fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (hi - lo);
  }
  return grad;
}

}  // namespace robustgrad
