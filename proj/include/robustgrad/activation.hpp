#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>

#include "robustgrad/ops.hpp"

namespace robustgrad {

enum class ActivationKind { relu, gelu, silu, softplus };

inline std::string_view activation_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::gelu: return "gelu";
    case ActivationKind::silu: return "silu";
    case ActivationKind::softplus: return "softplus";
  }
  return "?";
}

inline std::optional<ActivationKind> parse_activation(std::string_view s) {
  if (s == "relu") return ActivationKind::relu;
  if (s == "gelu") return ActivationKind::gelu;
  if (s == "silu") return ActivationKind::silu;
  if (s == "softplus") return ActivationKind::softplus;
  return std::nullopt;
}

/// Highest derivative order with a closed form. Differentiating past it throws.
inline constexpr int kMaxActivationOrder = 3;

namespace detail {

template <Real T>
T sigmoid(T z) {
  return z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

template <Real T>
T softplus(T z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

}  // namespace detail

/// order-th derivative of the activation at z, order in [0, 3].
/// GELU is the tanh approximation 0.5 z (1 + tanh(sqrt(2/pi) (z + 0.044715 z^3))).
template <Real T>
T activation_derivative(ActivationKind kind, T z, int order) {
  switch (kind) {
    case ActivationKind::relu:
      if (order == 0) return z > 0 ? z : T(0);
      if (order == 1) return z > 0 ? T(1) : T(0);
      return T(0);
    case ActivationKind::softplus: {
      if (order == 0) return detail::softplus(z);
      const T s = detail::sigmoid(z);
      if (order == 1) return s;
      const T d = s * (T(1) - s);
      if (order == 2) return d;
      return d * (T(1) - T(2) * s);
    }
    case ActivationKind::silu: {
      const T s = detail::sigmoid(z);
      if (order == 0) return z * s;
      const T d = s * (T(1) - s);
      if (order == 1) return s + z * d;
      const T q = T(1) - T(2) * s;
      if (order == 2) return d * (T(2) + z * q);
      return d * q * (T(2) + z * q) + d * q - T(2) * z * d * d;
    }
    case ActivationKind::gelu: {
      const T c = std::sqrt(T(2) / std::numbers::pi_v<T>);
      const T a = T(0.044715);
      const T u = c * (z + a * z * z * z);
      const T t = std::tanh(u);
      if (order == 0) return T(0.5) * z * (T(1) + t);
      const T s = T(1) - t * t;
      const T u1 = c * (T(1) + T(3) * a * z * z);
      if (order == 1) return T(0.5) * (T(1) + t) + T(0.5) * z * s * u1;
      const T u2 = T(6) * a * c * z;
      const T inner = u2 - T(2) * t * u1 * u1;
      if (order == 2) return s * u1 + T(0.5) * z * s * inner;
      const T u3 = T(6) * a * c;
      const T ds = -T(2) * t * s * u1;
      const T dinner = u3 - T(2) * s * u1 * u1 * u1 - T(4) * t * u1 * u2;
      return ds * u1 + s * u2 + T(0.5) * s * inner + T(0.5) * z * ds * inner + T(0.5) * z * s * dinner;
    }
  }
  return T(0);
}

/// Elementwise order-th activation derivative as a differentiable primitive; its adjoint
/// is g times the (order+1)-th derivative.
template <Real T>
Var<T> activation(ActivationKind kind, const Var<T>& z, int order = 0) {
  if (order < 0 || order > kMaxActivationOrder) throw Error("activation derivative order out of range");
  return z.tape().record(detail::map(z.value(), [kind, order](T v) { return activation_derivative(kind, v, order); }),
                         {z},
                         [kind, order](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           if (kind == ActivationKind::relu && order >= 1) return;
                           if (order + 1 > kMaxActivationOrder) {
                             throw Error("activation derivative beyond order " + std::to_string(kMaxActivationOrder));
                           }
                           out[0] = mul(g, activation(kind, detail::parent(t, self, 0), order + 1));
                         });
}

}  // namespace robustgrad
