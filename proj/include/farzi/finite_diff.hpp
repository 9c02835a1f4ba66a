#pragma once

// Central finite differences. These only evaluate functions, never
// derivatives, and serve as the independent reference for every gradient
// path in the library.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>

#include "farzi/tensor.hpp"

namespace farzi::fd {

/// ∂f/∂w by central differences with step h.
inline ParamVector param_gradient(const std::function<double(const ParamVector&)>& f, const ParamVector& w,
                                  double h = 1e-5) {
  ParamVector g = ParamVector::zeros_like(w);
  ParamVector probe = w;
  for (std::size_t i = 0; i < w.total_len(); ++i) {
    const double orig = w.flat()[i];
    probe.flat()[i] = orig + h;
    const double up = f(probe);
    probe.flat()[i] = orig - h;
    const double down = f(probe);
    probe.flat()[i] = orig;
    g.flat()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline Tensor tensor_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ‖a − b‖₂ / ‖b‖₂, falling back to the absolute error when b vanishes.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  num = std::sqrt(num);
  den = std::sqrt(den);
  return den > 1e-300 ? num / den : num;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return farzi::dot(a, b) / (na * nb);
}

}  // namespace farzi::fd
