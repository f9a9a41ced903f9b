#pragma once

// Shake-Shake combination of two parallel residual branches:
//
//   forward:   y = x + a * b1 + (1 - a) * b2
//   backward:  dx = dy,  db1 = b * dy,  db2 = (1 - b) * dy
//
// with a (forward) and b (backward) drawn independently from U[0,1] per
// sample. Evaluation uses a = 0.5.

#include <cstddef>
#include <vector>

#include "rfcnn/ops.hpp"
#include "rfcnn/random.hpp"

namespace rfcnn {

struct ShakeCoefficients {
  std::vector<double> alpha_forward;
  std::vector<double> beta_backward;
  Mode mode = Mode::Eval;

  static ShakeCoefficients eval(std::size_t batch_size) {
    return {std::vector<double>(batch_size, 0.5), std::vector<double>(batch_size, 0.5), Mode::Eval};
  }
};

/// One (alpha, beta) pair per sample. Train mode draws both from `rng`;
/// eval mode ignores it.
inline ShakeCoefficients sample_coefficients(std::size_t batch_size, RngStream& rng, Mode mode = Mode::Train) {
  if (batch_size < 1) throw ArgumentError("sample_coefficients: batch_size must be >= 1");
  if (mode == Mode::Eval) return ShakeCoefficients::eval(batch_size);
  ShakeCoefficients c;
  c.mode = Mode::Train;
  c.alpha_forward.resize(batch_size);
  c.beta_backward.resize(batch_size);
  for (auto& a : c.alpha_forward) a = rng.uniform();
  for (auto& b : c.beta_backward) b = rng.uniform();
  return c;
}

template <class T>
Tensor<T> shake_combine(const Tensor<T>& x, const Tensor<T>& b1, const Tensor<T>& b2, const ShakeCoefficients& coeffs) {
  if (x.shape() != b1.shape() || x.shape() != b2.shape()) {
    throw DimensionError("shake_combine: shapes differ: x " + shape_str(x.shape()) + ", b1 " + shape_str(b1.shape()) +
                         ", b2 " + shape_str(b2.shape()));
  }
  if (x.rank() < 1) throw DimensionError("shake_combine: inputs need a batch dimension");
  const auto N = x.dim(0);
  if (coeffs.alpha_forward.size() != N || coeffs.beta_backward.size() != N) {
    throw DimensionError("shake_combine: need one coefficient pair per sample");
  }
  for (std::size_t n = 0; n < N; ++n) {
    const double a = coeffs.alpha_forward[n], b = coeffs.beta_backward[n];
    if (!(a >= 0.0 && a <= 1.0) || !(b >= 0.0 && b <= 1.0)) {
      throw ContractError("shake_combine: coefficients must lie in [0,1]");
    }
    if (coeffs.mode == Mode::Eval && (a != 0.5 || b != 0.5)) {
      throw ContractError("shake_combine: eval mode requires alpha = 0.5");
    }
  }
  const auto per = x.numel() / N;
  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    const T a = static_cast<T>(coeffs.alpha_forward[n]);
    const T ac = static_cast<T>(1.0 - coeffs.alpha_forward[n]);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      out[i] = x.values()[i] + a * b1.values()[i] + ac * b2.values()[i];
    }
  }
  auto px = x.impl(), p1 = b1.impl(), p2 = b2.impl();
  return detail::make_result<T>(x.shape(), std::move(out), OpKind::ShakeCombine, {px, p1, p2},
                                [px, p1, p2, N, per, beta = coeffs.beta_backward](auto& self) {
                                  if (auto* g = detail::grad_of(px)) {
                                    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                                  }
                                  auto* g1 = detail::grad_of(p1);
                                  auto* g2 = detail::grad_of(p2);
                                  for (std::size_t n = 0; n < N; ++n) {
                                    const T b = static_cast<T>(beta[n]);
                                    const T bc = static_cast<T>(1.0 - beta[n]);
                                    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
                                      if (g1) (*g1)[i] += b * self.grad[i];
                                      if (g2) (*g2)[i] += bc * self.grad[i];
                                    }
                                  }
                                });
}

}  // namespace rfcnn
