#pragma once

// Differentiable operations over Tensor<T>. Every op validates its inputs,
// computes the forward result eagerly and, when a graph is being recorded,
// attaches the matching backward rule.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rfcnn/tensor.hpp"

namespace rfcnn {

enum class Mode { Train, Eval };

namespace detail {

template <class T>
std::vector<T>* grad_of(const std::shared_ptr<TensorImpl<T>>& p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return &p->grad;
}

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T{0});
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T{0}) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T
template <class T>
void gemm_nt_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      T acc{0};
      for (std::size_t j = 0; j < N; ++j) acc += a[j] * b[j];
      C[i * K + k] += acc;
    }
  }
}

// C[K,N] = A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  std::fill(C, C + K * N, T{0});
  for (std::size_t m = 0; m < M; ++m) {
    const T* b = B + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[m * K + k];
      if (a == T{0}) continue;
      T* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;
  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * g.cols();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          T* out = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + g.out_w, T{0});
            continue;
          }
          const T* src = x + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            out[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : src[iw];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* cols, T* x) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * g.cols();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = x + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const T* in = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

inline std::size_t pooled_extent(std::size_t in, std::size_t k, std::size_t s) { return (in - k) / s + 1; }

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), OpKind::Add, {pa, pb}, [pa, pb](auto& self) {
    for (const auto& p : {pa, pb}) {
      if (auto* g = detail::grad_of(p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), OpKind::Mul, {pa, pb}, [pa, pb](auto& self) {
    if (auto* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pb->data[i];
    }
    if (auto* g = detail::grad_of(pb)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pa->data[i];
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (auto v : a.values()) total += v;
  auto pa = a.impl();
  return detail::make_result<T>({1}, {total}, OpKind::Sum, {pa}, [pa](auto& self) {
    if (auto* g = detail::grad_of(pa)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > T{0} ? a.values()[i] : T{0};
  auto pa = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), OpKind::Relu, {pa}, [pa](auto& self) {
    if (auto* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (pa->data[i] > T{0}) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a.values()[i]);
  auto pa = a.impl();
  return detail::make_result<T>(a.shape(), out, OpKind::Sigmoid, {pa}, [pa](auto& self) {
    if (auto* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T s = self.data[i];
        (*g)[i] += self.grad[i] * s * (T{1} - s);
      }
    }
  });
}

/// Cross-correlation of [N,C_in,H,W] with [C_out,C_in,k,k] weights.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t padding) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  if (stride < 1) throw ArgumentError("conv2d: stride must be positive");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto Co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C) {
    throw DimensionError("conv2d: input has " + std::to_string(C) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != k) throw DimensionError("conv2d: only square kernels are supported");
  if (H + 2 * padding < k || W + 2 * padding < k) {
    throw DimensionError("conv2d: padded input " + shape_str(input.shape()) + " smaller than kernel " +
                         std::to_string(k));
  }
  const detail::ConvGeometry geo{C, H, W, k, stride, padding, (H + 2 * padding - k) / stride + 1,
                                 (W + 2 * padding - k) / stride + 1};
  const auto in_sz = C * H * W, out_sz = Co * geo.cols();
  std::vector<T> out(N * out_sz);
  std::vector<T> cols(geo.is_pointwise() ? 0 : geo.rows() * geo.cols());
  for (std::size_t n = 0; n < N; ++n) {
    const T* x = input.values().data() + n * in_sz;
    const T* c = x;
    if (!geo.is_pointwise()) {
      detail::im2col(geo, x, cols.data());
      c = cols.data();
    }
    detail::gemm_nn(Co, geo.cols(), geo.rows(), weight.values().data(), c, out.data() + n * out_sz, false);
  }
  auto px = input.impl(), pw = weight.impl();
  return detail::make_result<T>({N, Co, geo.out_h, geo.out_w}, std::move(out), OpKind::Conv2d, {px, pw},
                                [px, pw, geo, N, Co, in_sz, out_sz](auto& self) {
                                  auto* gx = detail::grad_of(px);
                                  auto* gw = detail::grad_of(pw);
                                  std::vector<T> cols(geo.is_pointwise() ? 0 : geo.rows() * geo.cols());
                                  std::vector<T> dcols(geo.rows() * geo.cols());
                                  for (std::size_t n = 0; n < N; ++n) {
                                    const T* dy = self.grad.data() + n * out_sz;
                                    if (gw) {
                                      const T* x = px->data.data() + n * in_sz;
                                      const T* c = x;
                                      if (!geo.is_pointwise()) {
                                        detail::im2col(geo, x, cols.data());
                                        c = cols.data();
                                      }
                                      detail::gemm_nt_acc(Co, geo.cols(), geo.rows(), dy, c, gw->data());
                                    }
                                    if (gx) {
                                      T* dx = gx->data() + n * in_sz;
                                      if (geo.is_pointwise()) {
                                        detail::gemm_tn(Co, geo.cols(), geo.rows(), pw->data.data(), dy,
                                                        dcols.data());
                                        for (std::size_t i = 0; i < in_sz; ++i) dx[i] += dcols[i];
                                      } else {
                                        detail::gemm_tn(Co, geo.cols(), geo.rows(), pw->data.data(), dy,
                                                        dcols.data());
                                        detail::col2im_add(geo, dcols.data(), dx);
                                      }
                                    }
                                  }
                                });
}

/// Adds a per-channel bias to [N,C,H,W].
template <class T>
Tensor<T> channel_bias(const Tensor<T>& input, const Tensor<T>& bias) {
  detail::require_rank(input.shape(), 4, "channel_bias input");
  const auto N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (bias.numel() != C) throw DimensionError("channel_bias: bias length does not match channels");
  std::vector<T> out(input.values());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T* o = out.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) o[i] += bias.values()[c];
    }
  auto px = input.impl(), pb = bias.impl();
  return detail::make_result<T>(input.shape(), std::move(out), OpKind::ChannelBias, {px, pb},
                                [px, pb, N, C, HW](auto& self) {
                                  if (auto* g = detail::grad_of(px)) {
                                    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
                                  }
                                  if (auto* g = detail::grad_of(pb)) {
                                    for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t c = 0; c < C; ++c) {
                                        const T* d = self.grad.data() + (n * C + c) * HW;
                                        T acc{0};
                                        for (std::size_t i = 0; i < HW; ++i) acc += d[i];
                                        (*g)[c] += acc;
                                      }
                                  }
                                });
}

/// Max over k x k windows. Ties resolve to the first cell in row-major order,
/// and backward routes the whole gradient to that cell.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t k, std::size_t stride) {
  detail::require_rank(input.shape(), 4, "maxpool2d");
  if (k < 1 || stride < 1) throw ArgumentError("maxpool2d: kernel and stride must be positive");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H < k || W < k) throw DimensionError("maxpool2d: input " + shape_str(input.shape()) + " smaller than window");
  const auto OH = detail::pooled_extent(H, k, stride), OW = detail::pooled_extent(W, k, stride);
  std::vector<T> out(N * C * OH * OW);
  std::vector<std::size_t> argmax(out.size());
  const auto& x = input.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        std::size_t best = nc * H * W + (oh * stride) * W + ow * stride;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const auto idx = nc * H * W + (oh * stride + i) * W + ow * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        const auto o = (nc * OH + oh) * OW + ow;
        out[o] = x[best];
        argmax[o] = best;
      }
  }
  auto px = input.impl();
  return detail::make_result<T>({N, C, OH, OW}, std::move(out), OpKind::MaxPool2d, {px},
                                [px, argmax = std::move(argmax)](auto& self) {
                                  if (auto* g = detail::grad_of(px)) {
                                    for (std::size_t o = 0; o < argmax.size(); ++o) (*g)[argmax[o]] += self.grad[o];
                                  }
                                });
}

/// Sum over k x k windows (max pooling's linear stand-in for support probes).
template <class T>
Tensor<T> sumpool2d(const Tensor<T>& input, std::size_t k, std::size_t stride) {
  detail::require_rank(input.shape(), 4, "sumpool2d");
  if (k < 1 || stride < 1) throw ArgumentError("sumpool2d: kernel and stride must be positive");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H < k || W < k) throw DimensionError("sumpool2d: input " + shape_str(input.shape()) + " smaller than window");
  const auto OH = detail::pooled_extent(H, k, stride), OW = detail::pooled_extent(W, k, stride);
  std::vector<T> out(N * C * OH * OW, T{0});
  const auto& x = input.values();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        T acc{0};
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) acc += x[nc * H * W + (oh * stride + i) * W + ow * stride + j];
        out[(nc * OH + oh) * OW + ow] = acc;
      }
  auto px = input.impl();
  return detail::make_result<T>({N, C, OH, OW}, std::move(out), OpKind::SumPool2d, {px},
                                [px, N, C, H, W, OH, OW, k, stride](auto& self) {
                                  if (auto* g = detail::grad_of(px)) {
                                    for (std::size_t nc = 0; nc < N * C; ++nc)
                                      for (std::size_t oh = 0; oh < OH; ++oh)
                                        for (std::size_t ow = 0; ow < OW; ++ow) {
                                          const T d = self.grad[(nc * OH + oh) * OW + ow];
                                          for (std::size_t i = 0; i < k; ++i)
                                            for (std::size_t j = 0; j < k; ++j)
                                              (*g)[nc * H * W + (oh * stride + i) * W + ow * stride + j] += d;
                                        }
                                  }
                                });
}

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Running statistics owned by the caller; updated in place in train mode.
template <class T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit RunningStats(std::size_t channels = 0) : mean(channels, T{0}), var(channels, T{1}) {}
};

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                      Mode mode, BatchNormOptions opt = {}) {
  detail::require_rank(input.shape(), 4, "batchnorm2d");
  const auto N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || stats.mean.size() != C || stats.var.size() != C) {
    throw DimensionError("batchnorm2d: parameter length does not match " + std::to_string(C) + " channels");
  }
  const auto count = N * HW;
  if (mode == Mode::Train && count < 2) {
    throw DegenerateBatchError("batchnorm2d: train mode needs N*H*W >= 2 per channel, got " + std::to_string(count));
  }
  const auto& x = input.values();
  std::vector<T> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      stats.mean[c] = static_cast<T>((1.0 - opt.momentum) * stats.mean[c] + opt.momentum * mu);
      stats.var[c] = static_cast<T>((1.0 - opt.momentum) * stats.var[c] + opt.momentum * unbiased);
    } else {
      mean[c] = stats.mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) + opt.eps));
    }
  }
  std::vector<T> xhat(x.size()), out(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const auto off = (n * C + c) * HW;
      const T gm = gamma.values()[c], bt = beta.values()[c];
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[off + i] = (x[off + i] - mean[c]) * inv_std[c];
        out[off + i] = gm * xhat[off + i] + bt;
      }
    }
  auto px = input.impl(), pg = gamma.impl(), pb = beta.impl();
  return detail::make_result<T>(
      input.shape(), std::move(out), OpKind::BatchNorm2d, {px, pg, pb},
      [px, pg, pb, N, C, HW, count, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](auto& self) {
        auto* gx = detail::grad_of(px);
        auto* gg = detail::grad_of(pg);
        auto* gb = detail::grad_of(pb);
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy{0}, sum_dy_xhat{0};
          for (std::size_t n = 0; n < N; ++n) {
            const auto off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_dy += self.grad[off + i];
              sum_dy_xhat += self.grad[off + i] * xhat[off + i];
            }
          }
          if (gg) (*gg)[c] += sum_dy_xhat;
          if (gb) (*gb)[c] += sum_dy;
          if (!gx) continue;
          const T scale = pg->data[c] * inv_std[c];
          const T m = static_cast<T>(count);
          for (std::size_t n = 0; n < N; ++n) {
            const auto off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              if (mode == Mode::Train) {
                (*gx)[off + i] += scale * (self.grad[off + i] - sum_dy / m - xhat[off + i] * sum_dy_xhat / m);
              } else {
                (*gx)[off + i] += scale * self.grad[off + i];
              }
            }
          }
        }
      });
}

/// [N,C,H,W] -> [N,C] mean over spatial positions.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "global_avg_pool");
  const auto N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  std::vector<T> out(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc{0};
    for (std::size_t i = 0; i < HW; ++i) acc += input.values()[nc * HW + i];
    out[nc] = acc / static_cast<T>(HW);
  }
  auto px = input.impl();
  return detail::make_result<T>({N, C}, std::move(out), OpKind::GlobalAvgPool, {px}, [px, N, C, HW](auto& self) {
    if (auto* g = detail::grad_of(px)) {
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T d = self.grad[nc] / static_cast<T>(HW);
        for (std::size_t i = 0; i < HW; ++i) (*g)[nc * HW + i] += d;
      }
    }
  });
}

/// x[N,in] * W[out,in]^T + b[out].
template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(input.shape(), 2, "linear input");
  detail::require_rank(weight.shape(), 2, "linear weight");
  const auto N = input.dim(0), In = input.dim(1), Out = weight.dim(0);
  if (weight.dim(1) != In) throw DimensionError("linear: weight expects " + std::to_string(weight.dim(1)) + " inputs");
  if (bias.numel() != Out) throw DimensionError("linear: bias length does not match outputs");
  std::vector<T> out(N * Out);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Out; ++o) {
      T acc = bias.values()[o];
      for (std::size_t i = 0; i < In; ++i) acc += input.values()[n * In + i] * weight.values()[o * In + i];
      out[n * Out + o] = acc;
    }
  auto px = input.impl(), pw = weight.impl(), pb = bias.impl();
  return detail::make_result<T>({N, Out}, std::move(out), OpKind::Linear, {px, pw, pb},
                                [px, pw, pb, N, In, Out](auto& self) {
                                  auto* gx = detail::grad_of(px);
                                  auto* gw = detail::grad_of(pw);
                                  auto* gb = detail::grad_of(pb);
                                  for (std::size_t n = 0; n < N; ++n)
                                    for (std::size_t o = 0; o < Out; ++o) {
                                      const T d = self.grad[n * Out + o];
                                      if (gb) (*gb)[o] += d;
                                      for (std::size_t i = 0; i < In; ++i) {
                                        if (gx) (*gx)[n * In + i] += d * pw->data[o * In + i];
                                        if (gw) (*gw)[o * In + i] += d * px->data[n * In + i];
                                      }
                                    }
                                });
}

/// Mean binary cross-entropy over known (mask != 0) entries, in the
/// log-sum-exp form max(x,0) - x*y + log1p(exp(-|x|)). Targets may be soft.
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> targets, std::span<const std::uint8_t> mask = {}) {
  const auto n = logits.numel();
  if (targets.size() != n) throw DimensionError("bce_with_logits: targets length does not match logits");
  if (!mask.empty() && mask.size() != n) throw DimensionError("bce_with_logits: mask length does not match logits");
  std::size_t known = 0;
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T y = targets[i];
    if (!(y >= T{0} && y <= T{1})) throw ArgumentError("bce_with_logits: target outside [0,1]");
    if (!mask.empty() && mask[i] == 0) continue;
    const T x = logits.values()[i];
    total += std::max(x, T{0}) - x * y + std::log1p(std::exp(-std::abs(x)));
    ++known;
  }
  if (known == 0) throw EmptyLossError("bce_with_logits: every label is masked");
  const T inv = T{1} / static_cast<T>(known);
  std::vector<T> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  auto px = logits.impl();
  return detail::make_result<T>({1}, {total * inv}, OpKind::BceWithLogits, {px},
                                [px, tgt = std::move(tgt), msk = std::move(msk), inv](auto& self) {
                                  if (auto* g = detail::grad_of(px)) {
                                    for (std::size_t i = 0; i < g->size(); ++i) {
                                      if (!msk.empty() && msk[i] == 0) continue;
                                      (*g)[i] += self.grad[0] * inv * (stable_sigmoid(px->data[i]) - tgt[i]);
                                    }
                                  }
                                });
}

}  // namespace rfcnn
