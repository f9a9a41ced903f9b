#pragma once

// Receptive-field bookkeeping.
//
// Walking the main path of a network layer by layer:
//
//   S_n  = S_{n-1} * s_n
//   RF_n = RF_{n-1} + (k_n - 1) * S_{n-1}
//
// where S_{n-1} is the input-pixel spacing of the grid the layer reads from.
// Max pooling counts as a layer with k = s = 2. The RF of a network is the RF
// of its last convolution.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "rfcnn/arch.hpp"
#include "rfcnn/ops.hpp"

namespace rfcnn {

enum class LayerKind { Input, Conv, Pool };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::Pool: return "pool";
  }
  return "?";
}

struct LayerTrace {
  int layer_index = 0;
  LayerKind kind = LayerKind::Input;
  std::string label;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t input_stride = 1;       // S_{n-1}
  std::int64_t cumulative_stride = 1;  // S_n
  std::int64_t rf = 1;                 // RF_n, input pixels
};

struct RFReport {
  std::string network_name;
  std::vector<LayerTrace> traces;
  std::int64_t max_rf = 1;
};

/// Main-path layer sequence of a spec (shortcut projections and the second
/// shake branch do not widen the RF).
struct PathLayer {
  LayerKind kind;
  int kernel;
  int stride;
  std::string label;
};

inline std::vector<PathLayer> main_path(const ArchSpec& spec) {
  std::vector<PathLayer> path;
  path.push_back({LayerKind::Conv, spec.input_conv.kernel, spec.input_conv.stride, "input_conv"});
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const auto& block = spec.blocks[b];
    const auto prefix = "block" + std::to_string(b + 1);
    for (std::size_t c = 0; c < block.conv_kernels.size(); ++c) {
      path.push_back({LayerKind::Conv, block.conv_kernels[c], 1, prefix + ".conv" + std::to_string(c + 1)});
    }
    if (block.followed_by_pool) path.push_back({LayerKind::Pool, 2, 2, prefix + ".pool"});
  }
  path.push_back({LayerKind::Conv, 1, 1, "head"});
  return path;
}

inline RFReport compute_rf(const ArchSpec& spec) {
  validate(spec);
  RFReport report;
  report.network_name = spec.name;
  LayerTrace t;
  t.label = "input";
  report.traces.push_back(t);
  std::int64_t S = 1, RF = 1, last_conv_rf = 1;
  int index = 0;
  for (const auto& layer : main_path(spec)) {
    LayerTrace tr;
    tr.layer_index = ++index;
    tr.kind = layer.kind;
    tr.label = layer.label;
    tr.kernel = layer.kernel;
    tr.stride = layer.stride;
    tr.input_stride = S;
    RF += (layer.kernel - 1) * S;
    S *= layer.stride;
    tr.cumulative_stride = S;
    tr.rf = RF;
    if (layer.kind == LayerKind::Conv) last_conv_rf = RF;
    report.traces.push_back(tr);
  }
  report.max_rf = last_conv_rf;
  return report;
}

/// Max RF of CP_ResNet for rho in [0, 21].
inline std::int64_t rf_for_rho(int rho) { return compute_rf(build_cp_resnet(rho, 1)).max_rf; }

/// Largest rho whose RF does not exceed `target_rf`.
inline int inverse_rho(std::int64_t target_rf) {
  if (target_rf < rf_for_rho(0)) {
    throw NoSolutionError("no rho yields an RF <= " + std::to_string(target_rf) + " (minimum is " +
                          std::to_string(rf_for_rho(0)) + ")");
  }
  int best = 0;
  for (int rho = 0; rho <= kMaxRho; ++rho) {
    if (rf_for_rho(rho) <= target_rf) best = rho;
  }
  return best;
}

inline void print_rf_table(std::ostream& os, const RFReport& report) {
  os << "network " << report.network_name << "\n";
  os << std::left << std::setw(6) << "n" << std::setw(18) << "layer" << std::setw(7) << "kind" << std::right
     << std::setw(4) << "k" << std::setw(4) << "s" << std::setw(8) << "S_in" << std::setw(8) << "S_n"
     << std::setw(8) << "RF_n" << "\n";
  for (const auto& t : report.traces) {
    os << std::left << std::setw(6) << t.layer_index << std::setw(18) << t.label << std::setw(7) << to_string(t.kind)
       << std::right << std::setw(4) << t.kernel << std::setw(4) << t.stride << std::setw(8) << t.input_stride
       << std::setw(8) << t.cumulative_stride << std::setw(8) << t.rf << "\n";
  }
  os << "max RF " << report.max_rf << "x" << report.max_rf << "\n";
}

inline void write_rf_csv(std::ostream& os, const RFReport& report) {
  os << "layer_index,label,kind,kernel,stride,input_stride,cumulative_stride,rf\n";
  for (const auto& t : report.traces) {
    os << t.layer_index << ',' << t.label << ',' << to_string(t.kind) << ',' << t.kernel << ',' << t.stride << ','
       << t.input_stride << ',' << t.cumulative_stride << ',' << t.rf << '\n';
  }
}

/// Measures the RF by back-propagation instead of the recursion: a
/// single-channel copy of the network with all-ones weights, identity
/// activations and sum pooling in place of max pooling. Returns the side of the
/// bounding box of input pixels with non-zero gradient for the central output
/// neuron.
inline std::int64_t empirical_rf(const ArchSpec& spec, std::size_t input_size) {
  validate(spec);
  if (static_cast<std::int64_t>(input_size) <= compute_rf(spec).max_rf) {
    throw ClippedRfError("input " + std::to_string(input_size) + " is not larger than the analytic RF " +
                         std::to_string(compute_rf(spec).max_rf));
  }
  using T = double;
  auto ones = [](int k) { return Tensor<T>::full({1, 1, std::size_t(k), std::size_t(k)}, T{1}); };
  auto conv = [&](const Tensor<T>& x, int k, int stride) {
    return conv2d(x, ones(k), static_cast<std::size_t>(stride), static_cast<std::size_t>(k / 2));
  };

  auto input = Tensor<T>::zeros({1, 1, input_size, input_size}, true);
  Tensor<T> x;
  try {
    x = conv(input, spec.input_conv.kernel, spec.input_conv.stride);
    for (const auto& block : spec.blocks) {
      Tensor<T> y = x;
      if (!block.conv_kernels.empty()) {
        Tensor<T> branch_sum;
        for (int br = 0; br < block.shake_branches; ++br) {
          Tensor<T> h = x;
          for (int k : block.conv_kernels) h = conv(h, k, 1);
          branch_sum = br == 0 ? h : add(branch_sum, h);
        }
        y = block.residual ? add(x, branch_sum) : branch_sum;
      }
      x = block.followed_by_pool ? sumpool2d(y, 2, 2) : y;
    }
  } catch (const DimensionError& e) {
    throw ClippedRfError(std::string("input too small for the network: ") + e.what());
  }

  // The forward values are all zero; the gradient of one output cell w.r.t.
  // the input is what carries the support.
  const auto oh = x.dim(2), ow = x.dim(3);
  std::vector<T> pick(x.numel(), T{0});
  pick[(oh / 2) * ow + ow / 2] = T{1};
  auto loss = sum(mul(x, Tensor<T>({x.shape()}, pick)));
  backward(loss);

  const auto g = input.grad();
  std::size_t r0 = input_size, r1 = 0, c0 = input_size, c1 = 0;
  for (std::size_t r = 0; r < input_size; ++r)
    for (std::size_t c = 0; c < input_size; ++c) {
      if (g[r * input_size + c] != T{0}) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
    }
  if (r0 > r1) throw ClippedRfError("probe neuron has empty gradient support");
  if (r0 == 0 || c0 == 0 || r1 + 1 == input_size || c1 + 1 == input_size) {
    throw ClippedRfError("gradient support of the probe neuron touches the input border");
  }
  const auto h = r1 - r0 + 1, w = c1 - c0 + 1;
  if (h != w) throw ClippedRfError("gradient support is not square");
  return static_cast<std::int64_t>(h);
}

}  // namespace rfcnn
