#pragma once

// Runnable networks built from an ArchSpec.
//
// Conv units are conv -> batchnorm (-> ReLU). A residual block runs one or two
// identical branches of conv units, merges them with the shortcut (plain sum,
// or Shake-Shake for two branches), applies ReLU and optionally 2x2 max
// pooling. When channel counts change, the shortcut is a 1x1 conv + batchnorm.
// The head is a biased 1x1 conv to n_classes followed by global average
// pooling; it returns logits.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rfcnn/arch.hpp"
#include "rfcnn/ops.hpp"
#include "rfcnn/random.hpp"
#include "rfcnn/shake.hpp"

namespace rfcnn {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Non-trainable state visible to checkpoints (batchnorm running stats).
template <class T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

template <class T>
class Model {
 public:
  Model(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    validate(spec_);
    RngStream rng(seed);
    build(rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ArchSpec& spec() const noexcept { return spec_; }

  std::vector<NamedParam<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedParam<T>>& parameters() const noexcept { return params_; }

  std::vector<NamedBuffer<T>> buffers() {
    std::vector<NamedBuffer<T>> out;
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      out.push_back({stats_names_[i] + ".running_mean", &stats_[i].mean});
      out.push_back({stats_names_[i] + ".running_var", &stats_[i].var});
    }
    return out;
  }

  Tensor<T>& param(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return p.tensor;
    }
    throw ArgumentError("no parameter named '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Logits [N, n_classes]. In train mode batchnorm uses batch statistics and
  /// Shake-Shake blocks draw coefficients from streams derived from
  /// `shake_key` (one substream per block).
  Tensor<T> forward(const Tensor<T>& input, Mode mode, std::uint64_t shake_key = 0) {
    detail::require_rank(input.shape(), 4, "model input");
    if (input.dim(1) != static_cast<std::size_t>(spec_.in_channels)) {
      throw DimensionError("model expects " + std::to_string(spec_.in_channels) + " input channels");
    }
    const RngStream pass_rng(shake_key);
    Tensor<T> x = relu(apply(stem_, input, mode));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      x = forward_block(blocks_[b], x, mode, pass_rng.split(b));
    }
    auto logits = conv2d(x, params_[head_weight_].tensor, 1, 0);
    logits = channel_bias(logits, params_[head_bias_].tensor);
    return global_avg_pool(logits);
  }

  /// Sigmoid scores without recording a graph or touching running stats.
  std::vector<T> predict(const Tensor<T>& input) {
    NoGradGuard guard;
    auto probs = sigmoid(forward(input, Mode::Eval));
    return probs.values();
  }

 private:
  struct ConvUnit {
    std::size_t weight = 0, gamma = 0, beta = 0, stats = 0;
    std::size_t stride = 1, padding = 0;
  };

  struct BlockUnits {
    std::vector<std::vector<ConvUnit>> branches;
    std::optional<ConvUnit> projection;
    bool residual = true;
    bool pool = false;
  };

  std::size_t add_param(const std::string& name, Shape shape, RngStream& rng, double stddev, T fill) {
    const auto index = params_.size();
    Tensor<T> t;
    if (stddev > 0.0) {
      auto stream = rng.split(index);
      t = Tensor<T>::randn(std::move(shape), stream, static_cast<T>(stddev), true);
    } else {
      t = Tensor<T>::full(std::move(shape), fill, true);
    }
    params_.push_back({name, std::move(t)});
    return index;
  }

  ConvUnit make_unit(const std::string& name, int in_ch, int out_ch, int kernel, int stride, RngStream& rng) {
    ConvUnit u;
    const auto fan_in = static_cast<double>(in_ch) * kernel * kernel;
    u.weight = add_param(name + ".weight", {std::size_t(out_ch), std::size_t(in_ch), std::size_t(kernel), std::size_t(kernel)},
                         rng, std::sqrt(2.0 / fan_in), T{0});
    u.gamma = add_param(name + ".bn_gamma", {std::size_t(out_ch)}, rng, 0.0, T{1});
    u.beta = add_param(name + ".bn_beta", {std::size_t(out_ch)}, rng, 0.0, T{0});
    u.stats = stats_.size();
    stats_.emplace_back(static_cast<std::size_t>(out_ch));
    stats_names_.push_back(name + ".bn");
    u.stride = static_cast<std::size_t>(stride);
    u.padding = static_cast<std::size_t>(kernel / 2);
    return u;
  }

  void build(RngStream& rng) {
    stem_ = make_unit("input_conv", spec_.in_channels, spec_.input_conv.channels, spec_.input_conv.kernel,
                      spec_.input_conv.stride, rng);
    int channels = spec_.input_conv.channels;
    for (std::size_t b = 0; b < spec_.blocks.size(); ++b) {
      const auto& bs = spec_.blocks[b];
      const auto prefix = "block" + std::to_string(b + 1);
      BlockUnits units;
      units.residual = bs.residual;
      units.pool = bs.followed_by_pool;
      const int out_ch = bs.conv_kernels.empty() ? channels : bs.channels;
      const int branches = bs.residual ? bs.shake_branches : 1;
      for (int br = 0; br < branches; ++br) {
        std::vector<ConvUnit> convs;
        int in_ch = channels;
        for (std::size_t c = 0; c < bs.conv_kernels.size(); ++c) {
          const auto name = prefix + ".branch" + std::to_string(br + 1) + ".conv" + std::to_string(c + 1);
          convs.push_back(make_unit(name, in_ch, out_ch, bs.conv_kernels[c], 1, rng));
          in_ch = out_ch;
        }
        units.branches.push_back(std::move(convs));
      }
      if (bs.residual && out_ch != channels) {
        units.projection = make_unit(prefix + ".shortcut", channels, out_ch, 1, 1, rng);
      }
      channels = out_ch;
      blocks_.push_back(std::move(units));
    }
    const auto fan_in = static_cast<double>(channels);
    head_weight_ = add_param("head.weight", {std::size_t(spec_.n_classes), std::size_t(channels), 1, 1}, rng,
                             std::sqrt(1.0 / fan_in), T{0});
    head_bias_ = add_param("head.bias", {std::size_t(spec_.n_classes)}, rng, 0.0, T{0});
  }

  Tensor<T> apply(const ConvUnit& u, const Tensor<T>& x, Mode mode) {
    auto y = conv2d(x, params_[u.weight].tensor, u.stride, u.padding);
    return batchnorm2d(y, params_[u.gamma].tensor, params_[u.beta].tensor, stats_[u.stats], mode);
  }

  Tensor<T> run_branch(const std::vector<ConvUnit>& convs, const Tensor<T>& x, Mode mode, bool relu_last) {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      h = apply(convs[i], h, mode);
      if (i + 1 < convs.size() || relu_last) h = relu(h);
    }
    return h;
  }

  Tensor<T> forward_block(const BlockUnits& block, const Tensor<T>& x, Mode mode, RngStream rng) {
    Tensor<T> y;
    if (!block.residual) {
      y = run_branch(block.branches.front(), x, mode, true);
    } else {
      const Tensor<T> shortcut = block.projection ? apply(*block.projection, x, mode) : x;
      if (block.branches.size() == 1) {
        y = relu(add(shortcut, run_branch(block.branches[0], x, mode, false)));
      } else {
        auto b1 = run_branch(block.branches[0], x, mode, false);
        auto b2 = run_branch(block.branches[1], x, mode, false);
        const auto coeffs = sample_coefficients(x.dim(0), rng, mode);
        y = relu(shake_combine(shortcut, b1, b2, coeffs));
      }
    }
    return block.pool ? maxpool2d(y, 2, 2) : y;
  }

  ArchSpec spec_;
  std::vector<NamedParam<T>> params_;
  std::vector<RunningStats<T>> stats_;
  std::vector<std::string> stats_names_;
  ConvUnit stem_;
  std::vector<BlockUnits> blocks_;
  std::size_t head_weight_ = 0, head_bias_ = 0;
};

}  // namespace rfcnn
