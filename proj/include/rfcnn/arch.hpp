#pragma once

// Network descriptions for the CP_ResNet family, its VGG ablation and the
// Shake-Shake variant.
//
// Layout (square filters, "same" padding everywhere):
//
//   input conv 5x5 stride 2
//   RB 1   3x3, 1x1, P
//   RB 2   x1, x2, P
//   RB 3   x3, x4
//   RB 4   x5, x6, P
//   RB 5.. 12   x7 .. x22
//
// with x_k = 3 when k <= rho and 1 otherwise, and 2x2 max pooling (P) after
// blocks 1, 2 and 4. Channels are 128 / 256 / 512 for blocks 1-4 / 5-8 / 9-12.

#include <array>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "rfcnn/errors.hpp"

namespace rfcnn {

inline constexpr int kMaxRho = 21;
inline constexpr int kNumSlots = 22;
inline constexpr int kNumBlocks = 12;
inline constexpr int kVggRemovableConvs = 21;

enum class ArchKind { CpResnet, Vgg, SsResnet, Custom };

inline std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::CpResnet: return "cp_resnet";
    case ArchKind::Vgg: return "vgg";
    case ArchKind::SsResnet: return "ss_resnet";
    case ArchKind::Custom: return "custom";
  }
  return "custom";
}

inline ArchKind parse_arch_kind(const std::string& s) {
  if (s == "cp_resnet") return ArchKind::CpResnet;
  if (s == "vgg") return ArchKind::Vgg;
  if (s == "ss_resnet") return ArchKind::SsResnet;
  if (s == "custom") return ArchKind::Custom;
  throw ArgumentError("unknown architecture '" + s + "' (expected cp_resnet, vgg or ss_resnet)");
}

struct InputConvSpec {
  int kernel = 5;
  int stride = 2;
  int channels = 128;

  bool operator==(const InputConvSpec&) const = default;
};

struct BlockSpec {
  std::vector<int> conv_kernels;  // 0..2 entries, each 1 or 3 for the paper family
  int channels = 128;
  bool followed_by_pool = false;
  bool residual = true;
  int shake_branches = 1;

  bool operator==(const BlockSpec&) const = default;
};

struct ArchSpec {
  std::string name;
  ArchKind kind = ArchKind::Custom;
  int in_channels = 1;
  InputConvSpec input_conv;
  std::vector<BlockSpec> blocks;
  int n_classes = 1;

  bool operator==(const ArchSpec&) const = default;
};

/// Channel plan; the defaults are the full-width network.
struct Widths {
  int stage1 = 128;
  int stage2 = 256;
  int stage3 = 512;

  bool operator==(const Widths&) const = default;
};

inline void validate(const ArchSpec& spec) {
  auto fail = [&](const std::string& what) { throw ArgumentError("invalid ArchSpec '" + spec.name + "': " + what); };
  if (spec.in_channels < 1) fail("in_channels must be >= 1");
  if (spec.n_classes < 1) fail("n_classes must be >= 1");
  if (spec.input_conv.kernel < 1 || spec.input_conv.stride < 1 || spec.input_conv.channels < 1) {
    fail("input conv needs positive kernel, stride and channels");
  }
  for (const auto& b : spec.blocks) {
    if (b.channels < 1) fail("block channels must be >= 1");
    if (b.conv_kernels.size() > 2) fail("blocks hold at most two convolutions");
    if (b.shake_branches != 1 && b.shake_branches != 2) fail("shake_branches must be 1 or 2");
    for (int k : b.conv_kernels) {
      if (k < 1 || k % 2 == 0) fail("conv kernels must be odd and positive");
    }
    if (b.residual && b.conv_kernels.empty()) fail("a residual block needs at least one convolution");
  }
}

namespace detail {

inline int stage_channels(int block_index, const Widths& w) {
  if (block_index < 4) return w.stage1;
  if (block_index < 8) return w.stage2;
  return w.stage3;
}

inline bool pooled_block(int block_index) { return block_index == 0 || block_index == 1 || block_index == 3; }

inline void check_rho(int rho) {
  if (rho < 0 || rho > kMaxRho) {
    throw ArgumentError("rho must be in [0, " + std::to_string(kMaxRho) + "], got " + std::to_string(rho));
  }
}

inline void check_classes(int n_classes) {
  if (n_classes < 1) throw ArgumentError("n_classes must be >= 1");
}

}  // namespace detail

/// x_k for slot k in 1..22.
inline int slot_kernel(int rho, int k) { return k <= rho ? 3 : 1; }

inline ArchSpec build_cp_resnet(int rho, int n_classes, const Widths& widths = {}) {
  detail::check_rho(rho);
  detail::check_classes(n_classes);
  ArchSpec spec;
  spec.name = "cp_resnet_rho" + std::to_string(rho);
  spec.kind = ArchKind::CpResnet;
  spec.input_conv = {5, 2, widths.stage1};
  spec.n_classes = n_classes;
  for (int b = 0; b < kNumBlocks; ++b) {
    BlockSpec block;
    if (b == 0) {
      block.conv_kernels = {3, 1};
    } else {
      block.conv_kernels = {slot_kernel(rho, 2 * b - 1), slot_kernel(rho, 2 * b)};
    }
    block.channels = detail::stage_channels(b, widths);
    block.followed_by_pool = detail::pooled_block(b);
    block.residual = true;
    block.shake_branches = 1;
    spec.blocks.push_back(std::move(block));
  }
  return spec;
}

inline ArchSpec build_ss_resnet(int rho, int n_classes, const Widths& widths = {}) {
  auto spec = build_cp_resnet(rho, n_classes, widths);
  spec.name = "ss_resnet_rho" + std::to_string(rho);
  spec.kind = ArchKind::SsResnet;
  for (auto& b : spec.blocks) b.shake_branches = 2;
  return spec;
}

/// Plain (non-residual) network with the 3x3 convs of the rho=21 layout; the
/// last `n_removed` of them are deleted outright. Pooling positions stay.
inline ArchSpec build_vgg(int n_removed, int n_classes, const Widths& widths = {}) {
  if (n_removed < 0 || n_removed > kVggRemovableConvs) {
    throw ArgumentError("n_removed must be in [0, " + std::to_string(kVggRemovableConvs) + "], got " +
                        std::to_string(n_removed));
  }
  detail::check_classes(n_classes);
  auto spec = build_cp_resnet(kMaxRho, n_classes, widths);
  spec.name = "vgg_removed" + std::to_string(n_removed);
  spec.kind = ArchKind::Vgg;
  for (auto& b : spec.blocks) b.residual = false;
  // The rho=21 layout ends in a single 1x1 (slot 22); a plain network keeps no
  // trailing 1x1 convs.
  spec.blocks.back().conv_kernels.pop_back();
  int remaining = n_removed;
  for (int b = kNumBlocks - 1; b >= 1 && remaining > 0; --b) {
    auto& convs = spec.blocks[static_cast<std::size_t>(b)].conv_kernels;
    while (!convs.empty() && remaining > 0) {
      convs.pop_back();
      --remaining;
    }
  }
  return spec;
}

/// Dispatch on architecture family; `param` is rho or n_removed.
inline ArchSpec build_arch(ArchKind kind, int param, int n_classes, const Widths& widths = {}) {
  switch (kind) {
    case ArchKind::CpResnet: return build_cp_resnet(param, n_classes, widths);
    case ArchKind::SsResnet: return build_ss_resnet(param, n_classes, widths);
    case ArchKind::Vgg: return build_vgg(param, n_classes, widths);
    case ArchKind::Custom: break;
  }
  throw ArgumentError("custom architectures have no builder parameter");
}

/// Human-readable text form, embedded in checkpoints and printed by the CLI.
inline std::string to_text(const ArchSpec& spec) {
  std::ostringstream os;
  os << "arch " << spec.name << "\n";
  os << "kind " << to_string(spec.kind) << "\n";
  os << "in_channels " << spec.in_channels << "\n";
  os << "n_classes " << spec.n_classes << "\n";
  os << "input_conv kernel=" << spec.input_conv.kernel << " stride=" << spec.input_conv.stride
     << " channels=" << spec.input_conv.channels << "\n";
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    os << "block " << (i + 1) << " convs=";
    if (b.conv_kernels.empty()) os << "-";
    for (std::size_t j = 0; j < b.conv_kernels.size(); ++j) os << (j ? "," : "") << b.conv_kernels[j];
    os << " channels=" << b.channels << " pool=" << (b.followed_by_pool ? 1 : 0) << " residual=" << (b.residual ? 1 : 0)
       << " branches=" << b.shake_branches << "\n";
  }
  os << "end\n";
  return os.str();
}

namespace detail {

inline int parse_kv_int(const std::string& token, const std::string& key) {
  const auto prefix = key + "=";
  if (token.rfind(prefix, 0) != 0) throw FormatError("arch text: expected '" + prefix + "...', got '" + token + "'");
  try {
    return std::stoi(token.substr(prefix.size()));
  } catch (const std::exception&) {
    throw FormatError("arch text: bad integer in '" + token + "'");
  }
}

}  // namespace detail

inline ArchSpec parse_arch_text(const std::string& text) {
  std::istringstream in(text);
  ArchSpec spec;
  std::string line;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "arch") {
      ls >> spec.name;
    } else if (key == "kind") {
      std::string k;
      ls >> k;
      spec.kind = parse_arch_kind(k);
    } else if (key == "in_channels") {
      ls >> spec.in_channels;
    } else if (key == "n_classes") {
      ls >> spec.n_classes;
    } else if (key == "input_conv") {
      std::string a, b, c;
      ls >> a >> b >> c;
      spec.input_conv = {detail::parse_kv_int(a, "kernel"), detail::parse_kv_int(b, "stride"),
                         detail::parse_kv_int(c, "channels")};
    } else if (key == "block") {
      int index = 0;
      std::string convs, ch, pool, res, br;
      ls >> index >> convs >> ch >> pool >> res >> br;
      if (convs.rfind("convs=", 0) != 0) throw FormatError("arch text: bad block line '" + line + "'");
      BlockSpec b;
      std::string list = convs.substr(6);
      if (list != "-") {
        std::istringstream cs(list);
        std::string item;
        while (std::getline(cs, item, ',')) b.conv_kernels.push_back(std::stoi(item));
      }
      b.channels = detail::parse_kv_int(ch, "channels");
      b.followed_by_pool = detail::parse_kv_int(pool, "pool") != 0;
      b.residual = detail::parse_kv_int(res, "residual") != 0;
      b.shake_branches = detail::parse_kv_int(br, "branches");
      spec.blocks.push_back(std::move(b));
    } else if (key == "end") {
      ended = true;
      break;
    } else {
      throw FormatError("arch text: unknown key '" + key + "'");
    }
    if (ls.fail()) throw FormatError("arch text: malformed line '" + line + "'");
  }
  if (!ended) throw FormatError("arch text: missing 'end'");
  validate(spec);
  return spec;
}

}  // namespace rfcnn
