#pragma once

#include <cstdint>
#include <vector>

#include "proard/dynet/network.hpp"

namespace proard::dynet {

/// One weight layer for analytic cost accounting.
struct LayerDesc {
  enum class Kind { Dense, Conv } kind = Kind::Dense;
  std::size_t in = 0, out = 0;
  std::size_t kernel = 1;
  std::size_t out_h = 1, out_w = 1;
  bool bias = false;
  /// Channels of a following batch norm (2 parameters each), 0 if none.
  std::size_t bn_channels = 0;
};

/// FLOPs count 2 per multiply-accumulate.
struct FlopsReport {
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

inline FlopsReport count_layers(const std::vector<LayerDesc>& layers) {
  FlopsReport r;
  for (const LayerDesc& l : layers) {
    const std::uint64_t weights = static_cast<std::uint64_t>(l.in) * l.out * l.kernel * l.kernel;
    const std::uint64_t positions =
        l.kind == LayerDesc::Kind::Conv ? static_cast<std::uint64_t>(l.out_h) * l.out_w : 1;
    r.macs += weights * positions;
    r.params += weights + (l.bias ? l.out : 0) + 2 * static_cast<std::uint64_t>(l.bn_channels);
  }
  r.flops = 2 * r.macs;
  return r;
}

/// Weight layers of a configuration in forward order.
inline std::vector<LayerDesc> describe_layers(const NetPlan& plan) {
  const bool conv = plan.kind == BlockKind::Conv;
  const auto kind = conv ? LayerDesc::Kind::Conv : LayerDesc::Kind::Dense;
  std::vector<LayerDesc> out;
  const std::size_t h = conv ? plan.input[1] : 1, w = conv ? plan.input[2] : 1;
  const std::size_t in_ch = conv ? plan.input[0] : shape_size(plan.input);
  out.push_back({kind, in_ch, plan.stem_out, plan.stem_kernel, h, w, false, plan.stem_out});
  for (const BlockPlan& b : plan.blocks) {
    if (conv) {
      out.push_back({kind, b.in, b.mid, 1, b.in_h, b.in_w, false, b.mid});
      out.push_back({kind, b.mid, b.mid, b.kernel, b.out_h, b.out_w, false, b.mid});
      out.push_back({kind, b.mid, b.out, 1, b.out_h, b.out_w, false, b.out});
    } else {
      out.push_back({kind, b.in, b.mid, 1, 1, 1, false, b.mid});
      out.push_back({kind, b.mid, b.out, 1, 1, 1, false, b.out});
    }
    if (b.projection) out.push_back({kind, b.in, b.out, 1, b.out_h, b.out_w, false, b.out});
  }
  out.push_back({LayerDesc::Kind::Dense, plan.head_in, plan.num_classes, 1, 1, 1, true, 0});
  return out;
}

inline FlopsReport count_flops(const SearchSpace& space, const ArchConfig& cfg) {
  return count_layers(describe_layers(make_plan(space, cfg)));
}

}  // namespace proard::dynet
