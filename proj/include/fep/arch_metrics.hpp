#pragma once

#include <string>
#include <vector>

#include "fep/network.hpp"

namespace fep {

/// Static description of one parameterized layer, sufficient for
/// parameter and FLOP accounting without instantiating weights.
/// Dense layers use n_filters = out_units, in_channels = in_units,
/// kernel = out_h = out_w = 1.
struct LayerSpec {
  enum class Kind { Conv, Dense };
  Kind kind = Kind::Conv;
  int n_filters = 0;
  int in_channels = 0;
  int kernel = 1;
  int out_h = 1;
  int out_w = 1;
  bool has_bias = false;
  long bn_scalars = 0;    // trainable batch-norm scalars tied to this layer
  int inherit_from = -1;  // layer whose filter removals shrink our input channels
};

struct ArchDescriptor {
  std::vector<LayerSpec> layers;
};

/// Weight count: conv f*c*k*k (+f bias), dense out*in (+out bias), plus
/// attached batch-norm scalars.
long layer_params(const LayerSpec& s);

/// Multiply-accumulates, counted as one FLOP each: conv f*c*k*k*oh*ow,
/// dense out*in. Bias, batch norm and activations are not counted.
long layer_flops(const LayerSpec& s);

struct MetricsTable {
  std::vector<long> params, flops;
  long total_params = 0, total_flops = 0;
};

MetricsTable count_metrics(const ArchDescriptor& desc);

/// Descriptor matching a live network (same trainable-scalar count).
/// Residual-block convs appear as two consecutive rows.
ArchDescriptor descriptor_of(const Network& net);

/// The 19-conv CIFAR ResNet-20 accounting preset (16x7, 32x6, 64x6
/// filters, 688 total) plus its 64->10 classifier. Conv rows carry no
/// bias or batch-norm scalars; within each residual block the second conv
/// inherits input-channel removals from the first, and the stem conv
/// feeds the first block conv the same way.
ArchDescriptor resnet20_cifar();

ArchDescriptor descriptor_by_name(const std::string& name);
std::vector<std::string> known_presets();

/// Applies per-layer filter removals, propagating input-channel shrinkage
/// along each layer's inherit_from link.
ArchDescriptor prune_descriptor(const ArchDescriptor& desc, const std::vector<int>& removals);

struct DiffMetrics {
  std::vector<double> params_pct, flops_pct;  // per-layer removal percentages
  double total_params_pct = 0.0, total_flops_pct = 0.0;
};

DiffMetrics diff_metrics(const ArchDescriptor& before, const ArchDescriptor& after);

// Line-oriented descriptor files:
//   kind filters in_channels kernel out_h out_w [bias] [bn=N] [inherit=I]
ArchDescriptor parse_descriptor(std::istream& in);
ArchDescriptor load_descriptor(const std::string& path);
void write_descriptor(const ArchDescriptor& desc, std::ostream& out);

/// Millions with truncation, e.g. 2359296 -> "2.35M", 40550400 with one
/// decimal -> "40.5M".
std::string format_millions(long v, int decimals = 2);

}  // namespace fep
