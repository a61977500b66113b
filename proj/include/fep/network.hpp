#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <variant>
#include <vector>

#include "fep/tensor.hpp"

namespace fep {

enum class Act { ReLU, Sigmoid };
enum class LossKind { CrossEntropy, BinaryCrossEntropy };
enum class MaskPosition { BeforeShortcut, AfterShortcut };

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an activation or gradient turns non-finite; carries the
/// offending node index.
struct NonFiniteError : std::runtime_error {
  int node;
  explicit NonFiniteError(int node_idx)
      : std::runtime_error("non-finite value at node " + std::to_string(node_idx)),
        node(node_idx) {}
};

struct DivergenceError : std::runtime_error {
  int epoch;
  explicit DivergenceError(int ep)
      : std::runtime_error("training diverged at epoch " + std::to_string(ep)), epoch(ep) {}
};

struct DenseLayer {
  Mat weights;  // out_units x in_units
  Vec bias;     // out_units
  int out_units() const { return static_cast<int>(weights.rows()); }
  int in_units() const { return static_cast<int>(weights.cols()); }
};

/// 2-D convolution. Filters are stored im2col-style: one row per filter,
/// columns grouped channel-major as (in_channels * kernel * kernel).
struct Conv2dLayer {
  Mat weight;  // n_filters x (in_channels*kernel*kernel)
  Vec bias;    // n_filters
  int in_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int n_filters() const { return static_cast<int>(weight.rows()); }
};

struct ActivationLayer {
  Act kind = Act::ReLU;
};

struct BatchNormLayer {
  Vec gamma, beta;
  Vec running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  int channels() const { return static_cast<int>(gamma.size()); }
};

/// Multiplicative 0/1 per-channel gate. A distinct node so scoring never
/// touches trained parameters.
struct MaskLayer {
  Vec gate;  // entries in {0,1}
};

struct FlattenLayer {};

/// Residual block: conv1 -> bn1 -> relu -> mask1 -> conv2 -> bn2 ->
/// [mask2 if BeforeShortcut] -> add shortcut -> relu -> [mask2 if
/// AfterShortcut].
///
/// The block output is a set of "slots". Each slot is fed by at most one
/// conv2 filter (conv2_slot[f] gives filter f's slot) and at most one
/// shortcut channel (shortcut_src[slot] is the input channel, or -1).
/// A fresh block of width C has C slots with identity wiring on both.
/// Pruning conv2 filters under BeforeShortcut keeps all slots (shortcut
/// channels retained, pruned maps contribute zero); pruning under
/// AfterShortcut removes the slot and its shortcut channel.
struct ResidualBlock {
  Conv2dLayer conv1, conv2;
  BatchNormLayer bn1, bn2;
  Vec mask1;  // gates conv1 filters (after relu)
  Vec mask2;  // BeforeShortcut: gates conv2 filters; AfterShortcut: gates output slots
  MaskPosition mask_position = MaskPosition::BeforeShortcut;
  std::vector<int> conv2_slot;    // per conv2 filter, its output slot
  std::vector<int> shortcut_src;  // per output slot, feeding input channel or -1
  int in_channels = 0;
  int out_channels() const { return static_cast<int>(shortcut_src.size()); }
};

using LayerNode = std::variant<DenseLayer, Conv2dLayer, ActivationLayer, BatchNormLayer,
                               MaskLayer, FlattenLayer, ResidualBlock>;

struct Network {
  std::vector<LayerNode> nodes;
  LossKind loss_kind = LossKind::CrossEntropy;
  std::vector<int> input_shape;  // per-sample shape, e.g. {2} or {1,8,8}
};

/// Labeled dataset. Labels are class indices; for binary (sigmoid)
/// networks they are 0/1.
struct Dataset {
  Tensor inputs;
  Eigen::VectorXi labels;
  int size() const { return static_cast<int>(labels.size()); }
};

// ---- Addressing of prunable layers ----

/// part 0: the node itself (standalone Dense/Conv2d);
/// part 1: conv1 of a ResidualBlock; part 2: conv2/output slots.
struct PrunableRef {
  int node = -1;
  int part = 0;
  bool operator==(const PrunableRef&) const = default;
};

/// Prunable layers in forward order: every Dense/Conv2d with an
/// associated mask node, plus both conv stages of each residual block.
std::vector<PrunableRef> prunable_layers(const Network& net);
int prunable_width(const Network& net, PrunableRef ref);
Vec get_layer_mask(const Network& net, PrunableRef ref);
void set_layer_mask(Network& net, PrunableRef ref, const Vec& mask);
void set_layer_mask(Network& net, int prunable_index, const Vec& mask);
void clear_masks(Network& net);

// ---- Forward / loss / gradients / training ----

/// Per-sample output shape after each node (index i = shape after node i).
std::vector<std::vector<int>> node_output_shapes(const Network& net);

Tensor forward(const Network& net, const Tensor& batch);

double loss(const Network& net, const Dataset& data);

/// Loss with batch statistics for batch norm, i.e. the function whose
/// gradient `gradients` computes. Identical to `loss` for nets without
/// batch norm.
double training_loss(const Network& net, const Dataset& data);

double accuracy(const Network& net, const Dataset& data);

long param_count(const Network& net);
Vec get_params(const Network& net);
void set_params(Network& net, const Vec& flat);

/// Gradient of the mean loss w.r.t. every trainable parameter, flattened
/// in the same order as get_params. Uses batch statistics for batch norm
/// (training mode) without touching running statistics.
Vec gradients(const Network& net, const Dataset& batch);

struct SgdConfig {
  int epochs = 1;
  double lr = 0.1;
  double momentum = 0.9;
  int batch_size = 32;
  int decay_every = 0;      // 0 = constant lr
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD with momentum. Deterministic in (seed, data, config).
void train(Network& net, const Dataset& data, const SgdConfig& cfg);

// ---- Builders ----

/// 2-h-1 fully connected net: dense -> relu -> mask -> dense, sigmoid/BCE.
Network make_fcn(int hidden_units, std::uint64_t seed);

/// Small conv stack for image data: [conv -> relu -> mask] per entry of
/// `filters`, then flatten -> dense logits, cross-entropy.
Network make_toy_cnn(const std::vector<int>& filters, int in_channels, int hw, int classes,
                     int kernel, std::uint64_t seed);

DenseLayer make_dense(int out, int in, std::mt19937_64& rng);
Conv2dLayer make_conv(int n_filters, int in_channels, int kernel, int stride, int padding,
                      std::mt19937_64& rng);
BatchNormLayer make_batchnorm(int channels);
ResidualBlock make_residual_block(int channels, int kernel, MaskPosition pos,
                                  std::mt19937_64& rng);

}  // namespace fep
