#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fep/importance.hpp"
#include "fep/network.hpp"

namespace fep {

enum class Direction { Forward, Backward };
enum class StopRule { TargetParamsRemoved, NoLayerPrunable };

struct PruneConfig {
  double alpha = 0.005;  // max allowed validation accuracy drop per layer
  double P = 0.3;
  int masks_per_filter = 10;  // M = masks_per_filter * layer width
  Direction direction = Direction::Forward;
  int finetune_epochs = 10;
  double finetune_lr = 0.01;
  SgdConfig final_retrain{/*epochs=*/80, /*lr=*/0.01, /*momentum=*/0.9, /*batch_size=*/32,
                          /*decay_every=*/20, /*decay_factor=*/0.1, /*seed=*/0};
  StopRule stop = StopRule::TargetParamsRemoved;
  double target_params_removed = 0.3;
  MaskPosition mask_position = MaskPosition::BeforeShortcut;  // for builders/CLI
  std::uint64_t seed = 0;
  int max_passes = 32;
};

struct PruneLayerRecord {
  int layer = 0;  // row in the architecture descriptor
  int filters_before = 0;
  int filters_removed = 0;
  long flops_before = 0;
  double params_removed_pct = 0.0;
  double flops_removed_pct = 0.0;
  double val_accuracy_after = -1.0;  // after this layer's last pruning event; -1 if never pruned
};

struct PruneReport {
  std::vector<PruneLayerRecord> rows;
  long params_before = 0, params_after = 0;
  long flops_before = 0, flops_after = 0;
  double total_params_removed_pct = 0.0, total_flops_removed_pct = 0.0;
  double baseline_accuracy = 0.0;
  double accuracy_before_retrain = 0.0;
  double accuracy_after_retrain = 0.0;
};

/// Largest m such that masking the m least-important filters keeps
/// validation accuracy >= baseline - alpha. Cumulative search in ranking
/// order, stopping at the first violation. The baseline is re-measured
/// with this layer's mask all-ones. Masks are restored on return.
int find_prune_count(Network& net, int prunable_index, const ImportanceVector& importance,
                     double alpha, const Dataset& val_data);

/// Structurally removes the listed filters/neurons from the layer and
/// rewires every downstream consumer so the pruned forward pass equals
/// the masked forward pass exactly.
void remove_filters(Network& net, int prunable_index, const std::vector<int>& indices);

/// The full layer-by-layer pruning loop with fine-tuning and final
/// retraining.
std::pair<Network, PruneReport> prune_network(Network net, const Dataset& train_data,
                                              const Dataset& val_data, const PruneConfig& cfg);

void export_prune_report_csv(const PruneReport& report, const std::string& path);

// ---- XOR experiment harness ----

enum class XorPruneType { OneShot, Iterative, Random };

struct XorTrialResult {
  bool success = false;
  double accuracy = 0.0;
};

/// Train a fresh 2-h-1 net on a fresh XOR dataset; success = validation
/// accuracy > 95%.
XorTrialResult xor_train_trial(int hidden_units, std::uint64_t seed);

/// Train FCN10, prune it from 10 hidden neurons down to 3 (one-shot: 7
/// at once; iterative: 3, 2, 2 with retraining between; random: 7 chosen
/// uniformly), retrain, and report success (> 95% validation accuracy).
XorTrialResult xor_prune_trial(XorPruneType type, std::uint64_t seed);

}  // namespace fep
