#include "fep/pruner.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "fep/arch_metrics.hpp"
#include "fep/data_gen.hpp"
#include "fep/rng.hpp"

namespace fep {

namespace {

std::vector<int> keep_list(int n, const std::vector<int>& removed_sorted) {
  std::vector<int> keep;
  keep.reserve(n - removed_sorted.size());
  size_t r = 0;
  for (int i = 0; i < n; ++i) {
    if (r < removed_sorted.size() && removed_sorted[r] == i)
      ++r;
    else
      keep.push_back(i);
  }
  return keep;
}

Mat select_rows(const Mat& m, const std::vector<int>& keep) {
  Mat out(static_cast<Eigen::Index>(keep.size()), m.cols());
  for (size_t i = 0; i < keep.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(keep[i]);
  return out;
}

Mat select_cols(const Mat& m, const std::vector<int>& keep) {
  Mat out(m.rows(), static_cast<Eigen::Index>(keep.size()));
  for (size_t i = 0; i < keep.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(keep[i]);
  return out;
}

Vec select_elems(const Vec& v, const std::vector<int>& keep) {
  Vec out(static_cast<Eigen::Index>(keep.size()));
  for (size_t i = 0; i < keep.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(keep[i]);
  return out;
}

// Expands removed channel indices into removed column indices of a conv
// weight matrix (columns grouped channel-major, kernel*kernel per channel).
std::vector<int> conv_keep_cols(int in_channels, int kernel, const std::vector<int>& removed) {
  const int kk = kernel * kernel;
  std::vector<int> removed_cols;
  for (int c : removed)
    for (int t = 0; t < kk; ++t) removed_cols.push_back(c * kk + t);
  return keep_list(in_channels * kk, removed_cols);
}

void shrink_conv_input(Conv2dLayer& c, const std::vector<int>& removed_channels) {
  c.weight = select_cols(c.weight, conv_keep_cols(c.in_channels, c.kernel, removed_channels));
  c.in_channels -= static_cast<int>(removed_channels.size());
}

void shrink_bn(BatchNormLayer& b, const std::vector<int>& keep) {
  b.gamma = select_elems(b.gamma, keep);
  b.beta = select_elems(b.beta, keep);
  b.running_mean = select_elems(b.running_mean, keep);
  b.running_var = select_elems(b.running_var, keep);
}

// New index of a kept position after removing `removed_sorted`.
int renumber(int pos, const std::vector<int>& removed_sorted) {
  int shift = 0;
  for (int r : removed_sorted) {
    if (r < pos) ++shift;
  }
  return pos - shift;
}

void remove_downstream_channels(Network& net, const std::vector<std::vector<int>>& shapes,
                                int node, std::vector<int> removed);

// Removes output slots from a residual block (their conv2 filters, mask2
// entries and shortcut feeds) and propagates the channel removal
// downstream. `slots` are sorted positions in the block's current output
// channel space.
void remove_block_output_slots(Network& net, const std::vector<std::vector<int>>& shapes,
                               int block_node, const std::vector<int>& slots) {
  auto& r = std::get<ResidualBlock>(net.nodes[block_node]);
  if (static_cast<int>(slots.size()) >= r.out_channels())
    throw std::invalid_argument("cannot remove every output channel of a residual block");
  std::set<int> slot_set(slots.begin(), slots.end());
  // drop conv2 filters feeding removed slots
  std::vector<int> removed_filters;
  for (size_t f = 0; f < r.conv2_slot.size(); ++f)
    if (slot_set.count(r.conv2_slot[f])) removed_filters.push_back(static_cast<int>(f));
  if (removed_filters.size() == r.conv2_slot.size())
    throw std::invalid_argument("cannot remove every conv2 filter of a residual block");
  const auto keep_f = keep_list(static_cast<int>(r.conv2_slot.size()), removed_filters);
  r.conv2.weight = select_rows(r.conv2.weight, keep_f);
  r.conv2.bias = select_elems(r.conv2.bias, keep_f);
  shrink_bn(r.bn2, keep_f);
  if (r.mask_position == MaskPosition::BeforeShortcut) r.mask2 = select_elems(r.mask2, keep_f);
  std::vector<int> new_slots;
  for (int f : keep_f) new_slots.push_back(renumber(r.conv2_slot[f], slots));
  r.conv2_slot = std::move(new_slots);
  // drop output slots (shortcut feeds included)
  const auto keep_s = keep_list(r.out_channels(), slots);
  std::vector<int> new_src;
  for (int s : keep_s) new_src.push_back(r.shortcut_src[s]);
  r.shortcut_src = std::move(new_src);
  if (r.mask_position == MaskPosition::AfterShortcut) r.mask2 = select_elems(r.mask2, keep_s);
  remove_downstream_channels(net, shapes, block_node, slots);
}

// Removes the given channel positions from the output of `node`, resizing
// pass-through nodes (batch norm, mask) and rewiring the next consumer.
void remove_downstream_channels(Network& net, const std::vector<std::vector<int>>& shapes,
                                int node, std::vector<int> removed) {
  std::vector<int> flat_removed;  // set once a flatten is crossed
  bool flat = false;
  for (size_t j = node + 1; j < net.nodes.size(); ++j) {
    auto& n = net.nodes[j];
    if (std::holds_alternative<ActivationLayer>(n)) continue;
    if (auto* b = std::get_if<BatchNormLayer>(&n)) {
      shrink_bn(*b, keep_list(b->channels(), removed));
      continue;
    }
    if (auto* m = std::get_if<MaskLayer>(&n)) {
      m->gate = select_elems(m->gate, keep_list(static_cast<int>(m->gate.size()), removed));
      continue;
    }
    if (std::holds_alternative<FlattenLayer>(n)) {
      const auto& in_shape = shapes[j - 1];  // [C,H,W] feeding the flatten
      if (in_shape.size() != 3) throw std::logic_error("flatten expects [C,H,W] input");
      const int spatial = in_shape[1] * in_shape[2];
      for (int c : removed)
        for (int t = 0; t < spatial; ++t) flat_removed.push_back(c * spatial + t);
      flat = true;
      continue;
    }
    if (auto* d = std::get_if<DenseLayer>(&n)) {
      const auto& cols = flat ? flat_removed : removed;
      d->weights = select_cols(d->weights, keep_list(d->in_units(), cols));
      return;
    }
    if (auto* c = std::get_if<Conv2dLayer>(&n)) {
      shrink_conv_input(*c, removed);
      return;
    }
    if (auto* r = std::get_if<ResidualBlock>(&n)) {
      shrink_conv_input(r->conv1, removed);
      r->in_channels -= static_cast<int>(removed.size());
      // shortcut feeds referencing removed channels disappear; slots left
      // with no feed at all carry an identically-zero map and are removed
      std::set<int> gone(removed.begin(), removed.end());
      std::set<int> conv2_slots(r->conv2_slot.begin(), r->conv2_slot.end());
      std::vector<int> dead_slots;
      for (size_t s = 0; s < r->shortcut_src.size(); ++s) {
        if (r->shortcut_src[s] < 0) continue;
        if (gone.count(r->shortcut_src[s])) {
          r->shortcut_src[s] = -1;
          if (!conv2_slots.count(static_cast<int>(s))) dead_slots.push_back(static_cast<int>(s));
        } else {
          r->shortcut_src[s] = renumber(r->shortcut_src[s], removed);
        }
      }
      if (!dead_slots.empty())
        remove_block_output_slots(net, shapes, static_cast<int>(j), dead_slots);
      return;
    }
  }
  throw std::logic_error("channel removal reached the network output");
}

// Descriptor row index of each prunable layer (block parts map to their
// two conv rows).
std::vector<int> desc_rows_of_prunables(const Network& net) {
  std::vector<int> rows;
  int row = 0;
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    const auto& node = net.nodes[i];
    if (std::holds_alternative<DenseLayer>(node) || std::holds_alternative<Conv2dLayer>(node)) {
      bool prunable = false;
      for (const auto& ref : prunable_layers(net))
        if (ref.node == static_cast<int>(i) && ref.part == 0) prunable = true;
      if (prunable) rows.push_back(row);
      ++row;
    } else if (std::holds_alternative<ResidualBlock>(node)) {
      rows.push_back(row);      // part 1
      rows.push_back(row + 1);  // part 2
      row += 2;
    }
  }
  return rows;
}

}  // namespace

int find_prune_count(Network& net, int prunable_index, const ImportanceVector& importance,
                     double alpha, const Dataset& val_data) {
  if (alpha < 0.0) throw std::invalid_argument("find_prune_count: alpha must be >= 0");
  auto refs = prunable_layers(net);
  const PrunableRef ref = refs.at(prunable_index);
  const int width = prunable_width(net, ref);
  if (static_cast<int>(importance.ranking.size()) != width)
    throw std::invalid_argument("find_prune_count: importance size mismatch");
  if (width <= 1) return 0;  // never remove the last filter

  const Vec saved = get_layer_mask(net, ref);
  set_layer_mask(net, ref, Vec::Ones(width));
  const double baseline = accuracy(net, val_data);
  Vec mask = Vec::Ones(width);
  int m = 0;
  for (int t = 0; t < width - 1; ++t) {
    mask(importance.ranking[t]) = 0.0;
    set_layer_mask(net, ref, mask);
    if (accuracy(net, val_data) >= baseline - alpha)
      m = t + 1;
    else
      break;
  }
  set_layer_mask(net, ref, saved);
  return m;
}

void remove_filters(Network& net, int prunable_index, const std::vector<int>& indices) {
  auto refs = prunable_layers(net);
  const PrunableRef ref = refs.at(prunable_index);
  const int width = prunable_width(net, ref);

  std::vector<int> removed = indices;
  std::sort(removed.begin(), removed.end());
  removed.erase(std::unique(removed.begin(), removed.end()), removed.end());
  if (removed.size() != indices.size())
    throw std::invalid_argument("remove_filters: duplicate indices");
  if (removed.empty()) return;
  if (removed.front() < 0 || removed.back() >= width)
    throw std::out_of_range("remove_filters: filter index out of range");
  if (static_cast<int>(removed.size()) >= width)
    throw std::invalid_argument("remove_filters: cannot remove every filter of a layer");

  const auto shapes = node_output_shapes(net);
  const auto keep = keep_list(width, removed);
  auto& node = net.nodes[ref.node];

  if (ref.part == 0) {
    if (auto* d = std::get_if<DenseLayer>(&node)) {
      d->weights = select_rows(d->weights, keep);
      d->bias = select_elems(d->bias, keep);
    } else {
      auto& c = std::get<Conv2dLayer>(node);
      c.weight = select_rows(c.weight, keep);
      c.bias = select_elems(c.bias, keep);
    }
    remove_downstream_channels(net, shapes, ref.node, removed);
    return;
  }

  auto& r = std::get<ResidualBlock>(node);
  if (ref.part == 1) {
    r.conv1.weight = select_rows(r.conv1.weight, keep);
    r.conv1.bias = select_elems(r.conv1.bias, keep);
    shrink_bn(r.bn1, keep);
    r.mask1 = select_elems(r.mask1, keep);
    shrink_conv_input(r.conv2, removed);
    return;
  }

  if (r.mask_position == MaskPosition::BeforeShortcut) {
    // indices address conv2 filters; shortcut channels are retained and
    // pruned maps simply stop contributing to their slots
    r.conv2.weight = select_rows(r.conv2.weight, keep);
    r.conv2.bias = select_elems(r.conv2.bias, keep);
    shrink_bn(r.bn2, keep);
    r.mask2 = select_elems(r.mask2, keep);
    std::vector<int> dead_slots;
    std::vector<int> new_slots;
    for (int f : keep) new_slots.push_back(r.conv2_slot[f]);
    for (int f : removed)
      if (r.shortcut_src[r.conv2_slot[f]] < 0) dead_slots.push_back(r.conv2_slot[f]);
    r.conv2_slot = std::move(new_slots);
    if (!dead_slots.empty()) {
      std::sort(dead_slots.begin(), dead_slots.end());
      remove_block_output_slots(net, shapes, ref.node, dead_slots);
    }
  } else {
    // indices address output slots; the shortcut channel goes with them
    remove_block_output_slots(net, shapes, ref.node, removed);
  }
}

std::pair<Network, PruneReport> prune_network(Network net, const Dataset& train_data,
                                              const Dataset& val_data, const PruneConfig& cfg) {
  if (cfg.alpha < 0.0 || cfg.alpha >= 1.0 || cfg.masks_per_filter < 1)
    throw std::invalid_argument("prune_network: invalid config");
  const ArchDescriptor desc0 = descriptor_of(net);
  const MetricsTable metrics0 = count_metrics(desc0);

  std::mt19937_64 mask_rng = make_rng(cfg.seed, "prune-masks");
  const Dataset scoring = scoring_subset(train_data, cfg.seed);

  PruneReport report;
  report.baseline_accuracy = accuracy(net, val_data);
  report.params_before = metrics0.total_params;
  report.flops_before = metrics0.total_flops;

  std::vector<double> row_accuracy(desc0.layers.size(), -1.0);
  int finetune_counter = 0;
  bool target_reached = false;

  for (int pass = 0; pass < cfg.max_passes && !target_reached; ++pass) {
    const int n_layers = static_cast<int>(prunable_layers(net).size());
    bool pruned_any = false;
    for (int step = 0; step < n_layers && !target_reached; ++step) {
      const int idx = cfg.direction == Direction::Forward ? step : n_layers - 1 - step;
      auto refs = prunable_layers(net);
      if (prunable_width(net, refs[idx]) <= 1) continue;
      ImportanceVector imp;
      try {
        imp = layer_importance(net, idx, scoring, cfg.P, cfg.masks_per_filter, mask_rng);
      } catch (const DegenerateScoresError&) {
        continue;  // layer insensitive to masking at this point
      }
      const int m = find_prune_count(net, idx, imp, cfg.alpha, val_data);
      if (m == 0) continue;
      std::vector<int> to_remove(imp.ranking.begin(), imp.ranking.begin() + m);
      remove_filters(net, idx, to_remove);
      pruned_any = true;
      if (cfg.finetune_epochs > 0) {
        SgdConfig ft;
        ft.epochs = cfg.finetune_epochs;
        ft.lr = cfg.finetune_lr;
        ft.seed = derive_seed(cfg.seed, "finetune") + static_cast<std::uint64_t>(finetune_counter++);
        train(net, train_data, ft);
      }
      row_accuracy[desc_rows_of_prunables(net).at(idx)] = accuracy(net, val_data);
      if (cfg.stop == StopRule::TargetParamsRemoved) {
        const long cur = count_metrics(descriptor_of(net)).total_params;
        if (1.0 - static_cast<double>(cur) / metrics0.total_params >= cfg.target_params_removed)
          target_reached = true;
      }
    }
    if (!pruned_any) break;  // no layer prunable under the budget
  }

  report.accuracy_before_retrain = accuracy(net, val_data);
  if (cfg.final_retrain.epochs > 0) {
    SgdConfig rt = cfg.final_retrain;
    rt.seed = derive_seed(cfg.seed, "final-retrain");
    train(net, train_data, rt);
  }
  report.accuracy_after_retrain = accuracy(net, val_data);

  const ArchDescriptor desc1 = descriptor_of(net);
  const MetricsTable metrics1 = count_metrics(desc1);
  const DiffMetrics diff = diff_metrics(desc0, desc1);
  report.params_after = metrics1.total_params;
  report.flops_after = metrics1.total_flops;
  report.total_params_removed_pct = diff.total_params_pct;
  report.total_flops_removed_pct = diff.total_flops_pct;
  for (size_t i = 0; i < desc0.layers.size(); ++i) {
    PruneLayerRecord row;
    row.layer = static_cast<int>(i);
    row.filters_before = desc0.layers[i].n_filters;
    row.filters_removed = desc0.layers[i].n_filters - desc1.layers[i].n_filters;
    row.flops_before = metrics0.flops[i];
    row.params_removed_pct = diff.params_pct[i];
    row.flops_removed_pct = diff.flops_pct[i];
    row.val_accuracy_after = row_accuracy[i];
    report.rows.push_back(row);
  }
  return {std::move(net), std::move(report)};
}

void export_prune_report_csv(const PruneReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "layer,filters,flops,filters_removed,params_removed_pct,flops_removed_pct,"
         "val_accuracy_after\n";
  char buf[160];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%ld,%d,%.2f,%.2f,%.4f\n", r.layer, r.filters_before,
                  r.flops_before, r.filters_removed, r.params_removed_pct, r.flops_removed_pct,
                  r.val_accuracy_after);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "total,%ld,%ld,%ld,%.2f,%.2f,%.4f\n", report.params_before,
                report.flops_before, report.params_before - report.params_after,
                report.total_params_removed_pct, report.total_flops_removed_pct,
                report.accuracy_after_retrain);
  out << buf;
}

// ---- XOR experiment harness ----

namespace {

constexpr int kXorSamples = 1000;
constexpr double kXorTrainFraction = 0.8;
constexpr double kXorSuccessThreshold = 0.95;

SgdConfig xor_train_config(std::uint64_t seed) {
  SgdConfig cfg;
  cfg.epochs = 400;
  cfg.lr = 0.05;
  cfg.batch_size = 32;
  cfg.seed = seed;
  return cfg;
}

SgdConfig xor_retrain_config(std::uint64_t seed) {
  SgdConfig cfg;
  cfg.epochs = 100;
  cfg.lr = 0.05;
  cfg.batch_size = 32;
  cfg.seed = seed;
  return cfg;
}

void remove_least_important(Network& net, int count, const Dataset& train_split,
                            std::mt19937_64& rng) {
  auto imp = layer_importance(net, 0, train_split, 0.3, 10, rng);
  std::vector<int> to_remove(imp.ranking.begin(), imp.ranking.begin() + count);
  remove_filters(net, 0, to_remove);
}

}  // namespace

XorTrialResult xor_train_trial(int hidden_units, std::uint64_t seed) {
  std::mt19937_64 data_rng = make_rng(seed, "xor-data");
  const XorDataset xd = gen_xor_dataset(kXorSamples, data_rng);
  auto [train_split, val_split] = split_dataset(xd.as_dataset(), kXorTrainFraction);
  Network net = make_fcn(hidden_units, derive_seed(seed, "xor-init"));
  train(net, train_split, xor_train_config(derive_seed(seed, "xor-train")));
  const double acc = accuracy(net, val_split);
  return {acc > kXorSuccessThreshold, acc};
}

XorTrialResult xor_prune_trial(XorPruneType type, std::uint64_t seed) {
  std::mt19937_64 data_rng = make_rng(seed, "xor-data");
  const XorDataset xd = gen_xor_dataset(kXorSamples, data_rng);
  auto [train_split, val_split] = split_dataset(xd.as_dataset(), kXorTrainFraction);
  Network net = make_fcn(10, derive_seed(seed, "xor-init"));
  train(net, train_split, xor_train_config(derive_seed(seed, "xor-train")));

  std::mt19937_64 mask_rng = make_rng(seed, "xor-masks");
  switch (type) {
    case XorPruneType::OneShot:
      remove_least_important(net, 7, train_split, mask_rng);
      train(net, train_split, xor_retrain_config(derive_seed(seed, "xor-retrain-0")));
      break;
    case XorPruneType::Iterative: {
      int stage = 0;
      for (int k : {3, 2, 2}) {
        remove_least_important(net, k, train_split, mask_rng);
        train(net, train_split,
              xor_retrain_config(derive_seed(seed, "xor-retrain-" + std::to_string(stage++))));
      }
      break;
    }
    case XorPruneType::Random: {
      std::vector<int> idx(10);
      std::iota(idx.begin(), idx.end(), 0);
      for (int i = 0; i < 7; ++i) {
        int j = i + static_cast<int>(mask_rng() % static_cast<std::uint64_t>(10 - i));
        std::swap(idx[i], idx[j]);
      }
      remove_filters(net, 0, {idx.begin(), idx.begin() + 7});
      train(net, train_split, xor_retrain_config(derive_seed(seed, "xor-retrain-0")));
      break;
    }
  }
  const double acc = accuracy(net, val_split);
  return {acc > kXorSuccessThreshold, acc};
}

}  // namespace fep
