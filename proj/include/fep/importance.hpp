#pragma once

#include <random>
#include <string>
#include <vector>

#include "fep/network.hpp"

namespace fep {

/// All masks scored a layer to the same loss; the normalized score is
/// undefined there. Callers may treat the layer as insensitive and skip it.
struct DegenerateScoresError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mask ensemble for one layer: row i of Z is mask z_i, losses(i) the
/// network loss under that mask, scores(i) its normalized score in [0,1].
struct MaskDataset {
  Mat Z;
  Vec losses;
  Vec scores;
  int layer = -1;
  double zero_fraction = 0.0;
};

/// Per-filter importances theta plus the deterministic ranking: ascending
/// by theta, ties broken by ascending filter index.
struct ImportanceVector {
  Vec theta;
  std::vector<int> ranking;
};

/// M random binary masks of length n_filters, each with exactly
/// round(P*n_filters) zeros placed uniformly without replacement.
/// Duplicates are resampled up to a retry cap, then accepted.
std::vector<Vec> generate_masks(int n_filters, double P, int M, std::mt19937_64& rng);

/// Evaluates the loss under every mask (inference mode, frozen batch-norm
/// statistics) and maps losses to scores s = 1 - (L - Lmin)/(Lmax - Lmin).
/// The network is restored bit-exactly afterwards.
MaskDataset score_masks(Network& net, int prunable_index, const std::vector<Vec>& masks,
                        const Dataset& scoring_data);

/// Minimizer of |s - Z theta|^2; minimum-norm solution when Z is
/// rank-deficient.
ImportanceVector solve_importance(const Mat& Z, const Vec& s);

ImportanceVector rank_importance(Vec theta);

/// generate_masks -> score_masks -> solve_importance for one layer, with
/// M = masks_per_filter * width.
ImportanceVector layer_importance(Network& net, int prunable_index, const Dataset& data,
                                  double P, int masks_per_filter, std::mt19937_64& rng);

/// Fixed seeded subset of the training data used for mask scoring so all
/// M evaluations are comparable (default cap 2048 samples).
Dataset scoring_subset(const Dataset& data, std::uint64_t seed, int cap = 2048);

void export_mask_dataset_csv(const MaskDataset& d, const std::string& path);

}  // namespace fep
