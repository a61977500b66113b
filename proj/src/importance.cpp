#include "fep/importance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "fep/rng.hpp"

namespace fep {

std::vector<Vec> generate_masks(int n_filters, double P, int M, std::mt19937_64& rng) {
  if (P <= 0.0 || P >= 1.0) throw std::invalid_argument("generate_masks: P must be in (0,1)");
  if (M < 1) throw std::invalid_argument("generate_masks: M must be >= 1");
  const int zeros = static_cast<int>(std::lround(P * n_filters));
  if (zeros < 1 || zeros >= n_filters)
    throw std::invalid_argument("generate_masks: round(P*n_filters) = " + std::to_string(zeros) +
                                " leaves a degenerate ensemble");
  std::vector<int> pos(n_filters);
  std::iota(pos.begin(), pos.end(), 0);
  std::set<std::vector<bool>> seen;
  std::vector<Vec> masks;
  masks.reserve(M);
  const long retry_cap = 100L * M;
  long attempts = 0;
  while (static_cast<int>(masks.size()) < M) {
    // partial Fisher-Yates: first `zeros` entries are the zero positions
    for (int i = 0; i < zeros; ++i) {
      int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(n_filters - i));
      std::swap(pos[i], pos[j]);
    }
    std::vector<bool> key(n_filters, true);
    for (int i = 0; i < zeros; ++i) key[pos[i]] = false;
    ++attempts;
    if (attempts <= retry_cap && !seen.insert(key).second) continue;
    Vec m = Vec::Ones(n_filters);
    for (int i = 0; i < n_filters; ++i)
      if (!key[i]) m(i) = 0.0;
    masks.push_back(std::move(m));
  }
  return masks;
}

MaskDataset score_masks(Network& net, int prunable_index, const std::vector<Vec>& masks,
                        const Dataset& scoring_data) {
  if (masks.size() < 2) throw std::invalid_argument("score_masks: need at least 2 masks");
  auto refs = prunable_layers(net);
  PrunableRef ref = refs.at(prunable_index);
  const int width = prunable_width(net, ref);
  for (const auto& m : masks)
    if (m.size() != width) throw std::invalid_argument("score_masks: mask length mismatch");

  const Vec saved = get_layer_mask(net, ref);
  MaskDataset out;
  out.layer = prunable_index;
  out.Z.resize(static_cast<Eigen::Index>(masks.size()), width);
  out.losses.resize(static_cast<Eigen::Index>(masks.size()));
  for (size_t i = 0; i < masks.size(); ++i) {
    out.Z.row(static_cast<Eigen::Index>(i)) = masks[i].transpose();
    set_layer_mask(net, ref, masks[i]);
    out.losses(static_cast<Eigen::Index>(i)) = loss(net, scoring_data);
  }
  set_layer_mask(net, ref, saved);

  const double lmin = out.losses.minCoeff();
  const double lmax = out.losses.maxCoeff();
  if (lmax == lmin)
    throw DegenerateScoresError("all masks produced identical loss on layer " +
                                std::to_string(prunable_index));
  out.scores = 1.0 - (out.losses.array() - lmin) / (lmax - lmin);
  const Vec& row0 = masks[0];
  out.zero_fraction = static_cast<double>(width - row0.sum()) / width;
  return out;
}

ImportanceVector rank_importance(Vec theta) {
  ImportanceVector out;
  out.ranking.resize(theta.size());
  std::iota(out.ranking.begin(), out.ranking.end(), 0);
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [&](int i, int j) { return theta(i) < theta(j); });
  out.theta = std::move(theta);
  return out;
}

ImportanceVector solve_importance(const Mat& Z, const Vec& s) {
  if (Z.rows() != s.size()) throw std::invalid_argument("solve_importance: dimension mismatch");
  if (Z.rows() < 1 || Z.cols() < 1)
    throw std::invalid_argument("solve_importance: empty design matrix");
  // Complete orthogonal decomposition: least-squares solution, minimum
  // norm when rank-deficient.
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(Z);
  return rank_importance(cod.solve(s));
}

ImportanceVector layer_importance(Network& net, int prunable_index, const Dataset& data,
                                  double P, int masks_per_filter, std::mt19937_64& rng) {
  auto refs = prunable_layers(net);
  const int width = prunable_width(net, refs.at(prunable_index));
  auto masks = generate_masks(width, P, masks_per_filter * width, rng);
  MaskDataset md = score_masks(net, prunable_index, masks, data);
  return solve_importance(md.Z, md.scores);
}

Dataset scoring_subset(const Dataset& data, std::uint64_t seed, int cap) {
  const int n = data.size();
  if (n <= cap) return data;
  std::mt19937_64 rng = make_rng(seed, "scoring-subset");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < cap; ++i) {
    int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(n - i));
    std::swap(idx[i], idx[j]);
  }
  const Eigen::Index s = data.inputs.sample_size();
  std::vector<int> shape = data.inputs.shape;
  shape[0] = cap;
  Dataset out;
  out.inputs = Tensor(shape);
  out.labels.resize(cap);
  for (int i = 0; i < cap; ++i) {
    out.inputs.data.segment(static_cast<Eigen::Index>(i) * s, s) =
        data.inputs.data.segment(static_cast<Eigen::Index>(idx[i]) * s, s);
    out.labels(i) = data.labels(idx[i]);
  }
  return out;
}

void export_mask_dataset_csv(const MaskDataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (Eigen::Index j = 0; j < d.Z.cols(); ++j) out << "z" << j << ",";
  out << "loss,score\n";
  char buf[64];
  for (Eigen::Index i = 0; i < d.Z.rows(); ++i) {
    for (Eigen::Index j = 0; j < d.Z.cols(); ++j) out << static_cast<int>(d.Z(i, j)) << ",";
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", d.losses(i), d.scores(i));
    out << buf;
  }
}

}  // namespace fep
