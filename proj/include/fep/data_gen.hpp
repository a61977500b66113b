#pragma once

#include <random>
#include <string>
#include <utility>

#include "fep/network.hpp"

namespace fep {

/// Two-class planar dataset: x ~ N(0, I), label = sign((a.x)(b.x)) with
/// (a, b) a random orthonormal pair. Labels stored as 0/1 (1 <-> +1).
struct XorDataset {
  Mat samples;  // N x 2
  Eigen::VectorXi labels;
  Eigen::Vector2d a, b;

  Dataset as_dataset() const;
};

std::pair<Eigen::Vector2d, Eigen::Vector2d> gen_orthonormal_pair(std::mt19937_64& rng);

XorDataset gen_xor_dataset(int n, std::mt19937_64& rng);
XorDataset gen_xor_dataset(int n, const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                           std::mt19937_64& rng);

/// Hand-constructed 2-3-1 network solving the XOR dataset built from the
/// same orthonormal pair: hidden rows a, b, (a+b)/|a+b|; output weights
/// the cross product of the two hidden weight columns.
Network analytic_fcn3(const Eigen::Vector2d& a, const Eigen::Vector2d& b);

/// Class-conditioned Gaussian-blob images, a desk-scale stand-in for a
/// real image dataset. Deterministic in (parameters, rng state).
Dataset gen_blob_images(int classes, int n, int hw, int channels, std::mt19937_64& rng);

/// Deterministic split: first round(n*train_fraction) samples train, rest
/// validation (samples are generated i.i.d., so no shuffle is needed).
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double train_fraction);

void export_xor_csv(const XorDataset& data, const std::string& path);

}  // namespace fep
