#pragma once

#include <Eigen/Dense>

#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fep {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense n-d array with row-major flat storage. shape[0] is the batch
/// dimension for activations, shape[1] the channel/feature dimension.
struct Tensor {
  std::vector<int> shape;
  Vec data;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(Vec::Zero(numel(shape))) {}

  Tensor(std::vector<int> s, Vec d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Eigen::Index numel(const std::vector<int>& s) {
    Eigen::Index n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  Eigen::Index size() const { return data.size(); }

  /// Elements per sample (product of all dims past the batch dim).
  Eigen::Index sample_size() const {
    if (shape.empty()) return 0;
    return data.size() / shape[0];
  }

  /// View as a batch-rows matrix (shape[0] x rest).
  Eigen::Map<const RowMat> as_matrix() const {
    return {data.data(), shape[0], sample_size()};
  }
  Eigen::Map<RowMat> as_matrix() {
    return {data.data(), shape[0], sample_size()};
  }

  bool all_finite() const { return data.allFinite(); }
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace fep
