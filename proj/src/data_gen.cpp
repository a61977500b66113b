#include "fep/data_gen.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fep {

Dataset XorDataset::as_dataset() const {
  const int n = static_cast<int>(samples.rows());
  Tensor in({n, 2});
  for (int i = 0; i < n; ++i) {
    in.data(2 * i) = samples(i, 0);
    in.data(2 * i + 1) = samples(i, 1);
  }
  return {std::move(in), labels};
}

std::pair<Eigen::Vector2d, Eigen::Vector2d> gen_orthonormal_pair(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  const double phi = angle(rng);
  Eigen::Vector2d a(std::cos(phi), std::sin(phi));
  Eigen::Vector2d b(-a.y(), a.x());
  return {a, b};
}

XorDataset gen_xor_dataset(int n, const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                           std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("gen_xor_dataset: n must be >= 1");
  std::normal_distribution<double> gauss(0.0, 1.0);
  XorDataset out;
  out.a = a;
  out.b = b;
  out.samples.resize(n, 2);
  out.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    double product = 0.0;
    Eigen::Vector2d x;
    do {  // boundary samples (probability zero) are resampled
      x = {gauss(rng), gauss(rng)};
      product = a.dot(x) * b.dot(x);
    } while (product == 0.0);
    out.samples.row(i) = x.transpose();
    out.labels(i) = product > 0.0 ? 1 : 0;
  }
  return out;
}

XorDataset gen_xor_dataset(int n, std::mt19937_64& rng) {
  auto [a, b] = gen_orthonormal_pair(rng);
  return gen_xor_dataset(n, a, b, rng);
}

Network analytic_fcn3(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  constexpr double kTol = 1e-9;
  if (std::abs(a.norm() - 1.0) > kTol || std::abs(b.norm() - 1.0) > kTol ||
      std::abs(a.dot(b)) > kTol)
    throw std::invalid_argument("analytic_fcn3: (a, b) must be orthonormal");

  DenseLayer hidden;
  hidden.weights.resize(3, 2);
  hidden.weights.row(0) = a.transpose();
  hidden.weights.row(1) = b.transpose();
  hidden.weights.row(2) = ((a + b) / (a + b).norm()).transpose();
  hidden.bias = Vec::Zero(3);

  // Plane normal: cross product of the two hidden weight columns. Points
  // with positive label land exactly on this plane after ReLU, negative
  // ones strictly below it, so a small positive bias separates them.
  Eigen::Vector3d c1 = hidden.weights.col(0);
  Eigen::Vector3d c2 = hidden.weights.col(1);
  Eigen::Vector3d n_plane = c1.cross(c2);

  DenseLayer output;
  output.weights = n_plane.transpose();
  output.bias = Vec::Constant(1, 1e-3 * n_plane.norm());

  Network net;
  net.input_shape = {2};
  net.loss_kind = LossKind::BinaryCrossEntropy;
  net.nodes.emplace_back(std::move(hidden));
  net.nodes.emplace_back(ActivationLayer{Act::ReLU});
  net.nodes.emplace_back(MaskLayer{Vec::Ones(3)});
  net.nodes.emplace_back(std::move(output));
  return net;
}

Dataset gen_blob_images(int classes, int n, int hw, int channels, std::mt19937_64& rng) {
  if (classes < 2) throw std::invalid_argument("gen_blob_images: classes must be >= 2");
  if (n < 1 || hw < 2 || channels < 1)
    throw std::invalid_argument("gen_blob_images: bad dimensions");
  std::normal_distribution<double> noise(0.0, 0.3);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);

  // One fixed blob center per class, spread around the image.
  std::vector<Eigen::Vector2d> centers(classes);
  for (int c = 0; c < classes; ++c) {
    const double ang = 2.0 * M_PI * c / classes;
    centers[c] = {0.5 * hw + 0.28 * hw * std::cos(ang), 0.5 * hw + 0.28 * hw * std::sin(ang)};
  }
  const double sigma = 0.16 * hw;

  Dataset out;
  out.inputs = Tensor({n, channels, hw, hw});
  out.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int c = i % classes;
    out.labels(i) = c;
    const Eigen::Vector2d center = centers[c] + Eigen::Vector2d(jitter(rng), jitter(rng));
    for (int ch = 0; ch < channels; ++ch)
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          const double d2 = (Eigen::Vector2d(x, y) - center).squaredNorm();
          out.inputs.data(((static_cast<Eigen::Index>(i) * channels + ch) * hw + y) * hw + x) =
              std::exp(-d2 / (2.0 * sigma * sigma)) + noise(rng);
        }
  }
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double train_fraction) {
  const int n = data.size();
  const int n_train = std::max(1, std::min(n - 1, static_cast<int>(std::lround(n * train_fraction))));
  const Eigen::Index s = data.inputs.sample_size();
  std::vector<int> shape = data.inputs.shape;

  auto slice = [&](int begin, int count) {
    std::vector<int> sh = shape;
    sh[0] = count;
    Tensor in(sh);
    in.data = data.inputs.data.segment(static_cast<Eigen::Index>(begin) * s,
                                       static_cast<Eigen::Index>(count) * s);
    Dataset d;
    d.inputs = std::move(in);
    d.labels = data.labels.segment(begin, count);
    return d;
  };
  return {slice(0, n_train), slice(n_train, n - n_train)};
}

void export_xor_csv(const XorDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "x1,x2,label\n";
  char buf[96];
  for (Eigen::Index i = 0; i < data.samples.rows(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d\n", data.samples(i, 0), data.samples(i, 1),
                  data.labels(i) > 0 ? 1 : -1);
    out << buf;
  }
}

}  // namespace fep
