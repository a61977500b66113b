#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fep/data_gen.hpp"
#include "fep/network.hpp"
#include "fep/rng.hpp"

using namespace fep;

TEST_CASE("orthonormal pair invariants") {
  std::mt19937_64 rng = make_rng(1, "pair");
  for (int i = 0; i < 50; ++i) {
    auto [a, b] = gen_orthonormal_pair(rng);
    CHECK(std::abs(a.norm() - 1.0) < 1e-12);
    CHECK(std::abs(b.norm() - 1.0) < 1e-12);
    CHECK(std::abs(a.dot(b)) < 1e-12);
  }
}

TEST_CASE("labels follow sign((a.x)(b.x)) with fixed axes") {
  // a = (1,0), b = (0,1): label is the sign of x*y, classic XOR quadrants
  Eigen::Vector2d a(1.0, 0.0), b(0.0, 1.0);
  std::mt19937_64 rng = make_rng(2, "xor");
  XorDataset d = gen_xor_dataset(500, a, b, rng);
  for (int i = 0; i < 500; ++i) {
    const double prod = d.samples(i, 0) * d.samples(i, 1);
    CHECK(d.labels[i] == (prod > 0.0 ? 1 : 0));
    CHECK(prod != 0.0);
  }
  // spot value: x = (2,3) -> (a.x)(b.x) = 6 > 0 -> positive class
  CHECK(2.0 * 3.0 > 0.0);
}

TEST_CASE("label symmetry: negating one axis flips every label") {
  std::mt19937_64 rng = make_rng(3, "xor");
  auto [a, b] = gen_orthonormal_pair(rng);
  XorDataset d = gen_xor_dataset(200, a, b, rng);
  for (int i = 0; i < 200; ++i) {
    Eigen::Vector2d x = d.samples.row(i);
    const double flipped = (a.dot(-x)) * (b.dot(x));
    CHECK((flipped > 0.0 ? 1 : 0) == 1 - d.labels[i]);
  }
}

TEST_CASE("class balance is near 50/50 at N = 10000") {
  std::mt19937_64 rng = make_rng(4, "xor");
  XorDataset d = gen_xor_dataset(10000, rng);
  const double frac = d.labels.cast<double>().mean();
  CHECK(frac > 0.47);
  CHECK(frac < 0.53);
}

TEST_CASE("analytic 2-3-1 net: structure and near-perfect accuracy") {
  std::mt19937_64 rng = make_rng(5, "xor");
  auto [a, b] = gen_orthonormal_pair(rng);
  Network net = analytic_fcn3(a, b);

  const auto& h = std::get<DenseLayer>(net.nodes[0]);
  REQUIRE(h.out_units() == 3);
  CHECK((h.weights.row(0).transpose() - Vec(a)).norm() < 1e-12);
  CHECK((h.weights.row(1).transpose() - Vec(b)).norm() < 1e-12);
  Eigen::Vector2d third = h.weights.row(2);
  CHECK(std::abs(third.norm() - 1.0) < 1e-12);
  CHECK(std::abs(third.dot(a) - third.dot(b)) < 1e-12);  // bisector direction

  // output weights orthogonal to both hidden weight columns
  const auto& o = std::get<DenseLayer>(net.nodes[3]);
  Eigen::Vector3d w = o.weights.row(0);
  CHECK(std::abs(w.dot(h.weights.col(0))) < 1e-12);
  CHECK(std::abs(w.dot(h.weights.col(1))) < 1e-12);

  XorDataset d = gen_xor_dataset(2000, a, b, rng);
  CHECK(accuracy(net, d.as_dataset()) >= 0.95);
}

TEST_CASE("analytic net accuracy holds across random pairs") {
  std::mt19937_64 rng = make_rng(6, "xor");
  for (int t = 0; t < 20; ++t) {
    auto [a, b] = gen_orthonormal_pair(rng);
    Network net = analytic_fcn3(a, b);
    XorDataset d = gen_xor_dataset(1000, a, b, rng);
    CHECK(accuracy(net, d.as_dataset()) >= 0.95);
  }
}

TEST_CASE("xor generation is deterministic in the rng state") {
  std::mt19937_64 r1 = make_rng(7, "xor"), r2 = make_rng(7, "xor");
  XorDataset d1 = gen_xor_dataset(100, r1), d2 = gen_xor_dataset(100, r2);
  CHECK((d1.samples - d2.samples).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK(d1.labels == d2.labels);
}

TEST_CASE("blob images: shape, labels, determinism") {
  std::mt19937_64 r1 = make_rng(8, "blobs"), r2 = make_rng(8, "blobs");
  Dataset d = gen_blob_images(3, 60, 8, 1, r1);
  CHECK(d.inputs.shape == std::vector<int>{60, 1, 8, 8});
  CHECK(d.labels.minCoeff() == 0);
  CHECK(d.labels.maxCoeff() == 2);
  Dataset d2 = gen_blob_images(3, 60, 8, 1, r2);
  CHECK((d.inputs.data - d2.inputs.data).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK_THROWS_AS(gen_blob_images(1, 10, 8, 1, r1), std::invalid_argument);
}

TEST_CASE("blob images are learnable by the toy CNN") {
  std::mt19937_64 rng = make_rng(9, "blobs");
  Dataset all = gen_blob_images(3, 600, 8, 1, rng);
  auto [train_d, val_d] = split_dataset(all, 0.8);
  Network net = make_toy_cnn({6, 8, 8}, 1, 8, 3, 3, 10);
  SgdConfig cfg;
  cfg.epochs = 20;
  cfg.lr = 0.02;
  cfg.seed = 11;
  train(net, train_d, cfg);
  CHECK(accuracy(net, val_d) > 0.9);
}

TEST_CASE("split_dataset is a deterministic prefix split") {
  std::mt19937_64 rng = make_rng(10, "xor");
  Dataset d = gen_xor_dataset(100, rng).as_dataset();
  auto [tr, va] = split_dataset(d, 0.8);
  CHECK(tr.size() == 80);
  CHECK(va.size() == 20);
  CHECK(tr.inputs.data[0] == d.inputs.data[0]);
  CHECK(va.labels[0] == d.labels[80]);
}
