// Acceptance gate: one pass/fail line per criterion, nonzero exit if any
// checked criterion fails.

#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "fep/arch_metrics.hpp"
#include "fep/data_gen.hpp"
#include "fep/importance.hpp"
#include "fep/network.hpp"
#include "fep/pruner.hpp"
#include "fep/rng.hpp"

using namespace fep;

namespace {

int g_failures = 0;

void report(const char* id, bool ok, const std::string& detail) {
  std::printf("%s %s: %s (%s)\n", id, ok ? "PASS" : "FAIL", ok ? "ok" : "violated",
              detail.c_str());
  if (!ok) ++g_failures;
}

double trial_rate(int trials, std::uint64_t seed, const char* stream,
                  XorTrialResult (*fn)(int, std::uint64_t), int arg) {
  int wins = 0;
  for (int t = 0; t < trials; ++t)
    wins += fn(arg, derive_seed(seed, std::string(stream) + std::to_string(t))).success;
  return static_cast<double>(wins) / trials;
}

double prune_rate(int trials, std::uint64_t seed, const char* stream, XorPruneType type) {
  int wins = 0;
  for (int t = 0; t < trials; ++t)
    wins += xor_prune_trial(type, derive_seed(seed, std::string(stream) + std::to_string(t)))
                .success;
  return static_cast<double>(wins) / trials;
}

// ---- C1: trainability of the two-layer xor nets ----
void c1() {
  const double fcn10 = trial_rate(200, 11, "c1-f10-", xor_train_trial, 10);
  const double fcn3 = trial_rate(200, 12, "c1-f3-", xor_train_trial, 3);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "fcn10 %.1f%% (need >=95%%), fcn3 %.1f%% (need 25-60%%)",
                100 * fcn10, 100 * fcn3);
  report("C1", fcn10 >= 0.95 && fcn3 >= 0.25 && fcn3 <= 0.60, buf);
}

// ---- C2: pruning strategy ordering on xor ----
void c2() {
  const int T = 300;
  const double one_shot = prune_rate(T, 21, "c2-os-", XorPruneType::OneShot);
  const double iterative = prune_rate(T, 22, "c2-it-", XorPruneType::Iterative);
  const double random = prune_rate(T, 23, "c2-rd-", XorPruneType::Random);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "iterative %.1f%%, one-shot %.1f%%, random %.1f%%; need iterative >= "
                "one-shot - 3pp, one-shot >= random + 20pp, iterative >= 70%%",
                100 * iterative, 100 * one_shot, 100 * random);
  report("C2",
         iterative >= one_shot - 0.03 && one_shot >= random + 0.20 && iterative >= 0.70, buf);
}

// ---- C3: least-squares solver vs normal-equations oracle ----
void c3() {
  std::mt19937_64 rng = make_rng(31, "ls");
  std::normal_distribution<double> gauss;
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const int n = 10, m = 60;
    Mat Z(m, n);
    Vec s(m);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) Z(i, j) = gauss(rng) > 0 ? 1.0 : 0.0;
      s(i) = gauss(rng);
    }
    if ((Z.transpose() * Z).ldlt().rcond() < 1e-10) continue;  // keep oracle valid
    Vec oracle = (Z.transpose() * Z).ldlt().solve(Z.transpose() * s);
    Vec theta = solve_importance(Z, s).theta;
    worst = std::max(worst, (theta - oracle).lpNorm<Eigen::Infinity>());
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max |theta - oracle| = %.3g, tol 1e-8", worst);
  report("C3", worst < 1e-8, buf);
}

// ---- C4: mask-score normalization properties ----
void c4() {
  std::mt19937_64 rng = make_rng(41, "xor");
  XorDataset d = gen_xor_dataset(600, rng);
  Network net = make_fcn(8, 42);
  SgdConfig cfg;
  cfg.epochs = 100;
  cfg.lr = 0.1;
  cfg.seed = 43;
  train(net, d.as_dataset(), cfg);
  auto masks = generate_masks(8, 0.3, 80, rng);
  MaskDataset md = score_masks(net, 0, masks, d.as_dataset());
  bool ok = md.scores.minCoeff() == 0.0 && md.scores.maxCoeff() == 1.0;
  const double lmin = md.losses.minCoeff(), lmax = md.losses.maxCoeff();
  double worst = 0.0;
  for (int i = 0; i < md.scores.size(); ++i) {
    const double expected = 1.0 - (md.losses[i] - lmin) / (lmax - lmin);
    worst = std::max(worst, std::abs(md.scores[i] - expected));
    ok = ok && md.scores[i] >= 0.0 && md.scores[i] <= 1.0;
  }
  // anti-monotone: lower loss, higher score
  for (int i = 0; i + 1 < md.scores.size(); ++i)
    for (int j = i + 1; j < md.scores.size(); ++j)
      if (md.losses[i] < md.losses[j]) ok = ok && md.scores[i] >= md.scores[j];
  char buf[120];
  std::snprintf(buf, sizeof(buf), "range [0,1] with endpoints hit, affine dev %.3g", worst);
  report("C4", ok && worst < 1e-12, buf);
}

// ---- C5: structural rewiring equals masking ----
void c5() {
  double worst = 0.0;
  int trials = 0;
  auto check = [&](Network net, int layer, const std::vector<int>& filters,
                   std::uint64_t bseed) {
    std::mt19937_64 rng = make_rng(bseed, "batch");
    std::normal_distribution<double> gauss;
    std::vector<int> shape = net.input_shape;
    shape.insert(shape.begin(), 4);
    Tensor x(shape);
    for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data[i] = gauss(rng);

    Network masked = net;
    Vec mask = Vec::Ones(prunable_width(masked, prunable_layers(masked)[layer]));
    for (int f : filters) mask[f] = 0.0;
    set_layer_mask(masked, layer, mask);
    Tensor ym = forward(masked, x);
    remove_filters(net, layer, filters);
    Tensor yp = forward(net, x);
    worst = std::max(worst, (ym.data - yp.data).lpNorm<Eigen::Infinity>());
    ++trials;
  };

  std::mt19937_64 pick = make_rng(51, "pick");
  for (int t = 0; t < 10; ++t) {  // dense nets
    Network net = make_fcn(10, 510 + t);
    check(std::move(net), 0, {static_cast<int>(pick() % 10), static_cast<int>(pick() % 5)},
          520 + t);
  }
  for (int t = 0; t < 10; ++t) {  // conv stacks
    Network net = make_toy_cnn({5, 6, 4}, 1, 8, 3, 3, 530 + t);
    const int layer = t % 3;
    const int width = prunable_width(net, prunable_layers(net)[layer]);
    check(std::move(net), layer, {static_cast<int>(pick() % width)}, 540 + t);
  }
  int t = 0;
  for (MaskPosition p1 : {MaskPosition::BeforeShortcut, MaskPosition::AfterShortcut})
    for (MaskPosition p2 : {MaskPosition::BeforeShortcut, MaskPosition::AfterShortcut})
      for (int layer = 0; layer < 5; ++layer) {  // residual nets
        std::mt19937_64 rng = make_rng(550 + t, "init");
        Network net;
        net.input_shape = {2, 6, 6};
        net.nodes.push_back(make_conv(4, 2, 3, 1, 1, rng));
        net.nodes.push_back(ActivationLayer{Act::ReLU});
        net.nodes.push_back(MaskLayer{Vec::Ones(4)});
        net.nodes.push_back(make_residual_block(4, 3, p1, rng));
        net.nodes.push_back(make_residual_block(4, 3, p2, rng));
        net.nodes.push_back(FlattenLayer{});
        net.nodes.push_back(make_dense(3, 4 * 6 * 6, rng));
        net.loss_kind = LossKind::CrossEntropy;
        std::vector<int> filters = {static_cast<int>(pick() % 4)};
        if (pick() % 2) {
          int second = static_cast<int>(pick() % 4);
          if (second != filters[0]) filters.push_back(second);
        }
        check(std::move(net), layer, filters, 560 + t);
        ++t;
      }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%d removals, max |masked - pruned| = %.3g, tol 1e-9", trials,
                worst);
  report("C5", worst < 1e-9 && trials >= 40, buf);
}

// ---- C6: reference resnet20 accounting table ----
void c6() {
  ArchDescriptor before = resnet20_cifar();
  MetricsTable t = count_metrics(before);
  bool ok = format_millions(t.flops[1]) == "2.35M" && format_millions(t.flops[7]) == "1.17M" &&
            format_millions(t.total_flops, 1) == "40.5M";
  long filters = 0;
  for (const auto& s : before.layers)
    if (s.kind == LayerSpec::Kind::Conv) filters += s.n_filters;
  ok = ok && filters == 688;

  const std::vector<int> removals = {1, 6,  4, 7, 6, 0,  0,  5, 1, 14,
                                     20, 0, 2, 0, 4, 34, 30, 0, 24, 0};
  DiffMetrics d = diff_metrics(before, prune_descriptor(before, removals));
  // cells are printed to two decimals; allow half-ulp rounding slack
  auto close_to = [](double x, double want) { return std::abs(x - want) < 0.006; };
  ok = ok && close_to(d.params_pct[1], 41.41) && close_to(d.flops_pct[1], 41.41) &&
       close_to(d.params_pct[15], 53.12) && close_to(d.params_pct[16], 75.10) &&
       close_to(d.params_pct[18], 37.50) && std::abs(d.total_flops_pct - 30.91) < 0.01 &&
       std::abs(d.total_params_pct - 30.70) < 0.01;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "totals: params -%.2f%% (want 30.70), flops -%.2f%% (want 30.91)",
                d.total_params_pct, d.total_flops_pct);
  report("C6", ok, buf);
}

// ---- C7: analytic gradients vs finite differences ----
void c7() {
  double worst = 0.0;
  auto rel_err = [&](Network& net, const Dataset& data, double h) {
    const Vec g = gradients(net, data);
    const Vec p0 = get_params(net);
    Vec gn(p0.size());
    for (Eigen::Index i = 0; i < p0.size(); ++i) {
      Vec p = p0;
      p[i] = p0[i] + h;
      set_params(net, p);
      const double lp = training_loss(net, data);
      p[i] = p0[i] - h;
      set_params(net, p);
      const double lm = training_loss(net, data);
      gn[i] = (lp - lm) / (2.0 * h);
    }
    set_params(net, p0);
    return (g - gn).norm() / std::max(1e-12, gn.norm());
  };
  auto make_data = [](const Network& net, int n, std::uint64_t seed, int classes) {
    std::mt19937_64 rng = make_rng(seed, "data");
    std::normal_distribution<double> gauss;
    std::vector<int> shape = net.input_shape;
    shape.insert(shape.begin(), n);
    Tensor x(shape);
    for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data[i] = gauss(rng);
    Eigen::VectorXi y(n);
    for (int i = 0; i < n; ++i) y[i] = static_cast<int>(rng() % classes);
    return Dataset{std::move(x), std::move(y)};
  };
  for (std::uint64_t s = 0; s < 20; ++s) {
    Network net = make_fcn(8, 700 + s);
    Dataset d = make_data(net, 8, 720 + s, 2);
    worst = std::max(worst, rel_err(net, d, 1e-6));
  }
  for (std::uint64_t s = 0; s < 4; ++s) {
    std::mt19937_64 rng = make_rng(740 + s, "init");
    Network net;
    net.input_shape = {2, 5, 5};
    net.nodes.push_back(make_conv(3, 2, 3, 1, 1, rng));
    net.nodes.push_back(make_batchnorm(3));
    net.nodes.push_back(ActivationLayer{Act::ReLU});
    net.nodes.push_back(MaskLayer{Vec::Ones(3)});
    net.nodes.push_back(make_residual_block(
        3, 3, s % 2 ? MaskPosition::AfterShortcut : MaskPosition::BeforeShortcut, rng));
    net.nodes.push_back(FlattenLayer{});
    net.nodes.push_back(make_dense(2, 3 * 5 * 5, rng));
    net.loss_kind = LossKind::CrossEntropy;
    Dataset d = make_data(net, 6, 760 + s, 2);
    worst = std::max(worst, rel_err(net, d, 1e-5));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max relative error %.3g, tol 1e-4", worst);
  report("C7", worst < 1e-4, buf);
}

// ---- C8: end-to-end prune of a small CNN ----
void c8() {
  std::mt19937_64 rng = make_rng(81, "blobs");
  Dataset all = gen_blob_images(3, 1000, 8, 1, rng);
  auto [train_d, val_d] = split_dataset(all, 0.8);
  Network net = make_toy_cnn({8, 12, 12}, 1, 8, 3, 3, 82);
  SgdConfig pre;
  pre.epochs = 30;
  pre.lr = 0.02;
  pre.seed = 83;
  train(net, train_d, pre);
  const double baseline = accuracy(net, val_d);

  PruneConfig cfg;
  cfg.alpha = 0.005;
  cfg.seed = 84;
  cfg.target_params_removed = 0.3;
  auto [pruned, rep] = prune_network(std::move(net), train_d, val_d, cfg);
  const bool ok = rep.total_params_removed_pct >= 30.0 &&
                  rep.accuracy_after_retrain >= baseline - 0.02;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "params -%.1f%% (need >=30%%), accuracy %.3f vs baseline %.3f (need >= -2pp)",
                rep.total_params_removed_pct, rep.accuracy_after_retrain, baseline);
  report("C8", ok, buf);
}

}  // namespace

int main() {
  c1();
  c2();
  c3();
  c4();
  c5();
  c6();
  c7();
  c8();
  std::printf("C9 SKIP: out of scope (full CIFAR-10 training run)\n");
  return g_failures == 0 ? 0 : 1;
}
