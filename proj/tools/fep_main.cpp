// fep: filter-ensemble pruning toolkit command line.
//
// Subcommands: train, prune, xor-experiment, arch. All randomness flows
// from one --seed through named substreams, so outputs are reproducible
// byte for byte. FEP_OUT_DIR, when set, prefixes relative output paths.

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include "fep/arch_metrics.hpp"
#include "fep/checkpoint.hpp"
#include "fep/data_gen.hpp"
#include "fep/network.hpp"
#include "fep/pruner.hpp"
#include "fep/rng.hpp"

namespace {

using namespace fep;

std::string out_path(const std::string& path) {
  const char* dir = std::getenv("FEP_OUT_DIR");
  if (!dir || path.empty() || std::filesystem::path(path).is_absolute()) return path;
  return (std::filesystem::path(dir) / path).string();
}

struct DataOptions {
  std::string kind = "xor";
  std::uint64_t seed = 0;
  int n = 1000;
  int classes = 3;
  int hw = 8;
  int channels = 1;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.kind, "Dataset kind: xor | blobs")->default_val("xor");
  cmd->add_option("--data-n", d.n, "Number of samples")->default_val(1000);
  cmd->add_option("--classes", d.classes, "Blob classes")->default_val(3);
  cmd->add_option("--hw", d.hw, "Blob image side length")->default_val(8);
  cmd->add_option("--channels", d.channels, "Blob image channels")->default_val(1);
}

Dataset make_data(const DataOptions& d, std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, "cli-data");
  if (d.kind == "xor") return gen_xor_dataset(d.n, rng).as_dataset();
  if (d.kind == "blobs") return gen_blob_images(d.classes, d.n, d.hw, d.channels, rng);
  throw std::invalid_argument("unknown dataset kind '" + d.kind + "'");
}

Network make_net(const std::string& kind, const DataOptions& d, std::uint64_t seed) {
  if (kind == "fcn3") return make_fcn(3, seed);
  if (kind == "fcn10") return make_fcn(10, seed);
  if (kind.rfind("fcn", 0) == 0) return make_fcn(std::stoi(kind.substr(3)), seed);
  if (kind == "toycnn") return make_toy_cnn({6, 8, 8}, d.channels, d.hw, d.classes, 3, seed);
  if (kind == "analytic-fcn3") {
    std::mt19937_64 rng = make_rng(seed, "cli-data");
    auto [a, b] = gen_orthonormal_pair(rng);
    return analytic_fcn3(a, b);
  }
  throw std::invalid_argument("unknown network kind '" + kind + "'");
}

void print_arch_table(const ArchDescriptor& desc) {
  const MetricsTable t = count_metrics(desc);
  long filters = 0;
  std::printf("%-6s %-6s %10s %12s %10s\n", "layer", "kind", "filters", "params", "flops");
  for (size_t i = 0; i < desc.layers.size(); ++i) {
    const auto& s = desc.layers[i];
    std::printf("%-6zu %-6s %10d %12ld %10s\n", i,
                s.kind == LayerSpec::Kind::Conv ? "conv" : "dense", s.n_filters, t.params[i],
                format_millions(t.flops[i]).c_str());
    if (s.kind == LayerSpec::Kind::Conv) filters += s.n_filters;
  }
  std::printf("%-6s %-6s %10ld %12ld %10s\n", "total", "", filters, t.total_params,
              format_millions(t.total_flops, 1).c_str());
}

int run_train(const std::string& net_kind, const DataOptions& data_opts, std::uint64_t seed,
              int epochs, double lr, int batch_size, const std::string& out) {
  Dataset all = make_data(data_opts, derive_seed(seed, "data"));
  auto [train_split, val_split] = split_dataset(all, 0.8);
  Network net = make_net(net_kind, data_opts, derive_seed(seed, "init"));
  if (epochs > 0) {
    SgdConfig cfg;
    cfg.epochs = epochs;
    cfg.lr = lr;
    cfg.batch_size = batch_size;
    cfg.seed = derive_seed(seed, "train");
    train(net, train_split, cfg);
  }
  const std::string path = out_path(out);
  save_checkpoint(net, path);
  std::printf("checkpoint=%s train_accuracy=%.4f val_accuracy=%.4f\n", path.c_str(),
              accuracy(net, train_split), accuracy(net, val_split));
  return 0;
}

int run_prune(const std::string& ckpt, const DataOptions& data_opts, PruneConfig cfg,
              const std::string& out, const std::string& report_path) {
  Network net = load_checkpoint(ckpt);
  Dataset all = make_data(data_opts, derive_seed(cfg.seed, "data"));
  auto [train_split, val_split] = split_dataset(all, 0.8);
  // fail early on checkpoint/dataset mismatch
  if (node_output_shapes(net).empty() ||
      Tensor::numel(net.input_shape) != all.inputs.sample_size())
    throw std::invalid_argument("checkpoint input shape does not match dataset");
  auto [pruned, report] = prune_network(std::move(net), train_split, val_split, cfg);
  save_checkpoint(pruned, out_path(out));
  export_prune_report_csv(report, out_path(report_path));
  std::printf(
      "params_removed_pct=%.2f flops_removed_pct=%.2f accuracy_before=%.4f "
      "accuracy_after=%.4f report=%s\n",
      report.total_params_removed_pct, report.total_flops_removed_pct,
      report.baseline_accuracy, report.accuracy_after_retrain, out_path(report_path).c_str());
  return 0;
}

int run_xor_experiment(const std::string& type_name, int trials, std::uint64_t seed,
                       int threads) {
  XorPruneType type;
  bool training_only = false;
  int hidden = 10;
  if (type_name == "one-shot")
    type = XorPruneType::OneShot;
  else if (type_name == "iterative")
    type = XorPruneType::Iterative;
  else if (type_name == "random")
    type = XorPruneType::Random;
  else if (type_name == "train-fcn3") {
    training_only = true;
    hidden = 3;
  } else if (type_name == "train-fcn10") {
    training_only = true;
    hidden = 10;
  } else {
    throw std::invalid_argument(
        "unknown type '" + type_name +
        "' (expected one-shot | iterative | random | train-fcn3 | train-fcn10)");
  }
  std::vector<char> success(trials, 0);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int i = next.fetch_add(1); i < trials; i = next.fetch_add(1)) {
      const std::uint64_t trial_seed = derive_seed(seed, "trial-" + std::to_string(i));
      const XorTrialResult r = training_only ? xor_train_trial(hidden, trial_seed)
                                             : xor_prune_trial(type, trial_seed);
      success[i] = r.success ? 1 : 0;
    }
  };
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, trials));
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  int wins = 0;
  for (char s : success) wins += s;
  const double p = static_cast<double>(wins) / trials;
  // Wilson 95% interval
  const double z = 1.959963984540054;
  const double denom = 1.0 + z * z / trials;
  const double center = (p + z * z / (2.0 * trials)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / trials + z * z / (4.0 * trials * trials)) / denom;
  std::printf("type=%s trials=%d successes=%d success_rate=%.1f%% ci95=[%.1f%%, %.1f%%]\n",
              type_name.c_str(), trials, wins, 100.0 * p, 100.0 * (center - half),
              100.0 * (center + half));
  return 0;
}

int run_arch(const std::string& preset, const std::string& file, const std::string& diff_file) {
  ArchDescriptor desc;
  if (!preset.empty())
    desc = descriptor_by_name(preset);
  else if (!file.empty())
    desc = load_descriptor(file);
  else
    throw std::invalid_argument("arch: provide --preset or --file");
  if (diff_file.empty()) {
    print_arch_table(desc);
    return 0;
  }
  const ArchDescriptor after = load_descriptor(diff_file);
  const DiffMetrics d = diff_metrics(desc, after);
  std::printf("%-6s %12s %12s\n", "layer", "params_down%", "flops_down%");
  for (size_t i = 0; i < d.params_pct.size(); ++i)
    std::printf("%-6zu %12.2f %12.2f\n", i, d.params_pct[i], d.flops_pct[i]);
  std::printf("%-6s %12.2f %12.2f\n", "total", d.total_params_pct, d.total_flops_pct);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"filter-ensemble structured pruning toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // allow --config after the subcommand name
  app.set_config("--config", "", "key=value config file; flags override");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network and write a checkpoint");
  std::string net_kind = "fcn10", train_out = "model.ckpt";
  DataOptions train_data;
  std::uint64_t train_seed = 0;
  int epochs = 200, batch_size = 32;
  double lr = 0.1;
  train_cmd->add_option("--net", net_kind, "fcn3 | fcn10 | fcnN | toycnn | analytic-fcn3");
  add_data_options(train_cmd, train_data);
  train_cmd->add_option("--seed", train_seed)->required();
  train_cmd->add_option("--epochs", epochs);
  train_cmd->add_option("--lr", lr);
  train_cmd->add_option("--batch-size", batch_size);
  train_cmd->add_option("--out", train_out);

  // prune
  auto* prune_cmd = app.add_subcommand("prune", "Prune a trained checkpoint");
  std::string ckpt, prune_out = "pruned.ckpt", report = "prune_report.csv", direction = "forward";
  DataOptions prune_data;
  PruneConfig pcfg;
  prune_cmd->add_option("--ckpt", ckpt)->required();
  add_data_options(prune_cmd, prune_data);
  prune_cmd->add_option("--seed", pcfg.seed)->required();
  prune_cmd->add_option("--alpha", pcfg.alpha, "Max validation accuracy drop per layer");
  prune_cmd->add_option("--target", pcfg.target_params_removed, "Parameter-removal target");
  prune_cmd->add_option("--p", pcfg.P, "Zero fraction per mask");
  prune_cmd->add_option("--masks-per-filter", pcfg.masks_per_filter);
  prune_cmd->add_option("--finetune-epochs", pcfg.finetune_epochs);
  prune_cmd->add_option("--retrain-epochs", pcfg.final_retrain.epochs);
  prune_cmd->add_option("--direction", direction, "forward | backward");
  prune_cmd->add_option("--out", prune_out);
  prune_cmd->add_option("--report", report);

  // xor-experiment
  auto* xor_cmd = app.add_subcommand("xor-experiment", "Monte-Carlo XOR pruning trials");
  std::string xor_type = "iterative";
  int trials = 100, threads = 0;
  std::uint64_t xor_seed = 0;
  xor_cmd->add_option("--type", xor_type,
                      "one-shot | iterative | random | train-fcn3 | train-fcn10");
  xor_cmd->add_option("--trials", trials)->check(CLI::PositiveNumber);
  xor_cmd->add_option("--seed", xor_seed)->required();
  xor_cmd->add_option("--threads", threads);

  // arch
  auto* arch_cmd = app.add_subcommand("arch", "Parameter/FLOP accounting tables");
  std::string preset, desc_file, diff_file;
  arch_cmd->add_option("--preset", preset, "Named preset (resnet20-cifar)");
  arch_cmd->add_option("--file", desc_file, "Descriptor file");
  arch_cmd->add_option("--diff", diff_file, "Second descriptor to diff against");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd)
      return run_train(net_kind, train_data, train_seed, epochs, lr, batch_size, train_out);
    if (*prune_cmd) {
      pcfg.direction = direction == "backward" ? Direction::Backward : Direction::Forward;
      return run_prune(ckpt, prune_data, pcfg, prune_out, report);
    }
    if (*xor_cmd) return run_xor_experiment(xor_type, trials, xor_seed, threads);
    if (*arch_cmd) return run_arch(preset, desc_file, diff_file);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (std::string(e.what()).rfind("unknown preset", 0) == 0) {
      std::cerr << "known presets:";
      for (const auto& p : fep::known_presets()) std::cerr << ' ' << p;
      std::cerr << "\n";
    }
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
