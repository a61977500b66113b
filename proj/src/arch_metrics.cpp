#include "fep/arch_metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fep {

long layer_params(const LayerSpec& s) {
  if (s.n_filters < 0 || s.in_channels <= 0 || s.kernel <= 0)
    throw std::invalid_argument("malformed layer spec");
  long w = static_cast<long>(s.n_filters) * s.in_channels * s.kernel * s.kernel;
  if (s.has_bias) w += s.n_filters;
  return w + s.bn_scalars;
}

long layer_flops(const LayerSpec& s) {
  if (s.out_h <= 0 || s.out_w <= 0) throw std::invalid_argument("layer spec missing output size");
  return static_cast<long>(s.n_filters) * s.in_channels * s.kernel * s.kernel * s.out_h * s.out_w;
}

MetricsTable count_metrics(const ArchDescriptor& desc) {
  MetricsTable t;
  for (const auto& s : desc.layers) {
    t.params.push_back(layer_params(s));
    t.flops.push_back(layer_flops(s));
    t.total_params += t.params.back();
    t.total_flops += t.flops.back();
  }
  return t;
}

ArchDescriptor descriptor_of(const Network& net) {
  ArchDescriptor desc;
  auto shapes = node_output_shapes(net);
  auto spatial = [&](const std::vector<int>& sh) {
    return sh.size() == 3 ? std::pair<int, int>{sh[1], sh[2]} : std::pair<int, int>{1, 1};
  };
  std::vector<int> in_shape = net.input_shape;
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    const auto& node = net.nodes[i];
    const bool bn_follows = i + 1 < net.nodes.size() &&
                            std::holds_alternative<BatchNormLayer>(net.nodes[i + 1]);
    if (const auto* d = std::get_if<DenseLayer>(&node)) {
      LayerSpec s;
      s.kind = LayerSpec::Kind::Dense;
      s.n_filters = d->out_units();
      s.in_channels = d->in_units();
      s.has_bias = true;
      if (bn_follows) s.bn_scalars = 2L * d->out_units();
      desc.layers.push_back(s);
    } else if (const auto* c = std::get_if<Conv2dLayer>(&node)) {
      LayerSpec s;
      s.n_filters = c->n_filters();
      s.in_channels = c->in_channels;
      s.kernel = c->kernel;
      auto [oh, ow] = spatial(shapes[i]);
      s.out_h = oh;
      s.out_w = ow;
      s.has_bias = true;
      if (bn_follows) s.bn_scalars = 2L * c->n_filters();
      desc.layers.push_back(s);
    } else if (const auto* r = std::get_if<ResidualBlock>(&node)) {
      auto [oh, ow] = spatial(shapes[i]);
      LayerSpec s1;
      s1.n_filters = r->conv1.n_filters();
      s1.in_channels = r->conv1.in_channels;
      s1.kernel = r->conv1.kernel;
      s1.out_h = oh;
      s1.out_w = ow;
      s1.has_bias = true;
      s1.bn_scalars = 2L * r->conv1.n_filters();
      desc.layers.push_back(s1);
      LayerSpec s2 = s1;
      s2.n_filters = r->conv2.n_filters();
      s2.in_channels = r->conv2.in_channels;
      s2.kernel = r->conv2.kernel;
      s2.bn_scalars = 2L * r->conv2.n_filters();
      s2.inherit_from = static_cast<int>(desc.layers.size()) - 1;
      desc.layers.push_back(s2);
    }
    in_shape = shapes[i];
  }
  return desc;
}

ArchDescriptor resnet20_cifar() {
  ArchDescriptor desc;
  auto conv = [](int f, int c, int hw, int inherit) {
    LayerSpec s;
    s.n_filters = f;
    s.in_channels = c;
    s.kernel = 3;
    s.out_h = s.out_w = hw;
    s.inherit_from = inherit;
    return s;
  };
  desc.layers.push_back(conv(16, 3, 32, -1));  // stem, layer 0
  // stage 1: three blocks of (conv1, conv2); block conv1 after the stem
  // inherits the stem's channel removals
  desc.layers.push_back(conv(16, 16, 32, 0));
  desc.layers.push_back(conv(16, 16, 32, 1));
  for (int b = 1; b < 3; ++b) {
    desc.layers.push_back(conv(16, 16, 32, -1));
    desc.layers.push_back(conv(16, 16, 32, static_cast<int>(desc.layers.size()) - 1));
  }
  // stage 2
  desc.layers.push_back(conv(32, 16, 16, -1));
  desc.layers.push_back(conv(32, 32, 16, static_cast<int>(desc.layers.size()) - 1));
  for (int b = 1; b < 3; ++b) {
    desc.layers.push_back(conv(32, 32, 16, -1));
    desc.layers.push_back(conv(32, 32, 16, static_cast<int>(desc.layers.size()) - 1));
  }
  // stage 3
  desc.layers.push_back(conv(64, 32, 8, -1));
  desc.layers.push_back(conv(64, 64, 8, static_cast<int>(desc.layers.size()) - 1));
  for (int b = 1; b < 3; ++b) {
    desc.layers.push_back(conv(64, 64, 8, -1));
    desc.layers.push_back(conv(64, 64, 8, static_cast<int>(desc.layers.size()) - 1));
  }
  LayerSpec fc;
  fc.kind = LayerSpec::Kind::Dense;
  fc.n_filters = 10;
  fc.in_channels = 64;
  fc.has_bias = true;
  desc.layers.push_back(fc);
  return desc;
}

ArchDescriptor descriptor_by_name(const std::string& name) {
  if (name == "resnet20-cifar") return resnet20_cifar();
  throw std::invalid_argument("unknown preset '" + name + "'");
}

std::vector<std::string> known_presets() { return {"resnet20-cifar"}; }

ArchDescriptor prune_descriptor(const ArchDescriptor& desc, const std::vector<int>& removals) {
  if (removals.size() != desc.layers.size())
    throw std::invalid_argument("prune_descriptor: removal vector length mismatch");
  ArchDescriptor out = desc;
  for (size_t i = 0; i < out.layers.size(); ++i) {
    auto& s = out.layers[i];
    if (removals[i] < 0 || removals[i] >= s.n_filters)
      throw std::invalid_argument("prune_descriptor: invalid removal count at layer " +
                                  std::to_string(i));
    const int before = s.n_filters;
    s.n_filters -= removals[i];
    if (s.bn_scalars > 0) s.bn_scalars = s.bn_scalars / before * s.n_filters;
    if (s.inherit_from >= 0) s.in_channels -= removals[static_cast<size_t>(s.inherit_from)];
  }
  return out;
}

DiffMetrics diff_metrics(const ArchDescriptor& before, const ArchDescriptor& after) {
  if (before.layers.size() != after.layers.size())
    throw std::invalid_argument("diff_metrics: layer count mismatch");
  DiffMetrics d;
  long pb = 0, pa = 0, fb = 0, fa = 0;
  for (size_t i = 0; i < before.layers.size(); ++i) {
    if (before.layers[i].kind != after.layers[i].kind)
      throw std::invalid_argument("diff_metrics: layer kind mismatch at " + std::to_string(i));
    const long p0 = layer_params(before.layers[i]);
    const long p1 = layer_params(after.layers[i]);
    const long f0 = layer_flops(before.layers[i]);
    const long f1 = layer_flops(after.layers[i]);
    d.params_pct.push_back(100.0 * (p0 - p1) / p0);
    d.flops_pct.push_back(100.0 * (f0 - f1) / f0);
    pb += p0;
    pa += p1;
    fb += f0;
    fa += f1;
  }
  d.total_params_pct = 100.0 * (pb - pa) / pb;
  d.total_flops_pct = 100.0 * (fb - fa) / fb;
  return d;
}

ArchDescriptor parse_descriptor(std::istream& in) {
  ArchDescriptor desc;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind)) continue;
    LayerSpec s;
    if (kind == "conv")
      s.kind = LayerSpec::Kind::Conv;
    else if (kind == "dense")
      s.kind = LayerSpec::Kind::Dense;
    else
      throw std::invalid_argument("descriptor line " + std::to_string(lineno) +
                                  ": unknown kind '" + kind + "'");
    if (!(ls >> s.n_filters >> s.in_channels >> s.kernel >> s.out_h >> s.out_w))
      throw std::invalid_argument("descriptor line " + std::to_string(lineno) +
                                  ": expected 'kind filters in_channels kernel out_h out_w'");
    std::string extra;
    while (ls >> extra) {
      if (extra == "bias")
        s.has_bias = true;
      else if (extra.rfind("bn=", 0) == 0)
        s.bn_scalars = std::stol(extra.substr(3));
      else if (extra.rfind("inherit=", 0) == 0)
        s.inherit_from = std::stoi(extra.substr(8));
      else
        throw std::invalid_argument("descriptor line " + std::to_string(lineno) +
                                    ": unknown attribute '" + extra + "'");
    }
    desc.layers.push_back(s);
  }
  return desc;
}

ArchDescriptor load_descriptor(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open descriptor file " + path);
  return parse_descriptor(in);
}

void write_descriptor(const ArchDescriptor& desc, std::ostream& out) {
  for (const auto& s : desc.layers) {
    out << (s.kind == LayerSpec::Kind::Conv ? "conv" : "dense") << ' ' << s.n_filters << ' '
        << s.in_channels << ' ' << s.kernel << ' ' << s.out_h << ' ' << s.out_w;
    if (s.has_bias) out << " bias";
    if (s.bn_scalars > 0) out << " bn=" << s.bn_scalars;
    if (s.inherit_from >= 0) out << " inherit=" << s.inherit_from;
    out << '\n';
  }
}

std::string format_millions(long v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double truncated = std::floor(v / 1e6 * scale) / scale;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*fM", decimals, truncated);
  return buf;
}

}  // namespace fep
