#include "fep/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <ostream>

namespace fep {

namespace {

constexpr char kMagic[8] = {'F', 'E', 'P', 'N', 'E', 'T', '1', '\n'};

enum NodeTag : std::int32_t {
  kDense = 1,
  kConv = 2,
  kActivation = 3,
  kBatchNorm = 4,
  kMask = 5,
  kFlatten = 6,
  kResidual = 7,
};

void write_i32(std::ostream& out, std::int32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint32_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::int32_t read_i32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw CheckpointError("truncated checkpoint");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return static_cast<std::int32_t>(v);
}

void write_f64(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw CheckpointError("truncated checkpoint");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

void write_vec(std::ostream& out, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) write_f64(out, v(i));
}

Vec read_vec(std::istream& in, Eigen::Index n) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = read_f64(in);
  return v;
}

void write_mat(std::ostream& out, const Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) write_f64(out, m.data()[i]);
}

Mat read_mat(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = read_f64(in);
  return m;
}

void write_conv_header(std::ostream& out, const Conv2dLayer& c) {
  write_i32(out, c.n_filters());
  write_i32(out, c.in_channels);
  write_i32(out, c.kernel);
  write_i32(out, c.stride);
  write_i32(out, c.padding);
}

Conv2dLayer read_conv_header(std::istream& in) {
  Conv2dLayer c;
  std::int32_t nf = read_i32(in);
  c.in_channels = read_i32(in);
  c.kernel = read_i32(in);
  c.stride = read_i32(in);
  c.padding = read_i32(in);
  c.weight.resize(nf, static_cast<Eigen::Index>(c.in_channels) * c.kernel * c.kernel);
  c.bias.resize(nf);
  return c;
}

void write_conv_data(std::ostream& out, const Conv2dLayer& c) {
  write_mat(out, c.weight);
  write_vec(out, c.bias);
}

void read_conv_data(std::istream& in, Conv2dLayer& c) {
  c.weight = read_mat(in, c.weight.rows(), c.weight.cols());
  c.bias = read_vec(in, c.bias.size());
}

void write_bn_data(std::ostream& out, const BatchNormLayer& b) {
  write_vec(out, b.gamma);
  write_vec(out, b.beta);
  write_vec(out, b.running_mean);
  write_vec(out, b.running_var);
  write_f64(out, b.momentum);
  write_f64(out, b.eps);
}

BatchNormLayer read_bn_data(std::istream& in, int channels) {
  BatchNormLayer b;
  b.gamma = read_vec(in, channels);
  b.beta = read_vec(in, channels);
  b.running_mean = read_vec(in, channels);
  b.running_var = read_vec(in, channels);
  b.momentum = read_f64(in);
  b.eps = read_f64(in);
  return b;
}

}  // namespace

void save_checkpoint(const Network& net, std::ostream& out) {
  out.write(kMagic, sizeof(kMagic));
  write_i32(out, net.loss_kind == LossKind::CrossEntropy ? 0 : 1);
  write_i32(out, static_cast<std::int32_t>(net.input_shape.size()));
  for (int d : net.input_shape) write_i32(out, d);
  write_i32(out, static_cast<std::int32_t>(net.nodes.size()));
  // header: kinds and shapes
  for (const auto& node : net.nodes) {
    if (const auto* d = std::get_if<DenseLayer>(&node)) {
      write_i32(out, kDense);
      write_i32(out, d->out_units());
      write_i32(out, d->in_units());
    } else if (const auto* c = std::get_if<Conv2dLayer>(&node)) {
      write_i32(out, kConv);
      write_conv_header(out, *c);
    } else if (const auto* a = std::get_if<ActivationLayer>(&node)) {
      write_i32(out, kActivation);
      write_i32(out, a->kind == Act::ReLU ? 0 : 1);
    } else if (const auto* b = std::get_if<BatchNormLayer>(&node)) {
      write_i32(out, kBatchNorm);
      write_i32(out, b->channels());
    } else if (const auto* m = std::get_if<MaskLayer>(&node)) {
      write_i32(out, kMask);
      write_i32(out, static_cast<std::int32_t>(m->gate.size()));
    } else if (std::holds_alternative<FlattenLayer>(node)) {
      write_i32(out, kFlatten);
    } else if (const auto* r = std::get_if<ResidualBlock>(&node)) {
      write_i32(out, kResidual);
      write_i32(out, r->in_channels);
      write_i32(out, r->mask_position == MaskPosition::BeforeShortcut ? 0 : 1);
      write_conv_header(out, r->conv1);
      write_conv_header(out, r->conv2);
      write_i32(out, static_cast<std::int32_t>(r->conv2_slot.size()));
      for (int s : r->conv2_slot) write_i32(out, s);
      write_i32(out, static_cast<std::int32_t>(r->shortcut_src.size()));
      for (int s : r->shortcut_src) write_i32(out, s);
    }
  }
  // payload: doubles in declaration order
  for (const auto& node : net.nodes) {
    if (const auto* d = std::get_if<DenseLayer>(&node)) {
      write_mat(out, d->weights);
      write_vec(out, d->bias);
    } else if (const auto* c = std::get_if<Conv2dLayer>(&node)) {
      write_conv_data(out, *c);
    } else if (const auto* b = std::get_if<BatchNormLayer>(&node)) {
      write_bn_data(out, *b);
    } else if (const auto* m = std::get_if<MaskLayer>(&node)) {
      write_vec(out, m->gate);
    } else if (const auto* r = std::get_if<ResidualBlock>(&node)) {
      write_conv_data(out, r->conv1);
      write_bn_data(out, r->bn1);
      write_conv_data(out, r->conv2);
      write_bn_data(out, r->bn2);
      write_vec(out, r->mask1);
      write_vec(out, r->mask2);
    }
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  save_checkpoint(net, out);
}

Network load_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw CheckpointError("bad checkpoint magic");
  Network net;
  net.loss_kind = read_i32(in) == 0 ? LossKind::CrossEntropy : LossKind::BinaryCrossEntropy;
  std::int32_t rank = read_i32(in);
  net.input_shape.resize(rank);
  for (auto& d : net.input_shape) d = read_i32(in);
  std::int32_t count = read_i32(in);
  for (std::int32_t i = 0; i < count; ++i) {
    switch (read_i32(in)) {
      case kDense: {
        DenseLayer d;
        std::int32_t out_units = read_i32(in);
        std::int32_t in_units = read_i32(in);
        d.weights.resize(out_units, in_units);
        d.bias.resize(out_units);
        net.nodes.emplace_back(std::move(d));
        break;
      }
      case kConv:
        net.nodes.emplace_back(read_conv_header(in));
        break;
      case kActivation:
        net.nodes.emplace_back(ActivationLayer{read_i32(in) == 0 ? Act::ReLU : Act::Sigmoid});
        break;
      case kBatchNorm: {
        std::int32_t c = read_i32(in);
        BatchNormLayer b;
        b.gamma.resize(c);  // sizes only; payload read below
        net.nodes.emplace_back(std::move(b));
        break;
      }
      case kMask: {
        std::int32_t c = read_i32(in);
        net.nodes.emplace_back(MaskLayer{Vec::Ones(c)});
        break;
      }
      case kFlatten:
        net.nodes.emplace_back(FlattenLayer{});
        break;
      case kResidual: {
        ResidualBlock r;
        r.in_channels = read_i32(in);
        r.mask_position = read_i32(in) == 0 ? MaskPosition::BeforeShortcut
                                            : MaskPosition::AfterShortcut;
        r.conv1 = read_conv_header(in);
        r.conv2 = read_conv_header(in);
        r.conv2_slot.resize(read_i32(in));
        for (auto& s : r.conv2_slot) s = read_i32(in);
        r.shortcut_src.resize(read_i32(in));
        for (auto& s : r.shortcut_src) s = read_i32(in);
        net.nodes.emplace_back(std::move(r));
        break;
      }
      default:
        throw CheckpointError("unknown node tag");
    }
  }
  for (auto& node : net.nodes) {
    if (auto* d = std::get_if<DenseLayer>(&node)) {
      d->weights = read_mat(in, d->weights.rows(), d->weights.cols());
      d->bias = read_vec(in, d->bias.size());
    } else if (auto* c = std::get_if<Conv2dLayer>(&node)) {
      read_conv_data(in, *c);
    } else if (auto* b = std::get_if<BatchNormLayer>(&node)) {
      *b = read_bn_data(in, static_cast<int>(b->gamma.size()));
    } else if (auto* m = std::get_if<MaskLayer>(&node)) {
      m->gate = read_vec(in, m->gate.size());
    } else if (auto* r = std::get_if<ResidualBlock>(&node)) {
      read_conv_data(in, r->conv1);
      r->bn1 = read_bn_data(in, r->conv1.n_filters());
      read_conv_data(in, r->conv2);
      r->bn2 = read_bn_data(in, r->conv2.n_filters());
      r->mask1 = read_vec(in, r->conv1.n_filters());
      r->mask2 = read_vec(in, r->mask_position == MaskPosition::BeforeShortcut
                                  ? r->conv2.n_filters()
                                  : static_cast<Eigen::Index>(r->shortcut_src.size()));
    }
  }
  return net;
}

Network load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return load_checkpoint(in);
}

}  // namespace fep
