#include "fep/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fep/rng.hpp"

namespace fep {

namespace {

constexpr double kLogClamp = 1e-12;

bool is_param_node(const LayerNode& n) {
  return std::holds_alternative<DenseLayer>(n) || std::holds_alternative<Conv2dLayer>(n) ||
         std::holds_alternative<ResidualBlock>(n);
}

// ---- shape propagation ----

std::vector<int> conv_out_shape(const std::vector<int>& in, const Conv2dLayer& c) {
  if (in.size() != 3) throw ShapeError("conv input must be [C,H,W], got " + shape_string(in));
  if (in[0] != c.in_channels)
    throw ShapeError("conv expects " + std::to_string(c.in_channels) + " channels, got " +
                     std::to_string(in[0]));
  int oh = (in[1] + 2 * c.padding - c.kernel) / c.stride + 1;
  int ow = (in[2] + 2 * c.padding - c.kernel) / c.stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv output collapsed to zero size");
  return {c.n_filters(), oh, ow};
}

std::vector<int> node_out_shape(const LayerNode& node, const std::vector<int>& in) {
  if (const auto* d = std::get_if<DenseLayer>(&node)) {
    if (in.size() != 1 || in[0] != d->in_units())
      throw ShapeError("dense expects [" + std::to_string(d->in_units()) + "], got " +
                       shape_string(in));
    return {d->out_units()};
  }
  if (const auto* c = std::get_if<Conv2dLayer>(&node)) return conv_out_shape(in, *c);
  if (const auto* b = std::get_if<BatchNormLayer>(&node)) {
    if (in.empty() || in[0] != b->channels()) throw ShapeError("batchnorm channel mismatch");
    return in;
  }
  if (const auto* m = std::get_if<MaskLayer>(&node)) {
    if (in.empty() || in[0] != m->gate.size()) throw ShapeError("mask length mismatch");
    return in;
  }
  if (std::holds_alternative<FlattenLayer>(node)) {
    int n = 1;
    for (int d : in) n *= d;
    return {n};
  }
  if (const auto* r = std::get_if<ResidualBlock>(&node)) {
    if (in.size() != 3 || in[0] != r->in_channels)
      throw ShapeError("residual block channel mismatch");
    auto mid = conv_out_shape(in, r->conv1);
    auto out = conv_out_shape(mid, r->conv2);
    if (out[1] != in[1] || out[2] != in[2])
      throw ShapeError("residual block must preserve spatial size");
    return {r->out_channels(), in[1], in[2]};
  }
  return in;  // activation
}

// ---- elementwise / channel ops ----

void apply_activation(Tensor& t, Act kind) {
  if (kind == Act::ReLU)
    t.data = t.data.cwiseMax(0.0);
  else
    t.data = 1.0 / (1.0 + (-t.data.array()).exp());
}

// Multiplies each channel (dim 1) by its gate entry.
void apply_channel_gate(Tensor& t, const Vec& gate) {
  const int n = t.shape[0];
  const int c = t.shape[1];
  const Eigen::Index s = t.sample_size() / c;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) t.data.segment((i * c + j) * s, s) *= gate(j);
}

// ---- conv ----

void im2col(const Tensor& in, int sample, const Conv2dLayer& c, Mat& patches) {
  const int ch = in.shape[1], h = in.shape[2], w = in.shape[3];
  const int oh = (h + 2 * c.padding - c.kernel) / c.stride + 1;
  const int ow = (w + 2 * c.padding - c.kernel) / c.stride + 1;
  patches.setZero(ch * c.kernel * c.kernel, oh * ow);
  const double* x = in.data.data() + static_cast<Eigen::Index>(sample) * in.sample_size();
  for (int cc = 0; cc < ch; ++cc)
    for (int ki = 0; ki < c.kernel; ++ki)
      for (int kj = 0; kj < c.kernel; ++kj) {
        const int row = (cc * c.kernel + ki) * c.kernel + kj;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * c.stride + ki - c.padding;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * c.stride + kj - c.padding;
            if (ix < 0 || ix >= w) continue;
            patches(row, oy * ow + ox) = x[(cc * h + iy) * w + ix];
          }
        }
      }
}

void col2im_add(Tensor& din, int sample, const Conv2dLayer& c, const Mat& dpatches) {
  const int ch = din.shape[1], h = din.shape[2], w = din.shape[3];
  const int oh = (h + 2 * c.padding - c.kernel) / c.stride + 1;
  const int ow = (w + 2 * c.padding - c.kernel) / c.stride + 1;
  double* x = din.data.data() + static_cast<Eigen::Index>(sample) * din.sample_size();
  for (int cc = 0; cc < ch; ++cc)
    for (int ki = 0; ki < c.kernel; ++ki)
      for (int kj = 0; kj < c.kernel; ++kj) {
        const int row = (cc * c.kernel + ki) * c.kernel + kj;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * c.stride + ki - c.padding;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * c.stride + kj - c.padding;
            if (ix < 0 || ix >= w) continue;
            x[(cc * h + iy) * w + ix] += dpatches(row, oy * ow + ox);
          }
        }
      }
}

Tensor conv_forward(const Tensor& in, const Conv2dLayer& c) {
  auto out_sample = conv_out_shape({in.shape[1], in.shape[2], in.shape[3]}, c);
  Tensor out({in.shape[0], out_sample[0], out_sample[1], out_sample[2]});
  const int n = in.shape[0];
  const Eigen::Index spatial = static_cast<Eigen::Index>(out_sample[1]) * out_sample[2];
  Mat patches;
  for (int i = 0; i < n; ++i) {
    im2col(in, i, c, patches);
    Mat y = c.weight * patches;  // n_filters x (oh*ow)
    y.colwise() += c.bias;
    for (int f = 0; f < c.n_filters(); ++f)
      out.data.segment((static_cast<Eigen::Index>(i) * c.n_filters() + f) * spatial, spatial) =
          y.row(f).transpose();
  }
  return out;
}

// dW/db accumulated; returns gradient w.r.t. the input.
Tensor conv_backward(const Tensor& in, const Conv2dLayer& c, const Tensor& dout, Mat& dW,
                     Vec& db) {
  const int n = in.shape[0];
  const int nf = c.n_filters();
  const Eigen::Index spatial = dout.sample_size() / nf;
  dW.setZero(c.weight.rows(), c.weight.cols());
  db.setZero(c.bias.size());
  Tensor din(in.shape);
  Mat patches, dy(nf, spatial);
  for (int i = 0; i < n; ++i) {
    im2col(in, i, c, patches);
    for (int f = 0; f < nf; ++f)
      dy.row(f) =
          dout.data.segment((static_cast<Eigen::Index>(i) * nf + f) * spatial, spatial)
              .transpose();
    dW.noalias() += dy * patches.transpose();
    db += dy.rowwise().sum();
    Mat dpatches = c.weight.transpose() * dy;
    col2im_add(din, i, c, dpatches);
  }
  return din;
}

// ---- batch norm ----

struct BnStats {
  Vec mean, var, invstd;  // batch statistics (training mode)
};

Tensor bn_forward(const Tensor& in, const BatchNormLayer& b, bool training, BnStats* stats) {
  const int n = in.shape[0], c = in.shape[1];
  const Eigen::Index s = in.sample_size() / c;
  Vec mean(c), var(c);
  if (training) {
    mean.setZero();
    var.setZero();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) mean(j) += in.data.segment((i * c + j) * s, s).sum();
    mean /= static_cast<double>(n) * s;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j)
        var(j) += (in.data.segment((i * c + j) * s, s).array() - mean(j)).square().sum();
    var /= static_cast<double>(n) * s;
  } else {
    mean = b.running_mean;
    var = b.running_var;
  }
  Vec invstd = (var.array() + b.eps).rsqrt();
  if (stats) *stats = {mean, var, invstd};
  Tensor out(in.shape);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out.data.segment((i * c + j) * s, s) =
          (in.data.segment((i * c + j) * s, s).array() - mean(j)) * invstd(j) * b.gamma(j) +
          b.beta(j);
  return out;
}

Tensor bn_backward(const Tensor& in, const BatchNormLayer& b, const BnStats& st,
                   const Tensor& dout, Vec& dgamma, Vec& dbeta) {
  const int n = in.shape[0], c = in.shape[1];
  const Eigen::Index s = in.sample_size() / c;
  const double m = static_cast<double>(n) * s;
  dgamma.setZero(c);
  dbeta.setZero(c);
  Vec sum_dy_xhat = Vec::Zero(c), sum_dy = Vec::Zero(c);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      auto x = in.data.segment((i * c + j) * s, s).array();
      auto dy = dout.data.segment((i * c + j) * s, s).array();
      sum_dy(j) += dy.sum();
      sum_dy_xhat(j) += (dy * (x - st.mean(j)) * st.invstd(j)).sum();
    }
  dgamma = sum_dy_xhat;
  dbeta = sum_dy;
  Tensor din(in.shape);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      auto x = in.data.segment((i * c + j) * s, s).array();
      auto dy = dout.data.segment((i * c + j) * s, s).array();
      auto xhat = (x - st.mean(j)) * st.invstd(j);
      din.data.segment((i * c + j) * s, s) =
          b.gamma(j) * st.invstd(j) * (dy - sum_dy(j) / m - xhat * (sum_dy_xhat(j) / m));
    }
  return din;
}

void bn_update_running(BatchNormLayer& b, const BnStats& st) {
  b.running_mean = (1.0 - b.momentum) * b.running_mean + b.momentum * st.mean;
  b.running_var = (1.0 - b.momentum) * b.running_var + b.momentum * st.var;
}

// ---- residual block ----

struct BlockTrace {
  Tensor h1, h3, h4, g1, g3, ypre;
  BnStats bn1s, bn2s;
};

Tensor block_forward(const Tensor& x, const ResidualBlock& r, bool training, BlockTrace* tr) {
  Tensor h1 = conv_forward(x, r.conv1);
  BnStats s1;
  Tensor h2 = bn_forward(h1, r.bn1, training, &s1);
  Tensor h3 = h2;
  apply_activation(h3, Act::ReLU);
  Tensor h4 = h3;
  apply_channel_gate(h4, r.mask1);
  Tensor g1 = conv_forward(h4, r.conv2);
  BnStats s2;
  Tensor g2 = bn_forward(g1, r.bn2, training, &s2);
  Tensor g3 = g2;
  if (r.mask_position == MaskPosition::BeforeShortcut) apply_channel_gate(g3, r.mask2);

  const int n = x.shape[0];
  const Eigen::Index s = static_cast<Eigen::Index>(x.shape[2]) * x.shape[3];
  const int co = r.out_channels();
  Tensor ypre({n, co, x.shape[2], x.shape[3]});
  for (int i = 0; i < n; ++i) {
    for (size_t f = 0; f < r.conv2_slot.size(); ++f)
      ypre.data.segment((i * co + r.conv2_slot[f]) * s, s) +=
          g3.data.segment((static_cast<Eigen::Index>(i) * r.conv2_slot.size() + f) * s, s);
    for (int slot = 0; slot < co; ++slot)
      if (r.shortcut_src[slot] >= 0)
        ypre.data.segment((i * co + slot) * s, s) +=
            x.data.segment((static_cast<Eigen::Index>(i) * x.shape[1] + r.shortcut_src[slot]) * s,
                           s);
  }
  Tensor y = ypre;
  apply_activation(y, Act::ReLU);
  if (r.mask_position == MaskPosition::AfterShortcut) apply_channel_gate(y, r.mask2);
  if (tr) {
    tr->h1 = std::move(h1);
    tr->h3 = std::move(h3);
    tr->h4 = std::move(h4);
    tr->g1 = std::move(g1);
    tr->g3 = std::move(g3);
    tr->ypre = std::move(ypre);
    tr->bn1s = std::move(s1);
    tr->bn2s = std::move(s2);
  }
  return y;
}

struct BlockGrads {
  Mat dW1, dW2;
  Vec db1, db2, dg1, dbeta1, dg2, dbeta2;
};

Tensor block_backward(const Tensor& x, const ResidualBlock& r, const BlockTrace& tr,
                      Tensor dout, BlockGrads& g) {
  const int n = x.shape[0];
  const Eigen::Index s = static_cast<Eigen::Index>(x.shape[2]) * x.shape[3];
  const int co = r.out_channels();
  if (r.mask_position == MaskPosition::AfterShortcut) apply_channel_gate(dout, r.mask2);
  // through final relu
  Tensor dypre = dout;
  dypre.data = (tr.ypre.data.array() > 0.0).select(dypre.data, 0.0);
  // split into conv2 branch and shortcut branch
  Tensor dg3({n, static_cast<int>(r.conv2_slot.size()) > 0 ? static_cast<int>(r.conv2_slot.size())
                                                           : 1,
              x.shape[2], x.shape[3]});
  dg3.data.setZero();
  if (r.conv2_slot.empty()) throw std::logic_error("residual block lost all conv2 filters");
  Tensor dx(x.shape);
  for (int i = 0; i < n; ++i) {
    for (size_t f = 0; f < r.conv2_slot.size(); ++f)
      dg3.data.segment((static_cast<Eigen::Index>(i) * r.conv2_slot.size() + f) * s, s) =
          dypre.data.segment((i * co + r.conv2_slot[f]) * s, s);
    for (int slot = 0; slot < co; ++slot)
      if (r.shortcut_src[slot] >= 0)
        dx.data.segment((static_cast<Eigen::Index>(i) * x.shape[1] + r.shortcut_src[slot]) * s,
                        s) += dypre.data.segment((i * co + slot) * s, s);
  }
  if (r.mask_position == MaskPosition::BeforeShortcut) apply_channel_gate(dg3, r.mask2);
  Tensor dg1 = bn_backward(tr.g1, r.bn2, tr.bn2s, dg3, g.dg2, g.dbeta2);
  Tensor dh4 = conv_backward(tr.h4, r.conv2, dg1, g.dW2, g.db2);
  apply_channel_gate(dh4, r.mask1);
  dh4.data = (tr.h3.data.array() > 0.0).select(dh4.data, 0.0);
  Tensor dh1 = bn_backward(tr.h1, r.bn1, tr.bn1s, dh4, g.dg1, g.dbeta1);
  Tensor dx_conv = conv_backward(x, r.conv1, dh1, g.dW1, g.db1);
  dx.data += dx_conv.data;
  return dx;
}

// ---- parameter traversal ----

template <typename Fn>
void visit_param_arrays(Network& net, Fn&& fn) {
  for (auto& node : net.nodes) {
    if (auto* d = std::get_if<DenseLayer>(&node)) {
      fn(d->weights.data(), d->weights.size());
      fn(d->bias.data(), d->bias.size());
    } else if (auto* c = std::get_if<Conv2dLayer>(&node)) {
      fn(c->weight.data(), c->weight.size());
      fn(c->bias.data(), c->bias.size());
    } else if (auto* b = std::get_if<BatchNormLayer>(&node)) {
      fn(b->gamma.data(), b->gamma.size());
      fn(b->beta.data(), b->beta.size());
    } else if (auto* r = std::get_if<ResidualBlock>(&node)) {
      fn(r->conv1.weight.data(), r->conv1.weight.size());
      fn(r->conv1.bias.data(), r->conv1.bias.size());
      fn(r->bn1.gamma.data(), r->bn1.gamma.size());
      fn(r->bn1.beta.data(), r->bn1.beta.size());
      fn(r->conv2.weight.data(), r->conv2.weight.size());
      fn(r->conv2.bias.data(), r->conv2.bias.size());
      fn(r->bn2.gamma.data(), r->bn2.gamma.size());
      fn(r->bn2.beta.data(), r->bn2.beta.size());
    }
  }
}

struct FullTrace {
  std::vector<Tensor> acts;  // acts[i] = input to node i; acts.back() = output
  std::vector<BnStats> bn;   // indexed by node, standalone batch norms only
  std::vector<BlockTrace> blocks;
};

Tensor forward_impl(const Network& net, const Tensor& batch, bool training, FullTrace* tr) {
  if (batch.shape.size() != net.input_shape.size() + 1 ||
      !std::equal(net.input_shape.begin(), net.input_shape.end(), batch.shape.begin() + 1))
    throw ShapeError("batch shape " + shape_string(batch.shape) + " does not match input shape " +
                     shape_string(net.input_shape));
  if (tr) {
    tr->bn.resize(net.nodes.size());
    tr->blocks.resize(net.nodes.size());
  }
  Tensor cur = batch;
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    if (tr) tr->acts.push_back(cur);
    const auto& node = net.nodes[i];
    if (const auto* d = std::get_if<DenseLayer>(&node)) {
      if (cur.shape.size() != 2 || cur.shape[1] != d->in_units())
        throw ShapeError("dense input mismatch at node " + std::to_string(i));
      Tensor out({cur.shape[0], d->out_units()});
      out.as_matrix() = cur.as_matrix() * d->weights.transpose();
      out.as_matrix().rowwise() += d->bias.transpose();
      cur = std::move(out);
    } else if (const auto* c = std::get_if<Conv2dLayer>(&node)) {
      cur = conv_forward(cur, *c);
    } else if (const auto* a = std::get_if<ActivationLayer>(&node)) {
      apply_activation(cur, a->kind);
    } else if (const auto* b = std::get_if<BatchNormLayer>(&node)) {
      cur = bn_forward(cur, *b, training, tr ? &tr->bn[i] : nullptr);
    } else if (const auto* m = std::get_if<MaskLayer>(&node)) {
      if (cur.shape.size() < 2 || cur.shape[1] != m->gate.size())
        throw ShapeError("mask length mismatch at node " + std::to_string(i));
      apply_channel_gate(cur, m->gate);
    } else if (std::holds_alternative<FlattenLayer>(node)) {
      cur.shape = {cur.shape[0], static_cast<int>(cur.sample_size())};
    } else if (const auto* r = std::get_if<ResidualBlock>(&node)) {
      cur = block_forward(cur, *r, training, tr ? &tr->blocks[i] : nullptr);
    }
    if (!cur.all_finite()) throw NonFiniteError(static_cast<int>(i));
  }
  if (tr) tr->acts.push_back(cur);
  return cur;
}

// Loss value and gradient w.r.t. the logits for one batch (sum convention:
// caller divides by dataset size; here mean over the given batch).
double loss_and_grad(const Network& net, const Tensor& logits, const Eigen::VectorXi& labels,
                     Tensor* dlogits) {
  const int n = logits.shape[0];
  double total = 0.0;
  if (dlogits) *dlogits = Tensor(logits.shape);
  if (net.loss_kind == LossKind::CrossEntropy) {
    const int k = logits.shape[1];
    for (int i = 0; i < n; ++i) {
      Vec z = logits.data.segment(static_cast<Eigen::Index>(i) * k, k);
      Vec p = (z.array() - z.maxCoeff()).exp();
      p /= p.sum();
      total -= std::log(std::max(p(labels(i)), kLogClamp));
      if (dlogits) {
        Vec g = p;
        g(labels(i)) -= 1.0;
        dlogits->data.segment(static_cast<Eigen::Index>(i) * k, k) = g / n;
      }
    }
  } else {
    if (logits.shape[1] != 1) throw ShapeError("binary cross-entropy expects a single output");
    for (int i = 0; i < n; ++i) {
      double p = 1.0 / (1.0 + std::exp(-logits.data(i)));
      double t = labels(i) > 0 ? 1.0 : 0.0;
      total -= t * std::log(std::max(p, kLogClamp)) +
               (1.0 - t) * std::log(std::max(1.0 - p, kLogClamp));
      if (dlogits) dlogits->data(i) = (p - t) / n;
    }
  }
  return total / n;
}

// Full backward pass. Returns the flat parameter gradient.
Vec backward_impl(const Network& net, const FullTrace& tr, Tensor dout) {
  // Collect per-node gradients, then flatten in declaration order.
  std::vector<std::vector<std::pair<const double*, Eigen::Index>>> dummy;
  struct NodeGrad {
    Mat dW, dW2;
    Vec db, db2, dg, dbeta, dg2, dbeta2;
    bool dense = false, conv = false, bn = false, block = false;
  };
  std::vector<NodeGrad> grads(net.nodes.size());
  Tensor cur = std::move(dout);
  for (int i = static_cast<int>(net.nodes.size()) - 1; i >= 0; --i) {
    const auto& node = net.nodes[i];
    const Tensor& in = tr.acts[i];
    auto& g = grads[i];
    if (const auto* d = std::get_if<DenseLayer>(&node)) {
      g.dense = true;
      g.dW.noalias() = cur.as_matrix().transpose() * in.as_matrix();
      g.db = cur.as_matrix().colwise().sum().transpose();
      Tensor din(in.shape);
      din.as_matrix() = cur.as_matrix() * d->weights;
      cur = std::move(din);
    } else if (const auto* c = std::get_if<Conv2dLayer>(&node)) {
      g.conv = true;
      cur = conv_backward(in, *c, cur, g.dW, g.db);
    } else if (const auto* a = std::get_if<ActivationLayer>(&node)) {
      if (a->kind == Act::ReLU) {
        cur.data = (in.data.array() > 0.0).select(cur.data, 0.0);
      } else {
        Vec s = 1.0 / (1.0 + (-in.data.array()).exp());
        cur.data = cur.data.array() * s.array() * (1.0 - s.array());
      }
    } else if (const auto* b = std::get_if<BatchNormLayer>(&node)) {
      g.bn = true;
      cur = bn_backward(in, *b, tr.bn[i], cur, g.dg, g.dbeta);
    } else if (const auto* m = std::get_if<MaskLayer>(&node)) {
      apply_channel_gate(cur, m->gate);
    } else if (std::holds_alternative<FlattenLayer>(node)) {
      cur.shape = in.shape;
    } else if (const auto* r = std::get_if<ResidualBlock>(&node)) {
      g.block = true;
      BlockGrads bg;
      cur = block_backward(in, *r, tr.blocks[i], std::move(cur), bg);
      g.dW = std::move(bg.dW1);
      g.db = std::move(bg.db1);
      g.dg = std::move(bg.dg1);
      g.dbeta = std::move(bg.dbeta1);
      g.dW2 = std::move(bg.dW2);
      g.db2 = std::move(bg.db2);
      g.dg2 = std::move(bg.dg2);
      g.dbeta2 = std::move(bg.dbeta2);
    }
    if (!cur.all_finite()) throw NonFiniteError(i);
  }
  Vec flat(param_count(net));
  Eigen::Index off = 0;
  auto put = [&](const auto& arr) {
    flat.segment(off, arr.size()) = Eigen::Map<const Vec>(arr.data(), arr.size());
    off += arr.size();
  };
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    const auto& g = grads[i];
    if (g.dense || g.conv) {
      put(g.dW);
      put(g.db);
    } else if (g.bn) {
      put(g.dg);
      put(g.dbeta);
    } else if (g.block) {
      put(g.dW);
      put(g.db);
      put(g.dg);
      put(g.dbeta);
      put(g.dW2);
      put(g.db2);
      put(g.dg2);
      put(g.dbeta2);
    }
  }
  return flat;
}

void check_dataset(const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  if (data.inputs.shape.empty() || data.inputs.shape[0] != data.size())
    throw std::invalid_argument("dataset inputs/labels size mismatch");
}

Dataset take_batch(const Dataset& data, const std::vector<int>& idx, int begin, int count) {
  std::vector<int> shape = data.inputs.shape;
  shape[0] = count;
  Tensor in(shape);
  Eigen::VectorXi labels(count);
  const Eigen::Index s = data.inputs.sample_size();
  for (int i = 0; i < count; ++i) {
    in.data.segment(static_cast<Eigen::Index>(i) * s, s) =
        data.inputs.data.segment(static_cast<Eigen::Index>(idx[begin + i]) * s, s);
    labels(i) = data.labels(idx[begin + i]);
  }
  return {std::move(in), std::move(labels)};
}

}  // namespace

// ---- public API ----

std::vector<std::vector<int>> node_output_shapes(const Network& net) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur = net.input_shape;
  for (const auto& node : net.nodes) {
    cur = node_out_shape(node, cur);
    out.push_back(cur);
  }
  return out;
}

Tensor forward(const Network& net, const Tensor& batch) {
  return forward_impl(net, batch, false, nullptr);
}

double loss(const Network& net, const Dataset& data) {
  check_dataset(data);
  Tensor logits = forward(net, data.inputs);
  return loss_and_grad(net, logits, data.labels, nullptr);
}

double training_loss(const Network& net, const Dataset& data) {
  check_dataset(data);
  Tensor logits = forward_impl(net, data.inputs, true, nullptr);
  return loss_and_grad(net, logits, data.labels, nullptr);
}

double accuracy(const Network& net, const Dataset& data) {
  check_dataset(data);
  Tensor logits = forward(net, data.inputs);
  const int n = data.size();
  int correct = 0;
  if (net.loss_kind == LossKind::CrossEntropy) {
    const int k = logits.shape[1];
    for (int i = 0; i < n; ++i) {
      Eigen::Index arg;
      logits.data.segment(static_cast<Eigen::Index>(i) * k, k).maxCoeff(&arg);
      if (arg == data.labels(i)) ++correct;
    }
  } else {
    for (int i = 0; i < n; ++i)
      if ((logits.data(i) > 0.0) == (data.labels(i) > 0)) ++correct;
  }
  return static_cast<double>(correct) / n;
}

long param_count(const Network& net) {
  long n = 0;
  visit_param_arrays(const_cast<Network&>(net),
                     [&](double*, Eigen::Index sz) { n += sz; });
  return n;
}

Vec get_params(const Network& net) {
  Vec out(param_count(net));
  Eigen::Index off = 0;
  visit_param_arrays(const_cast<Network&>(net), [&](double* p, Eigen::Index sz) {
    out.segment(off, sz) = Eigen::Map<const Vec>(p, sz);
    off += sz;
  });
  return out;
}

void set_params(Network& net, const Vec& flat) {
  if (flat.size() != param_count(net))
    throw std::invalid_argument("set_params: size mismatch");
  Eigen::Index off = 0;
  visit_param_arrays(net, [&](double* p, Eigen::Index sz) {
    Eigen::Map<Vec>(p, sz) = flat.segment(off, sz);
    off += sz;
  });
}

Vec gradients(const Network& net, const Dataset& batch) {
  check_dataset(batch);
  FullTrace tr;
  Tensor logits = forward_impl(net, batch.inputs, true, &tr);
  Tensor dlogits;
  loss_and_grad(net, logits, batch.labels, &dlogits);
  return backward_impl(net, tr, std::move(dlogits));
}

void train(Network& net, const Dataset& data, const SgdConfig& cfg) {
  check_dataset(data);
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  std::mt19937_64 rng = make_rng(cfg.seed, "sgd-shuffle");
  const int n = data.size();
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Vec velocity = Vec::Zero(param_count(net));
  double lr = cfg.lr;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.decay_every > 0 && epoch > 0 && epoch % cfg.decay_every == 0)
      lr *= cfg.decay_factor;
    // portable Fisher-Yates so runs are reproducible across toolchains
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
      std::swap(idx[i], idx[j]);
    }
    for (int begin = 0; begin < n; begin += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - begin);
      Dataset batch = take_batch(data, idx, begin, count);
      FullTrace tr;
      Vec grad;
      try {
        Tensor logits = forward_impl(net, batch.inputs, true, &tr);
        Tensor dlogits;
        loss_and_grad(net, logits, batch.labels, &dlogits);
        grad = backward_impl(net, tr, std::move(dlogits));
      } catch (const NonFiniteError&) {
        throw DivergenceError(epoch);
      }
      velocity = cfg.momentum * velocity - lr * grad;
      Eigen::Index off = 0;
      visit_param_arrays(net, [&](double* p, Eigen::Index sz) {
        Eigen::Map<Vec>(p, sz) += velocity.segment(off, sz);
        off += sz;
      });
      // refresh batch-norm running statistics
      for (size_t i = 0; i < net.nodes.size(); ++i) {
        if (auto* b = std::get_if<BatchNormLayer>(&net.nodes[i]))
          bn_update_running(*b, tr.bn[i]);
        else if (auto* r = std::get_if<ResidualBlock>(&net.nodes[i])) {
          bn_update_running(r->bn1, tr.blocks[i].bn1s);
          bn_update_running(r->bn2, tr.blocks[i].bn2s);
        }
      }
      if (!get_params(net).allFinite()) throw DivergenceError(epoch);
    }
  }
}

// ---- masks ----

namespace {
// Index of the mask node gating the standalone layer at `node`, or -1.
int associated_mask_node(const Network& net, int node) {
  for (size_t i = node + 1; i < net.nodes.size(); ++i) {
    if (std::holds_alternative<MaskLayer>(net.nodes[i])) return static_cast<int>(i);
    if (is_param_node(net.nodes[i])) return -1;
  }
  return -1;
}
}  // namespace

std::vector<PrunableRef> prunable_layers(const Network& net) {
  std::vector<PrunableRef> out;
  for (size_t i = 0; i < net.nodes.size(); ++i) {
    const auto& node = net.nodes[i];
    if (std::holds_alternative<DenseLayer>(node) || std::holds_alternative<Conv2dLayer>(node)) {
      if (associated_mask_node(net, static_cast<int>(i)) >= 0)
        out.push_back({static_cast<int>(i), 0});
    } else if (std::holds_alternative<ResidualBlock>(node)) {
      out.push_back({static_cast<int>(i), 1});
      out.push_back({static_cast<int>(i), 2});
    }
  }
  return out;
}

int prunable_width(const Network& net, PrunableRef ref) {
  const auto& node = net.nodes.at(ref.node);
  if (ref.part == 0) {
    if (const auto* d = std::get_if<DenseLayer>(&node)) return d->out_units();
    if (const auto* c = std::get_if<Conv2dLayer>(&node)) return c->n_filters();
    throw std::invalid_argument("prunable_width: node is not a dense/conv layer");
  }
  const auto& r = std::get<ResidualBlock>(node);
  if (ref.part == 1) return r.conv1.n_filters();
  return r.mask_position == MaskPosition::BeforeShortcut ? r.conv2.n_filters()
                                                         : r.out_channels();
}

Vec get_layer_mask(const Network& net, PrunableRef ref) {
  const auto& node = net.nodes.at(ref.node);
  if (ref.part == 0) {
    int m = associated_mask_node(net, ref.node);
    if (m < 0) throw std::invalid_argument("layer has no mask");
    return std::get<MaskLayer>(net.nodes[m]).gate;
  }
  const auto& r = std::get<ResidualBlock>(node);
  return ref.part == 1 ? r.mask1 : r.mask2;
}

void set_layer_mask(Network& net, PrunableRef ref, const Vec& mask) {
  if (mask.size() != prunable_width(net, ref))
    throw std::invalid_argument("mask length " + std::to_string(mask.size()) +
                                " does not match layer width " +
                                std::to_string(prunable_width(net, ref)));
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    if (mask(i) != 0.0 && mask(i) != 1.0)
      throw std::invalid_argument("mask entries must be 0 or 1");
  auto& node = net.nodes.at(ref.node);
  if (ref.part == 0) {
    int m = associated_mask_node(net, ref.node);
    if (m < 0) throw std::invalid_argument("layer has no mask");
    std::get<MaskLayer>(net.nodes[m]).gate = mask;
    return;
  }
  auto& r = std::get<ResidualBlock>(node);
  (ref.part == 1 ? r.mask1 : r.mask2) = mask;
}

void set_layer_mask(Network& net, int prunable_index, const Vec& mask) {
  auto refs = prunable_layers(net);
  set_layer_mask(net, refs.at(prunable_index), mask);
}

void clear_masks(Network& net) {
  for (auto& node : net.nodes) {
    if (auto* m = std::get_if<MaskLayer>(&node))
      m->gate.setOnes();
    else if (auto* r = std::get_if<ResidualBlock>(&node)) {
      r->mask1.setOnes();
      r->mask2.setOnes();
    }
  }
}

// ---- builders ----

namespace {
// He-style uniform init scaled by fan-in.
double he_limit(int fan_in) { return std::sqrt(6.0 / fan_in); }
}  // namespace

DenseLayer make_dense(int out, int in, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-he_limit(in), he_limit(in));
  DenseLayer d;
  d.weights = Mat::NullaryExpr(out, in, [&]() { return dist(rng); });
  d.bias = Vec::Zero(out);
  return d;
}

Conv2dLayer make_conv(int n_filters, int in_channels, int kernel, int stride, int padding,
                      std::mt19937_64& rng) {
  const int fan_in = in_channels * kernel * kernel;
  std::uniform_real_distribution<double> dist(-he_limit(fan_in), he_limit(fan_in));
  Conv2dLayer c;
  c.weight = Mat::NullaryExpr(n_filters, fan_in, [&]() { return dist(rng); });
  c.bias = Vec::Zero(n_filters);
  c.in_channels = in_channels;
  c.kernel = kernel;
  c.stride = stride;
  c.padding = padding;
  return c;
}

BatchNormLayer make_batchnorm(int channels) {
  BatchNormLayer b;
  b.gamma = Vec::Ones(channels);
  b.beta = Vec::Zero(channels);
  b.running_mean = Vec::Zero(channels);
  b.running_var = Vec::Ones(channels);
  return b;
}

ResidualBlock make_residual_block(int channels, int kernel, MaskPosition pos,
                                  std::mt19937_64& rng) {
  ResidualBlock r;
  r.in_channels = channels;
  r.conv1 = make_conv(channels, channels, kernel, 1, kernel / 2, rng);
  r.conv2 = make_conv(channels, channels, kernel, 1, kernel / 2, rng);
  r.bn1 = make_batchnorm(channels);
  r.bn2 = make_batchnorm(channels);
  r.mask1 = Vec::Ones(channels);
  r.mask2 = Vec::Ones(channels);
  r.mask_position = pos;
  r.conv2_slot.resize(channels);
  r.shortcut_src.resize(channels);
  for (int i = 0; i < channels; ++i) r.conv2_slot[i] = r.shortcut_src[i] = i;
  return r;
}

Network make_fcn(int hidden_units, std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, "fcn-init");
  Network net;
  net.input_shape = {2};
  net.loss_kind = LossKind::BinaryCrossEntropy;
  net.nodes.emplace_back(make_dense(hidden_units, 2, rng));
  net.nodes.emplace_back(ActivationLayer{Act::ReLU});
  net.nodes.emplace_back(MaskLayer{Vec::Ones(hidden_units)});
  net.nodes.emplace_back(make_dense(1, hidden_units, rng));
  return net;
}

Network make_toy_cnn(const std::vector<int>& filters, int in_channels, int hw, int classes,
                     int kernel, std::uint64_t seed) {
  std::mt19937_64 rng = make_rng(seed, "cnn-init");
  Network net;
  net.input_shape = {in_channels, hw, hw};
  net.loss_kind = LossKind::CrossEntropy;
  int prev = in_channels;
  for (int f : filters) {
    net.nodes.emplace_back(make_conv(f, prev, kernel, 1, kernel / 2, rng));
    net.nodes.emplace_back(ActivationLayer{Act::ReLU});
    net.nodes.emplace_back(MaskLayer{Vec::Ones(f)});
    prev = f;
  }
  net.nodes.emplace_back(FlattenLayer{});
  net.nodes.emplace_back(make_dense(classes, prev * hw * hw, rng));
  return net;
}

}  // namespace fep
