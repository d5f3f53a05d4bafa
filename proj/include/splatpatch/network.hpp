#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "splatpatch/error.hpp"
#include "splatpatch/gaussians.hpp"
#include "splatpatch/geometry.hpp"
#include "splatpatch/rasterizer.hpp"

namespace splatpatch {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

inline constexpr int kInputWidth = 11;  // position 3, DC color 3, normal 3, scale 2
inline constexpr double kLeakySlope = 0.01;
inline constexpr double kOpacityBias = 6.0;
inline constexpr double kScaleShiftClamp = 10.0;

/// Decoder heads in output order, with their per-split channel counts.
enum Head : int { kHeadPosition = 0, kHeadScale, kHeadColor, kHeadNormal, kHeadAngle, kHeadOpacity };
inline constexpr std::array<int, 6> kHeadChannels = {3, 2, 27, 3, 1, 1};
inline constexpr std::array<const char*, 6> kHeadNames = {"position", "scale", "color", "normal", "angle", "opacity"};

struct ArchConfig {
  int split_k = 4;
  int encoder_embed = 64;
  std::vector<int> encoder_blocks = {64, 128, 256, 640};
  int encoder_neighbors = 16;
  std::vector<int> decoder_hidden = {512, 512, 512, 256, 128};

  int feature_width() const { return encoder_blocks.empty() ? encoder_embed : encoder_blocks.back(); }
  int decoder_input() const { return feature_width() + kInputWidth; }

  void validate() const {
    require(split_k >= 1, ErrorKind::InvalidArgument, "split count K must be >= 1");
    require(encoder_embed > 0 && encoder_neighbors >= 1, ErrorKind::InvalidArgument, "bad encoder config");
    for (int w : encoder_blocks) require(w > 0, ErrorKind::InvalidArgument, "encoder widths must be positive");
    for (int w : decoder_hidden) require(w > 0, ErrorKind::InvalidArgument, "decoder widths must be positive");
  }

  bool operator==(const ArchConfig&) const = default;
};

template <typename T>
struct LinearLayer {
  Matrix<T> weight;  // out x in
  RowVector<T> bias;

  LinearLayer() = default;
  LinearLayer(int in, int out) : weight(Matrix<T>::Zero(out, in)), bias(RowVector<T>::Zero(out)) {}

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }

  Matrix<T> forward(const Matrix<T>& x) const {
    Matrix<T> y = x * weight.transpose();
    y.rowwise() += bias;
    return y;
  }

  bool operator==(const LinearLayer& o) const { return weight == o.weight && bias == o.bias; }
};

template <typename T>
struct EncoderBlock {
  LinearLayer<T> local;    // w_in -> w_in, shared per point
  LinearLayer<T> project;  // [center | neighborhood max] 2 w_in -> w_out
  LinearLayer<T> skip;     // w_in -> w_out; empty when widths match (identity)
  bool has_skip() const { return skip.weight.size() > 0; }
  bool operator==(const EncoderBlock&) const = default;
};

template <typename T>
struct EncoderParams {
  LinearLayer<T> embed;
  std::vector<EncoderBlock<T>> blocks;
  bool operator==(const EncoderParams&) const = default;
};

template <typename T>
struct MlpParams {
  std::vector<LinearLayer<T>> layers;
  bool operator==(const MlpParams&) const = default;
};

template <typename T>
struct DecoderParams {
  std::array<MlpParams<T>, 6> heads;
  bool operator==(const DecoderParams&) const = default;
};

template <typename T>
struct ModuleParams {
  ArchConfig arch;
  EncoderParams<T> encoder;
  DecoderParams<T> decoders;
  bool operator==(const ModuleParams&) const = default;
};

/// Calls f(tensor) for every weight matrix and bias vector in a fixed order.
template <class Params, class F>
void visit_tensors(Params& p, F&& f) {
  auto layer = [&](auto& l) {
    f(l.weight);
    f(l.bias);
  };
  layer(p.encoder.embed);
  for (auto& b : p.encoder.blocks) {
    layer(b.local);
    layer(b.project);
    if (b.has_skip()) layer(b.skip);
  }
  for (auto& head : p.decoders.heads)
    for (auto& l : head.layers) layer(l);
}

template <typename T>
std::vector<std::span<T>> tensor_spans(ModuleParams<T>& p) {
  std::vector<std::span<T>> out;
  visit_tensors(p, [&](auto& t) { out.emplace_back(t.data(), static_cast<std::size_t>(t.size())); });
  return out;
}

template <typename T>
std::size_t parameter_count(const ModuleParams<T>& p) {
  std::size_t n = 0;
  visit_tensors(p, [&](const auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

template <typename T>
ModuleParams<T> zeros_like(const ModuleParams<T>& p) {
  ModuleParams<T> z = p;
  visit_tensors(z, [](auto& t) { t.setZero(); });
  return z;
}

template <typename U, typename T>
ModuleParams<U> cast_params(const ModuleParams<T>& p) {
  ModuleParams<U> out;
  out.arch = p.arch;
  auto cast_layer = [](const LinearLayer<T>& l) {
    LinearLayer<U> r;
    r.weight = l.weight.template cast<U>();
    r.bias = l.bias.template cast<U>();
    return r;
  };
  out.encoder.embed = cast_layer(p.encoder.embed);
  for (const auto& b : p.encoder.blocks)
    out.encoder.blocks.push_back({cast_layer(b.local), cast_layer(b.project), cast_layer(b.skip)});
  for (std::size_t h = 0; h < 6; ++h)
    for (const auto& l : p.decoders.heads[h].layers) out.decoders.heads[h].layers.push_back(cast_layer(l));
  return out;
}

namespace detail {

template <typename T>
void kaiming_uniform(LinearLayer<T>& l, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) * l.in()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = static_cast<T>(dist(rng));
  l.bias.setZero();
}

template <typename T>
void leaky_inplace(Matrix<T>& x) {
  x = x.unaryExpr([](T v) { return v > T(0) ? v : T(kLeakySlope) * v; });
}

template <typename T>
Matrix<T> leaky(const Matrix<T>& x) {
  Matrix<T> y = x;
  leaky_inplace(y);
  return y;
}

/// grad * leaky'(pre)
template <typename T>
Matrix<T> leaky_backward(const Matrix<T>& grad, const Matrix<T>& pre) {
  return grad.binaryExpr(pre, [](T g, T p) { return p > T(0) ? g : T(kLeakySlope) * g; });
}

template <typename T>
void accumulate_layer_grads(LinearLayer<T>& dst, const Matrix<T>& grad_out, const Matrix<T>& input) {
  dst.weight.noalias() += grad_out.transpose() * input;
  dst.bias += grad_out.colwise().sum();
}

}  // namespace detail

/// Fresh module: Kaiming-uniform hidden layers, zero final decoder layers so
/// the initial prediction is the geometric initialization replicated K times.
template <typename T>
ModuleParams<T> make_module(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  ModuleParams<T> p;
  p.arch = arch;
  p.encoder.embed = LinearLayer<T>(kInputWidth, arch.encoder_embed);
  detail::kaiming_uniform(p.encoder.embed, rng);
  int width = arch.encoder_embed;
  for (int out : arch.encoder_blocks) {
    EncoderBlock<T> b{LinearLayer<T>(width, width), LinearLayer<T>(2 * width, out), {}};
    detail::kaiming_uniform(b.local, rng);
    detail::kaiming_uniform(b.project, rng);
    if (out != width) {
      b.skip = LinearLayer<T>(width, out);
      detail::kaiming_uniform(b.skip, rng);
    }
    p.encoder.blocks.push_back(std::move(b));
    width = out;
  }
  for (int h = 0; h < 6; ++h) {
    int in = arch.decoder_input();
    for (int hidden : arch.decoder_hidden) {
      LinearLayer<T> l(in, hidden);
      detail::kaiming_uniform(l, rng);
      p.decoders.heads[h].layers.push_back(std::move(l));
      in = hidden;
    }
    p.decoders.heads[h].layers.emplace_back(in, arch.split_k * kHeadChannels[h]);
  }
  return p;
}

/// N x 11 per-point inputs (position, DC color, normal, scale) of an initialized set.
template <typename T>
Matrix<T> module_inputs(const GaussianSet<T>& init) {
  Matrix<T> x(static_cast<Eigen::Index>(init.size()), kInputWidth);
  for (std::size_t i = 0; i < init.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x.template block<1, 3>(r, 0) = init.positions[i].transpose();
    x.template block<1, 3>(r, 3) = init.sh[i].template head<3>().transpose();
    x.template block<1, 3>(r, 6) = init.normals[i].transpose();
    x.template block<1, 2>(r, 9) = init.scales[i].transpose();
  }
  return x;
}

template <typename T>
struct EncoderCache {
  Matrix<T> input;
  Matrix<T> embed_pre;
  std::vector<Matrix<T>> block_in;  // h fed to each block
  std::vector<Matrix<T>> local_pre, local_out, concat, out_pre;
  std::vector<std::vector<std::uint32_t>> argmax;  // N x w_in source point per channel
  Matrix<T> features;
};

template <typename T>
EncoderCache<T> encode_with_cache(const EncoderParams<T>& p, const Matrix<T>& inputs, const NeighborTable& nbrs) {
  require(inputs.cols() == p.embed.in(), ErrorKind::InvalidArgument,
          "encoder expects " + std::to_string(p.embed.in()) + " input channels, got " +
              std::to_string(inputs.cols()));
  require(nbrs.size() == static_cast<std::size_t>(inputs.rows()), ErrorKind::InvalidArgument,
          "neighbor table does not match the point count");
  const auto n = inputs.rows();
  EncoderCache<T> c;
  c.input = inputs;
  c.embed_pre = p.embed.forward(inputs);
  Matrix<T> h = detail::leaky(c.embed_pre);
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const auto& blk = p.blocks[b];
    const bool last = b + 1 == p.blocks.size();
    const auto w = h.cols();
    c.block_in.push_back(h);
    c.local_pre.push_back(blk.local.forward(h));
    Matrix<T> u = detail::leaky(c.local_pre.back());
    Matrix<T> z(n, 2 * w);
    z.leftCols(w) = u;
    std::vector<std::uint32_t> arg(static_cast<std::size_t>(n * w));
    for (Eigen::Index i = 0; i < n; ++i) {
      const std::uint32_t* row = nbrs.row(static_cast<std::size_t>(i));
      for (Eigen::Index ch = 0; ch < w; ++ch) {
        std::uint32_t best = row[0];
        T value = u(best, ch);
        for (std::size_t j = 1; j < nbrs.k; ++j) {
          const T candidate = u(row[j], ch);
          if (candidate > value) {
            value = candidate;
            best = row[j];
          }
        }
        z(i, w + ch) = value;
        arg[static_cast<std::size_t>(i * w + ch)] = best;
      }
    }
    c.local_out.push_back(std::move(u));
    c.argmax.push_back(std::move(arg));
    Matrix<T> o = blk.project.forward(z);
    if (blk.has_skip())
      o.noalias() += h * blk.skip.weight.transpose();
    else
      o += h;
    c.concat.push_back(std::move(z));
    c.out_pre.push_back(o);
    h = last ? o : detail::leaky(o);
  }
  c.features = std::move(h);
  return c;
}

/// Per-point local features (N x feature_width).
template <typename T>
Matrix<T> encode(const EncoderParams<T>& p, const Matrix<T>& inputs, const NeighborTable& nbrs) {
  return encode_with_cache(p, inputs, nbrs).features;
}

/// Gradient of the encoder; returns d inputs and accumulates into grads.
template <typename T>
Matrix<T> encode_backward(const EncoderParams<T>& p, const EncoderCache<T>& c, const Matrix<T>& d_features,
                          EncoderParams<T>& grads) {
  Matrix<T> dh = d_features;
  for (std::size_t bi = p.blocks.size(); bi-- > 0;) {
    const auto& blk = p.blocks[bi];
    auto& gblk = grads.blocks[bi];
    const bool last = bi + 1 == p.blocks.size();
    const Matrix<T> d_out = last ? dh : detail::leaky_backward(dh, c.out_pre[bi]);
    const Matrix<T>& h = c.block_in[bi];
    const auto n = h.rows(), w = h.cols();
    detail::accumulate_layer_grads(gblk.project, d_out, c.concat[bi]);
    const Matrix<T> dz = d_out * blk.project.weight;
    Matrix<T> dh_prev;
    if (blk.has_skip()) {
      gblk.skip.weight.noalias() += d_out.transpose() * h;
      dh_prev = d_out * blk.skip.weight;
    } else {
      dh_prev = d_out;
    }
    Matrix<T> du = dz.leftCols(w);
    const auto& arg = c.argmax[bi];
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index ch = 0; ch < w; ++ch) du(arg[static_cast<std::size_t>(i * w + ch)], ch) += dz(i, w + ch);
    const Matrix<T> d_local = detail::leaky_backward(du, c.local_pre[bi]);
    detail::accumulate_layer_grads(gblk.local, d_local, h);
    dh_prev.noalias() += d_local * blk.local.weight;
    dh = std::move(dh_prev);
  }
  const Matrix<T> d_embed = detail::leaky_backward(dh, c.embed_pre);
  detail::accumulate_layer_grads(grads.embed, d_embed, c.input);
  return d_embed * p.embed.weight;
}

template <typename T>
struct MlpCache {
  std::vector<Matrix<T>> inputs;  // input to each layer
  std::vector<Matrix<T>> pre;     // pre-activation of each hidden layer
  Matrix<T> output;
};

template <typename T>
MlpCache<T> mlp_forward(const MlpParams<T>& p, const Matrix<T>& x) {
  MlpCache<T> c;
  Matrix<T> a = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    c.inputs.push_back(a);
    Matrix<T> z = p.layers[l].forward(a);
    if (l + 1 == p.layers.size()) {
      c.output = std::move(z);
    } else {
      a = detail::leaky(z);
      c.pre.push_back(std::move(z));
    }
  }
  return c;
}

template <typename T>
Matrix<T> mlp_backward(const MlpParams<T>& p, const MlpCache<T>& c, const Matrix<T>& d_out, MlpParams<T>& grads) {
  Matrix<T> d = d_out;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    if (l + 1 != p.layers.size()) d = detail::leaky_backward(d, c.pre[l]);
    detail::accumulate_layer_grads(grads.layers[l], d, c.inputs[l]);
    d = d * p.layers[l].weight;
  }
  return d;
}

/// Decoder input rows: [features | position, DC color, normal, scale].
template <typename T>
Matrix<T> decoder_inputs(const Matrix<T>& features, const Matrix<T>& inputs) {
  Matrix<T> d(features.rows(), features.cols() + inputs.cols());
  d << features, inputs;
  return d;
}

/// One splitting decoder: N x (K*c) MLP output reshaped row-major to (N*K) x c,
/// so rows jK .. jK+K-1 hold the K shifts of point j.
template <typename T>
Matrix<T> split_decode(const MlpParams<T>& head, const Matrix<T>& features, const Matrix<T>& inputs, int k,
                       int channels) {
  require(!head.layers.empty(), ErrorKind::InvalidArgument, "decoder has no layers");
  require(features.cols() + inputs.cols() == head.layers.front().in(), ErrorKind::InvalidArgument,
          "decoder expects " + std::to_string(head.layers.front().in()) + " input channels, got " +
              std::to_string(features.cols() + inputs.cols()));
  require(head.layers.back().out() == k * channels, ErrorKind::InvalidArgument, "decoder output width != K*c");
  Matrix<T> out = mlp_forward(head, decoder_inputs(features, inputs)).output;
  return Eigen::Map<Matrix<T>>(out.data(), out.rows() * k, channels);
}

template <typename T>
struct ForwardCache {
  Matrix<T> inputs;
  EncoderCache<T> encoder;
  Matrix<T> decoder_in;
  std::array<MlpCache<T>, 6> heads;
  std::vector<T> normal_len;  // |base + shift| per output row (0 when the base normal was kept)
};

template <typename T>
struct Prediction {
  GaussianSet<T> gaussians;  // normalized, K*N rows
  ForwardCache<T> cache;
};

namespace detail {
template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}
}  // namespace detail

template <typename T>
Prediction<T> predict_with_cache(const ModuleParams<T>& m, const GaussianSet<T>& init, const NeighborTable& nbrs) {
  require(init.space == SpaceTag::Normalized, ErrorKind::InvalidState, "prediction expects a normalized set");
  require(init.congruent(), ErrorKind::ShapeError, "initial gaussian arrays differ in length");
  const int k = m.arch.split_k;
  const std::size_t n = init.size();
  Prediction<T> pred;
  auto& c = pred.cache;
  c.inputs = module_inputs(init);
  c.encoder = encode_with_cache(m.encoder, c.inputs, nbrs);
  c.decoder_in = decoder_inputs(c.encoder.features, c.inputs);
  for (int h = 0; h < 6; ++h) {
    require(m.decoders.heads[h].layers.front().in() == c.decoder_in.cols(), ErrorKind::InvalidArgument,
            std::string("decoder ") + kHeadNames[h] + " input width mismatch");
    require(m.decoders.heads[h].layers.back().out() == k * kHeadChannels[h], ErrorKind::InvalidArgument,
            std::string("decoder ") + kHeadNames[h] + " output width != K*c");
    c.heads[h] = mlp_forward(m.decoders.heads[h], c.decoder_in);
  }
  auto& g = pred.gaussians;
  g.space = SpaceTag::Normalized;
  g.resize(n * k);
  c.normal_len.assign(n * k, T(0));
  const T clamp_s = T(kScaleShiftClamp);
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    for (int s = 0; s < k; ++s) {
      const std::size_t r = j * k + s;
      const auto& dx = c.heads[kHeadPosition].output;
      const auto& ds = c.heads[kHeadScale].output;
      const auto& dc = c.heads[kHeadColor].output;
      const auto& dn = c.heads[kHeadNormal].output;
      const auto& da = c.heads[kHeadAngle].output;
      const auto& dop = c.heads[kHeadOpacity].output;
      g.positions[r] = init.positions[j] + dx.template block<1, 3>(row, 3 * s).transpose();
      for (int e = 0; e < 2; ++e)
        g.scales[r][e] = init.scales[j][e] * std::exp(std::clamp(ds(row, 2 * s + e), -clamp_s, clamp_s));
      g.sh[r] = init.sh[j] + dc.block(row, 27 * s, 1, 27).transpose();
      const Vec3<T> raw = init.normals[j] + dn.template block<1, 3>(row, 3 * s).transpose();
      const T len = raw.norm();
      if (len < T(1e-8)) {
        g.normals[r] = init.normals[j];
      } else {
        g.normals[r] = raw / len;
        c.normal_len[r] = len;
      }
      g.angles[r] = init.angles[j] + da(row, s);
      g.opacities[r] = detail::sigmoid(dop(row, s) + T(kOpacityBias));
    }
  }
  return pred;
}

template <typename T>
GaussianSet<T> predict_gaussians(const ModuleParams<T>& m, const GaussianSet<T>& init, const NeighborTable& nbrs) {
  return predict_with_cache(m, init, nbrs).gaussians;
}

/// Convenience overload building the encoder neighborhoods from an index over
/// the initial positions.
template <typename T>
GaussianSet<T> predict_gaussians(const ModuleParams<T>& m, const GaussianSet<T>& init, const NeighborIndex& index) {
  return predict_gaussians(m, init, neighbor_table(index, static_cast<std::size_t>(m.arch.encoder_neighbors)));
}

/// Gradients reaching the initial per-point fields.
template <typename T>
struct InitGradients {
  std::vector<Vec3<T>> positions;
  std::vector<Vec3<T>> dc_colors;
  std::vector<Vec3<T>> normals;
  std::vector<Vec2<T>> scales;
  std::vector<T> angles;
};

template <typename T>
struct ModuleGradients {
  ModuleParams<T> params;
  InitGradients<T> init;
};

template <typename T>
ModuleGradients<T> backward(const ModuleParams<T>& m, const GaussianSet<T>& init, const Prediction<T>& pred,
                            const GaussianGradients<T>& grads) {
  const int k = m.arch.split_k;
  const std::size_t n = init.size();
  require(grads.size() == n * k && pred.gaussians.size() == n * k, ErrorKind::InvalidArgument,
          "gradient rows (" + std::to_string(grads.size()) + ") != K*N (" + std::to_string(n * k) + ")");
  const auto& c = pred.cache;
  const auto& g = pred.gaussians;
  ModuleGradients<T> out{zeros_like(m), {}};
  auto& ig = out.init;
  ig.positions.assign(n, Vec3<T>::Zero());
  ig.dc_colors.assign(n, Vec3<T>::Zero());
  ig.normals.assign(n, Vec3<T>::Zero());
  ig.scales.assign(n, Vec2<T>::Zero());
  ig.angles.assign(n, T(0));

  std::array<Matrix<T>, 6> d_heads;
  for (int h = 0; h < 6; ++h) d_heads[h] = Matrix<T>::Zero(static_cast<Eigen::Index>(n), k * kHeadChannels[h]);
  const T clamp_s = T(kScaleShiftClamp);
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    for (int s = 0; s < k; ++s) {
      const std::size_t r = j * k + s;
      d_heads[kHeadPosition].template block<1, 3>(row, 3 * s) = grads.positions[r].transpose();
      ig.positions[j] += grads.positions[r];
      for (int e = 0; e < 2; ++e) {
        const T shift = c.heads[kHeadScale].output(row, 2 * s + e);
        const T factor = std::exp(std::clamp(shift, -clamp_s, clamp_s));
        if (shift > -clamp_s && shift < clamp_s)
          d_heads[kHeadScale](row, 2 * s + e) = grads.scales[r][e] * g.scales[r][e];
        ig.scales[j][e] += grads.scales[r][e] * factor;
      }
      d_heads[kHeadColor].block(row, 27 * s, 1, 27) = grads.sh[r].transpose();
      ig.dc_colors[j] += grads.sh[r].template head<3>();
      if (c.normal_len[r] > T(0)) {
        const Vec3<T>& nh = g.normals[r];
        const Vec3<T> d_raw = (grads.normals[r] - grads.normals[r].dot(nh) * nh) / c.normal_len[r];
        d_heads[kHeadNormal].template block<1, 3>(row, 3 * s) = d_raw.transpose();
        ig.normals[j] += d_raw;
      } else {
        ig.normals[j] += grads.normals[r];
      }
      d_heads[kHeadAngle](row, s) = grads.angles[r];
      ig.angles[j] += grads.angles[r];
      const T o = g.opacities[r];
      d_heads[kHeadOpacity](row, s) = grads.opacities[r] * o * (T(1) - o);
    }
  }
  Matrix<T> d_decoder_in = Matrix<T>::Zero(c.decoder_in.rows(), c.decoder_in.cols());
  for (int h = 0; h < 6; ++h)
    d_decoder_in += mlp_backward(m.decoders.heads[h], c.heads[h], d_heads[h], out.params.decoders.heads[h]);
  const auto fw = c.encoder.features.cols();
  Matrix<T> d_inputs = d_decoder_in.rightCols(kInputWidth);
  d_inputs += encode_backward(m.encoder, c.encoder, Matrix<T>(d_decoder_in.leftCols(fw)), out.params.encoder);
  for (std::size_t j = 0; j < n; ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    ig.positions[j] += d_inputs.template block<1, 3>(row, 0).transpose();
    ig.dc_colors[j] += d_inputs.template block<1, 3>(row, 3).transpose();
    ig.normals[j] += d_inputs.template block<1, 3>(row, 6).transpose();
    ig.scales[j] += d_inputs.template block<1, 2>(row, 9).transpose();
  }
  return out;
}

/// Stateless variant: recomputes the forward pass first.
template <typename T>
ModuleGradients<T> backward(const ModuleParams<T>& m, const GaussianSet<T>& init, const NeighborTable& nbrs,
                            const GaussianGradients<T>& grads) {
  return backward(m, init, predict_with_cache(m, init, nbrs), grads);
}

template <typename T>
struct AdamState {
  ModuleParams<T> first, second;
  std::uint64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(const ModuleParams<T>& like, double learning_rate)
      : first(zeros_like(like)), second(zeros_like(like)), lr(learning_rate) {}
};

/// Bias-corrected Adam update. Non-finite gradients reject the step and leave
/// parameters and state untouched.
template <typename T>
void adam_step(AdamState<T>& state, ModuleParams<T>& params, ModuleParams<T>& grads) {
  auto p = tensor_spans(params);
  auto g = tensor_spans(grads);
  auto m1 = tensor_spans(state.first);
  auto m2 = tensor_spans(state.second);
  require(p.size() == g.size() && p.size() == m1.size() && p.size() == m2.size(), ErrorKind::InvalidArgument,
          "adam: parameter, gradient and moment tensors are not congruent");
  for (std::size_t t = 0; t < p.size(); ++t) {
    require(p[t].size() == g[t].size() && p[t].size() == m1[t].size() && p[t].size() == m2[t].size(),
            ErrorKind::InvalidArgument, "adam: tensor " + std::to_string(t) + " shape mismatch");
    for (T v : g[t]) require(std::isfinite(v), ErrorKind::NonFiniteGradient, "gradient contains non-finite values");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  const T b1 = T(state.beta1), b2 = T(state.beta2);
  const T step_size = T(state.lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  const T eps = T(state.eps);
  for (std::size_t t = 0; t < p.size(); ++t) {
    for (std::size_t i = 0; i < p[t].size(); ++i) {
      const T gi = g[t][i];
      m1[t][i] = b1 * m1[t][i] + (T(1) - b1) * gi;
      m2[t][i] = b2 * m2[t][i] + (T(1) - b2) * gi * gi;
      p[t][i] -= step_size * m1[t][i] / (std::sqrt(m2[t][i]) * inv_sqrt_bc2 + eps);
    }
  }
}

}  // namespace splatpatch
