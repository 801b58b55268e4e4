#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "emflow/gaussian.hpp"
#include "emflow/types.hpp"

namespace emflow {

/// Three-layer perceptron: in -> tanh(h) -> tanh(h) -> linear out.
/// Weights are stored out x in; batches are columns.
template <typename Scalar>
struct SmallNet {
  std::array<Mat<Scalar>, 3> weight;
  std::array<Vec<Scalar>, 3> bias;

  struct Cache {
    Mat<Scalar> input;
    Mat<Scalar> h1;
    Mat<Scalar> h2;
  };

  static SmallNet zeros(Index in, Index hidden, Index out) {
    SmallNet net;
    const std::array<Index, 4> widths{in, hidden, hidden, out};
    for (std::size_t k = 0; k < 3; ++k) {
      net.weight[k] = Mat<Scalar>::Zero(widths[k + 1], widths[k]);
      net.bias[k] = Vec<Scalar>::Zero(widths[k + 1]);
    }
    return net;
  }

  Index input_dim() const { return weight[0].cols(); }
  Index hidden_dim() const { return weight[0].rows(); }
  Index output_dim() const { return weight[2].rows(); }

  bool consistent() const {
    return weight[1].rows() == hidden_dim() && weight[1].cols() == hidden_dim() &&
           weight[2].cols() == hidden_dim() && bias[0].size() == hidden_dim() &&
           bias[1].size() == hidden_dim() && bias[2].size() == output_dim();
  }

  Mat<Scalar> forward(const Mat<Scalar>& in, Cache* cache = nullptr) const {
    Mat<Scalar> h1 = ((weight[0] * in).colwise() + bias[0]).array().tanh().matrix();
    Mat<Scalar> h2 = ((weight[1] * h1).colwise() + bias[1]).array().tanh().matrix();
    Mat<Scalar> out = (weight[2] * h2).colwise() + bias[2];
    if (cache) {
      cache->input = in;
      cache->h1 = std::move(h1);
      cache->h2 = std::move(h2);
    }
    return out;
  }

  /// Accumulates parameter gradients into `grad` and returns d loss / d input.
  Mat<Scalar> backward(const Cache& cache, const Mat<Scalar>& d_out, SmallNet& grad) const {
    grad.weight[2].noalias() += d_out * cache.h2.transpose();
    grad.bias[2] += d_out.rowwise().sum();
    Mat<Scalar> d_a2 = (weight[2].transpose() * d_out).array() * (Scalar(1) - cache.h2.array().square());
    grad.weight[1].noalias() += d_a2 * cache.h1.transpose();
    grad.bias[1] += d_a2.rowwise().sum();
    Mat<Scalar> d_a1 = (weight[1].transpose() * d_a2).array() * (Scalar(1) - cache.h1.array().square());
    grad.weight[0].noalias() += d_a1 * cache.input.transpose();
    grad.bias[0] += d_a1.rowwise().sum();
    return weight[0].transpose() * d_a1;
  }
};

/// Affine coupling: coordinates in `pass_idx` are copied, the rest are mapped
/// x -> x * exp(s(x_pass)) + t(x_pass).
template <typename Scalar>
struct CouplingLayer {
  IndexList pass_idx;
  IndexList transform_idx;
  SmallNet<Scalar> scale_net;
  SmallNet<Scalar> shift_net;

  struct Cache {
    Mat<Scalar> pass;      // copied block
    Mat<Scalar> affine;    // forward: transform input; inverse: transform output
    Mat<Scalar> scale;     // clamped s
    Mat<Scalar> exp_scale; // exp(s) forward, exp(-s) inverse
    typename SmallNet<Scalar>::Cache scale_cache;
    typename SmallNet<Scalar>::Cache shift_cache;
  };
};

template <typename Scalar>
struct FlowModel {
  Index dim = 0;
  Scalar scale_clamp = 5;
  std::vector<CouplingLayer<Scalar>> layers;

  Index depth() const { return static_cast<Index>(layers.size()); }
};

/// Values and per-sample log |det J| of a batch map. Rows are samples.
template <typename Scalar>
struct FlowResult {
  Mat<Scalar> values;
  Vec<Scalar> log_det;
};

inline Index default_hidden_width(Index p) { return std::min<Index>(256, std::max<Index>(32, 4 * p)); }

/// Even layers copy the first ceil(p/2) coordinates, odd layers the rest.
inline std::pair<IndexList, IndexList> alternating_partition(Index p, Index layer) {
  const Index head = (p + 1) / 2;
  IndexList first, second;
  for (Index j = 0; j < p; ++j) (j < head ? first : second).push_back(j);
  if (layer % 2 == 0) return {first, second};
  return {second, first};
}

namespace detail {

template <typename Scalar>
void init_hidden_layers(SmallNet<Scalar>& net, std::mt19937_64& rng) {
  for (std::size_t k = 0; k < 2; ++k) {
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(net.weight[k].cols()));
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
    for (Index i = 0; i < net.weight[k].size(); ++i) net.weight[k].data()[i] = Scalar(dist(rng));
    for (Index i = 0; i < net.bias[k].size(); ++i) net.bias[k](i) = Scalar(dist(rng));
  }
}

template <typename Scalar>
void init_output_layer(SmallNet<Scalar>& net, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (Index i = 0; i < net.weight[2].size(); ++i) net.weight[2].data()[i] = Scalar(dist(rng));
  for (Index i = 0; i < net.bias[2].size(); ++i) net.bias[2](i) = Scalar(dist(rng));
}

template <typename Scalar>
FlowModel<Scalar> build_flow(Index p, Index depth, std::uint64_t seed, Index hidden, double output_scale) {
  if (p < 2) throw std::invalid_argument("flow: dimension must be >= 2");
  if (depth < 1) throw std::invalid_argument("flow: depth must be >= 1");
  if (hidden <= 0) hidden = default_hidden_width(p);
  std::mt19937_64 rng(seed);
  FlowModel<Scalar> flow;
  flow.dim = p;
  for (Index k = 0; k < depth; ++k) {
    CouplingLayer<Scalar> layer;
    std::tie(layer.pass_idx, layer.transform_idx) = alternating_partition(p, k);
    const auto d = static_cast<Index>(layer.pass_idx.size());
    layer.scale_net = SmallNet<Scalar>::zeros(d, hidden, p - d);
    layer.shift_net = SmallNet<Scalar>::zeros(d, hidden, p - d);
    for (auto* net : {&layer.scale_net, &layer.shift_net}) {
      init_hidden_layers(*net, rng);
      if (output_scale != 0.0) init_output_layer(*net, rng, output_scale);
    }
    flow.layers.push_back(std::move(layer));
  }
  return flow;
}

}  // namespace detail

/// Fresh flow whose output layers are zero, so it starts as the identity map.
/// `hidden` <= 0 selects max(32, 4p) capped at 256.
template <typename Scalar = double>
FlowModel<Scalar> reinit_flow(Index p, Index depth, std::uint64_t seed, Index hidden = 0) {
  return detail::build_flow<Scalar>(p, depth, seed, hidden, 0.0);
}

/// Flow with random output layers (uniform in +-output_scale); a non-trivial
/// invertible map for testing and synthetic data.
template <typename Scalar = double>
FlowModel<Scalar> random_flow(Index p, Index depth, std::uint64_t seed, Index hidden = 0, double output_scale = 0.3) {
  return detail::build_flow<Scalar>(p, depth, seed, hidden, output_scale);
}

/// Visits every parameter block in a fixed order: per layer, scale net then
/// shift net, each as (W0, b0, W1, b1, W2, b2). Works on const and mutable flows.
template <typename Flow, typename Fn>
void for_each_block(Flow& flow, Fn&& fn) {
  for (std::size_t k = 0; k < flow.layers.size(); ++k) {
    auto& layer = flow.layers[k];
    for (auto* net : {&layer.scale_net, &layer.shift_net}) {
      for (std::size_t l = 0; l < 3; ++l) {
        fn(k, net->weight[l]);
        fn(k, net->bias[l]);
      }
    }
  }
}

template <typename Scalar>
FlowModel<Scalar> zeros_like(const FlowModel<Scalar>& flow) {
  FlowModel<Scalar> out = flow;
  for_each_block(out, [](std::size_t, auto& block) { block.setZero(); });
  return out;
}

template <typename Scalar>
Index parameter_count(const FlowModel<Scalar>& flow) {
  Index n = 0;
  for_each_block(flow, [&](std::size_t, const auto& block) { n += block.size(); });
  return n;
}

template <typename Scalar>
Vec<Scalar> flatten_parameters(const FlowModel<Scalar>& flow) {
  Vec<Scalar> out(parameter_count(flow));
  Index pos = 0;
  for_each_block(flow, [&](std::size_t, const auto& block) {
    out.segment(pos, block.size()) = block.reshaped();
    pos += block.size();
  });
  return out;
}

template <typename Scalar>
void assign_parameters(FlowModel<Scalar>& flow, const Vec<Scalar>& params) {
  if (params.size() != parameter_count(flow)) throw std::invalid_argument("assign_parameters: size mismatch");
  Index pos = 0;
  for_each_block(flow, [&](std::size_t, auto& block) {
    block.reshaped() = params.segment(pos, block.size());
    pos += block.size();
  });
}

namespace detail {

template <typename Scalar>
void compute_scale_shift(const CouplingLayer<Scalar>& layer, Scalar clamp, const Mat<Scalar>& pass,
                         Mat<Scalar>& scale, Mat<Scalar>& shift, typename CouplingLayer<Scalar>::Cache* cache,
                         std::size_t layer_index, const char* where) {
  const Mat<Scalar> raw = layer.scale_net.forward(pass, cache ? &cache->scale_cache : nullptr);
  scale = (clamp * (raw.array() / clamp).tanh()).matrix();
  shift = layer.shift_net.forward(pass, cache ? &cache->shift_cache : nullptr);
  if (!scale.allFinite() || !shift.allFinite()) {
    throw NumericalError(where, "non-finite scale/shift output in layer " + std::to_string(layer_index));
  }
}

}  // namespace detail

/// Column-batch forward of one coupling layer (p x B in, p x B out).
template <typename Scalar>
Mat<Scalar> layer_forward_cols(const CouplingLayer<Scalar>& layer, Scalar clamp, const Mat<Scalar>& X,
                               Vec<Scalar>& log_det, typename CouplingLayer<Scalar>::Cache* cache = nullptr,
                               std::size_t layer_index = 0) {
  const Mat<Scalar> pass = X(layer.pass_idx, Eigen::all);
  const Mat<Scalar> v = X(layer.transform_idx, Eigen::all);
  Mat<Scalar> s, t;
  detail::compute_scale_shift(layer, clamp, pass, s, t, cache, layer_index, "flow.layer_forward");
  const Mat<Scalar> es = s.array().exp().matrix();
  Mat<Scalar> Y = X;
  Y(layer.transform_idx, Eigen::all) = (v.array() * es.array() + t.array()).matrix();
  log_det = s.colwise().sum().transpose();
  if (cache) {
    cache->pass = pass;
    cache->affine = v;
    cache->scale = s;
    cache->exp_scale = es;
  }
  return Y;
}

template <typename Scalar>
Mat<Scalar> layer_inverse_cols(const CouplingLayer<Scalar>& layer, Scalar clamp, const Mat<Scalar>& Y,
                               Vec<Scalar>& log_det, typename CouplingLayer<Scalar>::Cache* cache = nullptr,
                               std::size_t layer_index = 0) {
  const Mat<Scalar> pass = Y(layer.pass_idx, Eigen::all);
  const Mat<Scalar> w = Y(layer.transform_idx, Eigen::all);
  Mat<Scalar> s, t;
  detail::compute_scale_shift(layer, clamp, pass, s, t, cache, layer_index, "flow.layer_inverse");
  const Mat<Scalar> ems = (-s.array()).exp().matrix();
  Mat<Scalar> X = Y;
  Mat<Scalar> x_tr = ((w - t).array() * ems.array()).matrix();
  X(layer.transform_idx, Eigen::all) = x_tr;
  log_det = -s.colwise().sum().transpose();
  if (cache) {
    cache->pass = pass;
    cache->affine = std::move(x_tr);
    cache->scale = s;
    cache->exp_scale = ems;
  }
  return X;
}

namespace detail {

/// Shared tail of both layer backward passes: pushes d/ds and d/dt through the
/// clamp and the two nets, adding into d/d(pass block).
template <typename Scalar>
void backprop_nets(const CouplingLayer<Scalar>& layer, Scalar clamp, const typename CouplingLayer<Scalar>::Cache& cache,
                   const Mat<Scalar>& d_scale, const Mat<Scalar>& d_shift, Mat<Scalar>& d_pass,
                   CouplingLayer<Scalar>& grad) {
  const Mat<Scalar> d_raw = (d_scale.array() * (Scalar(1) - (cache.scale.array() / clamp).square())).matrix();
  d_pass += layer.scale_net.backward(cache.scale_cache, d_raw, grad.scale_net);
  d_pass += layer.shift_net.backward(cache.shift_cache, d_shift, grad.shift_net);
}

}  // namespace detail

/// Given d loss/dY and d loss/d log_det (per column), returns d loss/dX and
/// accumulates parameter gradients into `grad`.
template <typename Scalar>
Mat<Scalar> layer_forward_backward(const CouplingLayer<Scalar>& layer, Scalar clamp,
                                   const typename CouplingLayer<Scalar>::Cache& cache, const Mat<Scalar>& dY,
                                   const Vec<Scalar>& d_log_det, CouplingLayer<Scalar>& grad) {
  const Mat<Scalar> d_ytr = dY(layer.transform_idx, Eigen::all);
  Mat<Scalar> d_scale = (d_ytr.array() * cache.affine.array() * cache.exp_scale.array()).matrix();
  d_scale.rowwise() += d_log_det.transpose();
  Mat<Scalar> d_pass = dY(layer.pass_idx, Eigen::all);
  detail::backprop_nets(layer, clamp, cache, d_scale, d_ytr, d_pass, grad);
  Mat<Scalar> dX(dY.rows(), dY.cols());
  dX(layer.pass_idx, Eigen::all) = d_pass;
  dX(layer.transform_idx, Eigen::all) = (d_ytr.array() * cache.exp_scale.array()).matrix();
  return dX;
}

template <typename Scalar>
Mat<Scalar> layer_inverse_backward(const CouplingLayer<Scalar>& layer, Scalar clamp,
                                   const typename CouplingLayer<Scalar>::Cache& cache, const Mat<Scalar>& dX,
                                   const Vec<Scalar>& d_log_det, CouplingLayer<Scalar>& grad) {
  const Mat<Scalar> d_xtr = dX(layer.transform_idx, Eigen::all);
  Mat<Scalar> d_scale = -(d_xtr.array() * cache.affine.array()).matrix();
  d_scale.rowwise() -= d_log_det.transpose();
  const Mat<Scalar> d_w = (d_xtr.array() * cache.exp_scale.array()).matrix();
  const Mat<Scalar> d_shift = -d_w;
  Mat<Scalar> d_pass = dX(layer.pass_idx, Eigen::all);
  detail::backprop_nets(layer, clamp, cache, d_scale, d_shift, d_pass, grad);
  Mat<Scalar> dY(dX.rows(), dX.cols());
  dY(layer.pass_idx, Eigen::all) = d_pass;
  dY(layer.transform_idx, Eigen::all) = d_w;
  return dY;
}

/// Per-layer caches of one batch pass, needed for backpropagation.
template <typename Scalar>
using FlowTape = std::vector<typename CouplingLayer<Scalar>::Cache>;

/// Latent -> data on a column batch.
template <typename Scalar>
Mat<Scalar> flow_forward_cols(const FlowModel<Scalar>& flow, const Mat<Scalar>& Z, Vec<Scalar>& log_det,
                              FlowTape<Scalar>* tape = nullptr) {
  if (Z.rows() != flow.dim) throw std::invalid_argument("flow_forward: dimension mismatch");
  if (tape) tape->assign(flow.layers.size(), {});
  log_det = Vec<Scalar>::Zero(Z.cols());
  Mat<Scalar> X = Z;
  Vec<Scalar> ld;
  for (std::size_t k = 0; k < flow.layers.size(); ++k) {
    X = layer_forward_cols(flow.layers[k], flow.scale_clamp, X, ld, tape ? &(*tape)[k] : nullptr, k);
    log_det += ld;
  }
  return X;
}

/// Data -> latent on a column batch; log_det is log|det d f^{-1} / dx|.
template <typename Scalar>
Mat<Scalar> flow_inverse_cols(const FlowModel<Scalar>& flow, const Mat<Scalar>& X, Vec<Scalar>& log_det,
                              FlowTape<Scalar>* tape = nullptr) {
  if (X.rows() != flow.dim) throw std::invalid_argument("flow_inverse: dimension mismatch");
  if (tape) tape->assign(flow.layers.size(), {});
  log_det = Vec<Scalar>::Zero(X.cols());
  Mat<Scalar> Z = X;
  Vec<Scalar> ld;
  for (std::size_t k = flow.layers.size(); k-- > 0;) {
    Z = layer_inverse_cols(flow.layers[k], flow.scale_clamp, Z, ld, tape ? &(*tape)[k] : nullptr, k);
    log_det += ld;
  }
  return Z;
}

template <typename Scalar>
Mat<Scalar> flow_forward_backward(const FlowModel<Scalar>& flow, const FlowTape<Scalar>& tape, Mat<Scalar> d_out,
                                  const Vec<Scalar>& d_log_det, FlowModel<Scalar>& grad) {
  for (std::size_t k = flow.layers.size(); k-- > 0;) {
    d_out = layer_forward_backward(flow.layers[k], flow.scale_clamp, tape[k], d_out, d_log_det, grad.layers[k]);
  }
  return d_out;
}

template <typename Scalar>
Mat<Scalar> flow_inverse_backward(const FlowModel<Scalar>& flow, const FlowTape<Scalar>& tape, Mat<Scalar> d_out,
                                  const Vec<Scalar>& d_log_det, FlowModel<Scalar>& grad) {
  for (std::size_t k = 0; k < flow.layers.size(); ++k) {
    d_out = layer_inverse_backward(flow.layers[k], flow.scale_clamp, tape[k], d_out, d_log_det, grad.layers[k]);
  }
  return d_out;
}

/// Single coupling layer on row-sample batches.
template <typename Scalar>
FlowResult<Scalar> layer_forward(const CouplingLayer<Scalar>& layer, const Mat<Scalar>& X, Scalar clamp = 5) {
  FlowResult<Scalar> out;
  out.values = layer_forward_cols(layer, clamp, Mat<Scalar>(X.transpose()), out.log_det).transpose();
  return out;
}

template <typename Scalar>
FlowResult<Scalar> layer_inverse(const CouplingLayer<Scalar>& layer, const Mat<Scalar>& Y, Scalar clamp = 5) {
  FlowResult<Scalar> out;
  out.values = layer_inverse_cols(layer, clamp, Mat<Scalar>(Y.transpose()), out.log_det).transpose();
  return out;
}

/// Latent -> data, rows are samples.
template <typename Scalar>
FlowResult<Scalar> flow_forward(const FlowModel<Scalar>& flow, const Mat<Scalar>& Z) {
  FlowResult<Scalar> out;
  out.values = flow_forward_cols(flow, Mat<Scalar>(Z.transpose()), out.log_det).transpose();
  return out;
}

/// Data -> latent, rows are samples.
template <typename Scalar>
FlowResult<Scalar> flow_inverse(const FlowModel<Scalar>& flow, const Mat<Scalar>& X) {
  FlowResult<Scalar> out;
  out.values = flow_inverse_cols(flow, Mat<Scalar>(X.transpose()), out.log_det).transpose();
  return out;
}

/// log p_X(x) = log N(f^{-1}(x); mu, Sigma) + log|det d f^{-1}/dx|, per row.
template <typename Scalar>
Vec<Scalar> log_likelihood(const Mat<Scalar>& X, const FlowModel<Scalar>& flow, const GaussianParams<Scalar>& base) {
  Vec<Scalar> log_det;
  const Mat<Scalar> Z = flow_inverse_cols(flow, Mat<Scalar>(X.transpose()), log_det);
  return GaussianDensity<Scalar>(base).log_density_cols(Z) + log_det;
}

/// Squared error on observed cells (mask 0) per row.
template <typename Scalar>
Vec<Scalar> reconstruction_error(const Mat<Scalar>& reconstructed, const Mat<Scalar>& current, const MaskMatrix& masks) {
  if (reconstructed.rows() != current.rows() || reconstructed.cols() != current.cols() ||
      masks.rows() != current.rows() || masks.cols() != current.cols()) {
    throw std::invalid_argument("reconstruction_error: shape mismatch");
  }
  const auto observed = (Scalar(1) - masks.template cast<Scalar>().array());
  return ((reconstructed - current).array().square() * observed).rowwise().sum().matrix();
}

/// Batch negative log-likelihood, averaged over rows.
template <typename Scalar>
Scalar loss_l1(const Mat<Scalar>& batch, const FlowModel<Scalar>& flow, const GaussianParams<Scalar>& base) {
  if (batch.rows() == 0) throw std::invalid_argument("loss_l1: empty batch");
  return -log_likelihood(batch, flow, base).mean();
}

/// Composite loss: -(1/B) sum [log p_X(x_rec) - alpha * observed squared error].
template <typename Scalar>
Scalar loss_l2(const Mat<Scalar>& reconstructed, const Mat<Scalar>& current, const MaskMatrix& masks,
               const FlowModel<Scalar>& flow, const GaussianParams<Scalar>& base, Scalar alpha) {
  if (reconstructed.rows() == 0) throw std::invalid_argument("loss_l2: empty batch");
  if (alpha < 0) throw std::invalid_argument("loss_l2: alpha must be non-negative");
  const Vec<Scalar> ll = log_likelihood(reconstructed, flow, base);
  const Vec<Scalar> rec = reconstruction_error(reconstructed, current, masks);
  return -(ll - alpha * rec).mean();
}

template <typename Scalar>
struct LossGradient {
  Scalar loss = 0;
  FlowModel<Scalar> grad;
};

/// Exact gradient of loss_l1 with respect to every flow parameter.
template <typename Scalar>
LossGradient<Scalar> l1_gradient(const FlowModel<Scalar>& flow, const GaussianParams<Scalar>& base,
                                 const Mat<Scalar>& batch) {
  const Index B = batch.rows();
  if (B == 0) throw std::invalid_argument("l1_gradient: empty batch");
  const GaussianDensity<Scalar> density(base);
  FlowTape<Scalar> tape;
  Vec<Scalar> log_det;
  const Mat<Scalar> Z = flow_inverse_cols(flow, Mat<Scalar>(batch.transpose()), log_det, &tape);

  LossGradient<Scalar> out;
  out.loss = -(density.log_density_cols(Z) + log_det).mean();
  out.grad = zeros_like(flow);
  const Mat<Scalar> dZ = density.precision_residual_cols(Z) / Scalar(B);
  const Vec<Scalar> d_ld = Vec<Scalar>::Constant(B, -Scalar(1) / Scalar(B));
  flow_inverse_backward(flow, tape, dZ, d_ld, out.grad);
  return out;
}

/// Exact gradient of loss_l2 for x_rec = f(latent). Since f^{-1}(f(z)) = z for
/// every parameter value, log p_X(f(z)) = log N(z) - log|det df/dz| and only
/// the forward log-det and the reconstruction term depend on the parameters.
template <typename Scalar>
LossGradient<Scalar> l2_gradient(const FlowModel<Scalar>& flow, const GaussianParams<Scalar>& base,
                                 const Mat<Scalar>& latent, const Mat<Scalar>& current, const MaskMatrix& masks,
                                 Scalar alpha) {
  const Index B = latent.rows();
  if (B == 0) throw std::invalid_argument("l2_gradient: empty batch");
  if (alpha < 0) throw std::invalid_argument("l2_gradient: alpha must be non-negative");
  const GaussianDensity<Scalar> density(base);
  const Mat<Scalar> Zc = latent.transpose();
  FlowTape<Scalar> tape;
  Vec<Scalar> log_det;
  const Mat<Scalar> Xrec = flow_forward_cols(flow, Zc, log_det, &tape);

  const Mat<Scalar> observed = (Scalar(1) - masks.transpose().template cast<Scalar>().array()).matrix();
  const Mat<Scalar> resid = ((Xrec - current.transpose()).array() * observed.array()).matrix();
  const Vec<Scalar> rec = resid.array().square().colwise().sum().transpose();

  LossGradient<Scalar> out;
  out.loss = (-density.log_density_cols(Zc) + log_det + alpha * rec).mean();
  out.grad = zeros_like(flow);
  const Mat<Scalar> dX = resid * (Scalar(2) * alpha / Scalar(B));
  const Vec<Scalar> d_ld = Vec<Scalar>::Constant(B, Scalar(1) / Scalar(B));
  flow_forward_backward(flow, tape, dX, d_ld, out.grad);
  return out;
}

/// Adaptive-moment optimizer state over the flattened parameter vector.
template <typename Scalar>
struct AdamState {
  Scalar learning_rate = Scalar(1e-4);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
  long long step = 0;
  Vec<Scalar> first_moment;
  Vec<Scalar> second_moment;

  static AdamState fresh(const FlowModel<Scalar>& flow, Scalar learning_rate) {
    AdamState s;
    s.learning_rate = learning_rate;
    s.first_moment = Vec<Scalar>::Zero(parameter_count(flow));
    s.second_moment = Vec<Scalar>::Zero(parameter_count(flow));
    return s;
  }
};

/// One optimizer step. Throws NumericalError naming the first layer whose
/// gradient is non-finite; in that case the flow is left untouched.
template <typename Scalar>
void apply_gradient(FlowModel<Scalar>& flow, const FlowModel<Scalar>& grad, AdamState<Scalar>& state) {
  for_each_block(grad, [](std::size_t k, const auto& block) {
    if (!block.allFinite()) {
      throw NumericalError("flow.grad_step", "non-finite gradient in layer " + std::to_string(k));
    }
  });
  const Vec<Scalar> g = flatten_parameters(grad);
  if (state.first_moment.size() != g.size()) {
    state.first_moment = Vec<Scalar>::Zero(g.size());
    state.second_moment = Vec<Scalar>::Zero(g.size());
  }
  ++state.step;
  state.first_moment = state.beta1 * state.first_moment + (Scalar(1) - state.beta1) * g;
  state.second_moment = state.beta2 * state.second_moment + (Scalar(1) - state.beta2) * g.array().square().matrix();
  const Scalar c1 = Scalar(1) - std::pow(state.beta1, Scalar(state.step));
  const Scalar c2 = Scalar(1) - std::pow(state.beta2, Scalar(state.step));
  const Vec<Scalar> update =
      (state.learning_rate * (state.first_moment.array() / c1) /
       ((state.second_moment.array() / c2).sqrt() + state.epsilon))
          .matrix();
  assign_parameters(flow, Vec<Scalar>(flatten_parameters(flow) - update));
}

template <typename Scalar>
Scalar grad_step_l1(FlowModel<Scalar>& flow, AdamState<Scalar>& state, const GaussianParams<Scalar>& base,
                    const Mat<Scalar>& batch) {
  auto lg = l1_gradient(flow, base, batch);
  if (!std::isfinite(static_cast<double>(lg.loss))) throw NumericalError("flow.grad_step", "non-finite L1 loss");
  apply_gradient(flow, lg.grad, state);
  return lg.loss;
}

template <typename Scalar>
Scalar grad_step_l2(FlowModel<Scalar>& flow, AdamState<Scalar>& state, const GaussianParams<Scalar>& base,
                    const Mat<Scalar>& latent, const Mat<Scalar>& current, const MaskMatrix& masks, Scalar alpha) {
  auto lg = l2_gradient(flow, base, latent, current, masks, alpha);
  if (!std::isfinite(static_cast<double>(lg.loss))) throw NumericalError("flow.grad_step", "non-finite L2 loss");
  apply_gradient(flow, lg.grad, state);
  return lg.loss;
}

}  // namespace emflow
