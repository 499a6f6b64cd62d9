#pragma once

// Split variational-information-bottleneck model.
//
// The vehicle runs the encoder and ships (mu, sigma^2) per datum. The server
// reparameterises, decodes, evaluates the bounds, and returns the gradient of
// the objective with respect to the shipped (mu, sigma^2). The vehicle chains
// that through its encoder. Matrices hold one datum per column.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bvib/digest.hpp"
#include "bvib/error.hpp"
#include "bvib/rng.hpp"

namespace bvib::vib {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using VectorMap = Eigen::Map<Vector>;
using ConstVectorMap = Eigen::Map<const Vector>;

enum class Reparam : std::uint8_t {
  stddev,   ///< z = mu + eps * sqrt(sigma^2)
  literal,  ///< z = mu + eps * sigma^2
};

/// Sum of all layer widths, input layer included.
inline std::size_t count_neurons(std::span<const std::size_t> widths) {
  return std::accumulate(widths.begin(), widths.end(), std::size_t{0});
}

/// Fully connected net, ReLU on hidden layers, linear output. Parameters live
/// in one flat buffer: per layer, the weight matrix (out x in, column-major)
/// followed by the bias.
class DenseNet {
 public:
  struct Cache {
    std::vector<Matrix> activations;  ///< [0] is the input, [l+1] the output of layer l
    std::uint64_t generation = 0;
  };

  DenseNet() = default;

  explicit DenseNet(std::vector<std::size_t> widths) : widths_(std::move(widths)) {
    require(widths_.size() >= 2, Errc::invalid_shape, "a net needs at least input and output widths");
    for (auto w : widths_) require(w >= 1, Errc::invalid_shape, "layer widths must be positive");
    offsets_.push_back(0);
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l)
      offsets_.push_back(offsets_.back() + widths_[l + 1] * widths_[l] + widths_[l + 1]);
    params_.assign(offsets_.back(), 0.0);
  }

  /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  static DenseNet glorot(std::vector<std::size_t> widths, RandomStream& rng) {
    DenseNet net(std::move(widths));
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      const double limit = std::sqrt(6.0 / static_cast<double>(net.widths_[l] + net.widths_[l + 1]));
      auto w = net.weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = (2.0 * rng.uniform() - 1.0) * limit;
    }
    return net;
  }

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::size_t layer_count() const noexcept { return widths_.empty() ? 0 : widths_.size() - 1; }
  std::size_t input_width() const { return widths_.front(); }
  std::size_t output_width() const { return widths_.back(); }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  std::uint64_t generation() const noexcept { return generation_; }

  std::span<const double> params() const noexcept { return params_; }

  /// Mutable access invalidates outstanding forward caches.
  std::span<double> mutable_params() noexcept {
    ++generation_;
    return params_;
  }

  MatrixMap weight(std::size_t l) { return weight_view(std::span<double>(params_), l); }
  ConstMatrixMap weight(std::size_t l) const { return weight_view(std::span<const double>(params_), l); }
  VectorMap bias(std::size_t l) { return bias_view(std::span<double>(params_), l); }
  ConstVectorMap bias(std::size_t l) const { return bias_view(std::span<const double>(params_), l); }

  /// Views into a gradient buffer laid out like the parameters.
  MatrixMap weight_view(std::span<double> buf, std::size_t l) const {
    return MatrixMap(buf.data() + offsets_[l], rows(l), cols(l));
  }
  ConstMatrixMap weight_view(std::span<const double> buf, std::size_t l) const {
    return ConstMatrixMap(buf.data() + offsets_[l], rows(l), cols(l));
  }
  VectorMap bias_view(std::span<double> buf, std::size_t l) const {
    return VectorMap(buf.data() + offsets_[l] + rows(l) * cols(l), rows(l));
  }
  ConstVectorMap bias_view(std::span<const double> buf, std::size_t l) const {
    return ConstVectorMap(buf.data() + offsets_[l] + rows(l) * cols(l), rows(l));
  }

  Matrix forward(const Matrix& input, Cache* cache = nullptr) const {
    if (static_cast<std::size_t>(input.rows()) != input_width()) fail(Errc::invalid_shape, "input width mismatch");
    if (cache) {
      cache->activations.clear();
      cache->activations.push_back(input);
      cache->generation = generation_;
    }
    Matrix h = input;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Matrix next = weight(l) * h;
      next.colwise() += bias(l);
      if (l + 1 < layer_count()) next = next.cwiseMax(0.0);
      h = std::move(next);
      if (cache) cache->activations.push_back(h);
    }
    return h;
  }

  /// Accumulates parameter gradients into grad and returns d(objective)/d(input).
  Matrix backward(const Cache& cache, const Matrix& d_output, std::span<double> grad) const {
    if (cache.generation != generation_ || cache.activations.size() != widths_.size())
      fail(Errc::invalid_state, "forward cache is stale");
    if (grad.size() != params_.size()) fail(Errc::invalid_shape, "gradient buffer size mismatch");
    Matrix delta = d_output;
    for (std::size_t l = layer_count(); l-- > 0;) {
      if (l + 1 < layer_count()) delta = delta.cwiseProduct((cache.activations[l + 1].array() > 0.0).cast<double>().matrix());
      weight_view(grad, l).noalias() += delta * cache.activations[l].transpose();
      bias_view(grad, l) += delta.rowwise().sum();
      delta = weight(l).transpose() * delta;
    }
    return delta;
  }

  friend bool operator==(const DenseNet& a, const DenseNet& b) {
    return a.widths_ == b.widths_ && a.params_ == b.params_;
  }

 private:
  Eigen::Index rows(std::size_t l) const { return static_cast<Eigen::Index>(widths_[l + 1]); }
  Eigen::Index cols(std::size_t l) const { return static_cast<Eigen::Index>(widths_[l]); }

  std::vector<std::size_t> widths_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
  std::uint64_t generation_ = 0;
};

/// Encoder (vehicle side) and decoder (server side). The encoder's last layer
/// is 2K wide: K means followed by K log-variances.
struct SplitModel {
  DenseNet encoder;
  DenseNet decoder;

  std::size_t latent() const { return decoder.input_width(); }
  std::size_t classes() const { return decoder.output_width(); }

  void validate() const {
    if (encoder.output_width() != 2 * decoder.input_width())
      fail(Errc::invalid_shape, "encoder output must be twice the decoder input width");
  }

  /// encoder widths: input..hidden; latent K; decoder widths: hidden..classes.
  static SplitModel create(std::vector<std::size_t> encoder_layers, std::size_t latent,
                           std::vector<std::size_t> decoder_hidden, std::size_t classes, RandomStream& rng) {
    require(!encoder_layers.empty() && latent >= 1 && classes >= 2, Errc::invalid_shape, "bad model dimensions");
    encoder_layers.push_back(2 * latent);
    decoder_hidden.insert(decoder_hidden.begin(), latent);
    decoder_hidden.push_back(classes);
    RandomStream enc_rng = rng.split(1);
    RandomStream dec_rng = rng.split(2);
    SplitModel m{DenseNet::glorot(std::move(encoder_layers), enc_rng), DenseNet::glorot(std::move(decoder_hidden), dec_rng)};
    m.validate();
    return m;
  }

  friend bool operator==(const SplitModel&, const SplitModel&) = default;
};

struct EncoderOutput {
  Matrix mu;   ///< K x n
  Matrix var;  ///< K x n, strictly positive
};

struct VibLoss {
  double i_zy_min = 0.0;  ///< mean log q(y|z), nats, <= 0
  double i_zx_max = 0.0;  ///< mean KL(N(mu, var) || N(0, I)), nats, >= 0
  double beta = 1e-3;
  double objective = 0.0; ///< -i_zy_min + beta * i_zx_max
};

// ---------------------------------------------------------------------------
// Forward pieces

inline EncoderOutput split_heads(const Matrix& head) {
  const Eigen::Index k = head.rows() / 2;
  return {head.topRows(k), head.bottomRows(k).array().exp().matrix()};
}

inline EncoderOutput encode(const Matrix& x, const DenseNet& encoder, DenseNet::Cache* cache = nullptr) {
  if (encoder.output_width() % 2 != 0) fail(Errc::invalid_shape, "encoder output width must be even");
  return split_heads(encoder.forward(x, cache));
}

inline EncoderOutput encode(const Vector& x, const DenseNet& encoder) { return encode(Matrix(x), encoder); }

inline Matrix reparameterize(const EncoderOutput& out, const Matrix& eps, Reparam mode = Reparam::stddev) {
  if (eps.rows() != out.mu.rows() || eps.cols() != out.mu.cols() || out.var.rows() != out.mu.rows() ||
      out.var.cols() != out.mu.cols())
    fail(Errc::invalid_shape, "noise shape must match the encoder output");
  if (mode == Reparam::literal) return out.mu + eps.cwiseProduct(out.var);
  return out.mu + eps.cwiseProduct(out.var.cwiseSqrt());
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, RandomStream& rng) {
  Matrix eps(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) eps(i, j) = rng.normal();
  return eps;
}

inline Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double top = logits.col(j).maxCoeff();
    const double lse = top + std::log((logits.col(j).array() - top).exp().sum());
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

inline Matrix decode(const Matrix& z, const DenseNet& decoder, DenseNet::Cache* cache = nullptr) {
  return log_softmax(decoder.forward(z, cache));
}

inline Vector kl_to_unit_gaussian(const EncoderOutput& out) {
  return 0.5 * (out.mu.array().square() + out.var.array() - 1.0 - out.var.array().log()).colwise().sum().transpose();
}

inline std::vector<std::uint8_t> predict(const Matrix& log_probs) {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(log_probs.cols()));
  for (Eigen::Index j = 0; j < log_probs.cols(); ++j) {
    Eigen::Index arg = 0;
    log_probs.col(j).maxCoeff(&arg);
    labels[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(arg);
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Split training pass

/// What the vehicle keeps between its forward pass and the returned gradient.
struct VehiclePass {
  DenseNet::Cache cache;
  EncoderOutput out;
};

inline VehiclePass vehicle_forward(const DenseNet& encoder, const Matrix& x) {
  VehiclePass pass;
  pass.out = encode(x, encoder, &pass.cache);
  return pass;
}

/// What the server keeps between evaluating the objective and backpropagating it.
struct ServerPass {
  EncoderOutput received;
  Matrix eps;
  Matrix z;
  Matrix log_probs;
  Vector log_lik;  ///< per datum log q(y|z)
  Vector kl;       ///< per datum KL
  std::vector<std::uint8_t> labels;
  Reparam mode = Reparam::stddev;
  VibLoss loss;
  DenseNet::Cache cache;
};

inline ServerPass server_forward(const DenseNet& decoder, EncoderOutput received, Matrix eps,
                                 std::span<const std::uint8_t> labels, double beta, Reparam mode) {
  require(beta > 0.0, Errc::invalid_parameter, "beta must be positive");
  const Eigen::Index n = received.mu.cols();
  require(n > 0, Errc::invalid_parameter, "empty batch");
  if (static_cast<std::size_t>(n) != labels.size()) fail(Errc::invalid_shape, "label count mismatch");
  ServerPass s;
  s.z = reparameterize(received, eps, mode);
  s.log_probs = decode(s.z, decoder, &s.cache);
  s.log_lik.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto y = labels[static_cast<std::size_t>(j)];
    if (y >= s.log_probs.rows()) fail(Errc::invalid_shape, "label outside the decoder's classes");
    s.log_lik(j) = s.log_probs(y, j);
  }
  s.kl = kl_to_unit_gaussian(received);
  s.loss.beta = beta;
  s.loss.i_zy_min = s.log_lik.mean();
  s.loss.i_zx_max = s.kl.mean();
  s.loss.objective = -s.loss.i_zy_min + beta * s.loss.i_zx_max;
  s.received = std::move(received);
  s.eps = std::move(eps);
  s.labels.assign(labels.begin(), labels.end());
  s.mode = mode;
  return s;
}

/// Server-side gradients. grad_mu / grad_var are what travel back to vehicles.
struct ServerGradients {
  std::vector<double> decoder;
  Matrix grad_z;    ///< boundary gradient at the reparameterised latent
  Matrix grad_mu;
  Matrix grad_var;
};

inline ServerGradients server_backward(const DenseNet& decoder, const ServerPass& s) {
  const auto n = static_cast<double>(s.z.cols());
  Matrix d_logits = s.log_probs.array().exp().matrix();
  for (Eigen::Index j = 0; j < d_logits.cols(); ++j) d_logits(s.labels[static_cast<std::size_t>(j)], j) -= 1.0;
  d_logits /= n;
  ServerGradients g;
  g.decoder.assign(decoder.parameter_count(), 0.0);
  g.grad_z = decoder.backward(s.cache, d_logits, g.decoder);
  const auto& mu = s.received.mu.array();
  const auto& var = s.received.var.array();
  const double beta = s.loss.beta;
  g.grad_mu = (g.grad_z.array() + beta * mu / n).matrix();
  Eigen::ArrayXXd dz_dvar = s.eps.array();
  if (s.mode == Reparam::stddev) dz_dvar *= 0.5 / var.sqrt();
  g.grad_var = (g.grad_z.array() * dz_dvar + beta * 0.5 * (1.0 - 1.0 / var) / n).matrix();
  return g;
}

/// Vehicle side: chain the returned message gradients through var = exp(logvar).
inline std::vector<double> vehicle_backward(const DenseNet& encoder, const VehiclePass& pass, const Matrix& grad_mu,
                                            const Matrix& grad_var) {
  if (grad_mu.rows() != pass.out.mu.rows() || grad_mu.cols() != pass.out.mu.cols() || grad_var.rows() != grad_mu.rows() ||
      grad_var.cols() != grad_mu.cols())
    fail(Errc::invalid_shape, "returned gradient shape mismatch");
  Matrix d_head(2 * grad_mu.rows(), grad_mu.cols());
  d_head.topRows(grad_mu.rows()) = grad_mu;
  d_head.bottomRows(grad_mu.rows()) = grad_var.cwiseProduct(pass.out.var);
  std::vector<double> grad(encoder.parameter_count(), 0.0);
  encoder.backward(pass.cache, d_head, grad);
  return grad;
}

struct SplitGradients {
  std::vector<double> decoder;
  std::vector<double> encoder;
  Matrix boundary;  ///< gradient at the reparameterised latent
};

/// One full split step without updating parameters: forward on both sides,
/// then the server's backward followed by the vehicle's.
struct SplitStep {
  VehiclePass vehicle;
  ServerPass server;
};

inline SplitStep split_forward(const SplitModel& model, const Matrix& x, std::span<const std::uint8_t> labels,
                               const Matrix& eps, double beta, Reparam mode) {
  model.validate();
  SplitStep step;
  step.vehicle = vehicle_forward(model.encoder, x);
  step.server = server_forward(model.decoder, step.vehicle.out, eps, labels, beta, mode);
  return step;
}

inline SplitGradients split_backward(const SplitModel& model, const SplitStep& step) {
  ServerGradients sg = server_backward(model.decoder, step.server);
  SplitGradients g;
  g.encoder = vehicle_backward(model.encoder, step.vehicle, sg.grad_mu, sg.grad_var);
  g.decoder = std::move(sg.decoder);
  g.boundary = std::move(sg.grad_z);
  return g;
}

/// Objective bounds for a batch with fresh reparameterisation noise.
inline VibLoss vib_loss(const SplitModel& model, const Matrix& x, std::span<const std::uint8_t> labels, double beta,
                        RandomStream& rng, Reparam mode = Reparam::stddev) {
  require(x.cols() > 0, Errc::invalid_parameter, "empty batch");
  const Matrix eps = standard_normal(static_cast<Eigen::Index>(model.latent()), x.cols(), rng);
  return split_forward(model, x, labels, eps, beta, mode).server.loss;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<double> first;
  std::vector<double> second;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamConfig cfg = {}) : config(cfg), first(n, 0.0), second(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first.size() || params.size() != state.second.size())
    fail(Errc::invalid_shape, "Adam buffers must match the parameter count");
  ++state.step;
  const auto& c = state.config;
  const double correct1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correct2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.first[i] = c.beta1 * state.first[i] + (1.0 - c.beta1) * grads[i];
    state.second[i] = c.beta2 * state.second[i] + (1.0 - c.beta2) * grads[i] * grads[i];
    const double m_hat = state.first[i] / correct1;
    const double v_hat = state.second[i] / correct2;
    params[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

inline void adam_step(DenseNet& net, std::span<const double> grads, AdamState& state) {
  adam_step(net.mutable_params(), grads, state);
}

// ---------------------------------------------------------------------------
// Epoch statistics

struct BatchBounds {
  double i_zx_max = 0.0;
  double i_zy_min = 0.0;
};

/// Epoch means of the per-batch bounds: {I(Z,X)_max, I(Z,Y)_min}.
inline BatchBounds epoch_mutual_info(std::span<const BatchBounds> batches) {
  require(!batches.empty(), Errc::invalid_parameter, "no batches in epoch");
  BatchBounds mean;
  for (const auto& b : batches) {
    mean.i_zx_max += b.i_zx_max;
    mean.i_zy_min += b.i_zy_min;
  }
  mean.i_zx_max /= static_cast<double>(batches.size());
  mean.i_zy_min /= static_cast<double>(batches.size());
  return mean;
}

/// Percentage of positions where the predicted label equals the true one.
inline double accuracy(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) fail(Errc::invalid_shape, "label sequences differ in length");
  require(!truth.empty(), Errc::invalid_parameter, "no labels");
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) mismatches += predicted[i] != truth[i] ? 1 : 0;
  return (1.0 - static_cast<double>(mismatches) / static_cast<double>(truth.size())) * 100.0;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "BVIBCKPT", u32 version (1), then for encoder and decoder: u32 width count
// and u64 widths; then encoder parameters and decoder parameters as f64, all
// little-endian, in the flat layer order of DenseNet.

inline constexpr std::string_view kCheckpointMagic = "BVIBCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> serialize(const SplitModel& model) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  for (const DenseNet* net : {&model.encoder, &model.decoder}) {
    w.u32(static_cast<std::uint32_t>(net->widths().size()));
    for (auto width : net->widths()) w.u64(width);
  }
  for (const DenseNet* net : {&model.encoder, &model.decoder})
    for (double p : net->params()) w.f64(p);
  return w.take();
}

inline SplitModel deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.raw(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) fail(Errc::format_error, "not a model checkpoint");
  if (r.u32() != kCheckpointVersion) fail(Errc::format_error, "unsupported checkpoint version");
  std::vector<std::size_t> widths[2];
  for (auto& ws : widths) {
    const auto count = r.u32();
    if (count < 2 || count > 64) fail(Errc::format_error, "implausible layer count");
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto w = r.u64();
      if (w == 0 || w > (1u << 24)) fail(Errc::format_error, "implausible layer width");
      ws.push_back(static_cast<std::size_t>(w));
    }
  }
  SplitModel m{DenseNet(widths[0]), DenseNet(widths[1])};
  for (DenseNet* net : {&m.encoder, &m.decoder}) {
    if (r.remaining() < net->parameter_count() * 8) fail(Errc::format_error, "truncated parameters");
    for (double& p : net->mutable_params()) p = r.f64();
  }
  if (r.remaining() != 0) fail(Errc::format_error, "trailing bytes after parameters");
  m.validate();
  return m;
}

inline Digest checkpoint_digest(const SplitModel& model) { return sha256(serialize(model)); }

}  // namespace bvib::vib
