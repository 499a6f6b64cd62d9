#include <array>
#include <cmath>

#include <gtest/gtest.h>

#include "bvib/vib.hpp"
#include "oracles.hpp"

using namespace bvib;
using namespace bvib::vib;

namespace {

struct Problem {
  SplitModel model;
  Matrix x;
  std::vector<std::uint8_t> labels;
  Matrix eps;
};

Problem make_problem(std::vector<std::size_t> enc, std::vector<std::size_t> dec_hidden, std::size_t latent,
                     std::size_t classes, std::size_t n, std::uint64_t seed) {
  RandomStream rng(seed);
  Problem p;
  const std::size_t in = enc.front();
  enc.erase(enc.begin());
  std::vector<std::size_t> layers{in};
  layers.insert(layers.end(), enc.begin(), enc.end());
  p.model = SplitModel::create(layers, latent, dec_hidden, classes, rng);
  // small random biases so no unit sits exactly at a ReLU kink
  for (DenseNet* net : {&p.model.encoder, &p.model.decoder}) {
    auto params = net->mutable_params();
    for (std::size_t l = 0; l < net->layer_count(); ++l) {
      auto b = net->bias_view(params, l);
      for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.1 * rng.normal();
    }
  }
  p.x = standard_normal(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(n), rng);
  for (std::size_t j = 0; j < n; ++j) p.labels.push_back(static_cast<std::uint8_t>(rng.below(classes)));
  p.eps = standard_normal(static_cast<Eigen::Index>(latent), static_cast<Eigen::Index>(n), rng);
  return p;
}

double objective(const Problem& p, double beta, Reparam mode) {
  return split_forward(p.model, p.x, p.labels, p.eps, beta, mode).server.loss.objective;
}

std::vector<std::vector<double>> columns(const Matrix& m) {
  std::vector<std::vector<double>> out;
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.emplace_back(m.col(j).data(), m.col(j).data() + m.rows());
  return out;
}

}  // namespace

TEST(Vib, NeuronCounts) {
  const std::array<std::size_t, 3> enc{784, 1024, 512};
  const std::array<std::size_t, 3> dec{512, 784, 10};
  EXPECT_EQ(count_neurons(enc), 2320u);
  EXPECT_EQ(count_neurons(dec), 1306u);
  EXPECT_EQ(count_neurons(enc) + count_neurons(dec), 3626u);
}

TEST(Vib, ZeroNetEncodesUnitGaussian) {
  DenseNet enc({5, 4, 6});
  const auto out = encode(Matrix(Matrix::Random(5, 1)), enc);
  EXPECT_EQ(out.mu.rows(), 3);
  EXPECT_EQ(out.var.rows(), 3);
  EXPECT_TRUE(out.mu.isZero());
  EXPECT_TRUE(out.var.isOnes());
  EXPECT_THROW(encode(Matrix(Matrix::Random(4, 1)), enc), Error);
  try {
    encode(Matrix(Matrix::Random(4, 1)), enc);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_shape);
  }
}

TEST(Vib, RandomNetsGiveFinitePositiveOutputs) {
  RandomStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = DenseNet::glorot({8, 12, 10}, rng);
    const auto out = encode(standard_normal(8, 16, rng), net);
    EXPECT_TRUE(out.mu.allFinite());
    EXPECT_TRUE(out.var.allFinite());
    EXPECT_GT(out.var.minCoeff(), 0.0);
  }
}

TEST(Vib, Reparameterize) {
  EncoderOutput out{Matrix::Constant(3, 2, 0.7), Matrix::Constant(3, 2, 2.5)};
  EXPECT_EQ(reparameterize(out, Matrix::Zero(3, 2), Reparam::stddev), out.mu);
  EXPECT_EQ(reparameterize(out, Matrix::Zero(3, 2), Reparam::literal), out.mu);
  EncoderOutput unit{Matrix::Zero(1, 1), Matrix::Ones(1, 1)};
  EXPECT_EQ(reparameterize(unit, Matrix::Constant(1, 1, 1.5), Reparam::stddev)(0, 0), 1.5);
  EXPECT_EQ(reparameterize(unit, Matrix::Constant(1, 1, 1.5), Reparam::literal)(0, 0), 1.5);
  EXPECT_THROW(reparameterize(out, Matrix::Zero(2, 2)), Error);

  RandomStream rng(4);
  const int n = 100000;
  EncoderOutput wide{Matrix::Zero(1, n), Matrix::Constant(1, n, 4.0)};
  const Matrix z = reparameterize(wide, standard_normal(1, n, rng));
  const double mean = z.mean();
  const double var = (z.array() - mean).square().sum() / (n - 1);
  // sample variance of N(0, 4): sd of the estimate is 4 sqrt(2/n)
  EXPECT_NEAR(var, 4.0, 3.0 * 4.0 * std::sqrt(2.0 / n));
}

TEST(Vib, DecodeNormalised) {
  DenseNet zero({4, 10});
  const Matrix lp = decode(Matrix::Random(4, 3), zero);
  EXPECT_TRUE(lp.isApproxToConstant(-std::log(10.0), 1e-15));
  RandomStream rng(5);
  const auto net = DenseNet::glorot({4, 7, 6}, rng);
  const Matrix z = standard_normal(4, 20, rng);
  const Matrix out = decode(z, net);
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    EXPECT_LE(out.col(j).maxCoeff(), 0.0);
    EXPECT_NEAR(out.col(j).array().exp().sum(), 1.0, 1e-9);
  }
  Matrix logits = net.forward(z);
  Matrix shifted = logits.array() + 17.0;
  EXPECT_EQ(predict(log_softmax(logits)), predict(log_softmax(shifted)));
  EXPECT_THROW(decode(Matrix::Zero(3, 1), net), Error);
}

TEST(Vib, KlClosedForm) {
  EncoderOutput out{Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
  EXPECT_DOUBLE_EQ(kl_to_unit_gaussian(out)(0), 0.5);
  EncoderOutput prior{Matrix::Zero(4, 3), Matrix::Ones(4, 3)};
  EXPECT_TRUE(kl_to_unit_gaussian(prior).isZero());
}

TEST(Vib, LossBoundsAndSigns) {
  // encoder all zero: mu = 0, var = 1, so i_zx_max = 0
  SplitModel m{DenseNet({3, 4}), DenseNet({2, 3})};
  Matrix x = Matrix::Random(3, 5);
  std::vector<std::uint8_t> y{0, 1, 2, 0, 1};
  RandomStream rng(6);
  const auto loss = vib_loss(m, x, y, 0.01, rng);
  EXPECT_EQ(loss.i_zx_max, 0.0);
  EXPECT_NEAR(loss.i_zy_min, -std::log(3.0), 1e-15);
  EXPECT_NEAR(loss.objective, -loss.i_zy_min + 0.01 * loss.i_zx_max, 1e-15);
  EXPECT_THROW(vib_loss(m, Matrix(3, 0), {}, 0.01, rng), Error);

  // a decoder bias that makes the true label certain: i_zy_min -> 0
  SplitModel sure{DenseNet({3, 4}), DenseNet({2, 2})};
  sure.decoder.bias(0)(0) = 800.0;
  std::vector<std::uint8_t> zeros(5, 0);
  const auto l2 = vib_loss(sure, x, zeros, 0.5, rng);
  EXPECT_EQ(l2.i_zy_min, 0.0);
  EXPECT_EQ(l2.objective, 0.5 * l2.i_zx_max);

  const auto p = make_problem({6, 5}, {4}, 3, 4, 10, 7);
  RandomStream r2(8);
  const auto l3 = vib_loss(p.model, p.x, p.labels, 0.1, r2);
  EXPECT_GE(l3.i_zx_max, 0.0);
  EXPECT_LE(l3.i_zy_min, 0.0);
}

TEST(Vib, SplitEqualsMonolithic) {
  for (Reparam mode : {Reparam::stddev, Reparam::literal}) {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
      const auto p = make_problem({20, 16}, {6}, 4, 5, 6, seed);
      const double beta = 0.3;
      const auto step = split_forward(p.model, p.x, p.labels, p.eps, beta, mode);
      const auto g = split_backward(p.model, step);
      const auto mono = oracle::vib_objective(p.model.encoder.params(), p.model.encoder.widths(), p.model.decoder.params(),
                                              p.model.decoder.widths(), columns(p.x), p.labels, columns(p.eps), beta,
                                              mode == Reparam::literal);
      EXPECT_NEAR(step.server.loss.objective, mono.objective, 1e-12);
      double scale = 0.0;
      for (double v : mono.encoder_grad) scale = std::max(scale, std::fabs(v));
      for (double v : mono.decoder_grad) scale = std::max(scale, std::fabs(v));
      ASSERT_EQ(g.encoder.size(), mono.encoder_grad.size());
      ASSERT_EQ(g.decoder.size(), mono.decoder_grad.size());
      for (std::size_t i = 0; i < g.encoder.size(); ++i) EXPECT_NEAR(g.encoder[i], mono.encoder_grad[i], 1e-10 * scale);
      for (std::size_t i = 0; i < g.decoder.size(); ++i) EXPECT_NEAR(g.decoder[i], mono.decoder_grad[i], 1e-10 * scale);
    }
  }
}

TEST(Vib, FiniteDifferences) {
  // encoder [20, 16, 8] -> latent 4, decoder [4, 6, 3]
  for (Reparam mode : {Reparam::stddev, Reparam::literal}) {
    auto p = make_problem({20, 16}, {6}, 4, 3, 5, 21);
    const double beta = 0.2;
    const auto step = split_forward(p.model, p.x, p.labels, p.eps, beta, mode);
    const auto g = split_backward(p.model, step);
    const double h = 1e-5;
    int checked = 0;
    for (auto [net, grad] : {std::pair{&p.model.encoder, &g.encoder}, std::pair{&p.model.decoder, &g.decoder}}) {
      for (std::size_t i = 0; i < net->parameter_count(); ++i) {
        const double orig = net->params()[i];
        net->mutable_params()[i] = orig + h;
        const double up = objective(p, beta, mode);
        net->mutable_params()[i] = orig - h;
        const double down = objective(p, beta, mode);
        net->mutable_params()[i] = orig;
        const double fd = (up - down) / (2 * h);
        const double exact = (*grad)[i];
        EXPECT_LE(std::fabs(fd - exact), 1e-4 * std::max(std::fabs(exact), 1e-3)) << "param " << i;
        ++checked;
      }
    }
    EXPECT_EQ(checked, 20 * 16 + 16 + 16 * 8 + 8 + 4 * 6 + 6 + 6 * 3 + 3);
  }
}

TEST(Vib, ZeroBoundaryGivesZeroEncoderGradient) {
  const auto p = make_problem({5, 4}, {3}, 2, 3, 4, 31);
  const auto pass = vehicle_forward(p.model.encoder, p.x);
  const auto g = vehicle_backward(p.model.encoder, pass, Matrix::Zero(2, 4), Matrix::Zero(2, 4));
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Vib, StaleCacheRejected) {
  auto p = make_problem({5, 4}, {3}, 2, 3, 4, 32);
  const auto step = split_forward(p.model, p.x, p.labels, p.eps, 0.1, Reparam::stddev);
  p.model.decoder.mutable_params()[0] += 1.0;
  try {
    split_backward(p.model, step);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_state);
  }
}

TEST(Adam, Steps) {
  std::vector<double> params{1.0, -2.0};
  AdamState s(2);
  std::vector<double> zero{0.0, 0.0};
  adam_step(params, zero, s);
  EXPECT_EQ(params, (std::vector<double>{1.0, -2.0}));

  std::vector<double> x{0.0};
  AdamState one(1);
  std::vector<double> g{1.0};
  adam_step(x, g, one);
  EXPECT_NEAR(x[0], -0.001 / (1.0 + 1e-8), 1e-15);

  std::vector<double> wrong{1.0, 2.0, 3.0};
  try {
    adam_step(params, wrong, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_shape);
  }
}

TEST(Adam, Deterministic) {
  auto run = [] {
    auto p = make_problem({6, 5}, {4}, 3, 4, 8, 41);
    AdamState es(p.model.encoder.parameter_count()), ds(p.model.decoder.parameter_count());
    RandomStream rng(42);
    for (int i = 0; i < 100; ++i) {
      const Matrix eps = standard_normal(3, 8, rng);
      const auto step = split_forward(p.model, p.x, p.labels, eps, 0.01, Reparam::stddev);
      const auto g = split_backward(p.model, step);
      adam_step(p.model.encoder, g.encoder, es);
      adam_step(p.model.decoder, g.decoder, ds);
    }
    return p.model;
  };
  EXPECT_EQ(run(), run());
}

TEST(Vib, EpochMeans) {
  const std::vector<BatchBounds> one{{0.7, -0.2}};
  EXPECT_EQ(epoch_mutual_info(one).i_zx_max, 0.7);
  const std::vector<BatchBounds> two{{0.2, -1.0}, {0.4, -3.0}};
  EXPECT_NEAR(epoch_mutual_info(two).i_zx_max, 0.3, 1e-15);
  EXPECT_EQ(epoch_mutual_info(two).i_zy_min, -2.0);
  const std::vector<BatchBounds> swapped{{0.4, -3.0}, {0.2, -1.0}};
  EXPECT_EQ(epoch_mutual_info(two).i_zx_max, epoch_mutual_info(swapped).i_zx_max);
  EXPECT_THROW(epoch_mutual_info({}), Error);
}

TEST(Vib, Accuracy) {
  const std::vector<std::uint8_t> t{1, 2, 3, 4};
  EXPECT_EQ(accuracy(t, t), 100.0);
  EXPECT_EQ(accuracy(std::vector<std::uint8_t>{0, 0, 0, 0}, t), 0.0);
  EXPECT_EQ(accuracy(std::vector<std::uint8_t>{1, 2, 0, 0}, t), 50.0);
  try {
    accuracy(std::vector<std::uint8_t>{1}, t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_shape);
  }
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const auto p = make_problem({7, 5}, {4}, 3, 4, 2, 51);
  const auto bytes = serialize(p.model);
  EXPECT_EQ(deserialize(bytes), p.model);
  EXPECT_EQ(checkpoint_digest(deserialize(bytes)), checkpoint_digest(p.model));

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize(bad), Error);
  bad = bytes;
  bad[8] = 2;  // version
  EXPECT_THROW(deserialize(bad), Error);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(deserialize(bad), Error);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(deserialize(bad), Error);
  try {
    deserialize(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 20));
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::format_error);
  }
}
