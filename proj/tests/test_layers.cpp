#include "bcosnet/layers.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace bcosnet;
using namespace testing_support;

namespace {

// Checks input and parameter gradients of a Layer<double> against central
// differences of the probe loss <w, layer(x)>.
void check_layer_gradients(Layer<double>& layer, Tensor4<double> x, Rng& rng, double tol = 1e-6) {
  Tensor4<double> y = layer.forward(x, Mode::train);
  Tensor4<double> w(y.shape());
  for (auto& v : w.values()) v = rng.uniform(-1, 1);
  ParameterList<double> params;
  layer.collect("m", params);
  for (auto& p : params) p.param->zero_grad();
  Tensor4<double> dx = layer.backward(w);

  auto loss = [&] {
    Tensor4<double> out = layer.forward(x, Mode::train);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * w.data()[i];
    return s;
  };
  EXPECT_LT(relative_error(to_vector(dx), numeric_gradient(loss, span_of(x))), tol);
  for (auto& [path, p] : params) {
    if (!p->trainable) continue;
    const auto analytic = p->grad;
    const auto numeric = numeric_gradient(loss, std::span<double>(p->value));
    EXPECT_LT(relative_error(analytic, numeric), tol) << path;
  }
}

}  // namespace

TEST(Conv2d, OutputSizeArithmetic) {
  EXPECT_EQ(conv_out_size(64, 3, 2, 1), 32u);
  EXPECT_EQ(conv_out_size(256, 7, 2, 3), 128u);
  EXPECT_EQ(conv_out_size(8, 1, 1, 0), 8u);
  EXPECT_THROW(conv_out_size(1, 3, 1, 0), std::invalid_argument);
}

TEST(Conv2d, DenseGradients) {
  Rng rng(1);
  Conv2d<double> conv(3, 4, 3, 2, 1, 1, true, rng);
  check_layer_gradients(conv, random_tensor(rng, 2, 3, 6, 5), rng);
}

TEST(Conv2d, PointwiseGradients) {
  Rng rng(2);
  Conv2d<double> conv(5, 3, 1, 1, 0, 1, false, rng);
  check_layer_gradients(conv, random_tensor(rng, 2, 5, 3, 4), rng);
}

TEST(Conv2d, DepthwiseGradients) {
  Rng rng(3);
  Conv2d<double> conv(4, 4, 3, 1, 1, 4, false, rng);
  check_layer_gradients(conv, random_tensor(rng, 2, 4, 5, 4), rng);
}

TEST(Conv2d, MatchesDirectConvolution) {
  Rng rng(4);
  Conv2d<double> conv(2, 3, 3, 1, 1, 1, true, rng);
  auto x = random_tensor(rng, 1, 2, 4, 4);
  auto y = conv.forward(x, Mode::eval);
  ParameterList<double> params;
  conv.collect("c", params);
  const auto& wt = params[0].param->value;
  const auto& b = params[1].param->value;
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = b[o];
        for (std::size_t c = 0; c < 2; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int yi = static_cast<int>(i) + di, xj = static_cast<int>(j) + dj;
              if (yi < 0 || yi >= 4 || xj < 0 || xj >= 4) continue;
              s += wt[((o * 2 + c) * 3 + static_cast<std::size_t>(di + 1)) * 3 + static_cast<std::size_t>(dj + 1)] *
                   x.at(0, c, static_cast<std::size_t>(yi), static_cast<std::size_t>(xj));
            }
        EXPECT_NEAR(y.at(0, o, i, j), s, 1e-12);
      }
}

TEST(BatchNorm, TrainingGradients) {
  Rng rng(5);
  BatchNorm<double> bn(3);
  check_layer_gradients(bn, random_tensor(rng, 4, 3, 2, 2), rng);
}

TEST(BatchNorm, TrainModeNormalizesAndTracksRunningStats) {
  Rng rng(6);
  BatchNorm<double> bn(2);
  auto x = random_tensor(rng, 8, 2, 3, 3, 2.0, 4.0);
  auto y = bn.forward(x, Mode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 8; ++n)
      for (double e : y.plane(n, c)) m += e;
    m /= 72;
    for (std::size_t n = 0; n < 8; ++n)
      for (double e : y.plane(n, c)) v += (e - m) * (e - m);
    v /= 72;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
  ParameterList<double> params;
  bn.collect("bn", params);
  bool saw_running = false;
  for (auto& p : params) {
    if (p.path == "bn.running_mean") {
      saw_running = true;
      EXPECT_FALSE(p.param->trainable);
      EXPECT_GT(p.param->value[0], 0.2);  // 0.1 * batch mean of ~3
    }
  }
  EXPECT_TRUE(saw_running);
}

TEST(BatchNorm, EvalModeIsDeterministicAffineMap) {
  Rng rng(7);
  BatchNorm<double> bn(2);
  auto x = random_tensor(rng, 3, 2, 2, 2);
  auto a = bn.forward(x, Mode::eval);
  auto b = bn.forward(x, Mode::eval);
  EXPECT_EQ(to_vector(a), to_vector(b));
  // Fresh running stats (mean 0, var 1) make eval BN an identity up to eps.
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a.data()[i], x.data()[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(Pool2d, MaxAndAverageGradients) {
  Rng rng(8);
  Pool2d<double> avg(PoolKind::average, 2, 2);
  check_layer_gradients(avg, random_tensor(rng, 2, 2, 4, 4), rng);
  Pool2d<double> mx(PoolKind::max, 3, 2, 1);
  check_layer_gradients(mx, random_tensor(rng, 2, 2, 5, 4), rng);
}

TEST(ReLU, ForwardAndGradient) {
  Rng rng(9);
  ReLU<double> relu;
  auto x = random_tensor(rng, 2, 2, 3, 3);
  auto y = relu.forward(x, Mode::train);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.data()[i], std::max(0.0, x.data()[i]));
  check_layer_gradients(relu, x, rng);
}

TEST(Linear, Gradients) {
  Rng rng(10);
  Linear<double> lin(5, 3, true, rng);
  Matrix<double> x = random_matrix(rng, 4, 5);
  Matrix<double> w = random_matrix(rng, 4, 3);
  lin.forward(x);
  ParameterList<double> params;
  lin.collect("fc", params);
  for (auto& p : params) p.param->zero_grad();
  Matrix<double> dx = lin.backward(w);
  auto loss = [&] { return dot(w, lin.forward(x)); };
  EXPECT_LT(relative_error(to_vector(dx), numeric_gradient(loss, span_of(x))), 1e-7);
  for (auto& [path, p] : params)
    EXPECT_LT(relative_error(p->grad, numeric_gradient(loss, std::span<double>(p->value))), 1e-7) << path;
}

TEST(Sequential, ConvBnReluGradientsAndPaths) {
  Rng rng(11);
  auto block = conv_bn<double>(3, 4, 3, 1, 1, rng);
  check_layer_gradients(*block, random_tensor(rng, 3, 3, 4, 3), rng, 1e-5);
  ParameterList<double> params;
  block->collect("stem", params);
  std::vector<std::string> paths;
  for (auto& p : params) paths.push_back(p.path);
  EXPECT_NE(std::find(paths.begin(), paths.end(), "stem.conv.weight"), paths.end());
  EXPECT_NE(std::find(paths.begin(), paths.end(), "stem.bn.weight"), paths.end());
}
