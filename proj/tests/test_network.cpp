#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>

#include "arob/network.hpp"
#include "arob/train.hpp"
#include "support.hpp"

using namespace arob;

namespace {

// Independent eval-mode forward for one sample: straightforward loops with
// explicit padding checks, no shared kernels.
std::vector<double> naive_forward(const Network<double>& net, const Tensor<double>& sample) {
  std::vector<double> cur(sample.values());
  Shape shape = sample.shape();
  for (const auto& layer : net.layers()) {
    if (const auto* c = std::get_if<Conv3d<double>>(&layer)) {
      const std::size_t IC = shape[0], D = shape[1], H = shape[2], W = shape[3], OC = c->out_channels();
      std::vector<double> out(OC * D * H * W);
      for (std::size_t oc = 0; oc < OC; ++oc)
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
              double acc = c->bias[oc];
              for (std::size_t ic = 0; ic < IC; ++ic)
                for (int kd = -1; kd <= 1; ++kd)
                  for (int kh = -1; kh <= 1; ++kh)
                    for (int kw = -1; kw <= 1; ++kw) {
                      const long sd = static_cast<long>(d) + kd, sh = static_cast<long>(h) + kh,
                                 sw = static_cast<long>(w) + kw;
                      if (sd < 0 || sh < 0 || sw < 0 || sd >= static_cast<long>(D) || sh >= static_cast<long>(H) ||
                          sw >= static_cast<long>(W))
                        continue;
                      acc += c->weight.at({oc, ic, static_cast<std::size_t>(kd + 1), static_cast<std::size_t>(kh + 1),
                                           static_cast<std::size_t>(kw + 1)}) *
                             cur[((ic * D + sd) * H + sh) * W + sw];
                    }
              out[((oc * D + d) * H + h) * W + w] = acc;
            }
      cur = out;
      shape = {OC, D, H, W};
    } else if (const auto* b = std::get_if<BatchNorm<double>>(&layer)) {
      const std::size_t plane = cur.size() / shape[0];
      for (std::size_t ch = 0; ch < shape[0]; ++ch)
        for (std::size_t i = 0; i < plane; ++i) {
          double& v = cur[ch * plane + i];
          v = b->gamma[ch] * (v - b->running_mean[ch]) / std::sqrt(b->running_var[ch] + b->epsilon) + b->beta[ch];
        }
    } else if (std::holds_alternative<Relu>(layer)) {
      for (double& v : cur) v = std::max(v, 0.0);
    } else if (const auto* p = std::get_if<MaxPool>(&layer)) {
      const std::size_t C = shape[0], D = shape[1], H = shape[2], W = shape[3], s = p->size;
      std::vector<double> out(C * (D / s) * (H / s) * (W / s), -1e300);
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
              double& o = out[((ch * (D / s) + d / s) * (H / s) + h / s) * (W / s) + w / s];
              o = std::max(o, cur[((ch * D + d) * H + h) * W + w]);
            }
      cur = out;
      shape = {C, D / s, H / s, W / s};
    } else if (std::holds_alternative<Flatten>(layer)) {
      shape = {cur.size()};
    } else if (const auto* dn = std::get_if<Dense<double>>(&layer)) {
      std::vector<double> out(dn->out_features());
      for (std::size_t o = 0; o < out.size(); ++o) {
        out[o] = dn->bias[o];
        for (std::size_t i = 0; i < cur.size(); ++i) out[o] += dn->weight.at({o, i}) * cur[i];
      }
      cur = out;
      shape = {out.size()};
    }
  }
  return cur;
}

void randomize_buffers(Network<double>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 1.5);
  for (auto& l : net.layers())
    if (auto* b = std::get_if<BatchNorm<double>>(&l))
      for (std::size_t c = 0; c < b->channels(); ++c) {
        b->running_mean[c] = u(rng) - 0.8;
        b->running_var[c] = u(rng);
        b->gamma[c] = u(rng);
        b->beta[c] = u(rng) - 0.8;
      }
  for (auto& l : net.layers())
    if (auto* c = std::get_if<Conv3d<double>>(&l))
      for (double& v : c->bias.data()) v = u(rng) - 0.8;
}

Network<double> net_from_layers(const Shape& in, std::vector<Layer<double>> layers) {
  return Network<double>(in, std::move(layers));
}

}  // namespace

TEST(Network, BuildIsDeterministic) {
  const NetworkSpec spec;
  const auto a = build_network<float>(spec, 7), b = build_network<float>(spec, 7), c = build_network<float>(spec, 8);
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    all_same &= bit_identical(*a.parameters()[i], *b.parameters()[i]);
    any_diff |= !bit_identical(*a.parameters()[i], *c.parameters()[i]);
  }
  EXPECT_TRUE(all_same);
  EXPECT_TRUE(any_diff);
}

TEST(Network, DefaultShapeChain) {
  const auto net = build_network<float>(NetworkSpec{}, 1);
  std::vector<std::size_t> spatial;
  for (const auto& s : net.shape_chain())
    if (s.size() == 4 && (spatial.empty() || spatial.back() != s[1])) spatial.push_back(s[1]);
  EXPECT_EQ(spatial, (std::vector<std::size_t>{36, 18, 6, 3, 1}));
  bool saw_64 = false;
  for (const auto& s : net.shape_chain()) saw_64 |= s == Shape{64};
  EXPECT_TRUE(saw_64);
  EXPECT_EQ(net.classes(), 2u);
}

TEST(Network, IndivisibleExtentIsNamed) {
  NetworkSpec spec;
  spec.spatial = {36, 35, 36};
  try {
    build_network<float>(spec, 1);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("H=35"), std::string::npos) << e.what();
  }
}

TEST(Network, EvalForwardMatchesNaiveOracle) {
  auto net = build_network<double>(fixtures::tiny_spec(), 3);
  randomize_buffers(net, 11);
  for (std::uint64_t seed : {1, 2}) {
    Tensor<double> x = seed == 1 ? Tensor<double>({1, 2, 6, 6, 6}) : fixtures::random_tensor<double>({1, 2, 6, 6, 6}, seed);
    const auto logits = predict_logits(net, x);
    const auto want = naive_forward(net, x.reshaped({2, 6, 6, 6}));
    ASSERT_EQ(logits.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(logits[i], want[i], 1e-10);
  }
}

TEST(Network, EvalForwardIsPure) {
  auto net = build_network<float>(fixtures::tiny_spec(), 3);
  const auto x = fixtures::random_tensor({2, 2, 6, 6, 6}, 9);
  const auto before = *net.buffers().front();
  EXPECT_TRUE(bit_identical(predict_logits(net, x), predict_logits(net, x)));
  Rng rng(1);
  forward(net, x, Mode::train, &rng);
  EXPECT_TRUE(bit_identical(*net.buffers().front(), before));
  forward_train(net, x, rng);
  EXPECT_FALSE(bit_identical(*net.buffers().front(), before));
}

// Fraction of parameters whose analytic gradient agrees with a central
// difference of step h (relative error < 1e-3).
double fd_agreement(Network<double>& net, const Tensor<double>& x, const std::vector<std::size_t>& targets, double h) {
  auto loss_at = [&]() {
    Rng rng(77);
    return softmax_cross_entropy(forward(net, x, Mode::train, &rng).logits, targets).first;
  };
  Rng rng(77);
  const auto fwd = forward(net, x, Mode::train, &rng);
  const auto grads = backward_params(net, fwd.trace, softmax_cross_entropy(fwd.logits, targets).second);
  std::size_t total = 0, good = 0;
  auto params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p]->size(); ++i) {
      double& theta = (*params[p])[i];
      const double saved = theta;
      theta = saved + h;
      const double up = loss_at();
      theta = saved - h;
      const double down = loss_at();
      theta = saved;
      const double fd = (up - down) / (2 * h), an = grads[p][i];
      ++total;
      good += std::abs(an - fd) / (std::abs(an) + 1e-8) < 1e-3;
    }
  return static_cast<double>(good) / static_cast<double>(total);
}

TEST(Network, ParameterGradientsMatchFiniteDifferences) {
  // With a 1e-3 step the stencil must not straddle a ReLU kink, so the BN
  // shifts and hidden bias hold pre-activations well above zero.
  NetworkSpec spec = fixtures::tiny_spec();
  spec.spatial = {4, 4, 4};
  auto net = build_network<double>(spec, 5);
  ASSERT_LE(net.parameter_count(), 5000u);
  for (auto& l : net.layers()) {
    if (auto* b = std::get_if<BatchNorm<double>>(&l)) std::fill(b->beta.data().begin(), b->beta.data().end(), 3.0);
    if (auto* d = std::get_if<Dense<double>>(&l); d && d->bias.size() == spec.dense_hidden) std::fill(d->bias.data().begin(), d->bias.data().end(), 3.0);
  }
  const auto x = fixtures::random_tensor<double>({3, 2, 4, 4, 4}, 21);
  const auto start = std::chrono::steady_clock::now();
  EXPECT_GE(fd_agreement(net, x, {0, 1, 1}, 1e-3), 0.999);
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::minutes(1));
}

TEST(Network, ParameterGradientsMatchFiniteDifferencesAcrossGates) {
  // Unshifted net: many units sit near their ReLU/max-pool kinks, so a
  // smaller step keeps both stencil points on one linear piece.
  auto net = build_network<double>(fixtures::tiny_spec(), 5);
  const auto x = fixtures::random_tensor<double>({3, 2, 6, 6, 6}, 21);
  EXPECT_GE(fd_agreement(net, x, {0, 1, 1}, 1e-5), 0.999);
}

TEST(Network, BackwardParamsIsLinearInLossGrad) {
  auto net = build_network<double>(fixtures::tiny_spec(), 5);
  const auto x = fixtures::random_tensor<double>({2, 2, 6, 6, 6}, 3);
  Rng rng(1);
  const auto fwd = forward(net, x, Mode::train, &rng);
  const auto zero = backward_params(net, fwd.trace, Tensor<double>({2, 2}));
  for (const auto& g : zero)
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
  const auto g = fixtures::random_tensor<double>({2, 2}, 4);
  const auto one = backward_params(net, fwd.trace, g);
  const auto two = backward_params(net, fwd.trace, mul(g, 2.0));
  for (std::size_t p = 0; p < one.size(); ++p)
    for (std::size_t i = 0; i < one[p].size(); ++i) EXPECT_NEAR(two[p][i], 2 * one[p][i], 1e-12 * (1 + std::abs(one[p][i])));
}

TEST(Network, StaleTraceIsRejected) {
  auto net = build_network<double>(fixtures::tiny_spec(), 5);
  const auto x = fixtures::random_tensor<double>({1, 2, 6, 6, 6}, 3);
  auto fwd = forward(net, x, Mode::eval);
  fwd.trace.layers.pop_back();
  EXPECT_THROW(backward_params(net, fwd.trace, Tensor<double>({1, 2})), UsageError);
  EXPECT_THROW(backward_input(net, fwd.trace, 0, ReluRule::standard), UsageError);
}

TEST(Network, BackwardInputLinearIsWeights) {
  const Tensor<double> w({2, 4}, {1, -2, 3, 0.5, -1, 4, 2, 2});
  const auto net = net_from_layers({4}, {Dense<double>{w, Tensor<double>({2})}});
  const auto fwd = forward(net, fixtures::random_tensor<double>({1, 4}, 1), Mode::eval);
  for (ReluRule rule : {ReluRule::standard, ReluRule::guided}) {
    const auto g = backward_input(net, fwd.trace, 1, rule);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g[i], w.at({1, i}));
  }
  EXPECT_THROW(backward_input(net, fwd.trace, 2, ReluRule::standard), UsageError);
}

TEST(Network, ReluGates) {
  // x -> h = x -> ReLU -> logit0 = -2 h
  const auto net = net_from_layers({1}, {Dense<double>{Tensor<double>({1, 1}, {1.0}), Tensor<double>({1})}, Relu{},
                                         Dense<double>{Tensor<double>({2, 1}, {-2.0, 1.0}), Tensor<double>({2})}});
  const auto dead = forward(net, Tensor<double>({1, 1}, {-1.0}), Mode::eval);
  EXPECT_EQ(backward_input(net, dead.trace, 0, ReluRule::standard)[0], 0.0);
  EXPECT_EQ(backward_input(net, dead.trace, 0, ReluRule::guided)[0], 0.0);
  const auto live = forward(net, Tensor<double>({1, 1}, {1.0}), Mode::eval);
  EXPECT_EQ(backward_input(net, live.trace, 0, ReluRule::standard)[0], -2.0);
  EXPECT_EQ(backward_input(net, live.trace, 0, ReluRule::guided)[0], 0.0);
}

TEST(Network, RegionEvaluatorMatchesFullForward) {
  const auto net = build_network<float>(NetworkSpec{}, 2);
  const auto x = fixtures::random_tensor({1, 1, 36, 36, 36}, 8, 0.0, 1.0);
  const RegionEvaluator<float> ev(net, x);
  EXPECT_TRUE(bit_identical(ev.base_logits(), predict_logits(net, x)));
  auto ws = ev.make_workspace();
  for (const auto& box : {Box3{{0, 0, 0}, {6, 6, 6}}, Box3{{15, 3, 30}, {21, 9, 36}}, Box3{{30, 30, 30}, {36, 36, 36}}}) {
    Tensor<float> y = x;
    for (std::size_t d = box.lo[0]; d < box.hi[0]; ++d)
      for (std::size_t h = box.lo[1]; h < box.hi[1]; ++h)
        for (std::size_t w = box.lo[2]; w < box.hi[2]; ++w) y.at({0, 0, d, h, w}) = 0.0f;
    EXPECT_TRUE(bit_identical(ev.logits(y, box, ws), predict_logits(net, y)));
  }
  // The workspace is restored after every call.
  EXPECT_TRUE(bit_identical(ev.logits(x, Box3{{0, 0, 0}, {1, 1, 1}}, ws), ev.base_logits()));
}
