#include <gtest/gtest.h>

#include <cmath>

#include "rawshield/grad_check.hpp"
#include "rawshield/rng.hpp"
#include "rawshield/tensor.hpp"

using namespace rawshield;
using namespace rawshield::ad;

namespace {

TensorD random_tensor(const Shape& shape, CounterRng& rng, bool requires_grad = true, double scale = 1.0) {
  TensorD::Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-scale, scale);
  return TensorD(shape, v, requires_grad);
}

TensorD vec(std::initializer_list<double> xs, bool requires_grad = false) {
  TensorD::Array v(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) v[i++] = x;
  return TensorD(Shape{static_cast<Index>(xs.size())}, v, requires_grad);
}

// Fixed random weights turn any tensor into a scalar whose gradient
// reaches every output element with a different coefficient.
TensorD weighted_sum(const TensorD& y, std::uint64_t seed) {
  CounterRng rng(seed, 99);
  return sum(y * random_tensor(y.shape(), rng, false));
}

void expect_passes(const std::function<TensorD()>& f, const std::vector<TensorD>& params) {
  const auto report = grad_check(f, params);
  EXPECT_TRUE(report.passed) << report.worst << " max_rel=" << report.max_rel_error;
}

}  // namespace

TEST(Tensor, LeafConstructionChecksLength) {
  EXPECT_THROW(TensorD(Shape{2, 3}, TensorD::Array::Zero(5)), ShapeError);
  const TensorD t = TensorD::zeros({2, 3}, true);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.grad().size(), 6);
}

TEST(Tensor, IdsIncreaseAndNonLeafIsImmutable) {
  auto a = TensorD::full({2}, 1.0, true);
  auto b = a * 2.0;
  EXPECT_GT(b.id(), a.id());
  EXPECT_THROW(b.mutable_value(), Error);
}

TEST(Conv2d, IdentityKernel) {
  CounterRng rng(1);
  auto x = random_tensor({2, 3, 4, 5}, rng, false);
  TensorD::Array w = TensorD::Array::Zero(9);
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  auto y = conv2d(x, TensorD({3, 3, 1, 1}, w), TensorD::zeros({3}));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE((y.value() == x.value()).all());
}

TEST(Conv2d, OnesKernelOnConstant) {
  auto x = TensorD::full({1, 1, 5, 6}, 0.3);
  auto y = conv2d(x, TensorD::full({1, 1, 3, 3}, 1.0), TensorD(), 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 6}));
  EXPECT_NEAR(y.value()[2 * 6 + 3], 2.7, 1e-15);
  EXPECT_NEAR(y.value()[0], 4 * 0.3, 1e-15);  // corner sees 2x2 in-bounds taps
}

TEST(Conv2d, StrideAndShapeErrors) {
  auto x = TensorD::zeros({1, 2, 6, 6});
  EXPECT_EQ(conv2d(x, TensorD::zeros({4, 2, 3, 3}), TensorD(), 3, 0).shape(), (Shape{1, 4, 2, 2}));
  EXPECT_THROW(conv2d(x, TensorD::zeros({4, 3, 3, 3}), TensorD()), ShapeError);
  EXPECT_THROW(conv2d(x, TensorD::zeros({4, 2, 3, 3}), TensorD(), 2, 0), ShapeError);
  EXPECT_THROW(conv2d(x, TensorD::zeros({4, 2, 3, 3}), TensorD::zeros({3}), 1, 1), ShapeError);
}

TEST(Activation, Values) {
  auto x = vec({-1.0, 0.0, 2.0});
  auto l = leaky_relu(x, 0.2);
  EXPECT_DOUBLE_EQ(l.value()[0], -0.2);
  EXPECT_DOUBLE_EQ(l.value()[2], 2.0);
  auto s = sigmoid(vec({0.0, -30.0, 30.0}));
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  EXPECT_GT(s.value()[1], 0.0);
  EXPECT_LT(s.value()[2], 1.0);
}

TEST(Pool, Values) {
  auto x = TensorD({1, 1, 2, 2}, (TensorD::Array(4) << 1, 2, 3, 4).finished());
  EXPECT_DOUBLE_EQ(global_avg_pool(x).item(), 2.5);
  EXPECT_DOUBLE_EQ(global_avg_pool(TensorD::full({1, 2, 3, 3}, 0.7)).value()[1], 0.7);
  CounterRng rng(2);
  auto z = random_tensor({2, 3, 8, 8}, rng, false);
  auto a = avg_pool(avg_pool(z, 2), 2);
  auto b = avg_pool(z, 4);
  EXPECT_LT((a.value() - b.value()).abs().maxCoeff(), 1e-12);
  EXPECT_THROW(avg_pool(TensorD::zeros({1, 1, 6, 6}), 4), ShapeError);
}

TEST(Pool, UpsampleNearest) {
  auto x = TensorD({1, 1, 1, 2}, (TensorD::Array(2) << 1, 2).finished());
  auto y = upsample_nearest(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  EXPECT_TRUE((y.value() == (TensorD::Array(8) << 1, 1, 2, 2, 1, 1, 2, 2).finished()).all());
}

TEST(Affine, HandProduct) {
  auto x = TensorD({1, 2}, (TensorD::Array(2) << 1, 2).finished());
  auto w = TensorD({2, 2}, (TensorD::Array(4) << 3, 4, 5, 6).finished());
  auto y = affine(x, w, vec({0, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 11.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 18.0);
  EXPECT_THROW(affine(x, TensorD::zeros({2, 3}), TensorD()), ShapeError);
}

TEST(Softmax, ClosedFormAndShiftInvariance) {
  auto y = softmax(vec({0.0, std::log(3.0)}));
  EXPECT_NEAR(y.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.value()[1], 0.75, 1e-15);
  auto u = softmax(TensorD::full({2, 4}, 3.0));
  EXPECT_TRUE((u.value() - 0.25).abs().maxCoeff() < 1e-15);
  CounterRng rng(3);
  auto x = random_tensor({3, 5}, rng, false, 5.0);
  auto shifted = softmax(x + 1000.0);
  EXPECT_LT((softmax(x).value() - shifted.value()).abs().maxCoeff(), 1e-12);
  for (Index r = 0; r < 3; ++r) EXPECT_NEAR(shifted.value().segment(r * 5, 5).sum(), 1.0, 1e-6);
}

TEST(Elementwise, Semantics) {
  CounterRng rng(4);
  auto x = random_tensor({2, 3, 2, 2}, rng, false);
  EXPECT_TRUE(((x * TensorD::scalar(1.0)).value() == x.value()).all());
  EXPECT_TRUE(((x + (-x)).value() == 0.0).all());
  auto a = TensorD::full({1, 3, 2, 2}, 1.0);
  auto b = TensorD::full({1, 2, 2, 2}, 2.0);
  auto c = concat_channels(a, b);
  ASSERT_EQ(c.shape(), (Shape{1, 5, 2, 2}));
  EXPECT_TRUE((c.value().head(12) == 1.0).all());
  EXPECT_TRUE((c.value().tail(8) == 2.0).all());
  auto per_channel = TensorD({1, 3, 1, 1}, (TensorD::Array(3) << 1, 2, 3).finished());
  auto scaled = TensorD::full({2, 3, 2, 2}, 1.0) * per_channel;
  EXPECT_DOUBLE_EQ(scaled.value()[4], 2.0);
  EXPECT_DOUBLE_EQ(scaled.value()[12 + 8], 3.0);
  EXPECT_THROW(add(TensorD::zeros({2, 3}), TensorD::zeros({3, 2})), ShapeError);
  EXPECT_THROW(concat_channels(a, TensorD::zeros({1, 2, 2, 3})), ShapeError);
  auto s = slice_channels(c, 2, 2);
  EXPECT_EQ(s.shape(), (Shape{1, 2, 2, 2}));
  EXPECT_TRUE((s.value().head(4) == 1.0).all());
  EXPECT_TRUE((s.value().tail(4) == 2.0).all());
}

TEST(Reduce, Values) {
  for (auto kind : {Reduction::Sum, Reduction::Mean, Reduction::L1, Reduction::L2})
    EXPECT_EQ(reduce(TensorD::zeros({4}), kind).item(), 0.0);
  EXPECT_DOUBLE_EQ(reduce(vec({3, 4}), Reduction::L2).item(), 5.0);
  EXPECT_DOUBLE_EQ(reduce(vec({-1, 2, -3}), Reduction::L1).item(), 6.0);
  EXPECT_DOUBLE_EQ(mean(vec({1, 2, 6})).item(), 3.0);
}

TEST(Backward, SimpleGradients) {
  CounterRng rng(5);
  auto x = random_tensor({3, 4}, rng);
  backward(sum(x));
  EXPECT_TRUE((x.grad() == 1.0).all());
  x.zero_grad();
  backward(sum(x * x));
  EXPECT_LT((x.grad() - 2.0 * x.value()).abs().maxCoeff(), 1e-15);
  auto unused = random_tensor({2}, rng);
  x.zero_grad();
  backward(sum(x));
  EXPECT_TRUE((unused.grad() == 0.0).all());
}

TEST(Backward, ContractErrors) {
  auto x = TensorD::full({3}, 1.0, true);
  EXPECT_THROW(backward(x * 2.0), ShapeError);
  EXPECT_THROW(backward(sum(TensorD::full({3}, 1.0))), Error);
  {
    NoGradGuard guard;
    EXPECT_FALSE(sum(x).requires_grad());
  }
  EXPECT_TRUE(sum(x).requires_grad());
}

TEST(Backward, NonFiniteForwardFaults) {
  auto x = vec({1.0, 0.0}, true);
  EXPECT_THROW(vec({1.0, 1.0}) / x, NumericFault);
}

TEST(Backward, NanGradientNamesNode) {
  auto x = vec({1.0}, true);
  auto bad = record_op<double>("poison", Shape{1}, x.value(), {x}, [](Node<double>& self) {
    self.inputs[0]->accumulate(TensorD::Array::Constant(1, std::nan("")));
  });
  try {
    backward(sum(bad));
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("poison"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(std::to_string(bad.id())), std::string::npos);
  }
}

TEST(Backward, TapeOrderAndReplay) {
  CounterRng rng(6);
  auto x = random_tensor({1, 2, 4, 4}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto program = [&] { return mean(leaky_relu(conv2d(x, w, TensorD(), 1, 1), 0.2)); };
  auto loss = program();
  const auto tape = collect_tape(loss);
  for (std::size_t i = 1; i < tape.size(); ++i) EXPECT_LT(tape[i - 1].id, tape[i].id);
  for (const auto& e : tape)
    for (auto in : e.input_ids) EXPECT_LT(in, e.id);
  backward(loss);
  const auto g1 = w.grad();
  w.zero_grad();
  x.zero_grad();
  backward(program());
  EXPECT_TRUE((w.grad() == g1).all());
  EXPECT_EQ(program().item(), program().item());
}

TEST(GradCheck, L2ClosedForm) {
  auto x = vec({3, 4}, true);
  backward(reduce(x, Reduction::L2));
  EXPECT_NEAR(x.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(x.grad()[1], 0.8, 1e-15);
  expect_passes([&] { return reduce(x, Reduction::L2); }, {x});
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  CounterRng rng(7);
  auto x = random_tensor({5}, rng);
  auto f = [&] {
    // Square with a backward rule off by 50%.
    TensorD::Array v = x.value().square();
    auto sq = record_op<double>("bad_square", x.shape(), v, {x}, [](Node<double>& self) {
      const auto& in = self.inputs[0];
      in->accumulate(3.0 * in->value * self.grad);
    });
    return sum(sq);
  };
  EXPECT_FALSE(grad_check(f, {x}).passed);
}

TEST(GradCheck, DirectionalModeAgreesAndDetects) {
  CounterRng rng(8);
  auto x = random_tensor({200}, rng);
  GradCheckOptions opt;
  opt.max_coordinates = 50;
  const auto good = grad_check([&] { return sum(sigmoid(x) * x); }, {x}, opt);
  EXPECT_TRUE(good.directional);
  EXPECT_TRUE(good.passed) << good.worst;
  auto bad = [&] {
    auto y = record_op<double>("bad_identity", x.shape(), x.value(), {x},
                               [](Node<double>& self) { self.inputs[0]->accumulate(0.5 * self.grad); });
    return sum(y * y);
  };
  EXPECT_FALSE(grad_check(bad, {x}, opt).passed);
}

// Randomized finite-difference suite: every differentiable op, 20 seeds.
class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, Conv2d) {
  CounterRng rng(GetParam());
  const int stride = 1 + static_cast<int>(GetParam() % 2);
  const Index h = stride == 1 ? 5 : 7;
  auto x = random_tensor({2, 2, h, h}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  expect_passes([&] { return weighted_sum(conv2d(x, w, b, stride, 1), GetParam()); }, {x, w, b});
  auto w1 = random_tensor({4, 2, 1, 1}, rng);
  expect_passes([&] { return weighted_sum(conv2d(x, w1, TensorD()), GetParam()); }, {x, w1});
}

TEST_P(OpGradients, Activations) {
  CounterRng rng(GetParam());
  auto x = random_tensor({3, 7}, rng, true, 3.0);
  expect_passes([&] { return weighted_sum(leaky_relu(x, 0.2), GetParam()); }, {x});
  expect_passes([&] { return weighted_sum(sigmoid(x), GetParam()); }, {x});
}

TEST_P(OpGradients, Pools) {
  CounterRng rng(GetParam());
  auto x = random_tensor({2, 3, 4, 4}, rng);
  expect_passes([&] { return weighted_sum(global_avg_pool(x), GetParam()); }, {x});
  expect_passes([&] { return weighted_sum(avg_pool(x, 2), GetParam()); }, {x});
  expect_passes([&] { return weighted_sum(upsample_nearest(x, 2), GetParam()); }, {x});
}

TEST_P(OpGradients, AffineSoftmax) {
  CounterRng rng(GetParam());
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({5, 4}, rng);
  auto b = random_tensor({5}, rng);
  expect_passes([&] { return weighted_sum(affine(x, w, b), GetParam()); }, {x, w, b});
  expect_passes([&] { return weighted_sum(softmax(affine(x, w, b)), GetParam()); }, {x, w, b});
}

TEST_P(OpGradients, BroadcastAlgebra) {
  CounterRng rng(GetParam());
  auto a = random_tensor({2, 3, 2, 2}, rng);
  auto c = random_tensor({1, 3, 1, 1}, rng);
  auto s = random_tensor({1}, rng);
  auto d = TensorD(Shape{2, 3, 2, 2}, 2.0 + random_tensor({2, 3, 2, 2}, rng, false).value().abs(), true);
  expect_passes([&] { return weighted_sum(a * c + s - a / d, GetParam()); }, {a, c, s, d});
  expect_passes([&] { return weighted_sum(c / d + s * a, GetParam()); }, {a, c, s, d});
  expect_passes([&] { return weighted_sum(2.5 * a + 1.0, GetParam()); }, {a});
}

TEST_P(OpGradients, LayoutOps) {
  CounterRng rng(GetParam());
  auto a = random_tensor({2, 3, 2, 2}, rng);
  auto b = random_tensor({2, 2, 2, 2}, rng);
  auto v = random_tensor({2, 1, 1, 1}, rng);
  expect_passes([&] { return weighted_sum(concat_channels(a, b), GetParam()); }, {a, b});
  expect_passes([&] { return weighted_sum(slice_channels(a, 1, 2), GetParam()); }, {a});
  expect_passes([&] { return weighted_sum(reshape(a, {4, 6}), GetParam()); }, {a});
  expect_passes([&] { return weighted_sum(expand(v, {2, 3, 2, 2}), GetParam()); }, {v});
}

TEST_P(OpGradients, Reductions) {
  CounterRng rng(GetParam());
  auto x = random_tensor({2, 5}, rng);
  for (auto kind : {Reduction::Sum, Reduction::Mean, Reduction::L1, Reduction::L2})
    expect_passes([&] { return reduce(x * x + x, kind); }, {x});
}

TEST_P(OpGradients, Composite) {
  CounterRng rng(GetParam());
  auto x = random_tensor({1, 2, 8, 8}, rng);
  auto w = random_tensor({4, 2, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  expect_passes(
      [&] { return weighted_sum(global_avg_pool(avg_pool(leaky_relu(conv2d(x, w, b, 1, 1), 0.2), 2)), 1); },
      {x, w, b});
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range<std::uint64_t>(1, 21));

TEST(TensorFloat, ForwardMatchesDouble) {
  CounterRng rng(9);
  auto xd = random_tensor({1, 2, 6, 6}, rng, false);
  auto wd = random_tensor({3, 2, 3, 3}, rng, false);
  auto yd = sigmoid(conv2d(xd, wd, TensorD(), 1, 1));
  auto yf = sigmoid(conv2d(cast<float>(xd), cast<float>(wd), TensorF(), 1, 1));
  EXPECT_LT((yf.value().cast<double>() - yd.value()).abs().maxCoeff(), 1e-5);
}
