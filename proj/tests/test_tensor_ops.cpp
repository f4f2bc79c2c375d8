#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mustgan/mtns.hpp"
#include "mustgan/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"
#include "support/oracles.hpp"

using namespace mustgan;
using mustgan::testing::gradcheck;
using mustgan::testing::gradcheck_tolerance;
using mustgan::testing::max_abs_diff;
using mustgan::testing::random_tensor;

namespace {

template <class T>
Tensor<T> filled(Shape s, T v) {
  return Tensor<T>(std::move(s), v);
}

}  // namespace

TEST(Conv2d, AllOnesSumsToNine) {
  auto y = conv2d(filled<double>({1, 1, 3, 3}, 1), filled<double>({1, 1, 3, 3}, 1), filled<double>({1}, 0));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  auto x = random_tensor<double>({2, 1, 5, 7}, rng);
  auto y = conv2d(x, filled<double>({1, 1, 1, 1}, 1), filled<double>({1}, 0));
  EXPECT_TRUE(bit_equal(x, y));
}

TEST(Conv2d, StrideTwoMatchesOracle) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<double>({2, 3, 8, 8}, rng);
  auto w = random_tensor<double>({4, 3, 3, 3}, rng);
  auto b = random_tensor<double>({4}, rng);
  auto y = conv2d(x, w, b, {2, 1, PadMode::zero});
  auto ref = mustgan::testing::naive_conv2d(x, w, b, 2, 1, PadMode::zero);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 4}));
  EXPECT_LT(max_abs_diff(y, ref), 1e-6);
}

TEST(Conv2d, OutputExtentFormula) {
  auto y = conv2d(filled<float>({1, 2, 9, 11}, 1), filled<float>({3, 2, 4, 2}, 1), Tensor<float>(), {3, 2, PadMode::zero});
  EXPECT_EQ(y.shape(), (Shape{1, 3, (9 + 4 - 4) / 3 + 1, (11 + 4 - 2) / 3 + 1}));
}

TEST(Conv2d, ChannelMismatchIsRejected) {
  try {
    conv2d(filled<float>({1, 2, 4, 4}, 1), filled<float>({1, 3, 3, 3}, 1), filled<float>({1}, 0));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputIsRejected) {
  EXPECT_THROW(conv2d(filled<float>({1, 1, 2, 2}, 1), filled<float>({1, 1, 5, 5}, 1), Tensor<float>()), ShapeError);
}

TEST(Conv2d, ReflectPaddingMatchesOracle) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>({1, 2, 6, 5}, rng);
  auto w = random_tensor<double>({3, 2, 7, 7}, rng);
  auto b = random_tensor<double>({3}, rng);
  auto y = conv2d(x, w, b, {1, 3, PadMode::reflect});
  EXPECT_LT(max_abs_diff(y, mustgan::testing::naive_conv2d(x, w, b, 1, 3, PadMode::reflect)), 1e-12);
}

TEST(Conv2d, HundredRandomParameterizationsMatchOracle) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> small(1, 4), k(1, 4), stride(1, 2), pad(0, 2), ext(3, 9), mode(0, 1);
  int checked = 0;
  while (checked < 100) {
    const std::size_t kk = k(rng), p = pad(rng), H = ext(rng), W = ext(rng);
    const PadMode m = mode(rng) ? PadMode::reflect : PadMode::zero;
    if (H + 2 * p < kk || W + 2 * p < kk) continue;
    if (m == PadMode::reflect && (p >= H || p >= W)) continue;
    auto x = random_tensor<double>({std::size_t(small(rng)), std::size_t(small(rng)), H, W}, rng);
    auto w = random_tensor<double>({std::size_t(small(rng)), x.dim(1), kk, kk}, rng);
    auto b = random_tensor<double>({w.dim(0)}, rng);
    const std::size_t s = stride(rng);
    auto y = conv2d(x, w, b, {s, p, m});
    auto ref = mustgan::testing::naive_conv2d(x, w, b, s, p, m);
    ASSERT_EQ(y.shape(), ref.shape());
    ASSERT_LT(max_abs_diff(y, ref), 1e-6) << "case " << checked;
    ++checked;
  }
}

TEST(Conv2d, SingleOutputChannelAtGeneratorScale) {
  // The generator's last layer: few output channels, stride 1, wide reflect padding.
  std::mt19937_64 rng(8);
  auto x = random_tensor<double>({2, 16, 20, 20}, rng);
  auto w = random_tensor<double>({1, 16, 7, 7}, rng);
  auto b = random_tensor<double>({1}, rng);
  for (PadMode m : {PadMode::reflect, PadMode::zero}) {
    auto y = conv2d(x, w, b, {1, 3, m});
    EXPECT_LT(max_abs_diff(y, mustgan::testing::naive_conv2d(x, w, b, 1, 3, m)), 1e-9);
  }
}

TEST(ConvTranspose, KernelStamping) {
  auto y = conv2d_transpose(filled<double>({1, 1, 1, 1}, 1), filled<double>({1, 1, 2, 2}, 1), filled<double>({1}, 0),
                            {2, 0, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 1.0);
}

TEST(ConvTranspose, OutputExtentFormula) {
  auto y = conv2d_transpose(filled<float>({1, 1, 5, 4}, 1), filled<float>({1, 2, 3, 3}, 1), Tensor<float>(), {2, 1, 0});
  EXPECT_EQ(y.shape(), (Shape{1, 2, (5 - 1) * 2 - 2 + 3, (4 - 1) * 2 - 2 + 3}));
  auto z = conv2d_transpose(filled<float>({1, 1, 5, 4}, 1), filled<float>({1, 2, 3, 3}, 1), Tensor<float>(), {2, 1, 1});
  EXPECT_EQ(z.shape(), (Shape{1, 2, 10, 8}));
}

TEST(ConvTranspose, InputGradientIsConvForwardAdjoint) {
  // <conv(x), y> == <x, conv^T(y)> with the same kernel.
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>({1, 2, 4, 4}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng);
  auto cx = conv2d(x, w, Tensor<double>(), {2, 1, PadMode::zero});
  auto y = random_tensor<double>(cx.shape(), rng);
  auto ty = conv2d_transpose(y, w, Tensor<double>(), {2, 1, 1});
  ASSERT_EQ(ty.shape(), x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);

  // and the tape's input gradient of conv2d is exactly that transpose.
  Tape<double> tape;
  auto xv = x.clone().set_requires_grad(true);
  tape.backward(sum(mul(conv2d(xv, w, Tensor<double>(), {2, 1, PadMode::zero}), y)));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(xv.grad()[i], ty[i], 1e-12);
}

TEST(ConvTranspose, HundredRandomParameterizationsMatchOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> small(1, 4), k(1, 4), stride(1, 3), pad(0, 2), ext(1, 6);
  int checked = 0;
  while (checked < 100) {
    const std::size_t kk = k(rng), s = stride(rng), p = pad(rng), H = ext(rng), W = ext(rng);
    const std::size_t op = std::uniform_int_distribution<std::size_t>(0, s - 1)(rng);
    if ((H - 1) * s + kk + op <= 2 * p || (W - 1) * s + kk + op <= 2 * p) continue;
    if (2 * p >= kk + op + (std::min(H, W) - 1) * s) continue;
    auto x = random_tensor<double>({std::size_t(small(rng)), std::size_t(small(rng)), H, W}, rng);
    auto w = random_tensor<double>({x.dim(1), std::size_t(small(rng)), kk, kk}, rng);
    auto b = random_tensor<double>({w.dim(1)}, rng);
    auto y = conv2d_transpose(x, w, b, {s, p, op});
    auto ref = mustgan::testing::naive_conv2d_transpose(x, w, b, s, p, op);
    ASSERT_EQ(y.shape(), ref.shape());
    ASSERT_LT(max_abs_diff(y, ref), 1e-6) << "case " << checked;
    ++checked;
  }
}

TEST(InstanceNorm, ConstantChannelIsZero) {
  auto y = instance_norm(filled<double>({1, 2, 3, 3}, 4.5));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNorm, TwoValueChannel) {
  auto y = instance_norm(Tensor<double>({1, 1, 1, 2}, {1.0, 3.0}), 0.0);
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(InstanceNorm, PerChannelStatistics) {
  std::mt19937_64 rng(7);
  auto y = instance_norm(random_tensor<double>({2, 3, 5, 5}, rng, -3, 5));
  for (std::size_t p = 0; p < 6; ++p) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 25; ++i) m += y[p * 25 + i];
    m /= 25;
    for (std::size_t i = 0; i < 25; ++i) v += (y[p * 25 + i] - m) * (y[p * 25 + i] - m);
    v /= 25;
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Activation, ElementwiseValues) {
  auto r = relu(Tensor<double>({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()), (std::vector<double>{0, 0, 2}));
  auto l = leaky_relu(Tensor<double>({2}, {-1, 2}), 0.2);
  EXPECT_DOUBLE_EQ(l[0], -0.2);
  EXPECT_DOUBLE_EQ(l[1], 2.0);
  Tape<double> tape;
  auto z = Tensor<double>::scalar(0).set_requires_grad(true);
  auto t = mustgan::tanh(z);
  EXPECT_EQ(t.item(), 0.0);
  tape.backward(t);
  EXPECT_EQ(z.grad()[0], 1.0);
}

TEST(Activation, ReluSubgradientAtZeroIsZero) {
  Tape<double> tape;
  auto x = Tensor<double>({3}, {-1, 0, 2}).set_requires_grad(true);
  tape.backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Activation, LeakySlopeMustBeInUnitInterval) {
  EXPECT_THROW(leaky_relu(filled<float>({2}, 1), 0.0), std::invalid_argument);
  EXPECT_THROW(leaky_relu(filled<float>({2}, 1), 1.0), std::invalid_argument);
}

TEST(Concat, ChannelArithmetic) {
  auto y = concat_channels<float>({filled<float>({1, 2, 4, 4}, 1), filled<float>({1, 2, 4, 4}, 2)});
  EXPECT_EQ(y.shape(), (Shape{1, 4, 4, 4}));
}

TEST(Concat, SingleInputIsIdentity) {
  auto x = filled<float>({1, 3, 2, 2}, 5);
  EXPECT_TRUE(bit_equal(concat_channels<float>({x}), x));
}

TEST(Concat, GradientRoutesToEachInput) {
  Tape<double> tape;
  std::vector<Tensor<double>> parts;
  for (int j = 0; j < 3; ++j) parts.push_back(filled<double>({1, 64, 2, 2}, j).set_requires_grad(true));
  auto y = concat_channels(parts);
  EXPECT_EQ(y.dim(1), 192u);
  tape.backward(sum(y));
  for (const auto& p : parts) {
    ASSERT_TRUE(p.has_grad());
    for (double g : p.grad()) EXPECT_EQ(g, 1.0);
  }
}

TEST(Concat, SpatialMismatchIsRejected) {
  EXPECT_THROW(concat_channels<float>({filled<float>({1, 1, 4, 4}, 0), filled<float>({1, 1, 4, 3}, 0)}), ShapeError);
}

TEST(Concat, SliceInvertsConcat) {
  std::mt19937_64 rng(8);
  auto a = random_tensor<double>({2, 3, 4, 5}, rng);
  auto b = random_tensor<double>({2, 1, 4, 5}, rng);
  auto c = random_tensor<double>({2, 4, 4, 5}, rng);
  auto y = concat_channels<double>({a, b, c});
  EXPECT_TRUE(bit_equal(slice_channels(y, 0, 3), a));
  EXPECT_TRUE(bit_equal(slice_channels(y, 3, 1), b));
  EXPECT_TRUE(bit_equal(slice_channels(y, 4, 4), c));
}

TEST(Reduce, Values) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<double>({2, 3}, rng);
  EXPECT_EQ(l1_to(x, x).item(), 0.0);
  EXPECT_EQ(sq_err_to(filled<double>({3, 3}, 0.5), 1.0).item(), 0.25);
  EXPECT_EQ(mean(Tensor<double>({4}, {1, 2, 3, 4})).item(), 2.5);
}

TEST(Reduce, EmptyIsRejected) {
  EXPECT_THROW(mean(Tensor<float>(Shape{0})), ShapeError);
  EXPECT_THROW(l1_to(Tensor<float>(Shape{0}), Tensor<float>(Shape{0})), ShapeError);
  EXPECT_THROW(sq_err_to(Tensor<float>(Shape{2, 0}), 1.0), ShapeError);
}

TEST(Reduce, L1TargetMustBeCoShaped) {
  EXPECT_THROW(l1_to(filled<float>({2, 2}, 0), filled<float>({4}, 0)), ShapeError);
}

TEST(Backward, MeanOfProductGivesScaledInput) {
  std::mt19937_64 rng(10);
  auto x = random_tensor<double>({2, 5}, rng);
  auto w = random_tensor<double>({2, 5}, rng).set_requires_grad(true);
  Tape<double> tape;
  tape.backward(mean(mul(w, x)));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], x[i] / 10.0);
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape<float> tape;
  auto x = filled<float>({2}, 1).set_requires_grad(true);
  EXPECT_THROW(tape.backward(scale(x, 2.0)), AutodiffError);
}

TEST(Backward, SecondBackwardRequiresReset) {
  Tape<float> tape;
  auto x = filled<float>({2}, 1).set_requires_grad(true);
  tape.backward(sum(x));
  EXPECT_THROW(tape.backward(sum(x)), AutodiffError);
  tape.reset();
  x.clear_grad();
  tape.backward(sum(scale(x, 3.0)));
  EXPECT_EQ(x.grad()[0], 3.0f);
}

TEST(Backward, LossWithoutTapeIsNotDifferentiable) {
  auto x = filled<float>({2}, 1).set_requires_grad(true);
  auto loss = sum(x);  // no active tape: nothing recorded
  Tape<float> tape;
  EXPECT_THROW(tape.backward(loss), AutodiffError);
}

TEST(Backward, DetachedTensorReceivesNoGrad) {
  Tape<double> tape;
  auto x = filled<double>({3}, 2).set_requires_grad(true);
  auto d = scale(x, 2.0).detach();
  auto w = filled<double>({3}, 1).set_requires_grad(true);
  tape.backward(sum(mul(w, d)));
  EXPECT_FALSE(x.has_grad());
  EXPECT_FALSE(d.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(Backward, ReachableTensorsGetGradients) {
  std::mt19937_64 rng(11);
  auto x = random_tensor<double>({1, 2, 4, 4}, rng).set_requires_grad(true);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng).set_requires_grad(true);
  auto b = random_tensor<double>({3}, rng).set_requires_grad(true);
  Tape<double> tape;
  tape.backward(mean(instance_norm(conv2d(x, w, b, {1, 1, PadMode::reflect}))));
  EXPECT_EQ(x.grad().size(), x.numel());
  EXPECT_EQ(w.grad().size(), w.numel());
  EXPECT_EQ(b.grad().size(), b.numel());
}

// ---------------------------------------------------------------------------------------------
// Finite-difference sweeps: 50 random cases per op and dtype.

template <class T>
void run_fd_sweep(std::uint64_t seed) {
  for (const auto& [name, worst] : mustgan::testing::op_fd_errors<T>(seed))
    EXPECT_LT(worst, gradcheck_tolerance<T>()) << name;
}

TEST(GradCheck, EveryOpFp64) { run_fd_sweep<double>(100); }

TEST(GradCheck, EveryOpFp32) { run_fd_sweep<float>(200); }

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(12);
  auto x = random_tensor<float>({2, 8, 16, 16}, rng);
  auto w = random_tensor<float>({16, 8, 3, 3}, rng);
  auto b = random_tensor<float>({16}, rng);
  auto once = instance_norm(conv2d(x, w, b, {1, 1, PadMode::reflect}));
  auto twice = instance_norm(conv2d(x, w, b, {1, 1, PadMode::reflect}));
  EXPECT_TRUE(bit_equal(once, twice));
}

TEST(Determinism, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(13);
  auto x = random_tensor<float>({2, 8, 16, 16}, rng);
  auto w = random_tensor<float>({16, 8, 3, 3}, rng);
  auto b = random_tensor<float>({16}, rng);
  Tensor<float> seq, par;
  {
    SequentialScope scope;
    seq = conv2d_transpose(instance_norm(conv2d(x, w, b, {2, 1, PadMode::zero})), w, Tensor<float>(), {2, 1, 1});
  }
  {
    ThreadCountScope scope(4);
    par = conv2d_transpose(instance_norm(conv2d(x, w, b, {2, 1, PadMode::zero})), w, Tensor<float>(), {2, 1, 1});
  }
  EXPECT_TRUE(bit_equal(seq, par));
}

TEST(Mtns, RoundTripBothDtypes) {
  const auto dir = std::filesystem::temp_directory_path() / "mustgan_mtns_test";
  std::filesystem::remove_all(dir);
  std::mt19937_64 rng(14);
  auto a = random_tensor<float>({2, 3, 4}, rng);
  auto b = random_tensor<double>({5}, rng);
  write_mtns(dir / "a.mtns", a);
  write_mtns(dir / "b.mtns", b);
  EXPECT_TRUE(bit_equal(read_mtns<float>(dir / "a.mtns"), a));
  EXPECT_TRUE(bit_equal(read_mtns<double>(dir / "b.mtns"), b));
  EXPECT_THROW(read_mtns<double>(dir / "a.mtns"), MtnsError);
  std::filesystem::remove_all(dir);
}

TEST(Mtns, HeaderLayout) {
  auto bytes = encode_mtns(Tensor<double>({2, 1}, {1.0, -2.0}));
  ASSERT_EQ(bytes.size(), 8u + 2 + 2 * 8 + 2 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "MTNS0001");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9], 2);
  EXPECT_EQ(bytes[10], 2);
  EXPECT_EQ(bytes[18], 1);
}

TEST(Mtns, TruncatedPayloadIsRejected) {
  auto bytes = encode_mtns(Tensor<float>({4}, {1, 2, 3, 4}));
  bytes.pop_back();
  EXPECT_THROW(decode_mtns<float>(bytes), MtnsError);
  bytes.resize(5);
  EXPECT_THROW(decode_mtns<float>(bytes), MtnsError);
}
