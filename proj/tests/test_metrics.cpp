#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mustgan/evaluate.hpp"
#include "support/oracles.hpp"

using namespace mustgan;

namespace {

Tensor<double> constant(std::size_t h, std::size_t w, double v) { return Tensor<double>(Shape{1, 1, h, w}, v); }

Tensor<double> noisy(const Tensor<double>& x, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  auto y = x.clone();
  for (double& v : y.mutable_values()) v += sigma * n(rng);
  return y;
}

Tensor<double> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return mustgan::testing::random_tensor<double>({1, 1, h, w}, rng, 0.0, 1.0);
}

// Independent SSIM: full 2-D window weights, straightforward moments, long double.
double oracle_ssim(const Tensor<double>& x, const Tensor<double>& y) {
  const std::size_t H = x.dim(2), W = x.dim(3), n = 11;
  long double w2[11][11], tot = 0;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      const long double du = static_cast<long double>(u) - 5, dv = static_cast<long double>(v) - 5;
      tot += w2[u][v] = std::exp(-(du * du + dv * dv) / (2 * 1.5L * 1.5L));
    }
  const long double C1 = 1e-4L, C2 = 9e-4L;
  long double acc = 0;
  for (std::size_t i = 0; i + n <= H; ++i)
    for (std::size_t j = 0; j + n <= W; ++j) {
      long double mx = 0, my = 0;
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = 0; v < n; ++v) {
          mx += w2[u][v] / tot * x[(i + u) * W + j + v];
          my += w2[u][v] / tot * y[(i + u) * W + j + v];
        }
      long double sx = 0, sy = 0, sxy = 0;
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = 0; v < n; ++v) {
          const long double a = x[(i + u) * W + j + v] - mx, b = y[(i + u) * W + j + v] - my;
          sx += w2[u][v] / tot * a * a;
          sy += w2[u][v] / tot * b * b;
          sxy += w2[u][v] / tot * a * b;
        }
      acc += (2 * mx * my + C1) * (2 * sxy + C2) / ((mx * mx + my * my + C1) * (sx + sy + C2));
    }
  return static_cast<double>(acc / ((H - n + 1) * (W - n + 1)));
}

// Exact two-sided signed-rank p for distinct integer ranks 1..n via the count distribution of W+.
double oracle_wilcoxon_exact(const std::vector<double>& d) {
  const std::size_t n = d.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::abs(d[a]) < std::abs(d[b]); });
  long w = 0;
  for (std::size_t r = 0; r < n; ++r)
    if (d[idx[r]] > 0) w += static_cast<long>(r + 1);
  const long total = static_cast<long>(n * (n + 1) / 2);
  std::vector<long double> count(total + 1, 0);
  count[0] = 1;
  for (long r = 1; r <= static_cast<long>(n); ++r)
    for (long s = total; s >= r; --s) count[s] += count[s - r];
  const long dev = std::labs(2 * w - total);
  long double tail = 0, all = 0;
  for (long s = 0; s <= total; ++s) {
    all += count[s];
    if (std::labs(2 * s - total) >= dev) tail += count[s];
  }
  return static_cast<double>(tail / all);
}

}  // namespace

// ---- PSNR ---------------------------------------------------------------------------------

TEST(Psnr, GoldenValues) {
  EXPECT_NEAR(psnr(constant(4, 4, 0.5), constant(4, 4, 0.6)), 20.0, 1e-12);
  // one of four pixels off by 0.2: MSE = 0.01
  Tensor<double> a(Shape{1, 1, 1, 4}, std::vector<double>{0, 0, 0, 0});
  Tensor<double> b(Shape{1, 1, 1, 4}, std::vector<double>{0.2, 0, 0, 0});
  EXPECT_EQ(psnr(a, b), 20.0);
  EXPECT_EQ(psnr(constant(3, 3, 0), constant(3, 3, 1)), 0.0);
  EXPECT_TRUE(std::isinf(psnr(constant(3, 3, 0.4), constant(3, 3, 0.4))));
  EXPECT_GT(psnr(constant(3, 3, 0.4), constant(3, 3, 0.4)), 0);
  EXPECT_THROW(psnr(constant(3, 3, 0), constant(3, 4, 0)), ShapeError);
}

TEST(Psnr, StrictlyDecreasingInPerturbation) {
  const auto x = random_image(8, 8, 1);
  double prev = std::numeric_limits<double>::infinity();
  for (double d : {1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3}) {
    auto y = x.clone();
    for (double& v : y.mutable_values()) v += d;
    const double p = psnr(x, y);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

// ---- SSIM ---------------------------------------------------------------------------------

TEST(Ssim, GoldenValues) {
  const auto x = random_image(24, 20, 3);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  EXPECT_NEAR(ssim(constant(16, 16, 0), constant(16, 16, 1)), 1e-4 / (1 + 1e-4), 1e-9);
  EXPECT_THROW(ssim(constant(10, 16, 0), constant(10, 16, 0)), ShapeError);
  EXPECT_THROW(ssim(constant(16, 16, 0), constant(16, 17, 0)), ShapeError);
}

TEST(Ssim, MatchesIndependentOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto x = random_image(16 + s, 20, 10 + s);
    const auto y = noisy(x, 0.05 * (s + 1), 20 + s);
    EXPECT_NEAR(ssim(x, y), oracle_ssim(x, y), 1e-12);
  }
}

TEST(Ssim, SymmetricAndDegradesWithNoise) {
  const auto x = random_image(32, 32, 5);
  double prev = 1.0;
  for (double sigma : {1e-3, 1e-2, 1e-1}) {
    const auto y = noisy(x, sigma, 7);
    const double s = ssim(x, y);
    EXPECT_LT(s, prev);
    EXPECT_NEAR(s, ssim(y, x), 1e-12);
    prev = s;
  }
}

TEST(Ssim, PureFunction) {
  const auto x = random_image(16, 16, 1), y = random_image(16, 16, 2);
  EXPECT_EQ(ssim(x, y), ssim(x, y));
  EXPECT_EQ(psnr(x, y), psnr(x, y));
}

// ---- Wilcoxon -----------------------------------------------------------------------------

TEST(Wilcoxon, GoldenValues) {
  const std::vector<double> a = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(wilcoxon_signed_rank(a, a), 1.0);
  std::vector<double> b = a;
  for (std::size_t k = 0; k < b.size(); ++k) b[k] -= 0.1 * (k + 1);
  EXPECT_EQ(wilcoxon_signed_rank(a, b), 0.03125);
  EXPECT_EQ(wilcoxon_signed_rank(b, a), 0.03125);
  EXPECT_EQ(wilcoxon_signed_rank(a, b, WilcoxonMethod::exact), 2.0 / 64.0);
}

TEST(Wilcoxon, ExactMatchesCountingOracle) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.2, 1);
  for (std::size_t size : {5u, 8u, 12u}) {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> a(size), b(size, 0.0);
      for (auto& v : a) v = n(rng);
      EXPECT_NEAR(wilcoxon_signed_rank(a, b, WilcoxonMethod::exact), oracle_wilcoxon_exact(a), 1e-15);
    }
  }
}

TEST(Wilcoxon, NormalApproximationAgreesWithExact) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.3, 1);
  double worst12 = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(12), b(12, 0.0);
    for (auto& v : a) v = n(rng);
    worst12 = std::max(worst12, std::abs(wilcoxon_signed_rank(a, b, WilcoxonMethod::normal) -
                                         wilcoxon_signed_rank(a, b, WilcoxonMethod::exact)));
  }
  EXPECT_LT(worst12, 0.02);

  double worst50 = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(50), b(50, 0.0);
    for (auto& v : a) v = n(rng);
    const double p = wilcoxon_signed_rank(a, b);
    worst50 = std::max(worst50, std::abs(p - oracle_wilcoxon_exact(a)));
  }
  EXPECT_LT(worst50, 0.02);
}

TEST(Wilcoxon, TiesAndZeros) {
  // zeros dropped; tied |d| share the average rank
  const std::vector<double> a = {1, 1, 2, 5, 0, 3, 3};
  const std::vector<double> b = {0, 2, 1, 5, 0, 0, 6};
  const auto r = signed_ranks(a, b);
  ASSERT_EQ(r.ranks.size(), 5u);  // d = 1, -1, 1, 3, -3
  EXPECT_EQ(r.ranks, (std::vector<double>{2, 2, 2, 4.5, 4.5}));
  EXPECT_EQ(r.w_plus, 2 + 2 + 4.5);
  EXPECT_EQ(r.tie_term, (27 - 3) + (8 - 2));
  const double p = wilcoxon_signed_rank(a, b);
  EXPECT_GT(p, 0.0);
  EXPECT_LE(p, 1.0);
  EXPECT_THROW(wilcoxon_signed_rank({1, 2}, {1}), std::invalid_argument);
}

TEST(Summary, RecomputesAndExcludesInfinity) {
  const std::vector<double> v = {1, 2, 3, 4, std::numeric_limits<double>::infinity()};
  const auto s = summarize(v);
  EXPECT_EQ(s.n, 4u);
  EXPECT_EQ(s.n_infinite, 1u);
  EXPECT_NEAR(s.mean, 2.5, 1e-12);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-12);
}

// ---- evaluation ---------------------------------------------------------------------------

namespace {

PhantomDataset tiny_data() {
  PhantomSpec s;
  s.image_size = 16;
  s.n_subjects = 2;
  s.slices_per_subject = 3;
  auto ds = generate_phantoms(s, 4);
  assign_splits(ds, {1, 1, 0});
  return ds;
}

}  // namespace

TEST(Evaluate, GroundTruthHook) {
  const auto ds = tiny_data();
  const auto roles = resolve_roles(ds.spec, {});
  const auto rep = evaluate({{"truth", ground_truth_synthesizer(roles)}}, ds.split("val"), roles, "val");
  const auto& m = rep.model("truth");
  EXPECT_EQ(m.ssim_slices.mean, 1.0);
  EXPECT_EQ(m.psnr_slices.n_infinite, 3u);
  for (double p : m.psnr) EXPECT_TRUE(std::isinf(p));
}

TEST(Evaluate, IdenticalModelsTie) {
  const auto ds = tiny_data();
  const auto roles = resolve_roles(ds.spec, {});
  auto blur = [roles](const PhantomSample& s) {
    auto y = s.images.at(roles.target).clone();
    for (double& v : y.mutable_values()) v = 0.5 * v + 0.2;
    return y;
  };
  const auto rep = evaluate({{"a", blur}, {"b", blur}}, ds.split("val"), roles, "val");
  const auto& p = rep.pair("a", "b");
  EXPECT_EQ(p.psnr.wins_a, 0u);
  EXPECT_EQ(p.psnr.wins_b, 0u);
  EXPECT_EQ(p.psnr.tie_rate(), 1.0);
  EXPECT_EQ(p.psnr.p_value, 1.0);
  EXPECT_FALSE(p.psnr.significant);
}

TEST(Evaluate, SummariesRecomputeFromSamples) {
  const auto ds = tiny_data();
  const auto roles = resolve_roles(ds.spec, {});
  std::mt19937_64 rng(1);
  auto noisy_fn = [&](const PhantomSample& s) { return noisy(s.images.at(roles.target), 0.05, s.slice_id); };
  const auto rep = evaluate({{"n", noisy_fn}}, ds.split("val"), roles, "val");
  const auto& m = rep.model("n");
  double sum = 0;
  for (double v : m.psnr) sum += v;
  EXPECT_NEAR(m.psnr_slices.mean, sum / m.psnr.size(), 1e-12);
  const auto j = rep.to_json();
  EXPECT_EQ(j["models"][0]["psnr"].size(), 3u);
  EXPECT_FALSE(rep.to_table().empty());
}

TEST(Evaluate, EmptySplitRejected) {
  const auto ds = tiny_data();
  const auto roles = resolve_roles(ds.spec, {});
  EXPECT_THROW(evaluate({{"t", ground_truth_synthesizer(roles)}}, ds.split("test"), roles, "test"), std::invalid_argument);
}

TEST(Evaluate, RolesResolve) {
  PhantomSpec s;
  const auto r = resolve_roles(s, {{"T", "A"}, "B"});
  EXPECT_EQ(r.sources, (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(r.target, 1u);
  EXPECT_THROW(resolve_roles(s, {{"A", "B"}, "A"}), std::invalid_argument);
  EXPECT_THROW(resolve_roles(s, {{"A", "X"}, "T"}), std::invalid_argument);
}

TEST(Evaluate, NetworkRangeMapping) {
  Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{0, 0.25, 1});
  const auto n = to_network<float>(x);
  EXPECT_EQ(n[0], -1.0f);
  EXPECT_EQ(n[1], -0.5f);
  EXPECT_EQ(n[2], 1.0f);
  const auto back = from_network(n);
  EXPECT_EQ(back[1], 0.25);
}
