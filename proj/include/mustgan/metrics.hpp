#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/tensor.hpp"

namespace mustgan {

namespace detail {

inline void require_same_shape(const Tensor<double>& a, const Tensor<double>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": reference " + to_string(a.shape()) + " vs candidate " + to_string(b.shape()));
}

}  // namespace detail

/// PSNR in dB for images scaled to a peak of 1. Identical images give +infinity.
inline double psnr(const Tensor<double>& reference, const Tensor<double>& candidate) {
  detail::require_same_shape(reference, candidate, "psnr");
  if (reference.numel() == 0) throw ShapeError("psnr: empty images");
  long double se = 0;
  for (std::size_t i = 0; i < reference.numel(); ++i) {
    const long double d = static_cast<long double>(reference[i]) - candidate[i];
    se += d * d;
  }
  const double mse = static_cast<double>(se / reference.numel());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Normalized separable Gaussian window.
inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1) / 2;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) total += g[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  for (double& v : g) v /= total;
  return g;
}

/// Mean SSIM over every fully contained window position of each HxW plane. Leading dimensions
/// are treated as separate planes and averaged.
inline double ssim(const Tensor<double>& reference, const Tensor<double>& candidate, const SsimOptions& opt = {}) {
  detail::require_same_shape(reference, candidate, "ssim");
  if (reference.rank() < 2) throw ShapeError("ssim: images need at least 2 dimensions");
  const std::size_t H = reference.dim(reference.rank() - 2), W = reference.dim(reference.rank() - 1);
  if (H < opt.window || W < opt.window)
    throw ShapeError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than the " +
                     std::to_string(opt.window) + "x" + std::to_string(opt.window) + " window");
  const std::size_t planes = reference.numel() / (H * W), n = opt.window;
  const auto g = gaussian_window(n, opt.sigma);
  const double C1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
  const double C2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
  const std::size_t oh = H - n + 1, ow = W - n + 1;

  double total = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* x = reference.values().data() + p * H * W;
    const double* y = candidate.values().data() + p * H * W;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (std::size_t u = 0; u < n; ++u)
          for (std::size_t v = 0; v < n; ++v) {
            const double w = g[u] * g[v];
            const double a = x[(i + u) * W + j + v], b = y[(i + u) * W + j + v];
            mx += w * a;
            my += w * b;
            xx += w * a * a;
            yy += w * b * b;
            xy += w * a * b;
          }
        const double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
        total += ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
      }
  }
  return total / static_cast<double>(planes * oh * ow);
}

// ---- Wilcoxon signed-rank ------------------------------------------------------------------

struct SignedRanks {
  std::vector<double> ranks;  // average ranks of |d| over the nonzero differences
  std::vector<bool> positive;
  double tie_term = 0;        // sum over tie groups of (t^3 - t)
  double w_plus = 0;
};

/// Differences a - b with zeros dropped; infinities compare as equal when both sides are infinite.
inline SignedRanks signed_ranks(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("wilcoxon: paired samples differ in length (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a[i]) || std::isnan(b[i])) throw std::invalid_argument("wilcoxon: NaN score");
    const double x = a[i] == b[i] ? 0.0 : a[i] - b[i];
    if (x != 0) d.push_back(x);
  }
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t p, std::size_t q) { return std::abs(d[p]) < std::abs(d[q]); });
  SignedRanks out;
  out.ranks.resize(d.size());
  out.positive.resize(d.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && std::abs(d[idx[j + 1]]) == std::abs(d[idx[i]])) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2;
    const double t = static_cast<double>(j - i + 1);
    out.tie_term += t * t * t - t;
    for (std::size_t k = i; k <= j; ++k) out.ranks[idx[k]] = r;
    i = j + 1;
  }
  for (std::size_t k = 0; k < d.size(); ++k) {
    out.positive[k] = d[k] > 0;
    if (d[k] > 0) out.w_plus += out.ranks[k];
  }
  return out;
}

/// Exact two-sided p by enumerating all 2^n sign assignments of the observed ranks.
inline double wilcoxon_exact_p(const SignedRanks& r) {
  const std::size_t n = r.ranks.size();
  if (n == 0) return 1.0;
  if (n > 24) throw std::invalid_argument("wilcoxon: exact enumeration limited to n <= 24");
  // Ranks are multiples of 1/2; work in doubled integers.
  std::vector<long> r2(n);
  long total = 0;
  for (std::size_t k = 0; k < n; ++k) total += r2[k] = std::lround(2 * r.ranks[k]);
  const long obs = std::lround(2 * r.w_plus);
  const long dev = std::labs(2 * obs - total);  // |2 W+ - sum| in doubled units
  std::size_t extreme = 0;
  const std::size_t count = std::size_t{1} << n;
  for (std::size_t mask = 0; mask < count; ++mask) {
    long w = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (mask >> k & 1) w += r2[k];
    if (std::labs(2 * w - total) >= dev) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(count);
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity correction.
inline double wilcoxon_normal_p(const SignedRanks& r) {
  const double n = static_cast<double>(r.ranks.size());
  if (n == 0) return 1.0;
  const double mean = n * (n + 1) / 4;
  const double var = n * (n + 1) * (2 * n + 1) / 24 - r.tie_term / 48;
  if (!(var > 0)) return 1.0;
  const double z = std::max(0.0, std::abs(r.w_plus - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

enum class WilcoxonMethod { automatic, exact, normal };

inline constexpr std::size_t kWilcoxonExactMax = 12;

/// Two-sided paired test of a vs b. Zero differences are dropped; if none remain p = 1.
/// Automatic method: exact enumeration for n <= 12, normal approximation above.
inline double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                   WilcoxonMethod method = WilcoxonMethod::automatic) {
  const auto r = signed_ranks(a, b);
  if (r.ranks.empty()) return 1.0;
  const bool exact = method == WilcoxonMethod::exact ||
                     (method == WilcoxonMethod::automatic && r.ranks.size() <= kWilcoxonExactMax);
  return exact ? wilcoxon_exact_p(r) : wilcoxon_normal_p(r);
}

// ---- summaries ------------------------------------------------------------------------------

struct SummaryStats {
  double mean = 0;
  double std = 0;            // sample standard deviation (n - 1)
  std::size_t n = 0;         // finite values used
  std::size_t n_infinite = 0;  // +inf sentinels excluded from mean/std
};

inline SummaryStats summarize(const std::vector<double>& values) {
  SummaryStats s;
  long double sum = 0;
  for (double v : values) {
    if (std::isinf(v)) {
      ++s.n_infinite;
      continue;
    }
    sum += v;
    ++s.n;
  }
  if (s.n == 0) {
    s.mean = s.n_infinite ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.mean = static_cast<double>(sum / s.n);
  long double ss = 0;
  for (double v : values)
    if (!std::isinf(v)) ss += (v - s.mean) * (v - s.mean);
  s.std = s.n > 1 ? static_cast<double>(std::sqrt(ss / (s.n - 1))) : 0.0;
  return s;
}

struct PairComparison {
  std::size_t wins_a = 0, wins_b = 0, ties = 0;
  double p_value = 1;
  bool significant = false;  // p < 0.05
  double win_rate_a() const { return total() ? static_cast<double>(wins_a) / total() : 0; }
  double win_rate_b() const { return total() ? static_cast<double>(wins_b) / total() : 0; }
  double tie_rate() const { return total() ? static_cast<double>(ties) / total() : 0; }
  std::size_t total() const { return wins_a + wins_b + ties; }
};

inline constexpr double kSignificanceLevel = 0.05;

/// Per-sample win counts (higher is better) and the paired Wilcoxon p-value.
inline PairComparison compare_paired(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("compare_paired: lengths differ");
  PairComparison c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i])
      ++c.wins_a;
    else if (b[i] > a[i])
      ++c.wins_b;
    else
      ++c.ties;
  }
  c.p_value = wilcoxon_signed_rank(a, b);
  c.significant = c.p_value < kSignificanceLevel;
  return c;
}

}  // namespace mustgan
