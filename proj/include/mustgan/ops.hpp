#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "mustgan/core/gemm.hpp"
#include "mustgan/core/parallel.hpp"
#include "mustgan/tensor.hpp"

namespace mustgan {

enum class PadMode { zero, reflect };

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::zero;
};

struct ConvTransposeOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  /// Extra rows/cols appended on the bottom/right edge; must be < stride.
  std::size_t output_padding = 0;
};

inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kLogClampEps = 1e-7;

namespace detail {

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

/// Marks `out` as differentiable and records `fn` when a tape is active and some input needs grad.
template <class T, class Fn>
Tensor<T> record(Tensor<T> out, std::vector<const Tensor<T>*> inputs, Fn&& fn) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return out;
  bool needed = false;
  std::vector<NodePtr<T>> nodes;
  for (const auto* t : inputs) {
    if (!t || !t->defined()) continue;
    needed = needed || t->requires_grad();
    nodes.push_back(t->node());
  }
  if (!needed) return out;
  out.set_requires_grad(true);
  tape->record(out.node(), std::move(nodes), std::forward<Fn>(fn));
  return out;
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void require_rank4(const Tensor<T>& t, const char* op, const char* name) {
  require(t.defined() && t.rank() == 4, std::string(op) + ": " + name + " must be rank 4 [B,C,H,W], got " +
                                            (t.defined() ? to_string(t.shape()) : std::string("undefined")));
}

inline long reflect_index(long p, long n) {
  if (n == 1) return 0;
  while (p < 0 || p >= n) {
    if (p < 0) p = -p;
    if (p >= n) p = 2 * (n - 1) - p;
  }
  return p;
}

/// Sampling geometry of a strided, padded window over an image. Maps each (kernel tap,
/// output position) pair to a source row/column, or -1 for zero padding.
struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, out_h, out_w;
  std::vector<long> row_src;  // [kh * out_h]
  std::vector<long> col_src;  // [kw * out_w]

  ConvGeometry(std::size_t c, std::size_t h, std::size_t w, std::size_t kh_, std::size_t kw_, std::size_t s,
               std::size_t pad, PadMode mode, std::size_t oh, std::size_t ow)
      : channels(c), height(h), width(w), kh(kh_), kw(kw_), stride(s), out_h(oh), out_w(ow) {
    row_src = axis_map(h, kh, s, pad, mode, oh);
    col_src = axis_map(w, kw, s, pad, mode, ow);
  }

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }

  static std::vector<long> axis_map(std::size_t n, std::size_t k, std::size_t s, std::size_t pad, PadMode mode,
                                    std::size_t out) {
    std::vector<long> m(k * out);
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t o = 0; o < out; ++o) {
        long p = static_cast<long>(o * s + t) - static_cast<long>(pad);
        if (p < 0 || p >= static_cast<long>(n)) p = (mode == PadMode::reflect) ? reflect_index(p, static_cast<long>(n)) : -1;
        m[t * out + o] = p;
      }
    return m;
  }

  // cols[(c*kh+ky)*kw+kx][oy*out_w+ox] = image[c][row][col]
  template <class T>
  void im2col(const T* image, T* cols) const {
    parallel_for(0, channels, 1, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t c = lo; c < hi; ++c) {
        const T* src = image + c * height * width;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            T* dst = cols + ((c * kh + ky) * kw + kx) * positions();
            const long* rmap = row_src.data() + ky * out_h;
            const long* cmap = col_src.data() + kx * out_w;
            for (std::size_t oy = 0; oy < out_h; ++oy) {
              const long r = rmap[oy];
              T* d = dst + oy * out_w;
              if (r < 0) {
                std::fill(d, d + out_w, T(0));
                continue;
              }
              const T* row = src + r * width;
              for (std::size_t ox = 0; ox < out_w; ++ox) {
                const long cc = cmap[ox];
                d[ox] = cc < 0 ? T(0) : row[cc];
              }
            }
          }
      }
    });
  }

  // Adjoint of im2col: image[c][row][col] += cols[...]
  template <class T>
  void col2im(const T* cols, T* image) const {
    parallel_for(0, channels, 1, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t c = lo; c < hi; ++c) {
        T* dst = image + c * height * width;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T* src = cols + ((c * kh + ky) * kw + kx) * positions();
            const long* rmap = row_src.data() + ky * out_h;
            const long* cmap = col_src.data() + kx * out_w;
            for (std::size_t oy = 0; oy < out_h; ++oy) {
              const long r = rmap[oy];
              if (r < 0) continue;
              T* row = dst + r * width;
              const T* s = src + oy * out_w;
              for (std::size_t ox = 0; ox < out_w; ++ox) {
                const long cc = cmap[ox];
                if (cc >= 0) row[cc] += s[ox];
              }
            }
          }
      }
    });
  }
};

template <class T>
void add_channel_bias(T* out, const T* bias, std::size_t channels, std::size_t plane) {
  for (std::size_t c = 0; c < channels; ++c) {
    const T b = bias[c];
    T* p = out + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += b;
  }
}

template <class T>
void accumulate_bias_grad(const T* dy, T* dbias, std::size_t batch, std::size_t channels, std::size_t plane) {
  for (std::size_t c = 0; c < channels; ++c) {
    T acc = dbias[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = dy + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    }
    dbias[c] = acc;
  }
}

// Direct stride-1 convolution over an explicitly padded copy of the input, for outputs with too
// few channels to fill a GEMM row tile. There im2col would build a K x P buffer only to take one
// dot product per pixel from it.
inline constexpr std::size_t kDirectConvMaxOut = 3;

inline long padded_source(long q, std::size_t pad, std::size_t n, PadMode mode) {
  const long p = q - static_cast<long>(pad);
  if (p >= 0 && p < static_cast<long>(n)) return p;
  return mode == PadMode::reflect ? reflect_index(p, static_cast<long>(n)) : -1;
}

template <class T>
std::vector<T> pad_planes(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t pad, PadMode mode) {
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  std::vector<T> out(C * Hp * Wp, T(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < Hp; ++r) {
      const long sr = padded_source(static_cast<long>(r), pad, H, mode);
      if (sr < 0) continue;
      const T* src = x + (c * H + sr) * W;
      T* dst = out.data() + (c * Hp + r) * Wp;
      for (std::size_t q = 0; q < Wp; ++q) {
        const long sc = padded_source(static_cast<long>(q), pad, W, mode);
        if (sc >= 0) dst[q] = src[sc];
      }
    }
  return out;
}

// Adjoint of pad_planes: dx += fold(dpad).
template <class T>
void fold_padded_grad(const T* dpad, T* dx, std::size_t C, std::size_t H, std::size_t W, std::size_t pad,
                      PadMode mode) {
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < Hp; ++r) {
      const long sr = padded_source(static_cast<long>(r), pad, H, mode);
      if (sr < 0) continue;
      const T* src = dpad + (c * Hp + r) * Wp;
      T* dst = dx + (c * H + sr) * W;
      for (std::size_t q = 0; q < Wp; ++q) {
        const long sc = padded_source(static_cast<long>(q), pad, W, mode);
        if (sc >= 0) dst[sc] += src[q];
      }
    }
}

struct DirectConv {
  std::size_t Cin, Cout, kh, kw, Hp, Wp, Ho, Wo;

  // y[co] = sum over (ci, ky, kx) ascending of w * shifted rows of xp
  template <class T>
  void forward(const T* xp, const T* w, T* y) const {
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        T* yr = y + (co * Ho + oy) * Wo;
        std::fill(yr, yr + Wo, T(0));
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const T* xr = xp + (ci * Hp + oy + ky) * Wp;
            const T* wr = w + ((co * Cin + ci) * kh + ky) * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const T a = wr[kx];
              const T* xs = xr + kx;
              for (std::size_t ox = 0; ox < Wo; ++ox) yr[ox] += a * xs[ox];
            }
          }
      }
  }

  // dw += dy (*) xp, reduced per output column first so the inner loop vectorizes
  template <class T>
  void weight_grad(const T* xp, const T* dy, T* dw) const {
    std::vector<T> part(Wo);
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            std::fill(part.begin(), part.end(), T(0));
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const T* g = dy + (co * Ho + oy) * Wo;
              const T* xs = xp + (ci * Hp + oy + ky) * Wp + kx;
              for (std::size_t ox = 0; ox < Wo; ++ox) part[ox] += g[ox] * xs[ox];
            }
            T acc = 0;
            for (std::size_t ox = 0; ox < Wo; ++ox) acc += part[ox];
            dw[((co * Cin + ci) * kh + ky) * kw + kx] += acc;
          }
  }

  // dxp += w^T (*) dy, scattered along the same shifted rows as forward
  template <class T>
  void input_grad(const T* w, const T* dy, T* dxp) const {
    for (std::size_t ci = 0; ci < Cin; ++ci)
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T a = w[((co * Cin + ci) * kh + ky) * kw + kx];
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const T* g = dy + (co * Ho + oy) * Wo;
              T* d = dxp + (ci * Hp + oy + ky) * Wp + kx;
              for (std::size_t ox = 0; ox < Wo; ++ox) d[ox] += a * g[ox];
            }
          }
  }
};

}  // namespace detail

namespace detail {

template <class T>
Tensor<T> conv2d_direct(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt,
                        Tensor<T> out) {
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t pad = opt.padding;
  const DirectConv dc{Cin, weight.dim(0), weight.dim(2), weight.dim(3), H + 2 * pad, W + 2 * pad, out.dim(2), out.dim(3)};
  const std::size_t in_plane = Cin * H * W, out_plane = dc.Cout * dc.Ho * dc.Wo;
  for (std::size_t b = 0; b < B; ++b) {
    const auto xp = pad_planes(input.values().data() + b * in_plane, Cin, H, W, pad, opt.pad_mode);
    T* y = out.mutable_values().data() + b * out_plane;
    dc.forward(xp.data(), weight.values().data(), y);
    if (bias.defined()) add_channel_bias(y, bias.values().data(), dc.Cout, dc.Ho * dc.Wo);
  }
  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return record(std::move(out), {&input, &weight, &bias}, [xn, wn, bn, dc, B, H, W, opt](TensorNode<T>& o) {
    const std::size_t in_plane = dc.Cin * H * W, out_plane = dc.Cout * dc.Ho * dc.Wo;
    const T* dy = o.grad.data();
    for (std::size_t b = 0; b < B; ++b) {
      if (wn->requires_grad) {
        const auto xp = pad_planes(xn->values.data() + b * in_plane, dc.Cin, H, W, opt.padding, opt.pad_mode);
        dc.weight_grad(xp.data(), dy + b * out_plane, wn->grad_buffer().data());
      }
      if (xn->requires_grad) {
        std::vector<T> dxp(dc.Cin * dc.Hp * dc.Wp, T(0));
        dc.input_grad(wn->values.data(), dy + b * out_plane, dxp.data());
        fold_padded_grad(dxp.data(), xn->grad_buffer().data() + b * in_plane, dc.Cin, H, W, opt.padding, opt.pad_mode);
      }
    }
    if (bn && bn->requires_grad) accumulate_bias_grad(dy, bn->grad_buffer().data(), B, dc.Cout, dc.Ho * dc.Wo);
  });
}

}  // namespace detail

/// 2-D cross-correlation. input [B,Cin,H,W], weight [Cout,Cin,kH,kW], bias [Cout] (may be undefined).
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {}) {
  using namespace detail;
  require_rank4(input, "conv2d", "input");
  require_rank4(weight, "conv2d", "weight");
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == Cin, "conv2d: input has " + std::to_string(Cin) + " channels but weight " +
                                    to_string(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  require(kh >= 1 && kw >= 1 && opt.stride >= 1, "conv2d: kernel extents and stride must be >= 1");
  require(H + 2 * opt.padding >= kh && W + 2 * opt.padding >= kw,
          "conv2d: padded input " + std::to_string(H + 2 * opt.padding) + "x" + std::to_string(W + 2 * opt.padding) +
              " smaller than kernel " + std::to_string(kh) + "x" + std::to_string(kw));
  if (opt.pad_mode == PadMode::reflect)
    require(opt.padding < H && opt.padding < W, "conv2d: reflect padding must be smaller than the input extent");
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == Cout, "conv2d: bias must have shape [" + std::to_string(Cout) + "]");

  const std::size_t Ho = (H + 2 * opt.padding - kh) / opt.stride + 1;
  const std::size_t Wo = (W + 2 * opt.padding - kw) / opt.stride + 1;
  const ConvGeometry geo(Cin, H, W, kh, kw, opt.stride, opt.padding, opt.pad_mode, Ho, Wo);
  const std::size_t K = geo.patch(), P = geo.positions();

  Tensor<T> out(Shape{B, Cout, Ho, Wo});
  if (opt.stride == 1 && Cout <= kDirectConvMaxOut)
    return conv2d_direct(input, weight, bias, opt, std::move(out));
  {
    std::vector<T> cols(K * P);
    const T* x = input.values().data();
    T* y = out.mutable_values().data();
    for (std::size_t b = 0; b < B; ++b) {
      geo.im2col(x + b * Cin * H * W, cols.data());
      gemm(Cout, P, K, weight.values().data(), K, cols.data(), P, y + b * Cout * P, P, false);
      if (bias.defined()) add_channel_bias(y + b * Cout * P, bias.values().data(), Cout, P);
    }
  }

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return record(std::move(out), {&input, &weight, &bias}, [xn, wn, bn, geo, B, Cin, Cout, H, W](TensorNode<T>& o) {
    const std::size_t K = geo.patch(), P = geo.positions();
    const T* dy = o.grad.data();
    std::vector<T> cols(K * P), scratch(K * P);
    if (wn->requires_grad) {
      T* dw = wn->grad_buffer().data();
      for (std::size_t b = 0; b < B; ++b) {
        geo.im2col(xn->values.data() + b * Cin * H * W, cols.data());
        transpose(K, P, cols.data(), scratch.data());
        gemm(Cout, K, P, dy + b * Cout * P, P, scratch.data(), K, dw, K, true);
      }
    }
    if (bn && bn->requires_grad) accumulate_bias_grad(dy, bn->grad_buffer().data(), B, Cout, P);
    if (xn->requires_grad) {
      std::vector<T> wt(K * Cout);
      transpose(Cout, K, wn->values.data(), wt.data());
      T* dx = xn->grad_buffer().data();
      for (std::size_t b = 0; b < B; ++b) {
        gemm(K, P, Cout, wt.data(), Cout, dy + b * Cout * P, P, cols.data(), P, false);
        geo.col2im(cols.data(), dx + b * Cin * H * W);
      }
    }
  });
}

/// Fractionally strided convolution, the adjoint of conv2d's forward map.
/// input [B,Cin,H,W], weight [Cin,Cout,kH,kW]; output extent (H-1)*stride - 2*padding + kH + output_padding.
template <class T>
Tensor<T> conv2d_transpose(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           ConvTransposeOptions opt = {}) {
  using namespace detail;
  require_rank4(input, "conv2d_transpose", "input");
  require_rank4(weight, "conv2d_transpose", "weight");
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(0) == Cin, "conv2d_transpose: input has " + std::to_string(Cin) + " channels but weight " +
                                    to_string(weight.shape()) + " expects " + std::to_string(weight.dim(0)));
  require(opt.stride >= 1 && kh >= 1 && kw >= 1, "conv2d_transpose: stride and kernel extents must be >= 1");
  require(opt.output_padding < opt.stride, "conv2d_transpose: output_padding must be smaller than stride");
  const long ho = static_cast<long>((H - 1) * opt.stride + kh + opt.output_padding) - 2 * static_cast<long>(opt.padding);
  const long wo = static_cast<long>((W - 1) * opt.stride + kw + opt.output_padding) - 2 * static_cast<long>(opt.padding);
  require(ho >= 1 && wo >= 1, "conv2d_transpose: padding leaves an empty output");
  if (bias.defined())
    require(bias.rank() == 1 && bias.dim(0) == Cout, "conv2d_transpose: bias must have shape [" + std::to_string(Cout) + "]");
  const std::size_t Ho = static_cast<std::size_t>(ho), Wo = static_cast<std::size_t>(wo);
  // The output grid plays the role of a conv2d input whose windows land on the input grid.
  const ConvGeometry geo(Cout, Ho, Wo, kh, kw, opt.stride, opt.padding, PadMode::zero, H, W);
  const std::size_t K = geo.patch(), P = geo.positions();

  Tensor<T> out(Shape{B, Cout, Ho, Wo});
  {
    std::vector<T> wt(K * Cin), cols(K * P);
    transpose(Cin, K, weight.values().data(), wt.data());
    const T* x = input.values().data();
    T* y = out.mutable_values().data();
    for (std::size_t b = 0; b < B; ++b) {
      gemm(K, P, Cin, wt.data(), Cin, x + b * Cin * P, P, cols.data(), P, false);
      geo.col2im(cols.data(), y + b * Cout * Ho * Wo);
      if (bias.defined()) add_channel_bias(y + b * Cout * Ho * Wo, bias.values().data(), Cout, Ho * Wo);
    }
  }

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return record(std::move(out), {&input, &weight, &bias}, [xn, wn, bn, geo, B, Cin, Cout](TensorNode<T>& o) {
    const std::size_t K = geo.patch(), P = geo.positions();
    const std::size_t plane = geo.height * geo.width;
    const T* dy = o.grad.data();
    std::vector<T> cols(K * P), scratch;
    if (wn->requires_grad) scratch.resize(K * P);
    for (std::size_t b = 0; b < B; ++b) {
      geo.im2col(dy + b * Cout * plane, cols.data());
      if (xn->requires_grad)
        gemm(Cin, P, K, wn->values.data(), K, cols.data(), P, xn->grad_buffer().data() + b * Cin * P, P, true);
      if (wn->requires_grad) {
        transpose(K, P, cols.data(), scratch.data());
        gemm(Cin, K, P, xn->values.data() + b * Cin * P, P, scratch.data(), K, wn->grad_buffer().data(), K, true);
      }
    }
    if (bn && bn->requires_grad) accumulate_bias_grad(dy, bn->grad_buffer().data(), B, Cout, plane);
  });
}

/// Per-(sample, channel) standardization without affine parameters.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& input, double eps = kInstanceNormEps) {
  using namespace detail;
  require_rank4(input, "instance_norm", "input");
  const std::size_t planes = input.dim(0) * input.dim(1), n = input.dim(2) * input.dim(3);
  require(n >= 2, "instance_norm: needs H*W >= 2, got " + to_string(input.shape()));
  Tensor<T> out(input.shape());
  std::vector<double> inv_std(planes);
  const T* x = input.values().data();
  T* y = out.mutable_values().data();
  parallel_for(0, planes, 4, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      const T* xp = x + p * n;
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += xp[i];
      mean /= static_cast<double>(n);
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (xp[i] - mean) * (xp[i] - mean);
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[p] = is;
      for (std::size_t i = 0; i < n; ++i) y[p * n + i] = static_cast<T>((xp[i] - mean) * is);
    }
  });
  auto xn = input.node();
  return record(std::move(out), {&input}, [xn, inv_std, planes, n](TensorNode<T>& o) {
    const T* dy = o.grad.data();
    const T* yv = o.values.data();
    T* dx = xn->grad_buffer().data();
    for (std::size_t p = 0; p < planes; ++p) {
      double mdy = 0, mdyy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mdy += dy[p * n + i];
        mdyy += static_cast<double>(dy[p * n + i]) * yv[p * n + i];
      }
      mdy /= static_cast<double>(n);
      mdyy /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        dx[p * n + i] += static_cast<T>(inv_std[p] * (dy[p * n + i] - mdy - yv[p * n + i] * mdyy));
    }
  });
}

enum class ActKind { identity, relu, leaky_relu, tanh, sigmoid };

struct Activation {
  ActKind kind = ActKind::identity;
  double slope = 0.2;  // leaky_relu only

  static Activation identity() { return {ActKind::identity}; }
  static Activation relu() { return {ActKind::relu}; }
  static Activation leaky_relu(double slope) { return {ActKind::leaky_relu, slope}; }
  static Activation tanh() { return {ActKind::tanh}; }
  static Activation sigmoid() { return {ActKind::sigmoid}; }
};

/// Elementwise nonlinearity. relu takes subgradient 0 at the kink.
template <class T>
Tensor<T> activation(const Tensor<T>& input, Activation act) {
  if (act.kind == ActKind::leaky_relu && !(act.slope > 0 && act.slope < 1))
    throw std::invalid_argument("leaky_relu slope must lie in (0,1)");
  if (act.kind == ActKind::identity) return input;
  Tensor<T> out(input.shape());
  const T* x = input.values().data();
  T* y = out.mutable_values().data();
  const std::size_t n = input.numel();
  const T slope = static_cast<T>(act.slope);
  switch (act.kind) {
    case ActKind::relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case ActKind::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
      break;
    case ActKind::tanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
      break;
    case ActKind::sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
      break;
    case ActKind::identity:
      break;
  }
  auto xn = input.node();
  return detail::record(std::move(out), {&input}, [xn, act, slope, n](TensorNode<T>& o) {
    const T* dy = o.grad.data();
    const T* x = xn->values.data();
    const T* y = o.values.data();
    T* dx = xn->grad_buffer().data();
    switch (act.kind) {
      case ActKind::relu:
        for (std::size_t i = 0; i < n; ++i) dx[i] += x[i] > T(0) ? dy[i] : T(0);
        break;
      case ActKind::leaky_relu:
        for (std::size_t i = 0; i < n; ++i) dx[i] += x[i] > T(0) ? dy[i] : slope * dy[i];
        break;
      case ActKind::tanh:
        for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * (T(1) - y[i] * y[i]);
        break;
      case ActKind::sigmoid:
        for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
        break;
      case ActKind::identity:
        break;
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(x, Activation::relu());
}
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  return activation(x, Activation::leaky_relu(slope));
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return activation(x, Activation::tanh());
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Activation::sigmoid());
}

/// a + b, same shape.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_values()[i] = a[i] + b[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::record(std::move(out), {&a, &b}, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) an->accumulate_grad(o.grad);
    if (bn->requires_grad) bn->accumulate_grad(o.grad);
  });
}

/// Elementwise a * b, same shape.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_values()[i] = a[i] * b[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::record(std::move(out), {&a, &b}, [an, bn, n](TensorNode<T>& o) {
    if (an->requires_grad) {
      T* g = an->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_buffer().data();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * an->values[i];
    }
  });
}

/// s * a
template <class T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  Tensor<T> out(a.shape());
  const T f = static_cast<T>(s);
  for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_values()[i] = f * a[i];
  auto an = a.node();
  return detail::record(std::move(out), {&a}, [an, f](TensorNode<T>& o) {
    T* g = an->grad_buffer().data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += f * o.grad[i];
  });
}

/// Channel-axis concatenation in argument order.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
  detail::require(!inputs.empty(), "concat_channels: no inputs");
  for (const auto& t : inputs) detail::require_rank4(t, "concat_channels", "input");
  const std::size_t B = inputs[0].dim(0), H = inputs[0].dim(2), W = inputs[0].dim(3);
  std::size_t C = 0;
  for (std::size_t j = 0; j < inputs.size(); ++j) {
    const auto& t = inputs[j];
    detail::require(t.dim(0) == B && t.dim(2) == H && t.dim(3) == W,
                    "concat_channels: input " + std::to_string(j) + " has shape " + to_string(t.shape()) +
                        ", expected batch " + std::to_string(B) + " and spatial " + std::to_string(H) + "x" +
                        std::to_string(W));
    C += t.dim(1);
  }
  if (inputs.size() == 1) return inputs[0];
  const std::size_t plane = H * W;
  Tensor<T> out(Shape{B, C, H, W});
  T* y = out.mutable_values().data();
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t offset = 0;
    for (const auto& t : inputs) {
      const std::size_t n = t.dim(1) * plane;
      std::copy_n(t.values().data() + b * n, n, y + (b * C + offset) * plane);
      offset += t.dim(1);
    }
  }
  std::vector<const Tensor<T>*> ptrs;
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& t : inputs) {
    ptrs.push_back(&t);
    nodes.push_back(t.node());
  }
  return detail::record(std::move(out), ptrs, [nodes, B, C, plane](TensorNode<T>& o) {
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t offset = 0;
      for (const auto& n : nodes) {
        const std::size_t c = n->shape[1];
        if (n->requires_grad) {
          T* g = n->grad_buffer().data() + b * c * plane;
          const T* src = o.grad.data() + (b * C + offset) * plane;
          for (std::size_t i = 0; i < c * plane; ++i) g[i] += src[i];
        }
        offset += c;
      }
    }
  });
}

/// Channels [begin, begin+count) of a [B,C,H,W] tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t count) {
  detail::require_rank4(input, "slice_channels", "input");
  const std::size_t B = input.dim(0), C = input.dim(1), plane = input.dim(2) * input.dim(3);
  detail::require(begin + count <= C && count > 0, "slice_channels: range [" + std::to_string(begin) + "," +
                                                       std::to_string(begin + count) + ") outside " +
                                                       std::to_string(C) + " channels");
  Tensor<T> out(Shape{B, count, input.dim(2), input.dim(3)});
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(input.values().data() + (b * C + begin) * plane, count * plane,
                out.mutable_values().data() + b * count * plane);
  auto xn = input.node();
  return detail::record(std::move(out), {&input}, [xn, B, C, begin, count, plane](TensorNode<T>& o) {
    T* g = xn->grad_buffer().data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < count * plane; ++i) g[(b * C + begin) * plane + i] += o.grad[b * count * plane + i];
  });
}

namespace detail {

template <class T>
void require_nonempty(const Tensor<T>& t, const char* op) {
  require(t.defined() && t.numel() > 0, std::string(op) + ": empty tensor");
}

}  // namespace detail

/// Mean over all elements, as a scalar tensor.
template <class T>
Tensor<T> mean(const Tensor<T>& input) {
  detail::require_nonempty(input, "mean");
  double acc = 0;
  for (T v : input.values()) acc += v;
  const std::size_t n = input.numel();
  auto xn = input.node();
  return detail::record(Tensor<T>::scalar(static_cast<T>(acc / n)), {&input}, [xn, n](TensorNode<T>& o) {
    const T g = static_cast<T>(o.grad[0] / static_cast<double>(n));
    for (auto& v : xn->grad_buffer()) v += g;
  });
}

/// Sum over all elements, as a scalar tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& input) {
  detail::require_nonempty(input, "sum");
  double acc = 0;
  for (T v : input.values()) acc += v;
  auto xn = input.node();
  return detail::record(Tensor<T>::scalar(static_cast<T>(acc)), {&input}, [xn](TensorNode<T>& o) {
    const T g = o.grad[0];
    for (auto& v : xn->grad_buffer()) v += g;
  });
}

/// mean |input - target|; subgradient 0 where they coincide.
template <class T>
Tensor<T> l1_to(const Tensor<T>& input, const Tensor<T>& target) {
  detail::require_nonempty(input, "l1_to");
  detail::require(input.shape() == target.shape(), "l1_to: input " + to_string(input.shape()) + " vs target " +
                                                      to_string(target.shape()));
  double acc = 0;
  const std::size_t n = input.numel();
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(input[i]) - target[i]);
  auto xn = input.node();
  auto tn = target.node();
  return detail::record(Tensor<T>::scalar(static_cast<T>(acc / n)), {&input, &target}, [xn, tn, n](TensorNode<T>& o) {
    const T g = static_cast<T>(o.grad[0] / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const T d = xn->values[i] - tn->values[i];
      const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
      if (xn->requires_grad) xn->grad_buffer()[i] += s;
      if (tn->requires_grad) tn->grad_buffer()[i] -= s;
    }
  });
}

/// mean (input - c)^2
template <class T>
Tensor<T> sq_err_to(const Tensor<T>& input, double c) {
  detail::require_nonempty(input, "sq_err_to");
  double acc = 0;
  const std::size_t n = input.numel();
  for (std::size_t i = 0; i < n; ++i) acc += (input[i] - c) * (input[i] - c);
  auto xn = input.node();
  return detail::record(Tensor<T>::scalar(static_cast<T>(acc / n)), {&input}, [xn, c, n](TensorNode<T>& o) {
    const double g = 2.0 * o.grad[0] / static_cast<double>(n);
    T* dx = xn->grad_buffer().data();
    for (std::size_t i = 0; i < n; ++i) dx[i] += static_cast<T>(g * (xn->values[i] - c));
  });
}

/// Log-likelihood of probabilities against a constant label:
/// label 1 -> mean -log p, label 0 -> mean -log(1-p), with p clamped to [eps, 1-eps].
template <class T>
Tensor<T> neg_log_likelihood(const Tensor<T>& probs, bool label, double eps = kLogClampEps) {
  detail::require_nonempty(probs, "neg_log_likelihood");
  const std::size_t n = probs.numel();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp<double>(probs[i], eps, 1.0 - eps);
    acc -= label ? std::log(p) : std::log1p(-p);
  }
  auto xn = probs.node();
  return detail::record(Tensor<T>::scalar(static_cast<T>(acc / n)), {&probs}, [xn, label, eps, n](TensorNode<T>& o) {
    const double g = o.grad[0] / static_cast<double>(n);
    T* dx = xn->grad_buffer().data();
    for (std::size_t i = 0; i < n; ++i) {
      const double p = xn->values[i];
      if (p < eps || p > 1.0 - eps) continue;  // clamped: flat
      dx[i] += static_cast<T>(label ? -g / p : g / (1.0 - p));
    }
  });
}

/// Stacks [1,C,H,W] (or [n,C,H,W]) tensors along the batch axis. Not differentiable.
template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  detail::require(!items.empty(), "stack_batch: no items");
  Shape shape = items[0].shape();
  detail::require(shape.size() == 4, "stack_batch: items must be rank 4");
  std::size_t batch = 0;
  for (const auto& t : items) {
    detail::require(t.rank() == 4 && t.dim(1) == shape[1] && t.dim(2) == shape[2] && t.dim(3) == shape[3],
                    "stack_batch: item shape " + to_string(t.shape()) + " does not match " + to_string(shape));
    batch += t.dim(0);
  }
  shape[0] = batch;
  std::vector<T> values;
  values.reserve(element_count(shape));
  for (const auto& t : items) values.insert(values.end(), t.values().begin(), t.values().end());
  return Tensor<T>(shape, std::move(values));
}

}  // namespace mustgan
