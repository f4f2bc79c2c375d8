#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mustgan/ops.hpp"
#include "mustgan/tensor.hpp"

namespace mustgan {

/// splitmix64 finalizer; combines a base seed with stream/layer tags into independent seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr double kInitStddev = 0.02;

/// Owning parameter slot. Unlike Tensor handles, copying a Parameter copies its values,
/// so networks built from Parameters behave as values.
template <class T>
class Parameter {
 public:
  Parameter() = default;
  explicit Parameter(Tensor<T> t) : t_(std::move(t)) { t_.set_requires_grad(true); }
  Parameter(const Parameter& o) : t_(o.t_.defined() ? o.t_.clone() : Tensor<T>()) {}
  Parameter& operator=(const Parameter& o) {
    if (this != &o) t_ = o.t_.defined() ? o.t_.clone() : Tensor<T>();
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const Tensor<T>& tensor() const { return t_; }
  Tensor<T>& tensor() { return t_; }
  bool defined() const { return t_.defined(); }

 private:
  Tensor<T> t_;
};

/// A parameter handle with its checkpoint key, e.g. "stream2/layer5/weight".
template <class T>
struct NamedParameter {
  std::string key;
  Tensor<T> tensor;  // aliases the owning Parameter
};

template <class T>
using ParameterList = std::vector<NamedParameter<T>>;

// ---------------------------------------------------------------------------------------------

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;  // transpose only
  PadMode pad_mode = PadMode::zero;
  bool transpose = false;
  bool instance_norm = false;
  Activation act = Activation::identity();
};

/// Convolution (or transposed convolution), optional instance norm, activation.
template <class T>
class ConvUnit {
 public:
  ConvUnit() = default;
  ConvUnit(const ConvSpec& spec, std::mt19937_64& rng) : spec_(spec) {
    const Shape wshape = spec.transpose ? Shape{spec.in_channels, spec.out_channels, spec.kernel, spec.kernel}
                                        : Shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
    Tensor<T> w(wshape);
    std::normal_distribution<double> normal(0.0, kInitStddev);
    for (auto& v : w.mutable_values()) v = static_cast<T>(normal(rng));
    weight_ = Parameter<T>(std::move(w));
    bias_ = Parameter<T>(Tensor<T>(Shape{spec.out_channels}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = spec_.transpose
                      ? conv2d_transpose(x, weight_.tensor(), bias_.tensor(),
                                         ConvTransposeOptions{spec_.stride, spec_.padding, spec_.output_padding})
                      : conv2d(x, weight_.tensor(), bias_.tensor(), Conv2dOptions{spec_.stride, spec_.padding, spec_.pad_mode});
    if (spec_.instance_norm) y = instance_norm(y);
    return activation(y, spec_.act);
  }

  void collect(const std::string& prefix, const std::string& stem, ParameterList<T>& out) const {
    out.push_back({prefix + stem + "weight", weight_.tensor()});
    out.push_back({prefix + stem + "bias", bias_.tensor()});
  }

  const ConvSpec& spec() const { return spec_; }
  const Tensor<T>& weight() const { return weight_.tensor(); }
  const Tensor<T>& bias() const { return bias_.tensor(); }

 private:
  ConvSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Two 3x3 reflect-padded convs with instance norm, relu after the first, additive skip.
/// A 1x1 projection replaces the identity skip when input and output widths differ.
template <class T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t in_channels, std::size_t channels, std::mt19937_64& rng)
      : conv1_(ConvSpec{in_channels, channels, 3, 1, 1, 0, PadMode::reflect, false, true, Activation::relu()}, rng),
        conv2_(ConvSpec{channels, channels, 3, 1, 1, 0, PadMode::reflect, false, true, Activation::identity()}, rng) {
    if (in_channels != channels)
      skip_.emplace_back(ConvSpec{in_channels, channels, 1, 1, 0, 0, PadMode::zero, false, false, Activation::identity()},
                         rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = conv2_.forward(conv1_.forward(x));
    return add(skip_.empty() ? x : skip_.front().forward(x), h);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    conv1_.collect(prefix, "", out);
    conv2_.collect(prefix, "conv2_", out);
    if (!skip_.empty()) skip_.front().collect(prefix, "skip_", out);
  }

  bool has_projection() const { return !skip_.empty(); }

 private:
  ConvUnit<T> conv1_, conv2_;
  std::vector<ConvUnit<T>> skip_;  // zero or one
};

enum class LayerKind { encoder_conv, residual, decoder_conv };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::encoder_conv: return "encoder_conv";
    case LayerKind::residual: return "residual";
    case LayerKind::decoder_conv: return "decoder_conv";
  }
  return "?";
}

inline bool is_conv(LayerKind k) { return k != LayerKind::residual; }

// ---------------------------------------------------------------------------------------------

/// Encoder-residual-decoder generator topology.
struct GeneratorSpec {
  std::size_t n_encoder = 3;
  std::size_t n_residual = 9;
  std::size_t n_decoder = 3;
  std::size_t base_channels = 64;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  std::size_t total_layers() const { return n_encoder + n_residual + n_decoder; }

  void validate() const {
    if (n_encoder < 1 || n_decoder < 1) throw std::invalid_argument("generator needs n_E >= 1 and n_D >= 1");
    if (n_decoder != n_encoder)
      throw std::invalid_argument("generator needs n_D == n_E so the decoder restores the input extent (n_E=" +
                                  std::to_string(n_encoder) + ", n_D=" + std::to_string(n_decoder) + ")");
    if (base_channels < 1 || in_channels < 1 || out_channels < 1)
      throw std::invalid_argument("generator channel counts must be positive");
  }

  LayerKind kind(std::size_t k) const {
    check_index(k);
    if (k <= n_encoder) return LayerKind::encoder_conv;
    if (k <= n_encoder + n_residual) return LayerKind::residual;
    return LayerKind::decoder_conv;
  }

  /// Channels emitted by layer k (1-based).
  std::size_t out_channels_at(std::size_t k) const {
    check_index(k);
    const std::size_t widest = base_channels << (n_encoder - 1);
    if (k <= n_encoder) return base_channels << (k - 1);
    if (k <= n_encoder + n_residual) return widest;
    const std::size_t j = k - n_encoder - n_residual;  // 1..n_D
    if (j == n_decoder) return out_channels;
    return widest >> j;
  }

  std::size_t in_channels_at(std::size_t k) const { return k == 1 ? in_channels : out_channels_at(k - 1); }

  /// Spatial reduction factor of layer k's output relative to the input image.
  std::size_t downscale_at(std::size_t k) const {
    check_index(k);
    if (k <= n_encoder) return std::size_t{1} << (k - 1);
    if (k <= n_encoder + n_residual) return std::size_t{1} << (n_encoder - 1);
    const std::size_t j = k - n_encoder - n_residual;
    return std::size_t{1} << (n_encoder - 1 - std::min(j, n_encoder - 1));
  }

  std::size_t required_multiple() const { return std::size_t{1} << (n_encoder - 1); }

  void check_index(std::size_t k) const {
    if (k < 1 || k > total_layers())
      throw std::out_of_range("layer index " + std::to_string(k) + " outside 1.." + std::to_string(total_layers()));
  }
};

/// Layer k of a generator following the standard channel plan, optionally with a widened input.
template <class T>
class Layer {
 public:
  Layer(const GeneratorSpec& spec, std::size_t k, std::size_t in_channels, std::mt19937_64& rng)
      : index_(k), kind_(spec.kind(k)), in_(in_channels), out_(spec.out_channels_at(k)) {
    const std::size_t last = spec.total_layers();
    switch (kind_) {
      case LayerKind::encoder_conv:
        if (k == 1)
          body_ = ConvUnit<T>(ConvSpec{in_, out_, 7, 1, 3, 0, PadMode::reflect, false, true, Activation::relu()}, rng);
        else
          body_ = ConvUnit<T>(ConvSpec{in_, out_, 3, 2, 1, 0, PadMode::reflect, false, true, Activation::relu()}, rng);
        break;
      case LayerKind::residual:
        body_ = ResidualBlock<T>(in_, out_, rng);
        break;
      case LayerKind::decoder_conv:
        if (k == last)
          body_ = ConvUnit<T>(ConvSpec{in_, out_, 7, 1, 3, 0, PadMode::reflect, false, false, Activation::tanh()}, rng);
        else
          body_ = ConvUnit<T>(ConvSpec{in_, out_, 3, 2, 1, 1, PadMode::zero, true, true, Activation::relu()}, rng);
        break;
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return std::visit([&](const auto& b) { return b.forward(x); }, body_);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    const std::string p = prefix + "layer" + std::to_string(index_) + "/";
    if (const auto* c = std::get_if<ConvUnit<T>>(&body_))
      c->collect(p, "", out);
    else
      std::get<ResidualBlock<T>>(body_).collect(p, out);
  }

  std::size_t index() const { return index_; }
  LayerKind kind() const { return kind_; }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  const std::variant<ConvUnit<T>, ResidualBlock<T>>& body() const { return body_; }

 private:
  std::size_t index_;
  LayerKind kind_;
  std::size_t in_, out_;
  std::variant<ConvUnit<T>, ResidualBlock<T>> body_;
};

/// Activation emitted by layer `source_layer` of stream `stream_id`.
template <class T>
struct FeatureMap {
  Tensor<T> tensor;
  std::size_t source_layer = 0;
  std::size_t stream_id = 0;
};

template <class T>
class Generator {
 public:
  Generator(const GeneratorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    layers_.reserve(spec_.total_layers());
    for (std::size_t k = 1; k <= spec_.total_layers(); ++k) layers_.emplace_back(spec_, k, spec_.in_channels_at(k), rng);
  }

  const GeneratorSpec& spec() const { return spec_; }
  std::size_t total_layers() const { return layers_.size(); }
  const Layer<T>& layer(std::size_t k) const {
    spec_.check_index(k);
    return layers_[k - 1];
  }

  void check_input(const Tensor<T>& x) const {
    detail::require_rank4(x, "generator", "input");
    if (x.dim(1) != spec_.in_channels)
      throw ShapeError("generator expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                       std::to_string(x.dim(1)));
    const std::size_t m = spec_.required_multiple();
    if (x.dim(2) % m != 0 || x.dim(3) % m != 0)
      throw ShapeError("generator input extent " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                       " must be a multiple of " + std::to_string(m));
    if (x.dim(2) / m < 2 || x.dim(3) / m < 2)
      throw ShapeError("generator input extent " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                       " too small; need at least " + std::to_string(2 * m));
  }

  /// Applies layers first..last (1-based, inclusive) to x.
  Tensor<T> forward_range(const Tensor<T>& x, std::size_t first, std::size_t last) const {
    Tensor<T> h = x;
    for (std::size_t k = first; k <= last; ++k) h = layer(k).forward(h);
    return h;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    check_input(x);
    return forward_range(x, 1, total_layers());
  }

  /// Output of layer i, after its normalization and nonlinearity. 1 <= i <= L-1.
  FeatureMap<T> forward_to_layer(const Tensor<T>& x, std::size_t i, std::size_t stream_id = 0) const {
    if (i < 1 || i >= total_layers())
      throw std::out_of_range("fusion layer " + std::to_string(i) + " outside 1.." + std::to_string(total_layers() - 1));
    check_input(x);
    return FeatureMap<T>{forward_range(x, 1, i), i, stream_id};
  }

  void collect_parameters(const std::string& prefix, ParameterList<T>& out) const {
    for (const auto& l : layers_) l.collect(prefix, out);
  }
  /// Parameters of layers first..last only.
  void collect_parameters(const std::string& prefix, std::size_t first, std::size_t last, ParameterList<T>& out) const {
    for (std::size_t k = first; k <= last; ++k) layer(k).collect(prefix, out);
  }

 private:
  GeneratorSpec spec_;
  std::vector<Layer<T>> layers_;
};

template <class T>
Generator<T> build_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  return Generator<T>(spec, seed);
}

// ---------------------------------------------------------------------------------------------

/// Patch discriminator: 4x4 kernels, all but the last two layers stride 2, leaky_relu(0.2),
/// instance norm on the inner layers, one raw score channel.
struct DiscriminatorSpec {
  std::size_t n_layers = 5;
  std::size_t in_channels = 2;
  std::size_t base_channels = 64;

  void validate() const {
    if (n_layers < 3) throw std::invalid_argument("discriminator needs at least 3 layers");
    if (in_channels < 1 || base_channels < 1) throw std::invalid_argument("discriminator channel counts must be positive");
  }

  ConvSpec layer(std::size_t k) const {
    if (k < 1 || k > n_layers) throw std::out_of_range("discriminator layer " + std::to_string(k));
    ConvSpec c;
    c.kernel = 4;
    c.pad_mode = PadMode::zero;
    c.in_channels = k == 1 ? in_channels : channels_at(k - 1);
    c.out_channels = channels_at(k);
    c.stride = k <= n_layers - 2 ? 2 : 1;
    // Stride-1 4x4 layers use paddings 1 then 2 so the pair restores the grid of the last stride-2 layer.
    c.padding = k == n_layers ? 2 : 1;
    c.instance_norm = k >= 2 && k <= n_layers - 1;
    c.act = k == n_layers ? Activation::identity() : Activation::leaky_relu(0.2);
    return c;
  }

  std::size_t channels_at(std::size_t k) const {
    if (k == n_layers) return 1;
    return base_channels << std::min<std::size_t>(k - 1, 3);
  }
};

template <class T>
class Discriminator {
 public:
  Discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    for (std::size_t k = 1; k <= spec_.n_layers; ++k) layers_.emplace_back(spec_.layer(k), rng);
  }

  const DiscriminatorSpec& spec() const { return spec_; }

  /// Channel-concatenates conditioning images then the candidate and returns raw patch scores.
  Tensor<T> forward(const std::vector<Tensor<T>>& conditioning, const Tensor<T>& candidate) const {
    std::vector<Tensor<T>> parts = conditioning;
    parts.push_back(candidate);
    std::size_t channels = 0;
    for (const auto& p : parts) {
      detail::require_rank4(p, "discriminator", "input");
      channels += p.dim(1);
    }
    if (channels != spec_.in_channels)
      throw ShapeError("discriminator expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                       std::to_string(channels));
    Tensor<T> h = concat_channels(parts);
    for (const auto& l : layers_) h = l.forward(h);
    return h;
  }

  void collect_parameters(const std::string& prefix, ParameterList<T>& out) const {
    for (std::size_t k = 0; k < layers_.size(); ++k)
      layers_[k].collect(prefix + "layer" + std::to_string(k + 1) + "/", "", out);
  }

 private:
  DiscriminatorSpec spec_;
  std::vector<ConvUnit<T>> layers_;
};

template <class T>
Discriminator<T> build_discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) {
  return Discriminator<T>(spec, seed);
}

}  // namespace mustgan
