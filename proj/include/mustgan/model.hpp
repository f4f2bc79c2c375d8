#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/nn.hpp"

namespace mustgan {

enum class FusionRegime { early, intermediate, late };

inline const char* to_string(FusionRegime r) {
  switch (r) {
    case FusionRegime::early: return "early";
    case FusionRegime::intermediate: return "intermediate";
    case FusionRegime::late: return "late";
  }
  return "?";
}

/// Where the K+1 streams are cut and concatenated.
struct FusionConfig {
  std::size_t position = 0;  // i, 1..L-1
  std::size_t K = 0;
  FusionRegime regime = FusionRegime::late;

  static FusionConfig make(std::size_t i, std::size_t K, const GeneratorSpec& spec) {
    const std::size_t L = spec.total_layers();
    if (i < 1 || i >= L)
      throw std::out_of_range("fusion position " + std::to_string(i) + " outside 1.." + std::to_string(L - 1));
    if (K < 1) throw std::invalid_argument("need at least one source contrast");
    FusionRegime r = i < spec.n_encoder                     ? FusionRegime::early
                     : i < spec.n_encoder + spec.n_residual ? FusionRegime::intermediate
                                                            : FusionRegime::late;
    return FusionConfig{i, K, r};
  }
};

/// (K+1) x channels emitted at layer i.
inline std::size_t joint_input_channels(std::size_t i, std::size_t K, const GeneratorSpec& spec) {
  return (K + 1) * spec.out_channels_at(i);
}

/// Layers i+1..L of the generator plan with the first layer widened to the fused width,
/// plus the joint discriminator (K+1 input channels).
template <class T>
class JointNetwork {
 public:
  JointNetwork(const GeneratorSpec& spec, const FusionConfig& fusion, const DiscriminatorSpec& disc_base,
               std::uint64_t seed)
      : spec_(spec), fusion_(fusion), disc_(joint_disc_spec(disc_base, fusion.K), mix_seed(seed, 1)) {
    std::mt19937_64 rng(seed);
    const std::size_t first = fusion.position + 1;
    for (std::size_t k = first; k <= spec.total_layers(); ++k) {
      const std::size_t in = k == first ? joint_input_channels(fusion.position, fusion.K, spec) : spec.in_channels_at(k);
      layers_.emplace_back(spec, k, in, rng);
    }
  }

  Tensor<T> forward(const Tensor<T>& fused) const {
    detail::require_rank4(fused, "joint network", "input");
    if (fused.dim(1) != input_channels())
      throw ShapeError("joint network expects " + std::to_string(input_channels()) + " fused channels, got " +
                       std::to_string(fused.dim(1)));
    Tensor<T> h = fused;
    for (const auto& l : layers_) h = l.forward(h);
    return h;
  }

  std::size_t input_channels() const { return layers_.front().in_channels(); }
  const FusionConfig& fusion() const { return fusion_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<LayerKind> layer_kinds() const {
    std::vector<LayerKind> kinds;
    for (const auto& l : layers_) kinds.push_back(l.kind());
    return kinds;
  }
  const Discriminator<T>& discriminator() const { return disc_; }

  void collect_generator_parameters(ParameterList<T>& out) const {
    for (const auto& l : layers_) l.collect("joint/", out);
  }
  void collect_discriminator_parameters(ParameterList<T>& out) const { disc_.collect_parameters("joint/disc/", out); }

  static DiscriminatorSpec joint_disc_spec(DiscriminatorSpec base, std::size_t K) {
    base.in_channels = K + 1;
    return base;
  }

 private:
  GeneratorSpec spec_;
  FusionConfig fusion_;
  std::vector<Layer<T>> layers_;
  Discriminator<T> disc_;
};

/// Generator/discriminator pair. Ids 1..K map one source each; id K+1 takes all sources.
template <class T>
struct Stream {
  std::size_t id;
  Generator<T> generator;
  Discriminator<T> discriminator;
};

struct ContrastRoles {
  std::vector<std::string> sources;
  std::string target;
};

template <class T>
class MultiStreamModel {
 public:
  MultiStreamModel(std::size_t K, const GeneratorSpec& gen_spec, const DiscriminatorSpec& disc_base, std::uint64_t seed)
      : K_(K), gen_spec_(gen_spec), disc_base_(disc_base), seed_(seed) {
    if (K < 1) throw std::invalid_argument("need at least one source contrast");
    for (std::size_t m = 1; m <= K + 1; ++m) {
      GeneratorSpec g = gen_spec;
      g.in_channels = m <= K ? 1 : K;
      g.out_channels = 1;
      DiscriminatorSpec d = disc_base;
      d.in_channels = g.in_channels + 1;
      streams_.push_back(Stream<T>{m, Generator<T>(g, mix_seed(seed, 2 * m)), Discriminator<T>(d, mix_seed(seed, 2 * m + 1))});
    }
    gen_spec_.in_channels = 1;
    gen_spec_.out_channels = 1;
  }

  std::size_t K() const { return K_; }
  std::uint64_t seed() const { return seed_; }
  const GeneratorSpec& generator_spec() const { return gen_spec_; }
  const DiscriminatorSpec& discriminator_base() const { return disc_base_; }
  std::size_t total_layers() const { return gen_spec_.total_layers(); }

  Stream<T>& stream(std::size_t id) { return streams_.at(id - 1); }
  const Stream<T>& stream(std::size_t id) const { return streams_.at(id - 1); }
  std::size_t many_to_one_id() const { return K_ + 1; }

  bool has_joint() const { return joint_.has_value(); }
  const JointNetwork<T>& joint() const {
    if (!joint_) throw std::logic_error("model has no joint network; fuse first");
    return *joint_;
  }
  const FusionConfig& fusion() const { return joint().fusion(); }

  /// Replaces the joint network with a fresh one for fusion position i, seeded from (seed, i).
  void attach_joint(std::size_t i, std::uint64_t seed) {
    const auto fusion = FusionConfig::make(i, K_, gen_spec_);
    joint_.emplace(gen_spec_, fusion, disc_base_, mix_seed(mix_seed(seed, 1000), i));
  }
  void detach_joint() { joint_.reset(); }

  ContrastRoles& roles() { return roles_; }
  const ContrastRoles& roles() const { return roles_; }

  /// Stream id -> generator input: source m for one-to-one, channel stack for many-to-one.
  Tensor<T> stream_input(std::size_t id, const std::vector<Tensor<T>>& sources) const {
    check_sources(sources);
    return id <= K_ ? sources[id - 1] : concat_channels(sources);
  }
  std::vector<Tensor<T>> stream_conditioning(std::size_t id, const std::vector<Tensor<T>>& sources) const {
    check_sources(sources);
    if (id <= K_) return {sources[id - 1]};
    return sources;
  }

  void check_sources(const std::vector<Tensor<T>>& sources) const {
    if (sources.size() != K_)
      throw std::invalid_argument("expected " + std::to_string(K_) + " source images, got " + std::to_string(sources.size()));
    for (const auto& s : sources) {
      detail::require_rank4(s, "synthesize", "source");
      if (s.shape() != sources[0].shape())
        throw ShapeError("source images must be co-shaped: " + to_string(s.shape()) + " vs " + to_string(sources[0].shape()));
    }
  }

  /// Parameters of every stream generator and discriminator, plus the joint network when present.
  ParameterList<T> parameters() const {
    ParameterList<T> out;
    for (const auto& s : streams_) {
      const std::string p = "stream" + std::to_string(s.id) + "/";
      s.generator.collect_parameters(p, out);
      s.discriminator.collect_parameters(p + "disc/", out);
    }
    if (joint_) {
      joint_->collect_generator_parameters(out);
      joint_->collect_discriminator_parameters(out);
    }
    return out;
  }

 private:
  std::size_t K_;
  GeneratorSpec gen_spec_;
  DiscriminatorSpec disc_base_;
  std::uint64_t seed_;
  std::vector<Stream<T>> streams_;
  std::optional<JointNetwork<T>> joint_;
  ContrastRoles roles_;
};

/// K+1 streams plus the joint network for `fusion_position`; fully determined by `seed`.
template <class T>
MultiStreamModel<T> assemble(std::size_t K, const GeneratorSpec& gen_spec, std::size_t fusion_position,
                             std::uint64_t seed, const DiscriminatorSpec& disc_base = {}) {
  MultiStreamModel<T> model(K, gen_spec, disc_base, seed);
  model.attach_joint(fusion_position, seed);
  return model;
}

/// Copies parameter values by key; both models must share one topology.
template <class T>
void copy_parameters(const MultiStreamModel<T>& from, MultiStreamModel<T>& to) {
  auto src = from.parameters();
  auto dst = to.parameters();
  if (src.size() != dst.size()) throw std::invalid_argument("copy_parameters: parameter counts differ");
  for (std::size_t k = 0; k < src.size(); ++k) {
    if (src[k].key != dst[k].key || src[k].tensor.shape() != dst[k].tensor.shape())
      throw std::invalid_argument("copy_parameters: mismatch at " + src[k].key);
    auto v = src[k].tensor.values();
    std::copy(v.begin(), v.end(), dst[k].tensor.mutable_values().begin());
  }
}

/// Deep copy: same topology, independent parameter storage.
template <class T>
MultiStreamModel<T> clone_model(const MultiStreamModel<T>& model) {
  MultiStreamModel<T> out(model.K(), model.generator_spec(), model.discriminator_base(), model.seed());
  if (model.has_joint()) out.attach_joint(model.fusion().position, model.seed());
  out.roles() = model.roles();
  copy_parameters(model, out);
  return out;
}

/// Concatenates feature maps from streams 1..K then K+1, all cut at the same layer.
template <class T>
Tensor<T> fuse(const std::vector<FeatureMap<T>>& maps, std::size_t K) {
  if (maps.size() != K + 1)
    throw std::invalid_argument("fusion expects " + std::to_string(K + 1) + " feature maps, got " + std::to_string(maps.size()));
  std::vector<Tensor<T>> parts;
  for (std::size_t j = 0; j < maps.size(); ++j) {
    const auto& m = maps[j];
    if (m.stream_id != j + 1)
      throw std::invalid_argument("fusion order violated: position " + std::to_string(j + 1) + " holds stream " +
                                  std::to_string(m.stream_id));
    if (m.source_layer != maps[0].source_layer)
      throw std::invalid_argument("feature maps cut at different layers: " + std::to_string(m.source_layer) + " vs " +
                                  std::to_string(maps[0].source_layer));
    detail::require_rank4(m.tensor, "fuse", "feature map");
    if (m.tensor.shape() != maps[0].tensor.shape())
      throw ShapeError("feature map of stream " + std::to_string(m.stream_id) + " has shape " +
                       to_string(m.tensor.shape()) + ", expected " + to_string(maps[0].tensor.shape()));
    parts.push_back(m.tensor);
  }
  return concat_channels(parts);
}

/// Feature maps of all K+1 streams at the model's fusion position.
template <class T>
std::vector<FeatureMap<T>> stream_features(const MultiStreamModel<T>& model, const std::vector<Tensor<T>>& sources) {
  const std::size_t i = model.fusion().position;
  std::vector<FeatureMap<T>> maps;
  for (std::size_t id = 1; id <= model.K() + 1; ++id)
    maps.push_back(model.stream(id).generator.forward_to_layer(model.stream_input(id, sources), i, id));
  return maps;
}

/// Multi-stream synthesis: streams to layer i, fuse, joint network.
template <class T>
Tensor<T> synthesize(const MultiStreamModel<T>& model, const std::vector<Tensor<T>>& sources) {
  return model.joint().forward(fuse(stream_features(model, sources), model.K()));
}

/// Full forward of a single stream (the one-to-one or many-to-one baseline).
template <class T>
Tensor<T> synthesize_stream(const MultiStreamModel<T>& model, std::size_t id, const std::vector<Tensor<T>>& sources) {
  return model.stream(id).generator.forward(model.stream_input(id, sources));
}

}  // namespace mustgan
