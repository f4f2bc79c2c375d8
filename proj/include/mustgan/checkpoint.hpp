#pragma once

// Checkpoint container: a directory holding manifest.json plus one MTNS file per parameter
// ("stream2/layer5/weight.mtns") and per optimizer moment ("optim/joint/gen/<key>.m.mtns").

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/model.hpp"
#include "mustgan/mtns.hpp"
#include "mustgan/optim.hpp"

namespace mustgan {

inline constexpr int kCheckpointVersion = 1;

/// Load/save failure naming the offending tensor key or manifest field.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(std::string offender, const std::string& what)
      : std::runtime_error(offender + ": " + what), offender_(std::move(offender)) {}
  const std::string& offender() const { return offender_; }

 private:
  std::string offender_;
};

inline nlohmann::json generator_spec_json(const GeneratorSpec& s) {
  return {{"n_encoder", s.n_encoder}, {"n_residual", s.n_residual}, {"n_decoder", s.n_decoder},
          {"base_channels", s.base_channels}};
}

template <class T>
nlohmann::json topology_json(const MultiStreamModel<T>& model) {
  return {{"K", model.K()},
          {"generator", generator_spec_json(model.generator_spec())},
          {"discriminator",
           {{"n_layers", model.discriminator_base().n_layers}, {"base_channels", model.discriminator_base().base_channels}}},
          {"seed", model.seed()},
          {"dtype", dtype_of<T>() == DType::f32 ? "f32" : "f64"}};
}

/// Extra manifest content supplied by the caller.
struct CheckpointMeta {
  std::string phase;            // "streams" | "joint"
  std::size_t epoch = 0;        // epochs completed
  nlohmann::json config;        // resolved configuration echo
  nlohmann::json rng_state;     // whatever the caller needs to continue deterministically
};

namespace detail {

inline std::filesystem::path tensor_path(const std::filesystem::path& dir, const std::string& key) {
  return dir / (key + ".mtns");
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

}  // namespace detail

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw CheckpointError("manifest.json", "cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("manifest.json", std::string("invalid JSON: ") + e.what());
  }
  if (!j.contains("version") || j["version"] != kCheckpointVersion)
    throw CheckpointError("manifest.json", "unsupported checkpoint version " +
                                               (j.contains("version") ? j["version"].dump() : std::string("(missing)")) +
                                               ", expected " + std::to_string(kCheckpointVersion));
  return j;
}

/// Writes the model (and optimizer states) to `dir`. The directory is assembled next to the
/// target and renamed into place, so readers never observe a partial checkpoint.
template <class T>
void save_checkpoint(const std::filesystem::path& dir, const MultiStreamModel<T>& model, const CheckpointMeta& meta,
                     const std::vector<std::pair<std::string, Adam<T>*>>& optimizers = {}) {
  namespace fs = std::filesystem;
  fs::path tmp = dir;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    write_mtns(detail::tensor_path(tmp, p.key), p.tensor);
    tensors.push_back({{"key", p.key}, {"shape", p.tensor.shape()}});
  }
  nlohmann::json optim = nlohmann::json::object();
  for (const auto& [name, opt] : optimizers) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : opt->groups()) {
      nlohmann::json keys = nlohmann::json::array();
      for (const auto& p : g.params) keys.push_back(p.key);
      groups.push_back({{"name", g.name}, {"lr_ratio", g.lr_ratio}, {"keys", keys}});
    }
    for (const auto& [key, mom] : opt->moments()) {
      write_mtns(tmp / "optim" / name / (key + ".m.mtns"), mom.m);
      write_mtns(tmp / "optim" / name / (key + ".v.mtns"), mom.v);
    }
    optim[name] = {{"steps", opt->steps()},
                   {"beta1", opt->beta1()},
                   {"beta2", opt->beta2()},
                   {"eps", opt->eps()},
                   {"groups", groups}};
  }

  nlohmann::json manifest = {
      {"format", "mustgan-checkpoint"},
      {"version", kCheckpointVersion},
      {"topology", topology_json(model)},
      {"fusion_i", model.has_joint() ? nlohmann::json(model.fusion().position) : nlohmann::json(nullptr)},
      {"roles", {{"sources", model.roles().sources}, {"target", model.roles().target}}},
      {"phase", meta.phase},
      {"epoch", meta.epoch},
      {"config", meta.config},
      {"rng_state", meta.rng_state},
      {"tensors", tensors},
      {"optimizers", optim},
  };
  detail::write_json_file(tmp / "manifest.json", manifest);

  fs::path old = dir;
  old += ".old";
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

namespace detail {

template <class U>
U manifest_field(const nlohmann::json& j, const char* path, const std::initializer_list<const char*>& keys) {
  const nlohmann::json* cur = &j;
  for (const char* k : keys) {
    if (!cur->is_object() || !cur->contains(k)) throw CheckpointError(path, "missing manifest field");
    cur = &(*cur)[k];
  }
  try {
    return cur->get<U>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path, std::string("malformed manifest field: ") + e.what());
  }
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& file, const std::string& key, const Shape& expected) {
  if (!std::filesystem::exists(file)) throw CheckpointError(key, "tensor file missing (" + file.string() + ")");
  Tensor<T> t;
  try {
    t = read_mtns<T>(file);
  } catch (const MtnsError& e) {
    throw CheckpointError(key, std::string("corrupt tensor file: ") + e.what());
  }
  if (t.shape() != expected)
    throw CheckpointError(key, "shape " + to_string(t.shape()) + " does not match model shape " + to_string(expected));
  return t;
}

}  // namespace detail

/// Rebuilds the model described by the manifest and fills every parameter from disk.
template <class T>
MultiStreamModel<T> load_model(const std::filesystem::path& dir) {
  const auto m = read_manifest(dir);
  const std::string dtype = detail::manifest_field<std::string>(m, "topology.dtype", {"topology", "dtype"});
  if (dtype != (dtype_of<T>() == DType::f32 ? "f32" : "f64"))
    throw CheckpointError("topology.dtype", "checkpoint holds " + dtype + " parameters");
  GeneratorSpec g;
  g.n_encoder = detail::manifest_field<std::size_t>(m, "topology.generator.n_encoder", {"topology", "generator", "n_encoder"});
  g.n_residual =
      detail::manifest_field<std::size_t>(m, "topology.generator.n_residual", {"topology", "generator", "n_residual"});
  g.n_decoder = detail::manifest_field<std::size_t>(m, "topology.generator.n_decoder", {"topology", "generator", "n_decoder"});
  g.base_channels =
      detail::manifest_field<std::size_t>(m, "topology.generator.base_channels", {"topology", "generator", "base_channels"});
  DiscriminatorSpec d;
  d.n_layers =
      detail::manifest_field<std::size_t>(m, "topology.discriminator.n_layers", {"topology", "discriminator", "n_layers"});
  d.base_channels = detail::manifest_field<std::size_t>(m, "topology.discriminator.base_channels",
                                                        {"topology", "discriminator", "base_channels"});
  const auto K = detail::manifest_field<std::size_t>(m, "topology.K", {"topology", "K"});
  const auto seed = detail::manifest_field<std::uint64_t>(m, "topology.seed", {"topology", "seed"});

  MultiStreamModel<T> model(K, g, d, seed);
  if (m.contains("fusion_i") && !m["fusion_i"].is_null())
    model.attach_joint(detail::manifest_field<std::size_t>(m, "fusion_i", {"fusion_i"}), seed);
  if (m.contains("roles")) {
    model.roles().sources = m["roles"].value("sources", std::vector<std::string>{});
    model.roles().target = m["roles"].value("target", std::string{});
  }

  std::set<std::string> listed;
  for (const auto& t : m.value("tensors", nlohmann::json::array())) listed.insert(t.value("key", std::string{}));
  for (auto& p : model.parameters()) {
    if (!listed.count(p.key)) throw CheckpointError(p.key, "tensor not listed in manifest");
    listed.erase(p.key);
    const Tensor<T> t = detail::load_tensor<T>(detail::tensor_path(dir, p.key), p.key, p.tensor.shape());
    std::copy(t.values().begin(), t.values().end(), p.tensor.mutable_values().begin());
  }
  if (!listed.empty()) throw CheckpointError(*listed.begin(), "manifest lists a tensor the model does not have");
  return model;
}

/// Restores an optimizer saved under `name`; its groups must cover the same keys.
template <class T>
void load_optimizer(const std::filesystem::path& dir, const std::string& name, Adam<T>& opt) {
  const auto m = read_manifest(dir);
  if (!m.contains("optimizers") || !m["optimizers"].contains(name))
    throw CheckpointError("optim/" + name, "optimizer state not in checkpoint");
  const auto& o = m["optimizers"][name];
  for (auto& [key, mom] : opt.moments()) {
    const std::string off = "optim/" + name + "/" + key;
    mom.m = detail::load_tensor<T>(dir / "optim" / name / (key + ".m.mtns"), off + ".m", mom.m.shape());
    mom.v = detail::load_tensor<T>(dir / "optim" / name / (key + ".v.mtns"), off + ".v", mom.v.shape());
  }
  opt.set_steps(o.value("steps", std::size_t{0}));
}

}  // namespace mustgan
