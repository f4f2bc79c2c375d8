#pragma once

// RunConfig: the JSON document driving the command-line tool. Parsing is strict: unknown keys,
// wrong types and out-of-range values are rejected with the dotted path of the offending field.

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/phantom.hpp"
#include "mustgan/sweep.hpp"
#include "mustgan/train.hpp"

namespace mustgan {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RunConfig {
  std::uint64_t seed = 0;
  PhantomSpec data;
  SplitCounts splits{7, 2, 1};
  GeneratorSpec generator;
  DiscriminatorSpec discriminator;
  ContrastRoles roles;   // empty: all but the last contrast are sources
  std::string dtype = "f32";
  TrainConfig train_streams;
  TrainConfig train_joint = default_joint_config();
  std::size_t fusion_i = 0;  // 0: unset
  double finetune_lr_ratio = 0.5;
  SweepGrid sweep;
  std::size_t sweep_parallel = 1;
  std::string eval_split = "test";
  std::string workdir = ".";

  std::size_t K() const { return roles.sources.empty() ? data.contrasts.size() - 1 : roles.sources.size(); }
};

namespace detail {

/// Walks one JSON object, remembering which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "(root)" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <class U>
  void get(const std::string& key, U& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<U, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<U>) {
        if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
        if (std::is_unsigned_v<U> && v.get<long long>() < 0) throw ConfigError(field(key), "must be non-negative");
      } else if constexpr (std::is_floating_point_v<U>) {
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
      } else if constexpr (std::is_same_v<U, std::string>) {
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
      }
      out = v.get<U>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field(key), std::string("wrong type: ") + e.what());
    }
  }

  ObjectReader child(const std::string& key) {
    seen_.insert(key);
    return ObjectReader(j_.at(key), field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
void checked(const std::string& field, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
}

inline TrainConfig read_train(ObjectReader r, TrainConfig c, std::size_t* fusion_i = nullptr, double* ratio = nullptr) {
  r.get("epochs", c.epochs);
  r.get("lr", c.lr);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("lambda_pixel", c.lambda_pixel);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("cutover", c.cutover);
  r.get("adv_weight", c.adv_weight);
  r.get("shuffle", c.shuffle);
  r.get("sequential", c.sequential);
  std::string s;
  if (r.has("schedule")) {
    r.get("schedule", s);
    checked(r.field("schedule"), [&] { c.schedule = schedule_from_string(s); });
  }
  if (r.has("adv_form")) {
    r.get("adv_form", s);
    checked(r.field("adv_form"), [&] { c.adv_form = adv_form_from_string(s); });
  }
  if (fusion_i) r.get("fusion_i", *fusion_i);
  if (ratio) r.get("finetune_lr_ratio", *ratio);
  r.finish();
  if (c.epochs < 1) throw ConfigError(r.field("epochs"), "must be >= 1");
  if (!(c.lr > 0)) throw ConfigError(r.field("lr"), "must be > 0");
  if (!(c.beta1 >= 0 && c.beta1 < 1)) throw ConfigError(r.field("beta1"), "must lie in [0, 1)");
  if (!(c.beta2 >= 0 && c.beta2 < 1)) throw ConfigError(r.field("beta2"), "must lie in [0, 1)");
  if (!(c.lambda_pixel >= 0)) throw ConfigError(r.field("lambda_pixel"), "must be >= 0");
  if (c.batch_size < 1) throw ConfigError(r.field("batch_size"), "must be >= 1");
  if (!(c.adv_weight >= 0)) throw ConfigError(r.field("adv_weight"), "must be >= 0");
  if (ratio && !(*ratio >= 0)) throw ConfigError(r.field("finetune_lr_ratio"), "must be >= 0");
  return c;
}

inline nlohmann::json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},       {"lr", c.lr},
          {"beta1", c.beta1},         {"beta2", c.beta2},
          {"lambda_pixel", c.lambda_pixel}, {"batch_size", c.batch_size},
          {"seed", c.seed},           {"schedule", to_string(c.schedule)},
          {"cutover", c.cutover},     {"adv_form", to_string(c.adv_form)},
          {"adv_weight", c.adv_weight}, {"shuffle", c.shuffle},
          {"sequential", c.sequential}};
}

}  // namespace detail

/// Parses and validates a RunConfig document.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::ObjectReader;
  RunConfig c;
  ObjectReader root(j, "");
  root.get("seed", c.seed);
  c.train_streams.seed = c.seed;
  c.train_joint.seed = c.seed;

  if (root.has("data")) {
    auto d = root.child("data");
    auto& p = c.data;
    d.get("image_size", p.image_size);
    d.get("n_subjects", p.n_subjects);
    d.get("slices_per_subject", p.slices_per_subject);
    d.get("contrasts", p.contrasts);
    d.get("tissue_count", p.tissue_count);
    d.get("intensity", p.intensity);
    d.get("unique_feature_rate", p.unique_feature_rate);
    d.get("noise_sigma", p.noise_sigma);
    d.get("max_lesions", p.max_lesions);
    d.get("bias_strength", p.bias_strength);
    if (d.has("splits")) {
      auto s = d.child("splits");
      s.get("train", c.splits.train);
      s.get("val", c.splits.val);
      s.get("test", c.splits.test);
      s.finish();
    }
    d.finish();
    detail::checked("data", [&] { p.validate(); });
    if (c.splits.train + c.splits.val + c.splits.test > p.n_subjects)
      throw ConfigError("data.splits", "train + val + test = " +
                                           std::to_string(c.splits.train + c.splits.val + c.splits.test) +
                                           " exceeds n_subjects = " + std::to_string(p.n_subjects));
  }

  if (root.has("model")) {
    auto m = root.child("model");
    if (m.has("generator")) {
      auto g = m.child("generator");
      g.get("n_encoder", c.generator.n_encoder);
      g.get("n_residual", c.generator.n_residual);
      g.get("n_decoder", c.generator.n_decoder);
      g.get("base_channels", c.generator.base_channels);
      g.finish();
      detail::checked("model.generator", [&] { c.generator.validate(); });
    }
    if (m.has("discriminator")) {
      auto g = m.child("discriminator");
      g.get("n_layers", c.discriminator.n_layers);
      g.get("base_channels", c.discriminator.base_channels);
      g.finish();
      detail::checked("model.discriminator", [&] { c.discriminator.validate(); });
    }
    if (m.has("roles")) {
      auto r = m.child("roles");
      r.get("sources", c.roles.sources);
      r.get("target", c.roles.target);
      r.finish();
      detail::checked("model.roles", [&] { resolve_roles(c.data, c.roles); });
    }
    m.get("dtype", c.dtype);
    if (c.dtype != "f32" && c.dtype != "f64") throw ConfigError("model.dtype", "must be \"f32\" or \"f64\"");
    m.finish();
  }
  if (c.data.image_size % c.generator.required_multiple() != 0)
    throw ConfigError("data.image_size", std::to_string(c.data.image_size) + " is not a multiple of " +
                                             std::to_string(c.generator.required_multiple()) +
                                             " as the generator requires");

  if (root.has("train_streams")) c.train_streams = detail::read_train(root.child("train_streams"), c.train_streams);
  if (root.has("train_joint"))
    c.train_joint = detail::read_train(root.child("train_joint"), c.train_joint, &c.fusion_i, &c.finetune_lr_ratio);
  if (c.fusion_i != 0 && c.fusion_i >= c.generator.total_layers())
    throw ConfigError("train_joint.fusion_i", "must lie in 1.." + std::to_string(c.generator.total_layers() - 1));

  if (root.has("sweep")) {
    auto s = root.child("sweep");
    s.get("fusion_positions", c.sweep.fusion_positions);
    s.get("epoch_values", c.sweep.epoch_values);
    s.get("parallel", c.sweep_parallel);
    if (s.has("selection_metric")) {
      std::string m;
      s.get("selection_metric", m);
      detail::checked("sweep.selection_metric", [&] { c.sweep.selection_metric = selection_metric_from_string(m); });
    }
    s.finish();
    detail::checked("sweep", [&] { c.sweep.validate(c.generator); });
  } else {
    c.sweep = SweepGrid::full(c.generator);
  }

  if (root.has("eval")) {
    auto e = root.child("eval");
    e.get("split", c.eval_split);
    e.finish();
    if (c.eval_split != "train" && c.eval_split != "val" && c.eval_split != "test")
      throw ConfigError("eval.split", "must be train, val or test");
  }
  if (root.has("paths")) {
    auto p = root.child("paths");
    p.get("workdir", c.workdir);
    p.finish();
  }
  root.finish();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("", "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("", path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

/// Fully resolved configuration, echoed into every output manifest.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json roles = nullptr;
  if (!c.roles.sources.empty()) roles = {{"sources", c.roles.sources}, {"target", c.roles.target}};
  auto joint = detail::train_json(c.train_joint);
  joint["fusion_i"] = c.fusion_i;
  joint["finetune_lr_ratio"] = c.finetune_lr_ratio;
  nlohmann::json data = to_json(c.data);
  data["splits"] = {{"train", c.splits.train}, {"val", c.splits.val}, {"test", c.splits.test}};
  nlohmann::json model = {{"generator",
                           {{"n_encoder", c.generator.n_encoder},
                            {"n_residual", c.generator.n_residual},
                            {"n_decoder", c.generator.n_decoder},
                            {"base_channels", c.generator.base_channels}}},
                          {"discriminator",
                           {{"n_layers", c.discriminator.n_layers}, {"base_channels", c.discriminator.base_channels}}},
                          {"dtype", c.dtype}};
  if (!roles.is_null()) model["roles"] = roles;
  return {{"seed", c.seed},
          {"data", data},
          {"model", model},
          {"train_streams", detail::train_json(c.train_streams)},
          {"train_joint", joint},
          {"sweep",
           {{"fusion_positions", c.sweep.fusion_positions},
            {"epoch_values", c.sweep.epoch_values},
            {"selection_metric", to_string(c.sweep.selection_metric)},
            {"parallel", c.sweep_parallel}}},
          {"eval", {{"split", c.eval_split}}},
          {"paths", {{"workdir", c.workdir}}}};
}

}  // namespace mustgan
